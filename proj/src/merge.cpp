#include "featflow/merge.hpp"

#include <cmath>
#include <numbers>

namespace featflow::merge {

Manifest manifest_for(const lm::LMConfig& c) {
  const std::size_t d = c.d_model;
  const std::pair<const char*, std::pair<std::size_t, std::size_t>> shapes[] = {
      {"embed", {c.vocab_size, d}}, {"attn_norm", {1, d}},       {"wq", {d, d}},
      {"wk", {d, d}},               {"wv", {d, d}},              {"wo", {d, d}},
      {"mlp_norm", {1, d}},         {"w_gate", {d, c.d_mlp}},    {"w_up", {d, c.d_mlp}},
      {"w_down", {c.d_mlp, d}},     {"final_norm", {1, d}},      {"unembed", {d, c.vocab_size}},
  };
  Manifest m;
  std::size_t offset = 0;
  for (const auto& [name, shape] : shapes) {
    m.push_back({name, shape.first, shape.second, offset});
    offset += shape.first * shape.second;
  }
  return m;
}

void check_compatible(const Manifest& a, const Manifest& b) {
  if (a.size() != b.size()) {
    throw MergeCompatibilityError("models have different tensor counts (" +
                                  std::to_string(a.size()) + " vs " + std::to_string(b.size()) +
                                  ")");
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i] == b[i])) {
      throw MergeCompatibilityError(
          "tensor '" + a[i].name + "' differs: " + std::to_string(a[i].rows) + "x" +
          std::to_string(a[i].cols) + " vs '" + b[i].name + "' " + std::to_string(b[i].rows) +
          "x" + std::to_string(b[i].cols));
    }
  }
}

void check_compatible(const lm::LMConfig& a, const lm::LMConfig& b) {
  check_compatible(manifest_for(a), manifest_for(b));
  // Same shapes but different positional encoding or norm constants still
  // describe different functions.
  if (a.n_heads != b.n_heads || a.rope_base != b.rope_base || a.norm_eps != b.norm_eps ||
      a.ctx_len != b.ctx_len) {
    throw MergeCompatibilityError("models share tensor shapes but differ in heads, rope, norm or context");
  }
}

template <typename Scalar>
FlatParams<Scalar> flatten(const lm::LMParams<Scalar>& params) {
  FlatParams<Scalar> flat;
  flat.config = params.config;
  const auto views = params.views();
  std::size_t total = 0;
  for (const auto& v : views) {
    flat.manifest.push_back(
        {v.name, static_cast<std::size_t>(v.rows), static_cast<std::size_t>(v.cols), total});
    total += v.data.size();
  }
  flat.values.resize(static_cast<Eigen::Index>(total));
  for (std::size_t i = 0; i < views.size(); ++i) {
    std::copy(views[i].data.begin(), views[i].data.end(),
              flat.values.data() + flat.manifest[i].offset);
  }
  return flat;
}

template <typename Scalar>
lm::LMParams<Scalar> unflatten(const FlatParams<Scalar>& flat) {
  check_compatible(manifest_for(flat.config), flat.manifest);
  const auto& last = flat.manifest.back();
  if (static_cast<std::size_t>(flat.values.size()) != last.offset + last.rows * last.cols) {
    throw MergeCompatibilityError("flat vector length does not match its manifest");
  }
  auto p = lm::LMParams<Scalar>::zeros(flat.config);
  auto views = p.views();
  for (std::size_t i = 0; i < views.size(); ++i) {
    const Scalar* src = flat.values.data() + flat.manifest[i].offset;
    std::copy(src, src + views[i].data.size(), views[i].data.begin());
  }
  return p;
}

namespace {

template <typename Scalar>
void slerp_into(const Scalar* a, const Scalar* b, Scalar* out, std::size_t n, double t) {
  if (t == 0.0) {
    std::copy(a, a + n, out);
    return;
  }
  if (t == 1.0) {
    std::copy(b, b + n, out);
    return;
  }
  double na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na == 0.0 || nb == 0.0) throw ContractViolation("slerp: zero-norm input");
  // Angle from the chord lengths of the unit vectors: accurate near 0 and pi.
  double diff = 0.0, sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ua = a[i] / na, ub = b[i] / nb;
    diff += (ua - ub) * (ua - ub);
    sum += (ua + ub) * (ua + ub);
  }
  const double omega = 2.0 * std::atan2(std::sqrt(diff), std::sqrt(sum));
  double wa, wb;
  if (omega < 1e-6) {
    wa = 1.0 - t;
    wb = t;
  } else {
    if (std::numbers::pi - omega < 1e-6) {
      throw ContractViolation("slerp: inputs are antipodal, the path is undefined");
    }
    const double s = std::sin(omega);
    wa = std::sin((1.0 - t) * omega) / s;
    wb = std::sin(t * omega) / s;
  }
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = static_cast<Scalar>(wa * static_cast<double>(a[i]) + wb * static_cast<double>(b[i]));
  }
}

}  // namespace

template <typename Scalar>
Vector<Scalar> slerp(const Vector<Scalar>& a, const Vector<Scalar>& b, double t) {
  if (a.size() != b.size()) throw ContractViolation("slerp: vectors differ in length");
  if (!(t >= 0.0 && t <= 1.0)) throw ContractViolation("slerp: t must lie in [0, 1]");
  Vector<Scalar> out(a.size());
  slerp_into(a.data(), b.data(), out.data(), static_cast<std::size_t>(a.size()), t);
  return out;
}

template <typename Scalar>
lm::LMParams<Scalar> merge_models(const lm::LMParams<Scalar>& a, const lm::LMParams<Scalar>& b,
                                  double t, MergeMode mode) {
  check_compatible(a.config, b.config);
  if (mode == MergeMode::kWholeVector) {
    auto fa = flatten(a);
    auto fb = flatten(b);
    fa.values = slerp(fa.values, fb.values, t);
    return unflatten(fa);
  }
  if (!(t >= 0.0 && t <= 1.0)) throw ContractViolation("slerp: t must lie in [0, 1]");
  auto out = lm::LMParams<Scalar>::zeros(a.config);
  auto vo = out.views();
  auto va = a.views();
  auto vb = b.views();
  for (std::size_t i = 0; i < vo.size(); ++i) {
    try {
      slerp_into(va[i].data.data(), vb[i].data.data(), vo[i].data.data(), vo[i].data.size(), t);
    } catch (const ContractViolation& e) {
      throw ContractViolation("tensor '" + va[i].name + "': " + e.what());
    }
  }
  return out;
}

std::vector<double> uniform_grid(std::size_t n_points) {
  if (n_points < 2) throw ConfigError("a sweep grid needs at least two points");
  std::vector<double> g(n_points);
  for (std::size_t i = 0; i < n_points; ++i) {
    g[i] = static_cast<double>(i) / static_cast<double>(n_points - 1);
  }
  g.back() = 1.0;
  return g;
}

void SweepResult::validate() const {
  if (grid.empty()) throw ContractViolation("sweep grid is empty");
  if (grid.front() != 0.0 || grid.back() != 1.0) {
    throw ContractViolation("sweep grid must include 0 and 1");
  }
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (!(grid[i] > grid[i - 1])) throw ContractViolation("sweep grid must be strictly increasing");
  }
  if (acc_a.size() != grid.size() || acc_b.size() != grid.size()) {
    throw ContractViolation("sweep has one accuracy pair per grid point");
  }
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(acc_a[i] >= 0.0 && acc_a[i] <= 1.0 && acc_b[i] >= 0.0 && acc_b[i] <= 1.0)) {
      throw ContractViolation("sweep accuracy outside [0, 1]");
    }
  }
}

template <typename Scalar>
SweepResult sweep(const lm::LMParams<Scalar>& model_a, const lm::LMParams<Scalar>& model_b,
                  const std::vector<double>& grid, const train::EvalStream& eval_a,
                  const train::EvalStream& eval_b, std::size_t n_eval_tokens,
                  const lm::LMParams<Scalar>* base, MergeMode mode) {
  check_compatible(model_a.config, model_b.config);
  SweepResult r;
  r.grid = grid;
  const std::vector<train::EvalStream> streams{eval_a, eval_b};
  for (double t : grid) {
    auto merged = merge_models(model_a, model_b, t, mode);
    auto m = train::evaluate(merged, streams, n_eval_tokens);
    r.acc_a.push_back(m[0].accuracy);
    r.acc_b.push_back(m[1].accuracy);
    r.loss_a.push_back(m[0].loss);
    r.loss_b.push_back(m[1].loss);
  }
  if (base) {
    auto m = train::evaluate(*base, streams, n_eval_tokens);
    r.base_acc_a = m[0].accuracy;
    r.base_acc_b = m[1].accuracy;
  }
  r.validate();
  return r;
}

MergeSelection select_equilibrium(const SweepResult& s) {
  if (s.grid.empty() || s.acc_a.size() != s.grid.size() || s.acc_b.size() != s.grid.size()) {
    throw ContractViolation("select_equilibrium needs a nonempty, consistent sweep");
  }
  std::size_t best = 0;
  auto gap = [&](std::size_t i) { return std::abs(s.acc_a[i] - s.acc_b[i]); };
  auto mean = [&](std::size_t i) { return 0.5 * (s.acc_a[i] + s.acc_b[i]); };
  for (std::size_t i = 1; i < s.grid.size(); ++i) {
    const double g = gap(i), gb = gap(best);
    if (g < gb || (g == gb && (mean(i) > mean(best) ||
                               (mean(i) == mean(best) && s.grid[i] < s.grid[best])))) {
      best = i;
    }
  }
  return {s.grid[best], best, s.acc_a[best], s.acc_b[best], gap(best)};
}

#define FEATFLOW_INSTANTIATE(S)                                                                   \
  template FlatParams<S> flatten<S>(const lm::LMParams<S>&);                                      \
  template lm::LMParams<S> unflatten<S>(const FlatParams<S>&);                                    \
  template Vector<S> slerp<S>(const Vector<S>&, const Vector<S>&, double);                        \
  template lm::LMParams<S> merge_models<S>(const lm::LMParams<S>&, const lm::LMParams<S>&,        \
                                           double, MergeMode);                                    \
  template SweepResult sweep<S>(const lm::LMParams<S>&, const lm::LMParams<S>&,                   \
                                const std::vector<double>&, const train::EvalStream&,             \
                                const train::EvalStream&, std::size_t, const lm::LMParams<S>*,    \
                                MergeMode);

FEATFLOW_INSTANTIATE(float)
FEATFLOW_INSTANTIATE(double)
#undef FEATFLOW_INSTANTIATE

}  // namespace featflow::merge
