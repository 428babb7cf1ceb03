#include "featflow/lm.hpp"

#include <cmath>
#include <limits>

#include "featflow/rng.hpp"

namespace featflow::lm {

void LMConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_heads == 0 || d_mlp == 0 || ctx_len == 0) {
    throw ConfigError("language model dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (head_dim() % 2 != 0) throw ConfigError("head dimension must be even for rotary embeddings");
  if (!(rope_base > 0.0)) throw ConfigError("rope_base must be positive");
  if (!(norm_eps > 0.0)) throw ConfigError("norm_eps must be positive");
}

std::size_t parameter_count(const LMConfig& c) {
  const std::size_t d = c.d_model;
  return c.vocab_size * d        // embed
         + d                     // attn_norm
         + 4 * d * d             // wq wk wv wo
         + d                     // mlp_norm
         + 3 * d * c.d_mlp       // gate, up, down
         + d                     // final_norm
         + d * c.vocab_size;     // unembed
}

template <typename Scalar>
LMParams<Scalar> LMParams<Scalar>::zeros(const LMConfig& cfg) {
  cfg.validate();
  const auto v = static_cast<Eigen::Index>(cfg.vocab_size);
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto f = static_cast<Eigen::Index>(cfg.d_mlp);
  LMParams p;
  p.config = cfg;
  p.embed = Matrix<Scalar>::Zero(v, d);
  p.attn_norm = RowVector<Scalar>::Zero(d);
  p.wq = Matrix<Scalar>::Zero(d, d);
  p.wk = Matrix<Scalar>::Zero(d, d);
  p.wv = Matrix<Scalar>::Zero(d, d);
  p.wo = Matrix<Scalar>::Zero(d, d);
  p.mlp_norm = RowVector<Scalar>::Zero(d);
  p.w_gate = Matrix<Scalar>::Zero(d, f);
  p.w_up = Matrix<Scalar>::Zero(d, f);
  p.w_down = Matrix<Scalar>::Zero(f, d);
  p.final_norm = RowVector<Scalar>::Zero(d);
  p.unembed = Matrix<Scalar>::Zero(d, v);
  return p;
}

namespace {
template <typename S, typename M>
TensorView<S> view_of(const char* name, M& m) {
  return TensorView<S>{name, std::span<S>(m.data(), static_cast<std::size_t>(m.size())), m.rows(),
                       m.cols()};
}
}  // namespace

#define FEATFLOW_LM_TENSORS(X) \
  X(embed) X(attn_norm) X(wq) X(wk) X(wv) X(wo) X(mlp_norm) X(w_gate) X(w_up) X(w_down) \
      X(final_norm) X(unembed)

template <typename Scalar>
std::vector<TensorView<Scalar>> LMParams<Scalar>::views() {
  std::vector<TensorView<Scalar>> out;
#define X(name) out.push_back(view_of<Scalar>(#name, name));
  FEATFLOW_LM_TENSORS(X)
#undef X
  return out;
}

template <typename Scalar>
std::vector<TensorView<const Scalar>> LMParams<Scalar>::views() const {
  std::vector<TensorView<const Scalar>> out;
#define X(name) out.push_back(view_of<const Scalar>(#name, name));
  FEATFLOW_LM_TENSORS(X)
#undef X
  return out;
}

template <typename Scalar>
template <typename Other>
LMParams<Other> LMParams<Scalar>::cast() const {
  LMParams<Other> p;
  p.config = config;
#define X(name) p.name = name.template cast<Other>();
  FEATFLOW_LM_TENSORS(X)
#undef X
  return p;
}

#undef FEATFLOW_LM_TENSORS

template <typename Scalar>
bool LMParams<Scalar>::all_finite() const {
  for (const auto& v : views()) {
    for (Scalar x : v.data) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

template <typename Scalar>
LMParams<Scalar> init_params(const LMConfig& cfg) {
  auto p = LMParams<Scalar>::zeros(cfg);
  Rng rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, cfg.init_std);
  const double residual_scale = 1.0 / std::sqrt(2.0);
  for (auto& v : p.views()) {
    if (v.rows == 1) {
      std::fill(v.data.begin(), v.data.end(), Scalar(1));
      continue;
    }
    const double scale = (v.name == "wo" || v.name == "w_down") ? residual_scale : 1.0;
    for (auto& x : v.data) x = static_cast<Scalar>(normal(rng) * scale);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

template <typename Scalar>
struct NormCache {
  Matrix<Scalar> input;
  Vector<Scalar> rinv;
};

template <typename Scalar>
Matrix<Scalar> rms_norm(const Matrix<Scalar>& x, const RowVector<Scalar>& gain, double eps,
                        NormCache<Scalar>* cache) {
  const auto d = static_cast<Scalar>(x.cols());
  Vector<Scalar> rinv =
      ((x.array().square().rowwise().sum() / d) + static_cast<Scalar>(eps)).rsqrt().matrix();
  Matrix<Scalar> y = (x.array().colwise() * rinv.array()).rowwise() * gain.array();
  if (cache) {
    cache->input = x;
    cache->rinv = std::move(rinv);
  }
  return y;
}

template <typename Scalar>
Matrix<Scalar> rms_norm_backward(const Matrix<Scalar>& dy, const RowVector<Scalar>& gain,
                                 const NormCache<Scalar>& c, RowVector<Scalar>& dgain) {
  const auto& x = c.input;
  const auto d = static_cast<Scalar>(x.cols());
  Matrix<Scalar> xhat = x.array().colwise() * c.rinv.array();
  dgain += (dy.array() * xhat.array()).colwise().sum().matrix();
  Matrix<Scalar> gdy = dy.array().rowwise() * gain.array();
  Vector<Scalar> dot = (gdy.array() * x.array()).rowwise().sum().matrix();
  Vector<Scalar> coef = (dot.array() * c.rinv.array().cube() / d).matrix();
  Matrix<Scalar> dx = (gdy.array().colwise() * c.rinv.array()) - (x.array().colwise() * coef.array());
  return dx;
}

struct RopeTable {
  Matrix<double> cos, sin;  // positions x head_dim/2
};

RopeTable rope_table(std::size_t n, std::size_t head_dim, double base) {
  const std::size_t half = head_dim / 2;
  RopeTable t{Matrix<double>(n, half), Matrix<double>(n, half)};
  for (std::size_t i = 0; i < half; ++i) {
    const double theta = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    for (std::size_t p = 0; p < n; ++p) {
      t.cos(p, i) = std::cos(static_cast<double>(p) * theta);
      t.sin(p, i) = std::sin(static_cast<double>(p) * theta);
    }
  }
  return t;
}

/// Rotates each (2i, 2i+1) pair of every head; `sign` = -1 applies the inverse.
template <typename Scalar>
void apply_rope(Matrix<Scalar>& x, std::size_t n_heads, const RopeTable& t, double sign) {
  const Eigen::Index half = t.cos.cols();
  const Eigen::Index hd = 2 * half;
  for (Eigen::Index p = 0; p < x.rows(); ++p) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const Eigen::Index base = static_cast<Eigen::Index>(h) * hd;
      for (Eigen::Index i = 0; i < half; ++i) {
        const auto c = static_cast<Scalar>(t.cos(p, i));
        const auto s = static_cast<Scalar>(sign * t.sin(p, i));
        const Scalar a = x(p, base + 2 * i);
        const Scalar b = x(p, base + 2 * i + 1);
        x(p, base + 2 * i) = a * c - b * s;
        x(p, base + 2 * i + 1) = a * s + b * c;
      }
    }
  }
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

template <typename Scalar>
struct Cache {
  std::vector<TokenId> tokens;
  NormCache<Scalar> norm1, norm2, norm3;
  Matrix<Scalar> a, q, k, v;      // q, k after rotation
  std::vector<Matrix<Scalar>> probs;
  Matrix<Scalar> attn_concat;
  Matrix<Scalar> b, gate, up, post;
  Matrix<Scalar> c;
  RopeTable rope;
};

template <typename Scalar>
ForwardOutput<Scalar> forward_impl(const LMParams<Scalar>& P, std::span<const TokenId> tokens,
                                   const ForwardOptions<Scalar>& options, Cache<Scalar>* cache) {
  const auto& cfg = P.config;
  if (tokens.empty()) throw ContractViolation("forward needs at least one token");
  if (tokens.size() > cfg.ctx_len) {
    throw ContractViolation("sequence of " + std::to_string(tokens.size()) +
                            " tokens exceeds ctx_len " + std::to_string(cfg.ctx_len));
  }
  const auto T = static_cast<Eigen::Index>(tokens.size());
  const auto D = static_cast<Eigen::Index>(cfg.d_model);
  const auto H = cfg.n_heads;
  const auto hd = static_cast<Eigen::Index>(cfg.head_dim());

  Matrix<Scalar> h0(T, D);
  for (Eigen::Index i = 0; i < T; ++i) {
    const TokenId t = tokens[static_cast<std::size_t>(i)];
    if (t >= cfg.vocab_size) {
      throw ContractViolation("token id " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(cfg.vocab_size));
    }
    h0.row(i) = P.embed.row(t);
  }

  // attention
  Matrix<Scalar> a = rms_norm(h0, P.attn_norm, cfg.norm_eps, cache ? &cache->norm1 : nullptr);
  Matrix<Scalar> q = a * P.wq;
  Matrix<Scalar> k = a * P.wk;
  Matrix<Scalar> v = a * P.wv;
  RopeTable rope = rope_table(tokens.size(), cfg.head_dim(), cfg.rope_base);
  apply_rope(q, H, rope, 1.0);
  apply_rope(k, H, rope, 1.0);

  const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(hd)));
  Matrix<Scalar> concat(T, D);
  std::vector<Matrix<Scalar>> probs;
  for (std::size_t h = 0; h < H; ++h) {
    const Eigen::Index c0 = static_cast<Eigen::Index>(h) * hd;
    Matrix<Scalar> s = (q.middleCols(c0, hd) * k.middleCols(c0, hd).transpose()) * scale;
    for (Eigen::Index i = 0; i < T; ++i) {
      Scalar mx = s(i, 0);
      for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, s(i, j));
      Scalar sum = 0;
      for (Eigen::Index j = 0; j <= i; ++j) {
        s(i, j) = std::exp(s(i, j) - mx);
        sum += s(i, j);
      }
      for (Eigen::Index j = 0; j <= i; ++j) s(i, j) /= sum;
      for (Eigen::Index j = i + 1; j < T; ++j) s(i, j) = 0;
    }
    concat.middleCols(c0, hd) = s * v.middleCols(c0, hd);
    if (cache) probs.push_back(std::move(s));
  }
  Matrix<Scalar> h1 = h0 + concat * P.wo;

  // gated MLP
  Matrix<Scalar> b = rms_norm(h1, P.mlp_norm, cfg.norm_eps, cache ? &cache->norm2 : nullptr);
  Matrix<Scalar> gate = b * P.w_gate;
  Matrix<Scalar> up = b * P.w_up;
  Matrix<Scalar> post = gate.unaryExpr([](Scalar g) { return g * sigmoid(g); }).cwiseProduct(up);

  ForwardOutput<Scalar> out;
  if (options.capture_mlp_post) out.mlp_post = post;
  if (options.edit_mlp_post) options.edit_mlp_post(post);

  Matrix<Scalar> h2 = h1 + post * P.w_down;
  Matrix<Scalar> c = rms_norm(h2, P.final_norm, cfg.norm_eps, cache ? &cache->norm3 : nullptr);
  out.logits = c * P.unembed;

  if (cache) {
    cache->tokens.assign(tokens.begin(), tokens.end());
    cache->a = std::move(a);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->attn_concat = std::move(concat);
    cache->b = std::move(b);
    cache->gate = std::move(gate);
    cache->up = std::move(up);
    cache->post = std::move(post);
    cache->c = std::move(c);
    cache->rope = std::move(rope);
  }
  return out;
}

/// Adds d(loss)/d(params) for one sequence into `g`, given d(loss)/d(logits).
template <typename Scalar>
void backward_impl(const LMParams<Scalar>& P, const Cache<Scalar>& C, const Matrix<Scalar>& dlogits,
                   LMParams<Scalar>& g) {
  const auto& cfg = P.config;
  const auto T = dlogits.rows();
  const auto H = cfg.n_heads;
  const auto hd = static_cast<Eigen::Index>(cfg.head_dim());

  g.unembed.noalias() += C.c.transpose() * dlogits;
  Matrix<Scalar> dc = dlogits * P.unembed.transpose();
  Matrix<Scalar> dh2 = rms_norm_backward(dc, P.final_norm, C.norm3, g.final_norm);

  // MLP
  g.w_down.noalias() += C.post.transpose() * dh2;
  Matrix<Scalar> dpost = dh2 * P.w_down.transpose();
  Matrix<Scalar> dgate(T, C.gate.cols());
  Matrix<Scalar> dup(T, C.gate.cols());
  for (Eigen::Index i = 0; i < T; ++i) {
    for (Eigen::Index j = 0; j < C.gate.cols(); ++j) {
      const Scalar x = C.gate(i, j);
      const Scalar sg = sigmoid(x);
      const Scalar silu = x * sg;
      dup(i, j) = dpost(i, j) * silu;
      dgate(i, j) = dpost(i, j) * C.up(i, j) * sg * (Scalar(1) + x * (Scalar(1) - sg));
    }
  }
  g.w_gate.noalias() += C.b.transpose() * dgate;
  g.w_up.noalias() += C.b.transpose() * dup;
  Matrix<Scalar> db = dgate * P.w_gate.transpose() + dup * P.w_up.transpose();
  Matrix<Scalar> dh1 = dh2 + rms_norm_backward(db, P.mlp_norm, C.norm2, g.mlp_norm);

  // attention
  g.wo.noalias() += C.attn_concat.transpose() * dh1;
  Matrix<Scalar> dconcat = dh1 * P.wo.transpose();
  const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(hd)));
  Matrix<Scalar> dq(T, C.q.cols()), dk(T, C.k.cols()), dv(T, C.v.cols());
  for (std::size_t h = 0; h < H; ++h) {
    const Eigen::Index c0 = static_cast<Eigen::Index>(h) * hd;
    const Matrix<Scalar>& p = C.probs[h];
    Matrix<Scalar> dout = dconcat.middleCols(c0, hd);
    dv.middleCols(c0, hd) = p.transpose() * dout;
    Matrix<Scalar> dp = dout * C.v.middleCols(c0, hd).transpose();
    Vector<Scalar> rowdot = (dp.array() * p.array()).rowwise().sum().matrix();
    Matrix<Scalar> ds = (p.array() * (dp.array().colwise() - rowdot.array())) * scale;
    dq.middleCols(c0, hd) = ds * C.k.middleCols(c0, hd);
    dk.middleCols(c0, hd) = ds.transpose() * C.q.middleCols(c0, hd);
  }
  apply_rope(dq, H, C.rope, -1.0);
  apply_rope(dk, H, C.rope, -1.0);
  g.wq.noalias() += C.a.transpose() * dq;
  g.wk.noalias() += C.a.transpose() * dk;
  g.wv.noalias() += C.a.transpose() * dv;
  Matrix<Scalar> da = dq * P.wq.transpose() + dk * P.wk.transpose() + dv * P.wv.transpose();
  Matrix<Scalar> dh0 = dh1 + rms_norm_backward(da, P.attn_norm, C.norm1, g.attn_norm);

  for (Eigen::Index i = 0; i < T; ++i) g.embed.row(C.tokens[static_cast<std::size_t>(i)]) += dh0.row(i);
}

template <typename Scalar>
double log_sum_exp(const Eigen::Ref<const RowVector<Scalar>>& row) {
  const double mx = static_cast<double>(row.maxCoeff());
  double sum = 0.0;
  for (Eigen::Index j = 0; j < row.size(); ++j) sum += std::exp(static_cast<double>(row(j)) - mx);
  return mx + std::log(sum);
}

template <typename Scalar>
LossAndCount loss_sum(const Matrix<Scalar>& logits, std::span<const TokenId> targets,
                      std::optional<TokenId> ignore) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size()) {
    throw ContractViolation("logits rows and targets disagree");
  }
  LossAndCount out;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const TokenId t = targets[static_cast<std::size_t>(i)];
    if (ignore && t == *ignore) continue;
    if (t >= static_cast<std::size_t>(logits.cols())) throw ContractViolation("target outside vocabulary");
    out.loss_sum += log_sum_exp<Scalar>(logits.row(i)) - static_cast<double>(logits(i, t));
    ++out.count;
  }
  return out;
}

}  // namespace

template <typename Scalar>
ForwardOutput<Scalar> forward(const LMParams<Scalar>& params, std::span<const TokenId> tokens,
                              const ForwardOptions<Scalar>& options) {
  return forward_impl<Scalar>(params, tokens, options, nullptr);
}

template <typename Scalar>
double lm_loss(const Matrix<Scalar>& logits, std::span<const TokenId> targets,
               std::optional<TokenId> ignore) {
  return loss_sum(logits, targets, ignore).mean();
}

template <typename Scalar>
LossAndCount block_loss(const LMParams<Scalar>& params, std::span<const TokenId> block,
                        std::optional<TokenId> ignore, const MlpPostEdit<Scalar>& edit) {
  if (block.size() < 2) throw ContractViolation("a block needs at least two tokens");
  ForwardOptions<Scalar> opt;
  opt.edit_mlp_post = edit;
  auto out = forward(params, block.first(block.size() - 1), opt);
  return loss_sum(out.logits, block.subspan(1), ignore);
}

template <typename Scalar>
Gradients<Scalar> backward(const LMParams<Scalar>& params,
                           std::span<const std::vector<TokenId>> blocks,
                           std::optional<TokenId> ignore) {
  Gradients<Scalar> out{LMParams<Scalar>::zeros(params.config), {}};
  std::size_t total = 0;
  for (const auto& b : blocks) {
    if (b.size() < 2) throw ContractViolation("a block needs at least two tokens");
    for (std::size_t i = 1; i < b.size(); ++i) total += !(ignore && b[i] == *ignore);
  }
  if (total == 0) return out;
  const double inv_total = 1.0 / static_cast<double>(total);

  Cache<Scalar> cache;
  for (const auto& b : blocks) {
    std::span<const TokenId> block(b);
    auto fwd = forward_impl<Scalar>(params, block.first(block.size() - 1), {}, &cache);
    auto targets = block.subspan(1);
    Matrix<Scalar> dlogits(fwd.logits.rows(), fwd.logits.cols());
    for (Eigen::Index i = 0; i < fwd.logits.rows(); ++i) {
      const TokenId t = targets[static_cast<std::size_t>(i)];
      if (ignore && t == *ignore) {
        dlogits.row(i).setZero();
        continue;
      }
      const double lse = log_sum_exp<Scalar>(fwd.logits.row(i));
      out.loss.loss_sum += lse - static_cast<double>(fwd.logits(i, t));
      ++out.loss.count;
      for (Eigen::Index j = 0; j < fwd.logits.cols(); ++j) {
        dlogits(i, j) = static_cast<Scalar>(std::exp(static_cast<double>(fwd.logits(i, j)) - lse) * inv_total);
      }
      dlogits(i, t) -= static_cast<Scalar>(inv_total);
    }
    backward_impl(params, cache, dlogits, out.grads);
  }
  return out;
}

template <typename Scalar>
AccuracyCount count_correct(const Matrix<Scalar>& logits, std::span<const TokenId> targets) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size()) {
    throw ContractViolation("logits rows and targets disagree");
  }
  AccuracyCount acc;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < logits.cols(); ++j) {
      if (logits(i, j) > logits(i, best)) best = j;
    }
    acc.correct += static_cast<std::size_t>(best) == targets[static_cast<std::size_t>(i)];
    ++acc.total;
  }
  return acc;
}

template <typename Scalar>
AccuracyCount block_accuracy(const LMParams<Scalar>& params, std::span<const TokenId> block) {
  if (block.size() < 2) throw ContractViolation("a block needs at least two tokens");
  auto out = forward(params, block.first(block.size() - 1));
  return count_correct(out.logits, block.subspan(1));
}

template <typename Scalar>
double next_token_accuracy(const LMParams<Scalar>& params,
                           std::span<const std::vector<TokenId>> blocks, std::size_t n_tokens) {
  if (n_tokens == 0) throw ContractViolation("next_token_accuracy needs n_tokens > 0");
  AccuracyCount acc;
  for (const auto& b : blocks) {
    if (acc.total >= n_tokens) break;
    std::span<const TokenId> block(b);
    const std::size_t room = n_tokens - acc.total;
    if (block.size() - 1 > room) block = block.first(room + 1);
    auto a = block_accuracy(params, block);
    acc.correct += a.correct;
    acc.total += a.total;
  }
  return acc.fraction();
}

#define FEATFLOW_INSTANTIATE(S)                                                                   \
  template struct LMParams<S>;                                                                    \
  template LMParams<S> init_params<S>(const LMConfig&);                                           \
  template ForwardOutput<S> forward<S>(const LMParams<S>&, std::span<const TokenId>,              \
                                       const ForwardOptions<S>&);                                 \
  template double lm_loss<S>(const Matrix<S>&, std::span<const TokenId>, std::optional<TokenId>); \
  template Gradients<S> backward<S>(const LMParams<S>&, std::span<const std::vector<TokenId>>,    \
                                    std::optional<TokenId>);                                      \
  template LossAndCount block_loss<S>(const LMParams<S>&, std::span<const TokenId>,               \
                                      std::optional<TokenId>, const MlpPostEdit<S>&);             \
  template AccuracyCount count_correct<S>(const Matrix<S>&, std::span<const TokenId>);            \
  template AccuracyCount block_accuracy<S>(const LMParams<S>&, std::span<const TokenId>);         \
  template double next_token_accuracy<S>(const LMParams<S>&, std::span<const std::vector<TokenId>>, \
                                         std::size_t);

FEATFLOW_INSTANTIATE(float)
FEATFLOW_INSTANTIATE(double)
#undef FEATFLOW_INSTANTIATE

template LMParams<double> LMParams<float>::cast<double>() const;
template LMParams<float> LMParams<double>::cast<float>() const;
template LMParams<float> LMParams<float>::cast<float>() const;
template LMParams<double> LMParams<double>::cast<double>() const;

}  // namespace featflow::lm
