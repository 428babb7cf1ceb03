#include "featflow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace featflow::flow {

std::vector<double> ActivationMatrix::dense_row(std::size_t feature) const {
  std::vector<double> out(n_tokens, 0.0);
  const auto& r = rows.at(feature);
  for (std::size_t k = 0; k < r.nnz(); ++k) out[r.index[k]] = r.value[k];
  return out;
}

bool ActivationMatrix::is_dead(std::size_t feature) const {
  return row_moments(rows.at(feature), n_tokens).constant;
}

void ActivationMatrix::validate() const {
  for (std::size_t j = 0; j < rows.size(); ++j) {
    const auto& r = rows[j];
    if (r.index.size() != r.value.size()) {
      throw ContractViolation("feature " + std::to_string(j) + ": index/value length mismatch");
    }
    for (std::size_t k = 0; k < r.nnz(); ++k) {
      if (r.index[k] >= n_tokens || (k > 0 && r.index[k] <= r.index[k - 1])) {
        throw ContractViolation("feature " + std::to_string(j) +
                                ": token indices must be increasing and below n_tokens");
      }
      if (!(r.value[k] >= 0.0f) || !std::isfinite(r.value[k])) {
        throw ContractViolation("feature " + std::to_string(j) + ": activations must be finite and >= 0");
      }
    }
  }
}

std::vector<TokenId> stream_tokens(std::span<const TokenBlock> blocks, std::size_t n_tokens) {
  std::vector<TokenId> out;
  out.reserve(n_tokens);
  for (const auto& b : blocks) {
    for (TokenId t : b.tokens) {
      if (out.size() == n_tokens) return out;
      out.push_back(t);
    }
  }
  if (out.size() < n_tokens) {
    throw ContractViolation("token stream holds " + std::to_string(out.size()) +
                            " tokens, fewer than the requested " + std::to_string(n_tokens));
  }
  return out;
}

std::uint64_t token_digest(std::span<const TokenId> tokens) {
  Fnv1a h;
  const std::uint64_t n = tokens.size();
  h.update(&n, sizeof n);
  h.update(tokens.data(), tokens.size_bytes());
  return h.digest();
}

template <typename Scalar>
ActivationMatrix collect_activations(const lm::LMParams<Scalar>& lm_params,
                                     const sae::SaeParams<Scalar>& sae_params,
                                     std::span<const TokenBlock> blocks, std::size_t n_tokens,
                                     const std::string& model_id, const std::string& sae_id,
                                     const std::string& stream_id) {
  if (lm_params.config.d_mlp != sae_params.n()) {
    throw ContractViolation("SAE input size " + std::to_string(sae_params.n()) +
                            " does not match the model MLP width " +
                            std::to_string(lm_params.config.d_mlp));
  }
  const auto tokens = stream_tokens(blocks, n_tokens);
  ActivationMatrix m;
  m.model_id = model_id;
  m.sae_id = sae_id;
  m.stream_id = stream_id;
  m.n_tokens = n_tokens;
  m.stream_digest = token_digest(tokens);
  m.rows.resize(sae_params.m());

  lm::ForwardOptions<Scalar> opt;
  opt.capture_mlp_post = true;
  std::uint32_t pos = 0;
  for (const auto& b : blocks) {
    if (pos >= n_tokens) break;
    const std::size_t take = std::min(b.tokens.size(), n_tokens - pos);
    auto fwd = lm::forward(lm_params, std::span<const TokenId>(b.tokens).first(take), opt);
    for (std::size_t i = 0; i < take; ++i, ++pos) {
      Vector<Scalar> x = fwd.mlp_post->row(static_cast<Eigen::Index>(i)).transpose();
      Vector<Scalar> f = sae::sae_encode(sae_params, x);
      for (Eigen::Index j = 0; j < f.size(); ++j) {
        const auto v = static_cast<float>(f[j]);
        if (v > 0.0f) {
          m.rows[static_cast<std::size_t>(j)].index.push_back(pos);
          m.rows[static_cast<std::size_t>(j)].value.push_back(v);
        }
      }
    }
  }
  return m;
}

RowMoments row_moments(const SparseRow& row, std::size_t n_tokens) {
  RowMoments m;
  for (float v : row.value) {
    m.sum += v;
    m.sum_sq += static_cast<double>(v) * v;
  }
  if (row.nnz() == 0) return m;
  const bool uniform_values =
      std::all_of(row.value.begin(), row.value.end(), [&](float v) { return v == row.value[0]; });
  m.constant = uniform_values && row.nnz() == n_tokens;
  return m;
}

std::optional<double> pearson_from_sums(const RowMoments& a, const RowMoments& b, double sum_ab,
                                        std::size_t n_tokens) {
  if (a.constant || b.constant || n_tokens == 0) return std::nullopt;
  const double n = static_cast<double>(n_tokens);
  const double ma = a.sum / n, mb = b.sum / n;
  const double var_a = a.sum_sq / n - ma * ma;
  const double var_b = b.sum_sq / n - mb * mb;
  if (!(var_a > 0.0 && var_b > 0.0)) return std::nullopt;
  const double r = (sum_ab / n - ma * mb) / std::sqrt(var_a * var_b);
  return std::clamp(r, -1.0, 1.0);
}

namespace {
double merge_dot(const SparseRow& a, const SparseRow& b) {
  double s = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.nnz() && j < b.nnz()) {
    if (a.index[i] < b.index[j]) {
      ++i;
    } else if (b.index[j] < a.index[i]) {
      ++j;
    } else {
      s += static_cast<double>(a.value[i]) * b.value[j];
      ++i;
      ++j;
    }
  }
  return s;
}
}  // namespace

std::optional<double> pearson(const SparseRow& a, const SparseRow& b, std::size_t n_tokens) {
  return pearson_from_sums(row_moments(a, n_tokens), row_moments(b, n_tokens), merge_dot(a, b),
                           n_tokens);
}

void check_comparable(const ActivationMatrix& a, const ActivationMatrix& b) {
  if (a.n_tokens != b.n_tokens || a.stream_digest != b.stream_digest) {
    throw ComparabilityError("activation matrices of '" + a.model_id + "' and '" + b.model_id +
                             "' were collected on different token streams (" +
                             to_hex(a.stream_digest) + " vs " + to_hex(b.stream_digest) + ")");
  }
}

Matrix<double> cross_products(const ActivationMatrix& parent, const ActivationMatrix& child) {
  check_comparable(parent, child);
  // Transpose to per-token lists so every pair accumulates in token order.
  auto by_token = [](const ActivationMatrix& m) {
    std::vector<std::vector<std::pair<std::uint32_t, float>>> t(m.n_tokens);
    for (std::size_t j = 0; j < m.rows.size(); ++j) {
      const auto& r = m.rows[j];
      for (std::size_t k = 0; k < r.nnz(); ++k) {
        t[r.index[k]].emplace_back(static_cast<std::uint32_t>(j), r.value[k]);
      }
    }
    return t;
  };
  const auto p = by_token(parent);
  const auto c = by_token(child);
  Matrix<double> out = Matrix<double>::Zero(static_cast<Eigen::Index>(parent.n_features()),
                                            static_cast<Eigen::Index>(child.n_features()));
  for (std::size_t t = 0; t < parent.n_tokens; ++t) {
    for (const auto& [i, a] : p[t]) {
      for (const auto& [j, b] : c[t]) out(i, j) += static_cast<double>(a) * b;
    }
  }
  return out;
}

BestMatches best_matches(const ActivationMatrix& parent, const ActivationMatrix& child) {
  check_comparable(parent, child);
  const auto sab = cross_products(parent, child);
  const std::size_t np = parent.n_features(), nc = child.n_features();
  std::vector<RowMoments> mp(np), mc(nc);
  for (std::size_t i = 0; i < np; ++i) mp[i] = row_moments(parent.rows[i], parent.n_tokens);
  for (std::size_t j = 0; j < nc; ++j) mc[j] = row_moments(child.rows[j], child.n_tokens);

  BestMatches b;
  b.parent_model = parent.model_id;
  b.child_model = child.model_id;
  b.n_parent = np;
  b.n_child = nc;
  b.for_child.assign(nc, std::nullopt);
  b.for_parent.assign(np, std::nullopt);
  b.dead_parent.resize(np);
  b.dead_child.resize(nc);
  for (std::size_t i = 0; i < np; ++i) b.dead_parent[i] = mp[i].constant;
  for (std::size_t j = 0; j < nc; ++j) b.dead_child[j] = mc[j].constant;

  // Increasing (i, j) order with strict '>' keeps the lowest id on ties.
  for (std::size_t i = 0; i < np; ++i) {
    if (b.dead_parent[i]) continue;
    for (std::size_t j = 0; j < nc; ++j) {
      if (b.dead_child[j]) continue;
      auto r = pearson_from_sums(mp[i], mc[j], sab(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)),
                                 parent.n_tokens);
      if (!r) continue;
      FeatureMatch m{i, j, *r};
      if (!b.for_child[j] || *r > b.for_child[j]->r) b.for_child[j] = m;
      if (!b.for_parent[i] || *r > b.for_parent[i]->r) b.for_parent[i] = m;
    }
  }
  return b;
}

EvolutionClassification classify(const BestMatches& m, double threshold) {
  EvolutionClassification c;
  c.parent_model = m.parent_model;
  c.child_model = m.child_model;
  c.threshold = threshold;
  std::set<FeatureMatch> pairs;
  for (std::size_t j = 0; j < m.n_child; ++j) {
    if (m.dead_child[j]) {
      c.dead_child.push_back(j);
    } else if (m.for_child[j] && m.for_child[j]->r > threshold) {
      c.persisting_children.push_back(j);
      pairs.insert(*m.for_child[j]);
    } else {
      c.emerging.push_back(j);
    }
  }
  for (std::size_t i = 0; i < m.n_parent; ++i) {
    if (m.dead_parent[i]) {
      c.dead_parent.push_back(i);
    } else if (m.for_parent[i] && m.for_parent[i]->r > threshold) {
      c.persisting_parents.push_back(i);
      pairs.insert(*m.for_parent[i]);
    } else {
      c.disappearing.push_back(i);
    }
  }
  c.persisting.assign(pairs.begin(), pairs.end());
  return c;
}

void EvolutionClassification::validate(std::size_t n_parent, std::size_t n_child) const {
  auto check_partition = [](std::size_t n, std::initializer_list<const std::vector<std::size_t>*> parts,
                            const char* side) {
    std::vector<int> seen(n, 0);
    for (const auto* p : parts) {
      for (std::size_t id : *p) {
        if (id >= n) throw ContractViolation(std::string(side) + " feature id out of range");
        ++seen[id];
      }
    }
    for (std::size_t id = 0; id < n; ++id) {
      if (seen[id] != 1) {
        throw ContractViolation(std::string(side) + " feature " + std::to_string(id) +
                                " is not in exactly one class");
      }
    }
  };
  check_partition(n_child, {&persisting_children, &emerging, &dead_child}, "child");
  check_partition(n_parent, {&persisting_parents, &disappearing, &dead_parent}, "parent");
  for (const auto& p : persisting) {
    if (!(p.r > threshold)) throw ContractViolation("persisting pair at or below the threshold");
    if (!std::binary_search(persisting_children.begin(), persisting_children.end(), p.child) ||
        !std::binary_search(persisting_parents.begin(), persisting_parents.end(), p.parent)) {
      throw ContractViolation("persisting pair refers to a non-persisting feature");
    }
  }
}

FlowEdge edge_of(const EvolutionClassification& c) {
  return {c.parent_model,
          c.child_model,
          c.persisting.size(),
          c.persisting_parents.size(),
          c.persisting_children.size(),
          c.emerging.size(),
          c.disappearing.size(),
          c.dead_parent.size(),
          c.dead_child.size()};
}

FlowGraph build_flow_graph(const EvolutionClassification& base_a,
                           const EvolutionClassification& base_b,
                           const EvolutionClassification& a_merged,
                           const EvolutionClassification& b_merged) {
  const std::string& base = base_a.parent_model;
  const std::string& ft_a = base_a.child_model;
  const std::string& ft_b = base_b.child_model;
  const std::string& merged = a_merged.child_model;
  if (base_b.parent_model != base || a_merged.parent_model != ft_a ||
      b_merged.parent_model != ft_b || b_merged.child_model != merged) {
    throw ContractViolation("flow graph classifications do not form base -> {" + ft_a + ", " +
                            ft_b + "} -> merged");
  }
  if (ft_a == ft_b) throw ContractViolation("the two fine-tuned models must have distinct labels");

  FlowGraph g;
  g.nodes = {base, ft_a, ft_b, merged};
  for (const auto* c : {&base_a, &base_b, &a_merged, &b_merged}) g.edges.push_back(edge_of(*c));

  auto chain = [](const EvolutionClassification& first, const EvolutionClassification& second) {
    // Fine-tuned features that persist from base, then merged features reached from them.
    std::set<std::size_t> from_base;
    for (const auto& p : first.persisting) from_base.insert(p.child);
    std::set<std::size_t> reached;
    for (const auto& p : second.persisting) {
      if (from_base.count(p.parent)) reached.insert(p.child);
    }
    return TwoHopChain{second.parent_model, {reached.begin(), reached.end()}};
  };
  g.chains = {chain(base_a, a_merged), chain(base_b, b_merged)};
  std::set<std::size_t> all(g.chains[0].merged_features.begin(), g.chains[0].merged_features.end());
  all.insert(g.chains[1].merged_features.begin(), g.chains[1].merged_features.end());
  g.traced_to_base.assign(all.begin(), all.end());

  std::set<std::size_t> from_ft(a_merged.persisting_children.begin(),
                                a_merged.persisting_children.end());
  from_ft.insert(b_merged.persisting_children.begin(), b_merged.persisting_children.end());
  g.traced_to_finetunes.assign(from_ft.begin(), from_ft.end());

  std::set<std::size_t> base_any(base_a.persisting_parents.begin(), base_a.persisting_parents.end());
  base_any.insert(base_b.persisting_parents.begin(), base_b.persisting_parents.end());
  g.base_persisting_any = base_any.size();
  return g;
}

template ActivationMatrix collect_activations<float>(const lm::LMParams<float>&,
                                                     const sae::SaeParams<float>&,
                                                     std::span<const TokenBlock>, std::size_t,
                                                     const std::string&, const std::string&,
                                                     const std::string&);
template ActivationMatrix collect_activations<double>(const lm::LMParams<double>&,
                                                      const sae::SaeParams<double>&,
                                                      std::span<const TokenBlock>, std::size_t,
                                                      const std::string&, const std::string&,
                                                      const std::string&);

}  // namespace featflow::flow
