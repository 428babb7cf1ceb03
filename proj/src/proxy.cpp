#include "featflow/proxy.hpp"

#include <algorithm>
#include <cmath>

namespace featflow::proxy {

UnigramModel::UnigramModel(std::vector<std::uint64_t> counts, double alpha)
    : counts_(std::move(counts)), alpha_(alpha) {
  if (counts_.empty()) throw ContractViolation("unigram model needs a nonempty vocabulary");
  if (!(alpha >= 0.0)) throw ConfigError("unigram smoothing alpha must be >= 0");
  for (auto c : counts_) total_ += c;
  if (total_ == 0 && alpha == 0.0) {
    throw ContractViolation("unigram model with no counts needs alpha > 0");
  }
}

double UnigramModel::prob(TokenId t) const {
  if (t >= counts_.size()) {
    throw ContractViolation("token " + std::to_string(t) + " is outside the vocabulary");
  }
  return (static_cast<double>(counts_[t]) + alpha_) /
         (static_cast<double>(total_) + alpha_ * static_cast<double>(counts_.size()));
}

UnigramModel fit_unigram(std::span<const TokenId> tokens, std::size_t vocab_size, double alpha) {
  if (tokens.empty()) throw ContractViolation("fit_unigram needs at least one token");
  std::vector<std::uint64_t> counts(vocab_size, 0);
  for (TokenId t : tokens) {
    if (t >= vocab_size) {
      throw ContractViolation("token " + std::to_string(t) + " is outside the vocabulary");
    }
    ++counts[t];
  }
  return UnigramModel(std::move(counts), alpha);
}

bool FeatureHypothesis::is_target(TokenId t) const {
  return std::binary_search(targets.begin(), targets.end(), t);
}

double FeatureHypothesis::prob(TokenId t, const UnigramModel& u) const {
  const double uniform = is_target(t) ? 1.0 / static_cast<double>(targets.size()) : 0.0;
  return (1.0 - epsilon) * uniform + epsilon * u.prob(t);
}

void FeatureHypothesis::validate(std::size_t vocab_size) const {
  if (targets.empty()) throw ConfigError("hypothesis '" + name + "' has no target tokens");
  if (!std::is_sorted(targets.begin(), targets.end()) ||
      std::adjacent_find(targets.begin(), targets.end()) != targets.end()) {
    throw ContractViolation("hypothesis '" + name + "' targets must be sorted and unique");
  }
  if (targets.back() >= vocab_size) {
    throw ContractViolation("hypothesis '" + name + "' names a token outside the vocabulary");
  }
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) {
    throw ConfigError("hypothesis '" + name + "' epsilon must lie in [0, 1]");
  }
}

FeatureHypothesis hypothesis_from_strings(const std::string& name,
                                          std::span<const std::string> strings,
                                          const Tokenizer& tokenizer, double epsilon) {
  FeatureHypothesis h{name, {}, epsilon};
  for (const auto& s : strings) {
    auto ids = tokenizer.encode(s);
    h.targets.insert(h.targets.end(), ids.begin(), ids.end());
  }
  std::sort(h.targets.begin(), h.targets.end());
  h.targets.erase(std::unique(h.targets.begin(), h.targets.end()), h.targets.end());
  h.validate(tokenizer.vocab_size());
  return h;
}

double token_llr(TokenId t, const FeatureHypothesis& h, const UnigramModel& u) {
  const double p = u.prob(t);
  if (p == 0.0) {
    throw UndefinedMetric("token " + std::to_string(t) +
                          " has zero unigram probability; use alpha > 0");
  }
  const double q = h.prob(t, u);
  if (q == 0.0) {
    throw UndefinedMetric("token " + std::to_string(t) + " has zero probability under hypothesis '" +
                          h.name + "'");
  }
  return std::log(q) - std::log(p);
}

double string_llr(std::span<const TokenId> s, const FeatureHypothesis& h, const UnigramModel& u) {
  double total = 0.0;
  for (TokenId t : s) total += token_llr(t, h, u);
  return total;
}

LlrReport feature_llr(const flow::SparseRow& row, std::size_t feature,
                      std::span<const TokenId> tokens, const FeatureHypothesis& h,
                      const UnigramModel& u, LlrAggregation aggregation) {
  if (row.nnz() == 0) {
    throw UndefinedMetric("feature " + std::to_string(feature) + " never fires; LLR is undefined");
  }
  LlrReport r;
  r.feature = feature;
  r.hypothesis = h.name;
  r.active_tokens = row.nnz();
  double weight_sum = 0.0, weighted = 0.0, on_target = 0.0;
  for (std::size_t k = 0; k < row.nnz(); ++k) {
    if (row.index[k] >= tokens.size()) {
      throw ContractViolation("activation row extends past the token stream");
    }
    const TokenId t = tokens[row.index[k]];
    const double w = aggregation == LlrAggregation::kActivationWeighted ? row.value[k] : 1.0;
    weighted += w * token_llr(t, h, u);
    weight_sum += w;
    if (h.is_target(t)) on_target += row.value[k];
  }
  double mass = 0.0;
  for (float v : row.value) mass += v;
  r.llr = weighted / weight_sum;
  r.mass_on_target = on_target / mass;
  if (r.mass_on_target > 0.0) r.off_target_ratio = (1.0 - r.mass_on_target) / r.mass_on_target;
  return r;
}

}  // namespace featflow::proxy
