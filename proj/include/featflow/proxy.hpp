#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "featflow/common.hpp"
#include "featflow/corpus.hpp"
#include "featflow/flow.hpp"

namespace featflow::proxy {

/// Add-alpha smoothed token frequencies: p(t) = (count(t) + a) / (total + a * vocab).
class UnigramModel {
 public:
  UnigramModel(std::vector<std::uint64_t> counts, double alpha);

  double prob(TokenId t) const;
  std::size_t vocab_size() const noexcept { return counts_.size(); }
  std::uint64_t total() const noexcept { return total_; }
  double alpha() const noexcept { return alpha_; }
  const std::vector<std::uint64_t>& counts() const noexcept { return counts_; }

 private:
  std::vector<std::uint64_t> counts_;
  std::uint64_t total_ = 0;
  double alpha_ = 0.0;
};

UnigramModel fit_unigram(std::span<const TokenId> tokens, std::size_t vocab_size,
                         double alpha = 0.5);

/// P(t|h) = (1 - eps) * uniform(targets) + eps * unigram.
struct FeatureHypothesis {
  std::string name;
  std::vector<TokenId> targets;  // sorted, unique
  double epsilon = 1e-3;

  bool is_target(TokenId t) const;
  double prob(TokenId t, const UnigramModel& u) const;
  void validate(std::size_t vocab_size) const;
};

/// Targets are every token produced by encoding each string on its own.
FeatureHypothesis hypothesis_from_strings(const std::string& name,
                                          std::span<const std::string> strings,
                                          const Tokenizer& tokenizer, double epsilon = 1e-3);

/// log P(t|h) - log p(t) in nats. Throws UndefinedMetric when either
/// probability is zero.
double token_llr(TokenId t, const FeatureHypothesis& h, const UnigramModel& u);

/// Sum of token_llr over the string.
double string_llr(std::span<const TokenId> s, const FeatureHypothesis& h, const UnigramModel& u);

enum class LlrAggregation { kActivationWeighted, kUnweighted };

struct LlrReport {
  std::size_t feature = 0;
  std::string hypothesis;
  double llr = 0.0;
  double mass_on_target = 0.0;
  std::optional<double> off_target_ratio;  // (1 - mass) / mass; none when mass is 0
  std::size_t active_tokens = 0;
};

/// Mean of token_llr over the positions where the feature fires, weighted by
/// activation (or unweighted), plus how much of the activation lands on targets.
LlrReport feature_llr(const flow::SparseRow& row, std::size_t feature,
                      std::span<const TokenId> tokens, const FeatureHypothesis& h,
                      const UnigramModel& u,
                      LlrAggregation aggregation = LlrAggregation::kActivationWeighted);

}  // namespace featflow::proxy
