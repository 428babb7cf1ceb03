#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "featflow/common.hpp"
#include "featflow/corpus.hpp"
#include "featflow/lm.hpp"
#include "featflow/sae.hpp"

namespace featflow::flow {

/// Nonzero activations of one feature: strictly increasing token indices.
struct SparseRow {
  std::vector<std::uint32_t> index;
  std::vector<float> value;

  std::size_t nnz() const { return index.size(); }
  bool operator==(const SparseRow&) const = default;
};

struct ActivationMatrix {
  std::string model_id;
  std::string sae_id;
  std::string stream_id;
  std::size_t n_tokens = 0;
  std::uint64_t stream_digest = 0;
  std::vector<SparseRow> rows;  // one per feature

  std::size_t n_features() const { return rows.size(); }
  /// Dense activations of one feature over the whole stream.
  std::vector<double> dense_row(std::size_t feature) const;
  /// Zero variance over the stream (never active, or equally active everywhere).
  bool is_dead(std::size_t feature) const;
  /// Throws ContractViolation on negative values, unordered or out-of-range indices.
  void validate() const;
  bool operator==(const ActivationMatrix&) const = default;
};

/// Tokens of the first n_tokens positions of a block stream, concatenated.
std::vector<TokenId> stream_tokens(std::span<const TokenBlock> blocks, std::size_t n_tokens);

/// Digest over exactly the tokens a matrix covers.
std::uint64_t token_digest(std::span<const TokenId> tokens);

/// Runs the LM over each block, encodes every MLP-tap vector with the SAE one
/// token at a time, and keeps the nonzero codes. Covers the first n_tokens
/// positions of the concatenated blocks.
template <typename Scalar>
ActivationMatrix collect_activations(const lm::LMParams<Scalar>& lm_params,
                                     const sae::SaeParams<Scalar>& sae_params,
                                     std::span<const TokenBlock> blocks, std::size_t n_tokens,
                                     const std::string& model_id, const std::string& sae_id,
                                     const std::string& stream_id);

/// First and second moments of a row over n_tokens, implicit zeros included.
struct RowMoments {
  double sum = 0.0;
  double sum_sq = 0.0;
  bool constant = true;  // zero variance
};

RowMoments row_moments(const SparseRow& row, std::size_t n_tokens);

/// Pearson r from the sparse sums; nullopt when either row has zero variance.
std::optional<double> pearson_from_sums(const RowMoments& a, const RowMoments& b, double sum_ab,
                                        std::size_t n_tokens);

std::optional<double> pearson(const SparseRow& a, const SparseRow& b, std::size_t n_tokens);

/// Cross products sum_t a_i(t) b_j(t) for every parent i and child j,
/// accumulated in token order. Result is parents x children.
Matrix<double> cross_products(const ActivationMatrix& parent, const ActivationMatrix& child);

/// Throws ComparabilityError unless both matrices cover the same token stream.
void check_comparable(const ActivationMatrix& a, const ActivationMatrix& b);

struct FeatureMatch {
  std::size_t parent = 0;
  std::size_t child = 0;
  double r = 0.0;
  bool operator==(const FeatureMatch&) const = default;
  auto operator<=>(const FeatureMatch&) const = default;
};

struct BestMatches {
  std::string parent_model;
  std::string child_model;
  std::size_t n_parent = 0;
  std::size_t n_child = 0;
  std::vector<std::optional<FeatureMatch>> for_child;   // best parent per child
  std::vector<std::optional<FeatureMatch>> for_parent;  // best child per parent
  std::vector<bool> dead_parent;
  std::vector<bool> dead_child;
};

/// Argmax of r in both directions over non-dead features; ties go to the
/// lower feature id.
BestMatches best_matches(const ActivationMatrix& parent, const ActivationMatrix& child);

struct EvolutionClassification {
  std::string parent_model;
  std::string child_model;
  double threshold = 0.80;
  std::vector<FeatureMatch> persisting;  // sorted, unique
  std::vector<std::size_t> persisting_parents;
  std::vector<std::size_t> persisting_children;
  std::vector<std::size_t> emerging;
  std::vector<std::size_t> disappearing;
  std::vector<std::size_t> dead_parent;
  std::vector<std::size_t> dead_child;

  /// Throws ContractViolation if the partition invariants fail.
  void validate(std::size_t n_parent, std::size_t n_child) const;
};

/// A match persists when r > threshold (strict).
EvolutionClassification classify(const BestMatches& matches, double threshold = 0.80);

struct FlowEdge {
  std::string parent;
  std::string child;
  std::size_t persisting = 0;  // persisting pairs
  std::size_t persisting_parents = 0;
  std::size_t persisting_children = 0;
  std::size_t emerging = 0;
  std::size_t disappearing = 0;
  std::size_t dead_parent = 0;
  std::size_t dead_child = 0;
};

struct TwoHopChain {
  std::string via;
  std::vector<std::size_t> merged_features;  // merged features tracing back to base
};

struct FlowGraph {
  std::vector<std::string> nodes;  // base, ft_a, ft_b, merged
  std::vector<FlowEdge> edges;
  std::vector<TwoHopChain> chains;         // one per fine-tuned model
  std::vector<std::size_t> traced_to_base;  // union over both chains
  /// Merged features persisting from at least one fine-tuned model.
  std::vector<std::size_t> traced_to_finetunes;
  /// Base features persisting into at least one fine-tuned model.
  std::size_t base_persisting_any = 0;
};

FlowEdge edge_of(const EvolutionClassification& c);

/// Builds the four-model lineage graph. The classifications must be
/// base->ft_a, base->ft_b, ft_a->merged, ft_b->merged with consistent labels.
FlowGraph build_flow_graph(const EvolutionClassification& base_a,
                           const EvolutionClassification& base_b,
                           const EvolutionClassification& a_merged,
                           const EvolutionClassification& b_merged);

}  // namespace featflow::flow
