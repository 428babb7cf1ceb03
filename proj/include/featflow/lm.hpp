#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "featflow/common.hpp"

namespace featflow::lm {

/// Shape and initialization of the one-layer transformer.
struct LMConfig {
  std::size_t vocab_size = 4096;
  std::size_t d_model = 256;
  std::size_t n_heads = 4;
  std::size_t d_mlp = 1024;
  std::size_t ctx_len = 256;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return d_model / n_heads; }
  /// Throws ConfigError when the shape is unusable.
  void validate() const;
  bool operator==(const LMConfig&) const = default;
};

/// Closed-form parameter count for a config.
std::size_t parameter_count(const LMConfig& cfg);

/// All weights of the model. Activations are row vectors, so every
/// projection is applied as `x * W`.
///
/// Manifest order (fixed, used for flattening and checkpoints):
///   embed [vocab, d_model], attn_norm [1, d_model], wq, wk, wv, wo
///   [d_model, d_model], mlp_norm [1, d_model], w_gate, w_up [d_model, d_mlp],
///   w_down [d_mlp, d_model], final_norm [1, d_model], unembed [d_model, vocab]
template <typename Scalar>
struct LMParams {
  LMConfig config;
  Matrix<Scalar> embed;
  RowVector<Scalar> attn_norm;
  Matrix<Scalar> wq, wk, wv, wo;
  RowVector<Scalar> mlp_norm;
  Matrix<Scalar> w_gate, w_up, w_down;
  RowVector<Scalar> final_norm;
  Matrix<Scalar> unembed;

  static LMParams zeros(const LMConfig& cfg);

  std::vector<TensorView<Scalar>> views();
  std::vector<TensorView<const Scalar>> views() const;

  template <typename Other>
  LMParams<Other> cast() const;

  bool all_finite() const;
};

/// Normal(0, init_std) weights, with the two residual-writing projections
/// (wo, w_down) scaled by 1/sqrt(2); norm gains start at one.
template <typename Scalar>
LMParams<Scalar> init_params(const LMConfig& cfg);

enum class HookSite { kMlpPost };

/// Edits the captured mlp_post activations (tokens x d_mlp) in place before
/// they are projected back into the residual stream.
template <typename Scalar>
using MlpPostEdit = std::function<void(Matrix<Scalar>&)>;

template <typename Scalar>
struct ForwardOptions {
  bool capture_mlp_post = false;
  MlpPostEdit<Scalar> edit_mlp_post;
};

template <typename Scalar>
struct ForwardOutput {
  Matrix<Scalar> logits;                    // tokens x vocab
  std::optional<Matrix<Scalar>> mlp_post;   // tokens x d_mlp, when captured
};

template <typename Scalar>
ForwardOutput<Scalar> forward(const LMParams<Scalar>& params, std::span<const TokenId> tokens,
                              const ForwardOptions<Scalar>& options = {});

/// Mean next-token cross entropy in nats. `targets[i]` is the label for
/// logits row i; rows whose target equals `ignore` are masked out.
template <typename Scalar>
double lm_loss(const Matrix<Scalar>& logits, std::span<const TokenId> targets,
               std::optional<TokenId> ignore = std::nullopt);

struct LossAndCount {
  double loss_sum = 0.0;
  std::size_t count = 0;
  double mean() const { return count == 0 ? 0.0 : loss_sum / static_cast<double>(count); }
};

template <typename Scalar>
struct Gradients {
  LMParams<Scalar> grads;
  LossAndCount loss;
};

/// Exact gradients of the mean loss over every non-ignored target in the
/// batch. Each block supplies inputs block[0..n-1) and targets block[1..n).
template <typename Scalar>
Gradients<Scalar> backward(const LMParams<Scalar>& params,
                           std::span<const std::vector<TokenId>> blocks,
                           std::optional<TokenId> ignore = std::nullopt);

/// Loss summed over the targets of one block (inputs block[:-1], targets block[1:]).
template <typename Scalar>
LossAndCount block_loss(const LMParams<Scalar>& params, std::span<const TokenId> block,
                        std::optional<TokenId> ignore = std::nullopt,
                        const MlpPostEdit<Scalar>& edit = {});

struct AccuracyCount {
  std::size_t correct = 0;
  std::size_t total = 0;
  double fraction() const { return total == 0 ? 0.0 : static_cast<double>(correct) / total; }
};

/// Rows whose argmax equals the target. Ties go to the lowest id.
template <typename Scalar>
AccuracyCount count_correct(const Matrix<Scalar>& logits, std::span<const TokenId> targets);

/// Argmax hits over the targets of one block.
template <typename Scalar>
AccuracyCount block_accuracy(const LMParams<Scalar>& params, std::span<const TokenId> block);

/// Fraction of positions whose argmax equals the target, over the first
/// n_tokens targets of the blocks.
template <typename Scalar>
double next_token_accuracy(const LMParams<Scalar>& params,
                           std::span<const std::vector<TokenId>> blocks, std::size_t n_tokens);

}  // namespace featflow::lm
