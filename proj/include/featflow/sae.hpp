#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "featflow/common.hpp"
#include "featflow/corpus.hpp"
#include "featflow/lm.hpp"
#include "featflow/train.hpp"

namespace featflow::sae {

/// What is subtracted from x before encoding. Every mode also subtracts b_d.
enum class Centering {
  kDecoderBias,  // x - b_d
  kScalarMean,   // x - mean(x_i) - b_d
  kDatasetMean,  // x - mu - b_d, mu fixed from the first training batch
};

std::string to_string(Centering c);
Centering centering_from_string(const std::string& s);

struct SaeConfig {
  std::size_t n = 1024;
  std::size_t expansion = 16;
  double l1 = 3e-4;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.9999;
  std::size_t block_len = 24;
  std::size_t batch_blocks = 128;
  std::size_t train_tokens = 1'000'000;
  std::size_t eval_every = 100'000;
  std::size_t dead_window = 100'000;
  Centering centering = Centering::kDecoderBias;
  std::uint64_t seed = 0;

  std::size_t m() const { return expansion * n; }
  std::size_t batch_tokens() const { return block_len * batch_blocks; }
  void validate() const;
};

/// W_e [m, n], b_e [m], W_d [n, m] with unit columns, b_d [n]. `mu` is only
/// used by dataset-mean centering and is not trained.
template <typename Scalar>
struct SaeParams {
  Centering centering = Centering::kDecoderBias;
  Matrix<Scalar> w_e;
  Vector<Scalar> b_e;
  Matrix<Scalar> w_d;
  Vector<Scalar> b_d;
  Vector<Scalar> mu;

  std::size_t n() const { return static_cast<std::size_t>(w_d.rows()); }
  std::size_t m() const { return static_cast<std::size_t>(w_d.cols()); }

  static SaeParams zeros(std::size_t n, std::size_t m, Centering c = Centering::kDecoderBias);

  /// Trainable tensors: w_e, b_e, w_d, b_d.
  std::vector<TensorView<Scalar>> views();
  std::vector<TensorView<const Scalar>> views() const;

  void normalize_decoder();
  double max_decoder_norm_deviation() const;
  bool all_finite() const;

  template <typename Other>
  SaeParams<Other> cast() const;
};

/// Decoder columns drawn uniformly on the sphere, encoder = decoder transpose,
/// b_e = 0, b_d (or mu for dataset-mean centering) = mean of `sample` rows.
template <typename Scalar>
SaeParams<Scalar> init_sae(const SaeConfig& cfg, const Matrix<Scalar>& sample);

template <typename Scalar>
Vector<Scalar> center(const SaeParams<Scalar>& p, const Vector<Scalar>& x);

/// f = ReLU(W_e * center(x) + b_e), one token.
template <typename Scalar>
Vector<Scalar> sae_encode(const SaeParams<Scalar>& p, const Vector<Scalar>& x);

/// x_hat = W_d f + b_d.
template <typename Scalar>
Vector<Scalar> sae_decode(const SaeParams<Scalar>& p, const Vector<Scalar>& f);

/// Batched versions; rows are tokens.
template <typename Scalar>
Matrix<Scalar> encode_batch(const SaeParams<Scalar>& p, const Matrix<Scalar>& x);
template <typename Scalar>
Matrix<Scalar> decode_batch(const SaeParams<Scalar>& p, const Matrix<Scalar>& f);

struct SaeLoss {
  double total = 0.0;
  double mse = 0.0;  // batch mean of the element-mean squared error
  double l1 = 0.0;   // batch mean of sum |f|
  double l0 = 0.0;   // batch mean count of active features
};

template <typename Scalar>
SaeLoss sae_loss(const SaeParams<Scalar>& p, const Matrix<Scalar>& x, double lambda);

template <typename Scalar>
struct SaeGradients {
  SaeParams<Scalar> grads;
  SaeLoss loss;
  std::vector<std::size_t> active_counts;  // per feature, over the batch
};

/// Exact gradients of sae_loss. ReLU subgradient at 0 is 0. The b_d gradient
/// includes the centering path as well as the decoder path.
template <typename Scalar>
SaeGradients<Scalar> sae_backward(const SaeParams<Scalar>& p, const Matrix<Scalar>& x,
                                  double lambda);

struct SaeDiagnostics {
  std::uint64_t step = 0;
  std::size_t tokens_seen = 0;
  double mean_l0 = 0.0;
  double mean_mse = 0.0;
  double mean_l1 = 0.0;
  double max_decoder_norm_deviation = 0.0;
  std::vector<std::size_t> dead_features;
  std::optional<double> explained_loss;
};

/// Supplies activation batches (tokens x n). Must be deterministic for a
/// fixed construction seed.
template <typename Scalar>
using ActivationSource = std::function<Matrix<Scalar>(std::size_t n_tokens)>;

/// Activations at the MLP tap of an LM over blocks of cfg.block_len tokens
/// sampled uniformly from the corpus training split. Holds references to
/// `params` and `corpus`, which must outlive it.
template <typename Scalar>
ActivationSource<Scalar> lm_activation_source(const lm::LMParams<Scalar>& params,
                                              const TokenizedCorpus& corpus,
                                              std::size_t block_len, std::uint64_t seed);

template <typename Scalar>
struct SaeTrainResult {
  SaeParams<Scalar> params;
  std::vector<SaeDiagnostics> trace;
};

template <typename Scalar>
using SaeEvalCallback = std::function<void(SaeDiagnostics&, const SaeParams<Scalar>&)>;

template <typename Scalar>
class SaeDivergenceError : public NumericError {
 public:
  SaeDivergenceError(const std::string& what, SaeParams<Scalar> last_good)
      : NumericError(what), last_good_(std::move(last_good)) {}
  const SaeParams<Scalar>& last_good() const noexcept { return last_good_; }

 private:
  SaeParams<Scalar> last_good_;
};

/// Adam on sae_loss, renormalizing decoder columns after every step. The
/// callback may fill in explained_loss before the record is stored.
template <typename Scalar>
SaeTrainResult<Scalar> train_sae(const SaeConfig& cfg, const ActivationSource<Scalar>& source,
                                 const SaeEvalCallback<Scalar>& on_eval = {});

struct ExplainedLoss {
  double clean = 0.0;
  double substituted = 0.0;
  double ablated = 0.0;
  double raw = 0.0;
  double clamped() const { return raw < 0.0 ? 0.0 : (raw > 1.0 ? 1.0 : raw); }
};

/// (L_ablate - L_subst) / (L_ablate - L_clean) over the first n_tokens
/// targets of the blocks. Throws UndefinedMetric when the denominator is
/// below 1e-9.
template <typename Scalar>
ExplainedLoss explained_loss(const lm::LMParams<Scalar>& lm_params,
                             const SaeParams<Scalar>& sae_params,
                             const std::vector<std::vector<TokenId>>& blocks, std::size_t n_tokens);

}  // namespace featflow::sae
