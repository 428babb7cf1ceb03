#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "featflow/common.hpp"
#include "featflow/corpus.hpp"
#include "featflow/lm.hpp"

namespace featflow::train {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers, one per parameter tensor in manifest order.
template <typename Scalar>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::string> names;
  std::vector<Vector<Scalar>> m;
  std::vector<Vector<Scalar>> v;

  template <typename Views>
  static AdamState init(const Views& params, const AdamConfig& cfg) {
    AdamState s;
    s.config = cfg;
    for (const auto& t : params) {
      s.names.push_back(t.name);
      s.m.push_back(Vector<Scalar>::Zero(static_cast<Eigen::Index>(t.data.size())));
      s.v.push_back(Vector<Scalar>::Zero(static_cast<Eigen::Index>(t.data.size())));
    }
    return s;
  }
};

/// One bias-corrected Adam update, in place. Throws NumericError naming the
/// first tensor holding a non-finite gradient; nothing is modified then.
template <typename Scalar>
void adam_step(const std::vector<TensorView<Scalar>>& params,
               const std::vector<TensorView<const Scalar>>& grads, AdamState<Scalar>& state);

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename Scalar>
double clip_global_norm(const std::vector<TensorView<Scalar>>& grads, double max_norm);

struct EvalStream {
  std::string name;
  std::vector<std::vector<TokenId>> blocks;
};

struct StreamMetrics {
  std::string name;
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t tokens = 0;
};

/// Mean loss and accuracy over the first n_tokens targets of each stream.
template <typename Scalar>
std::vector<StreamMetrics> evaluate(const lm::LMParams<Scalar>& params,
                                    const std::vector<EvalStream>& streams, std::size_t n_tokens,
                                    std::optional<TokenId> ignore = std::nullopt);

/// Evaluation blocks drawn from every source's validation split.
std::vector<EvalStream> validation_streams(const TokenizedCorpus& corpus, std::size_t block_len,
                                           std::size_t n_tokens, std::uint64_t seed, TokenId eos);

struct TrainConfig {
  std::size_t total_tokens = 200'000;  // predicted positions
  std::size_t batch_blocks = 8;
  AdamConfig adam;
  double clip_norm = 1.0;
  std::size_t eval_every = 20'000;
  std::size_t eval_tokens = 4096;
  std::size_t block_len = 0;  // 0: ctx_len + 1
  std::uint64_t seed = 0;
  TokenId eos = SpecialIds{}.eos;
  std::optional<TokenId> ignore = SpecialIds{}.pad;

  void validate(bool has_init) const;
};

struct EvalRecord {
  std::uint64_t step = 0;
  std::size_t tokens_seen = 0;
  double train_loss = 0.0;  // mean over steps since the previous record
  std::vector<StreamMetrics> streams;
};

template <typename Scalar>
struct TrainResult {
  lm::LMParams<Scalar> params;
  std::vector<EvalRecord> trace;
};

template <typename Scalar>
using EvalCallback = std::function<void(const EvalRecord&, const lm::LMParams<Scalar>&)>;

/// Raised when the loss turns non-finite; carries the last finite parameters.
template <typename Scalar>
class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, lm::LMParams<Scalar> last_good)
      : NumericError(what), last_good_(std::move(last_good)) {}
  const lm::LMParams<Scalar>& last_good() const noexcept { return last_good_; }

 private:
  lm::LMParams<Scalar> last_good_;
};

/// Trains (or, when `init` is given, fine-tunes) on the corpus block stream.
/// Evaluates at token 0, every eval_every tokens, and at the end.
template <typename Scalar>
TrainResult<Scalar> train_lm(const TrainConfig& cfg, const lm::LMConfig& lm_cfg,
                             const TokenizedCorpus& corpus, const std::vector<EvalStream>& evals,
                             std::optional<lm::LMParams<Scalar>> init = std::nullopt,
                             const EvalCallback<Scalar>& on_eval = {});

}  // namespace featflow::train
