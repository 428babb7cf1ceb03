#include "featflow/train.hpp"

#include <cmath>

namespace featflow::train {

template <typename Scalar>
void adam_step(const std::vector<TensorView<Scalar>>& params,
               const std::vector<TensorView<const Scalar>>& grads, AdamState<Scalar>& state) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw ContractViolation("adam_step: parameter, gradient and state manifests disagree");
  }
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (params[t].data.size() != grads[t].data.size() ||
        static_cast<Eigen::Index>(params[t].data.size()) != state.m[t].size()) {
      throw ContractViolation("adam_step: shape mismatch in tensor '" + params[t].name + "'");
    }
    for (Scalar g : grads[t].data) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient in tensor '" + grads[t].name + "' at step " +
                           std::to_string(state.step + 1));
      }
    }
  }

  const auto& c = state.config;
  ++state.step;
  const double bias1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  const auto b1 = static_cast<Scalar>(c.beta1);
  const auto b2 = static_cast<Scalar>(c.beta2);
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto p = params[t].data;
    auto g = grads[t].data;
    auto& m = state.m[t];
    auto& v = state.v[t];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const auto k = static_cast<Eigen::Index>(i);
      m[k] = b1 * m[k] + (Scalar(1) - b1) * g[i];
      v[k] = b2 * v[k] + (Scalar(1) - b2) * g[i] * g[i];
      const double mhat = static_cast<double>(m[k]) / bias1;
      const double vhat = static_cast<double>(v[k]) / bias2;
      p[i] = static_cast<Scalar>(static_cast<double>(p[i]) - c.lr * mhat / (std::sqrt(vhat) + c.eps));
    }
  }
}

template <typename Scalar>
double clip_global_norm(const std::vector<TensorView<Scalar>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& t : grads) {
    for (Scalar g : t.data) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto scale = static_cast<Scalar>(max_norm / norm);
    for (const auto& t : grads) {
      for (auto& g : t.data) g *= scale;
    }
  }
  return norm;
}

template <typename Scalar>
std::vector<StreamMetrics> evaluate(const lm::LMParams<Scalar>& params,
                                    const std::vector<EvalStream>& streams, std::size_t n_tokens,
                                    std::optional<TokenId> ignore) {
  std::vector<StreamMetrics> out;
  for (const auto& s : streams) {
    lm::LossAndCount loss;
    lm::AccuracyCount acc;
    for (const auto& b : s.blocks) {
      if (acc.total >= n_tokens) break;
      std::span<const TokenId> block(b);
      const std::size_t room = n_tokens - acc.total;
      if (block.size() - 1 > room) block = block.first(room + 1);
      auto fwd = lm::forward(params, block.first(block.size() - 1));
      auto targets = block.subspan(1);
      auto a = lm::count_correct(fwd.logits, targets);
      acc.correct += a.correct;
      acc.total += a.total;
      const double mean = lm::lm_loss(fwd.logits, targets, ignore);
      std::size_t counted = 0;
      for (TokenId t : targets) counted += !(ignore && t == *ignore);
      loss.loss_sum += mean * static_cast<double>(counted);
      loss.count += counted;
    }
    out.push_back({s.name, loss.mean(), acc.fraction(), acc.total});
  }
  return out;
}

std::vector<EvalStream> validation_streams(const TokenizedCorpus& corpus, std::size_t block_len,
                                           std::size_t n_tokens, std::uint64_t seed, TokenId eos) {
  std::vector<EvalStream> out;
  const std::size_t n_blocks = (n_tokens + block_len - 2) / (block_len - 1);
  for (std::size_t s = 0; s < corpus.sources.size(); ++s) {
    EvalStream e;
    e.name = corpus.sources[s].name;
    for (auto& b : validation_blocks(corpus, s, block_len, n_blocks, seed, eos)) {
      e.blocks.push_back(std::move(b.tokens));
    }
    out.push_back(std::move(e));
  }
  return out;
}

void TrainConfig::validate(bool has_init) const {
  if (total_tokens == 0 && !has_init) throw ConfigError("total_tokens must be positive");
  if (batch_blocks == 0) throw ConfigError("batch_blocks must be positive");
  if (eval_every == 0) throw ConfigError("eval_every must be positive");
  if (total_tokens > 0 && eval_every > total_tokens) {
    throw ConfigError("eval_every must not exceed total_tokens");
  }
  if (!(adam.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(adam.beta1 > 0.0 && adam.beta1 < 1.0 && adam.beta2 > 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in (0, 1)");
  }
}

template <typename Scalar>
TrainResult<Scalar> train_lm(const TrainConfig& cfg, const lm::LMConfig& lm_cfg,
                             const TokenizedCorpus& corpus, const std::vector<EvalStream>& evals,
                             std::optional<lm::LMParams<Scalar>> init,
                             const EvalCallback<Scalar>& on_eval) {
  cfg.validate(init.has_value());
  lm_cfg.validate();
  TrainResult<Scalar> result{init ? std::move(*init) : lm::init_params<Scalar>(lm_cfg), {}};
  auto& params = result.params;
  if (!(params.config == lm_cfg)) {
    throw ConfigError("initial checkpoint was built for a different model configuration");
  }
  if (cfg.total_tokens == 0) return result;

  const std::size_t block_len = cfg.block_len ? cfg.block_len : lm_cfg.ctx_len + 1;
  if (block_len - 1 > lm_cfg.ctx_len) throw ConfigError("training block exceeds ctx_len");
  auto stream = build_stream(corpus, block_len, cfg.seed, cfg.eos);
  auto state = AdamState<Scalar>::init(params.views(), cfg.adam);

  const std::size_t per_step = cfg.batch_blocks * (block_len - 1);
  std::size_t seen = 0;
  std::size_t next_eval = 0;
  double loss_acc = 0.0;
  std::size_t loss_steps = 0;

  auto record = [&] {
    EvalRecord r;
    r.step = state.step;
    r.tokens_seen = seen;
    r.train_loss = loss_steps ? loss_acc / static_cast<double>(loss_steps) : 0.0;
    r.streams = evaluate(params, evals, cfg.eval_tokens, cfg.ignore);
    loss_acc = 0.0;
    loss_steps = 0;
    if (on_eval) on_eval(r, params);
    result.trace.push_back(std::move(r));
    next_eval += cfg.eval_every;
  };

  record();
  std::vector<std::vector<TokenId>> batch(cfg.batch_blocks);
  while (seen < cfg.total_tokens) {
    for (auto& b : batch) b = stream.next().tokens;
    auto g = lm::backward(params, batch, cfg.ignore);
    const double loss = g.loss.mean();
    if (!std::isfinite(loss)) {
      throw DivergenceError<Scalar>("loss became non-finite at step " + std::to_string(state.step + 1),
                                    params);
    }
    clip_global_norm(g.grads.views(), cfg.clip_norm);
    const auto& const_grads = g.grads;
    adam_step(params.views(), const_grads.views(), state);
    seen += per_step;
    loss_acc += loss;
    ++loss_steps;
    if (seen >= next_eval && seen < cfg.total_tokens) record();
  }
  record();
  return result;
}

#define FEATFLOW_INSTANTIATE(S)                                                                  \
  template void adam_step<S>(const std::vector<TensorView<S>>&,                                  \
                             const std::vector<TensorView<const S>>&, AdamState<S>&);            \
  template double clip_global_norm<S>(const std::vector<TensorView<S>>&, double);                \
  template std::vector<StreamMetrics> evaluate<S>(const lm::LMParams<S>&,                        \
                                                  const std::vector<EvalStream>&, std::size_t,   \
                                                  std::optional<TokenId>);                       \
  template TrainResult<S> train_lm<S>(const TrainConfig&, const lm::LMConfig&,                   \
                                      const TokenizedCorpus&, const std::vector<EvalStream>&,    \
                                      std::optional<lm::LMParams<S>>, const EvalCallback<S>&);

FEATFLOW_INSTANTIATE(float)
FEATFLOW_INSTANTIATE(double)
#undef FEATFLOW_INSTANTIATE

}  // namespace featflow::train
