#include "featflow/sae.hpp"

#include <cmath>
#include <memory>

#include "featflow/rng.hpp"

namespace featflow::sae {

std::string to_string(Centering c) {
  switch (c) {
    case Centering::kDecoderBias: return "decoder-bias";
    case Centering::kScalarMean: return "scalar-mean";
    case Centering::kDatasetMean: return "dataset-mean";
  }
  return "?";
}

Centering centering_from_string(const std::string& s) {
  if (s == "decoder-bias") return Centering::kDecoderBias;
  if (s == "scalar-mean") return Centering::kScalarMean;
  if (s == "dataset-mean") return Centering::kDatasetMean;
  throw ConfigError("unknown centering mode '" + s + "'");
}

void SaeConfig::validate() const {
  if (n == 0 || expansion == 0) throw ConfigError("SAE dimensions must be positive");
  if (!(l1 >= 0.0)) throw ConfigError("L1 coefficient must be non-negative");
  if (!(lr > 0.0)) throw ConfigError("SAE learning rate must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0)) {
    throw ConfigError("SAE Adam betas must lie in (0, 1)");
  }
  if (block_len == 0 || batch_blocks == 0) throw ConfigError("SAE batch shape must be positive");
  if (train_tokens == 0) throw ConfigError("SAE train_tokens must be positive");
  if (eval_every == 0) throw ConfigError("SAE eval_every must be positive");
}

namespace {
template <typename S, typename M>
TensorView<S> view_of(const char* name, M& m) {
  return TensorView<S>{name, std::span<S>(m.data(), static_cast<std::size_t>(m.size())), m.rows(),
                       m.cols()};
}
}  // namespace

template <typename Scalar>
SaeParams<Scalar> SaeParams<Scalar>::zeros(std::size_t n, std::size_t m, Centering c) {
  SaeParams p;
  const auto N = static_cast<Eigen::Index>(n), M = static_cast<Eigen::Index>(m);
  p.centering = c;
  p.w_e = Matrix<Scalar>::Zero(M, N);
  p.b_e = Vector<Scalar>::Zero(M);
  p.w_d = Matrix<Scalar>::Zero(N, M);
  p.b_d = Vector<Scalar>::Zero(N);
  p.mu = Vector<Scalar>::Zero(N);
  return p;
}

template <typename Scalar>
std::vector<TensorView<Scalar>> SaeParams<Scalar>::views() {
  return {view_of<Scalar>("w_e", w_e), view_of<Scalar>("b_e", b_e), view_of<Scalar>("w_d", w_d),
          view_of<Scalar>("b_d", b_d)};
}

template <typename Scalar>
std::vector<TensorView<const Scalar>> SaeParams<Scalar>::views() const {
  return {view_of<const Scalar>("w_e", w_e), view_of<const Scalar>("b_e", b_e),
          view_of<const Scalar>("w_d", w_d), view_of<const Scalar>("b_d", b_d)};
}

template <typename Scalar>
void SaeParams<Scalar>::normalize_decoder() {
  for (Eigen::Index j = 0; j < w_d.cols(); ++j) {
    const Scalar norm = w_d.col(j).norm();
    if (norm > Scalar(0)) w_d.col(j) /= norm;
  }
}

template <typename Scalar>
double SaeParams<Scalar>::max_decoder_norm_deviation() const {
  double worst = 0.0;
  for (Eigen::Index j = 0; j < w_d.cols(); ++j) {
    worst = std::max(worst, std::abs(static_cast<double>(w_d.col(j).norm()) - 1.0));
  }
  return worst;
}

template <typename Scalar>
bool SaeParams<Scalar>::all_finite() const {
  return w_e.allFinite() && b_e.allFinite() && w_d.allFinite() && b_d.allFinite() &&
         mu.allFinite();
}

template <typename Scalar>
template <typename Other>
SaeParams<Other> SaeParams<Scalar>::cast() const {
  SaeParams<Other> p;
  p.centering = centering;
  p.w_e = w_e.template cast<Other>();
  p.b_e = b_e.template cast<Other>();
  p.w_d = w_d.template cast<Other>();
  p.b_d = b_d.template cast<Other>();
  p.mu = mu.template cast<Other>();
  return p;
}

template <typename Scalar>
SaeParams<Scalar> init_sae(const SaeConfig& cfg, const Matrix<Scalar>& sample) {
  cfg.validate();
  if (static_cast<std::size_t>(sample.cols()) != cfg.n) {
    throw ContractViolation("activation width " + std::to_string(sample.cols()) +
                            " does not match SAE input size " + std::to_string(cfg.n));
  }
  auto p = SaeParams<Scalar>::zeros(cfg.n, cfg.m(), cfg.centering);
  Rng rng(mix_seed(cfg.seed, 0x5ae));
  std::normal_distribution<double> normal;
  for (Eigen::Index i = 0; i < p.w_d.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.w_d.cols(); ++j) p.w_d(i, j) = static_cast<Scalar>(normal(rng));
  }
  p.normalize_decoder();
  p.w_e = p.w_d.transpose();
  if (sample.rows() > 0) {
    Vector<Scalar> mean = sample.colwise().mean().transpose();
    if (cfg.centering == Centering::kDatasetMean) {
      p.mu = mean;
    } else if (cfg.centering == Centering::kDecoderBias) {
      p.b_d = mean;
    }
  }
  return p;
}

namespace {

template <typename Scalar>
Matrix<Scalar> center_batch(const SaeParams<Scalar>& p, const Matrix<Scalar>& x) {
  Matrix<Scalar> xc = x.rowwise() - p.b_d.transpose();
  if (p.centering == Centering::kScalarMean) {
    xc.colwise() -= x.rowwise().mean();
  } else if (p.centering == Centering::kDatasetMean) {
    xc.rowwise() -= p.mu.transpose();
  }
  return xc;
}

template <typename Scalar>
void check_width(const SaeParams<Scalar>& p, Eigen::Index width, const char* what) {
  if (static_cast<std::size_t>(width) != p.n()) {
    throw ContractViolation(std::string(what) + ": expected width " + std::to_string(p.n()) +
                            ", got " + std::to_string(width));
  }
}

}  // namespace

template <typename Scalar>
Vector<Scalar> center(const SaeParams<Scalar>& p, const Vector<Scalar>& x) {
  check_width(p, x.size(), "sae center");
  Vector<Scalar> xc = x - p.b_d;
  if (p.centering == Centering::kScalarMean) {
    xc.array() -= x.mean();
  } else if (p.centering == Centering::kDatasetMean) {
    xc -= p.mu;
  }
  return xc;
}

template <typename Scalar>
Vector<Scalar> sae_encode(const SaeParams<Scalar>& p, const Vector<Scalar>& x) {
  Vector<Scalar> z = p.w_e * center(p, x) + p.b_e;
  return z.cwiseMax(Scalar(0));
}

template <typename Scalar>
Vector<Scalar> sae_decode(const SaeParams<Scalar>& p, const Vector<Scalar>& f) {
  if (static_cast<std::size_t>(f.size()) != p.m()) {
    throw ContractViolation("sae_decode: expected " + std::to_string(p.m()) + " features, got " +
                            std::to_string(f.size()));
  }
  return p.w_d * f + p.b_d;
}

template <typename Scalar>
Matrix<Scalar> encode_batch(const SaeParams<Scalar>& p, const Matrix<Scalar>& x) {
  check_width(p, x.cols(), "sae encode");
  Matrix<Scalar> z = center_batch(p, x) * p.w_e.transpose();
  z.rowwise() += p.b_e.transpose();
  return z.cwiseMax(Scalar(0));
}

template <typename Scalar>
Matrix<Scalar> decode_batch(const SaeParams<Scalar>& p, const Matrix<Scalar>& f) {
  if (static_cast<std::size_t>(f.cols()) != p.m()) {
    throw ContractViolation("sae decode: feature width mismatch");
  }
  Matrix<Scalar> x = f * p.w_d.transpose();
  x.rowwise() += p.b_d.transpose();
  return x;
}

namespace {

template <typename Scalar>
SaeLoss loss_terms(const Matrix<Scalar>& x, const Matrix<Scalar>& f, const Matrix<Scalar>& xhat,
                   double lambda) {
  const double b = static_cast<double>(x.rows());
  SaeLoss l;
  l.mse = (xhat - x).template cast<double>().squaredNorm() / (b * static_cast<double>(x.cols()));
  l.l1 = f.template cast<double>().cwiseAbs().sum() / b;
  l.l0 = static_cast<double>((f.array() > Scalar(0)).count()) / b;
  l.total = l.mse + lambda * l.l1;
  return l;
}

}  // namespace

template <typename Scalar>
SaeLoss sae_loss(const SaeParams<Scalar>& p, const Matrix<Scalar>& x, double lambda) {
  if (x.rows() == 0) throw ContractViolation("sae_loss needs a nonempty batch");
  auto f = encode_batch(p, x);
  return loss_terms(x, f, decode_batch(p, f), lambda);
}

template <typename Scalar>
SaeGradients<Scalar> sae_backward(const SaeParams<Scalar>& p, const Matrix<Scalar>& x,
                                  double lambda) {
  if (x.rows() == 0) throw ContractViolation("sae_backward needs a nonempty batch");
  check_width(p, x.cols(), "sae backward");
  const Eigen::Index B = x.rows();
  Matrix<Scalar> xc = center_batch(p, x);
  Matrix<Scalar> z = xc * p.w_e.transpose();
  z.rowwise() += p.b_e.transpose();
  Matrix<Scalar> f = z.cwiseMax(Scalar(0));
  Matrix<Scalar> xhat = f * p.w_d.transpose();
  xhat.rowwise() += p.b_d.transpose();

  SaeGradients<Scalar> g{SaeParams<Scalar>::zeros(p.n(), p.m(), p.centering), {}, {}};
  g.loss = loss_terms(x, f, xhat, lambda);

  const auto mse_scale = static_cast<Scalar>(2.0 / (static_cast<double>(B) * x.cols()));
  const auto l1_scale = static_cast<Scalar>(lambda / static_cast<double>(B));
  Matrix<Scalar> dxhat = (xhat - x) * mse_scale;
  g.grads.w_d = dxhat.transpose() * f;
  g.grads.b_d = dxhat.colwise().sum().transpose();

  Matrix<Scalar> dz = dxhat * p.w_d;
  g.active_counts.assign(p.m(), 0);
  for (Eigen::Index i = 0; i < B; ++i) {
    for (Eigen::Index j = 0; j < dz.cols(); ++j) {
      if (z(i, j) > Scalar(0)) {
        dz(i, j) += l1_scale;
        ++g.active_counts[static_cast<std::size_t>(j)];
      } else {
        dz(i, j) = Scalar(0);
      }
    }
  }
  g.grads.w_e = dz.transpose() * xc;
  g.grads.b_e = dz.colwise().sum().transpose();
  // Centering subtracts b_d, so it also receives -dL/dxc.
  g.grads.b_d -= (dz * p.w_e).colwise().sum().transpose();
  return g;
}

template <typename Scalar>
ActivationSource<Scalar> lm_activation_source(const lm::LMParams<Scalar>& params,
                                              const TokenizedCorpus& corpus,
                                              std::size_t block_len, std::uint64_t seed) {
  auto draw = std::make_shared<std::uint64_t>(0);
  return [&params, &corpus, block_len, seed, draw](std::size_t n_tokens) {
    auto blocks = sample_blocks(corpus, Split::kTrain, block_len, n_tokens, mix_seed(seed, (*draw)++));
    Matrix<Scalar> out(static_cast<Eigen::Index>(blocks.size() * block_len),
                       static_cast<Eigen::Index>(params.config.d_mlp));
    lm::ForwardOptions<Scalar> opt;
    opt.capture_mlp_post = true;
    Eigen::Index row = 0;
    for (const auto& b : blocks) {
      auto fwd = lm::forward(params, std::span<const TokenId>(b.tokens), opt);
      out.middleRows(row, fwd.mlp_post->rows()) = *fwd.mlp_post;
      row += fwd.mlp_post->rows();
    }
    return out;
  };
}

template <typename Scalar>
SaeTrainResult<Scalar> train_sae(const SaeConfig& cfg, const ActivationSource<Scalar>& source,
                                 const SaeEvalCallback<Scalar>& on_eval) {
  cfg.validate();
  const std::size_t batch = cfg.batch_tokens();
  Matrix<Scalar> x = source(batch);
  SaeTrainResult<Scalar> result{init_sae(cfg, x), {}};
  auto& p = result.params;
  auto state = train::AdamState<Scalar>::init(p.views(), {cfg.lr, cfg.beta1, cfg.beta2, 1e-8});

  // Token index (exclusive) at which each feature was last active.
  std::vector<std::size_t> last_active(cfg.m(), 0);
  std::size_t seen = 0;
  std::size_t next_eval = cfg.eval_every;
  SaeLoss window{};
  std::size_t window_steps = 0;

  auto record = [&] {
    SaeDiagnostics d;
    d.step = state.step;
    d.tokens_seen = seen;
    if (window_steps) {
      d.mean_l0 = window.l0 / static_cast<double>(window_steps);
      d.mean_mse = window.mse / static_cast<double>(window_steps);
      d.mean_l1 = window.l1 / static_cast<double>(window_steps);
    }
    d.max_decoder_norm_deviation = p.max_decoder_norm_deviation();
    const std::size_t horizon = seen > cfg.dead_window ? seen - cfg.dead_window : 0;
    for (std::size_t j = 0; j < last_active.size(); ++j) {
      if (last_active[j] <= horizon) d.dead_features.push_back(j);
    }
    if (on_eval) on_eval(d, p);
    result.trace.push_back(std::move(d));
    window = {};
    window_steps = 0;
    next_eval += cfg.eval_every;
  };

  bool first = true;
  while (seen < cfg.train_tokens) {
    if (!first) x = source(batch);
    first = false;
    if (static_cast<std::size_t>(x.cols()) != cfg.n) {
      throw ContractViolation("activation stream width does not match the SAE input size");
    }
    auto g = sae_backward(p, x, cfg.l1);
    if (!std::isfinite(g.loss.total)) {
      throw SaeDivergenceError<Scalar>(
          "SAE loss became non-finite at step " + std::to_string(state.step + 1), p);
    }
    const auto& grads = g.grads;
    train::adam_step(p.views(), grads.views(), state);
    p.normalize_decoder();
    seen += static_cast<std::size_t>(x.rows());
    for (std::size_t j = 0; j < g.active_counts.size(); ++j) {
      if (g.active_counts[j]) last_active[j] = seen;
    }
    window.l0 += g.loss.l0;
    window.mse += g.loss.mse;
    window.l1 += g.loss.l1;
    ++window_steps;
    if (seen >= next_eval && seen < cfg.train_tokens) record();
  }
  record();
  return result;
}

template <typename Scalar>
ExplainedLoss explained_loss(const lm::LMParams<Scalar>& lm_params,
                             const SaeParams<Scalar>& sae_params,
                             const std::vector<std::vector<TokenId>>& blocks,
                             std::size_t n_tokens) {
  if (lm_params.config.d_mlp != sae_params.n()) {
    throw ContractViolation("SAE input size does not match the model MLP width");
  }
  lm::MlpPostEdit<Scalar> substitute = [&](Matrix<Scalar>& h) {
    h = decode_batch(sae_params, encode_batch(sae_params, h));
  };
  lm::MlpPostEdit<Scalar> ablate = [](Matrix<Scalar>& h) { h.setZero(); };
  lm::LossAndCount clean, subst, abl;
  std::size_t used = 0;
  for (const auto& b : blocks) {
    if (used >= n_tokens || b.size() < 2) continue;
    std::span<const TokenId> block(b);
    if (block.size() - 1 > n_tokens - used) block = block.first(n_tokens - used + 1);
    auto add = [](lm::LossAndCount& acc, const lm::LossAndCount& l) {
      acc.loss_sum += l.loss_sum;
      acc.count += l.count;
    };
    add(clean, lm::block_loss(lm_params, block));
    add(subst, lm::block_loss(lm_params, block, std::nullopt, substitute));
    add(abl, lm::block_loss(lm_params, block, std::nullopt, ablate));
    used += block.size() - 1;
  }
  ExplainedLoss e{clean.mean(), subst.mean(), abl.mean(), 0.0};
  const double denom = e.ablated - e.clean;
  if (std::abs(denom) < 1e-9) {
    throw UndefinedMetric("explained loss is undefined: ablating the MLP does not change the loss");
  }
  e.raw = (e.ablated - e.substituted) / denom;
  return e;
}

#define FEATFLOW_INSTANTIATE(S)                                                                  \
  template struct SaeParams<S>;                                                                  \
  template SaeParams<S> init_sae<S>(const SaeConfig&, const Matrix<S>&);                         \
  template Vector<S> center<S>(const SaeParams<S>&, const Vector<S>&);                           \
  template Vector<S> sae_encode<S>(const SaeParams<S>&, const Vector<S>&);                       \
  template Vector<S> sae_decode<S>(const SaeParams<S>&, const Vector<S>&);                       \
  template Matrix<S> encode_batch<S>(const SaeParams<S>&, const Matrix<S>&);                     \
  template Matrix<S> decode_batch<S>(const SaeParams<S>&, const Matrix<S>&);                     \
  template SaeLoss sae_loss<S>(const SaeParams<S>&, const Matrix<S>&, double);                   \
  template SaeGradients<S> sae_backward<S>(const SaeParams<S>&, const Matrix<S>&, double);       \
  template ActivationSource<S> lm_activation_source<S>(const lm::LMParams<S>&,                   \
                                                       const TokenizedCorpus&, std::size_t,      \
                                                       std::uint64_t);                           \
  template SaeTrainResult<S> train_sae<S>(const SaeConfig&, const ActivationSource<S>&,          \
                                          const SaeEvalCallback<S>&);                            \
  template ExplainedLoss explained_loss<S>(const lm::LMParams<S>&, const SaeParams<S>&,          \
                                           const std::vector<std::vector<TokenId>>&, std::size_t);

FEATFLOW_INSTANTIATE(float)
FEATFLOW_INSTANTIATE(double)
#undef FEATFLOW_INSTANTIATE

template SaeParams<double> SaeParams<float>::cast<double>() const;
template SaeParams<float> SaeParams<double>::cast<float>() const;
template SaeParams<float> SaeParams<float>::cast<float>() const;
template SaeParams<double> SaeParams<double>::cast<double>() const;

}  // namespace featflow::sae
