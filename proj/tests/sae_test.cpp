#include "featflow/sae.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "featflow/rng.hpp"
#include "test_util.hpp"

namespace featflow::sae {
namespace {

using testing::relative_error;

SaeParams<double> hand_params() {
  auto p = SaeParams<double>::zeros(1, 2);
  p.w_e << 2.0, -1.0;
  p.b_e << 0.1, 0.1;
  p.b_d << 0.5;
  p.w_d << 0.6, 0.8;
  return p;
}

// Dictionary [I, -I]: codes relu(x), relu(-x) reconstruct any x exactly.
SaeParams<double> identity_params(std::size_t n) {
  const auto N = static_cast<Eigen::Index>(n);
  auto p = SaeParams<double>::zeros(n, 2 * n);
  p.w_d.leftCols(N) = Matrix<double>::Identity(N, N);
  p.w_d.rightCols(N) = -Matrix<double>::Identity(N, N);
  p.w_e = p.w_d.transpose();
  return p;
}

SaeParams<double> random_params(std::size_t n, std::size_t m, Centering c, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> d(0.0, 0.5);
  auto p = SaeParams<double>::zeros(n, m, c);
  for (auto* mat : {&p.w_e, &p.w_d}) {
    for (Eigen::Index i = 0; i < mat->size(); ++i) mat->data()[i] = d(rng);
  }
  for (auto* v : {&p.b_e, &p.b_d, &p.mu}) {
    for (auto& x : *v) x = d(rng);
  }
  return p;
}

Matrix<double> random_batch(Eigen::Index b, Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> d;
  Matrix<double> x(b, n);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = d(rng);
  return x;
}

TEST(SaeEncodeTest, HandExample) {
  auto p = hand_params();
  Vector<double> x(1);
  x << 1.5;
  EXPECT_NEAR(center(p, x)[0], 1.0, 1e-15);
  auto f = sae_encode(p, x);
  EXPECT_NEAR(f[0], 2.1, 1e-15);
  EXPECT_EQ(f[1], 0.0);
}

TEST(SaeDecodeTest, HandExampleAfterNormalization) {
  auto p = hand_params();
  p.normalize_decoder();
  EXPECT_NEAR(p.w_d(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(p.w_d(0, 1), 1.0, 1e-15);
  Vector<double> x(1);
  x << 1.5;
  // x_hat = 1 * 2.1 + 1 * 0 + 0.5
  EXPECT_NEAR(sae_decode(p, sae_encode(p, x))[0], 2.6, 1e-14);
}

TEST(SaeEncodeTest, InputAtDecoderBiasGivesZeroCode) {
  auto p = random_params(4, 8, Centering::kDecoderBias, 1);
  p.b_e.setZero();
  auto f = sae_encode(p, p.b_d);
  EXPECT_TRUE(f.isZero(0.0));
  Vector<double> zero = Vector<double>::Zero(8);
  EXPECT_TRUE(sae_decode(p, zero) == p.b_d);
}

TEST(SaeEncodeTest, CodesAreNonNegativeAndBatchMatchesSingle) {
  auto p = random_params(5, 12, Centering::kScalarMean, 2);
  auto x = random_batch(20, 5, 3);
  auto f = encode_batch(p, x);
  EXPECT_GE(f.minCoeff(), 0.0);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Vector<double> row = x.row(i).transpose();
    EXPECT_LT((sae_encode(p, row) - f.row(i).transpose()).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(SaeEncodeTest, CenteringModes) {
  auto p = SaeParams<double>::zeros(3, 2);
  p.b_d << 1, 0, 0;
  p.mu << 0, 2, 0;
  Vector<double> x(3);
  x << 3, 6, 9;
  EXPECT_EQ(center(p, x), (Vector<double>(3) << 2, 6, 9).finished());
  p.centering = Centering::kScalarMean;
  EXPECT_EQ(center(p, x), (Vector<double>(3) << -4, 0, 3).finished());
  p.centering = Centering::kDatasetMean;
  EXPECT_EQ(center(p, x), (Vector<double>(3) << 2, 4, 9).finished());
  EXPECT_EQ(centering_from_string(to_string(Centering::kScalarMean)), Centering::kScalarMean);
  EXPECT_THROW(centering_from_string("median"), ConfigError);
}

TEST(SaeEncodeTest, DimensionMismatch) {
  auto p = SaeParams<double>::zeros(3, 6);
  EXPECT_THROW(sae_encode(p, Vector<double>::Zero(4).eval()), ContractViolation);
  EXPECT_THROW(sae_decode(p, Vector<double>::Zero(5).eval()), ContractViolation);
}

TEST(SaeDecodeTest, IdentityDictionaryReconstructsExactly) {
  auto p = identity_params(6);
  auto x = random_batch(10, 6, 4);
  auto xhat = decode_batch(p, encode_batch(p, x));
  EXPECT_TRUE(xhat == x);
}

TEST(SaeLossTest, PerfectReconstructionWithSilentCodesIsZero) {
  auto p = random_params(4, 8, Centering::kDecoderBias, 5);
  p.b_e = -p.b_e.cwiseAbs();  // x == b_d makes z = b_e < 0
  Matrix<double> x = p.b_d.transpose().replicate(6, 1);
  auto l = sae_loss(p, x, 3e-4);
  EXPECT_EQ(l.total, 0.0);
  EXPECT_EQ(l.l0, 0.0);
}

TEST(SaeLossTest, MatchesStepByStepRecomputation) {
  auto p = random_params(4, 10, Centering::kDecoderBias, 6);
  auto x = random_batch(7, 4, 7);
  const double lambda = 3e-4;
  // Oracle: plain loops over tokens, features and coordinates.
  double mse = 0.0, l1 = 0.0;
  for (Eigen::Index b = 0; b < x.rows(); ++b) {
    std::vector<double> f(10);
    for (int j = 0; j < 10; ++j) {
      double z = p.b_e[j];
      for (int i = 0; i < 4; ++i) z += p.w_e(j, i) * (x(b, i) - p.b_d[i]);
      f[j] = z > 0 ? z : 0;
      l1 += std::abs(f[j]);
    }
    double err = 0.0;
    for (int i = 0; i < 4; ++i) {
      double xh = p.b_d[i];
      for (int j = 0; j < 10; ++j) xh += p.w_d(i, j) * f[j];
      err += (xh - x(b, i)) * (xh - x(b, i));
    }
    mse += err / 4.0;
  }
  mse /= 7.0;
  l1 /= 7.0;
  auto l = sae_loss(p, x, lambda);
  EXPECT_NEAR(l.mse, mse, 1e-10);
  EXPECT_NEAR(l.l1, l1, 1e-10);
  EXPECT_NEAR(l.total, mse + lambda * l1, 1e-10);
  EXPECT_EQ(l.total, l.mse + lambda * l.l1);
}

class SaeGradientModeTest : public ::testing::TestWithParam<Centering> {};

TEST_P(SaeGradientModeTest, MatchesFiniteDifferences) {
  const double lambda = 0.05;
  auto p = random_params(5, 12, GetParam(), 8);
  auto x = random_batch(9, 5, 9);
  auto g = sae_backward(p, x, lambda);
  auto views = p.views();
  auto gviews = g.grads.views();
  Rng rng(10);
  int checked = 0;
  double worst = 0.0;
  while (checked < 50) {
    const std::size_t t = std::uniform_int_distribution<std::size_t>(0, views.size() - 1)(rng);
    const std::size_t i =
        std::uniform_int_distribution<std::size_t>(0, views[t].data.size() - 1)(rng);
    const double h = 1e-6;
    const double orig = views[t].data[i];
    views[t].data[i] = orig + h;
    const double up = sae_loss(p, x, lambda).total;
    views[t].data[i] = orig - h;
    const double down = sae_loss(p, x, lambda).total;
    views[t].data[i] = orig;
    const double fd = (up - down) / (2 * h);
    // Skip coordinates whose perturbation crosses a ReLU kink.
    const double up_half = [&] {
      views[t].data[i] = orig + h / 2;
      const double v = sae_loss(p, x, lambda).total;
      views[t].data[i] = orig;
      return v;
    }();
    const double fd_half = (up_half - sae_loss(p, x, lambda).total) / (h / 2);
    if (std::abs(fd_half - fd) > 1e-3 * (std::abs(fd) + 1e-6)) continue;
    const double rel = relative_error(gviews[t].data[i], fd);
    worst = std::max(worst, rel);
    EXPECT_LE(rel, 1e-4) << views[t].name << "[" << i << "] analytic " << gviews[t].data[i]
                         << " fd " << fd;
    ++checked;
  }
  RecordProperty("worst_rel_err", std::to_string(worst));
}

INSTANTIATE_TEST_SUITE_P(AllModes, SaeGradientModeTest,
                         ::testing::Values(Centering::kDecoderBias, Centering::kScalarMean,
                                           Centering::kDatasetMean));

TEST(SaeGradientTest, DecoderBiasGradientHasCenteringPath) {
  auto p = random_params(4, 10, Centering::kDecoderBias, 11);
  auto x = random_batch(6, 4, 12);
  auto g = sae_backward(p, x, 0.0);
  // Decode path alone: d/d b_d of mean squared error through x_hat only.
  Matrix<double> xhat = decode_batch(p, encode_batch(p, x));
  Vector<double> decode_only = ((xhat - x) * (2.0 / (6.0 * 4.0))).colwise().sum().transpose();
  const double h = 1e-6;
  for (int i = 0; i < 4; ++i) {
    const double orig = p.b_d[i];
    p.b_d[i] = orig + h;
    const double up = sae_loss(p, x, 0.0).total;
    p.b_d[i] = orig - h;
    const double down = sae_loss(p, x, 0.0).total;
    p.b_d[i] = orig;
    const double fd = (up - down) / (2 * h);
    EXPECT_LE(relative_error(g.grads.b_d[i], fd), 1e-4);
  }
  EXPECT_GT((g.grads.b_d - decode_only).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(SaeGradientTest, PerfectReconstructionHasZeroMseGradient) {
  auto p = random_params(4, 8, Centering::kDecoderBias, 13);
  p.b_e = -p.b_e.cwiseAbs() - Vector<double>::Constant(8, 0.1);
  Matrix<double> x = p.b_d.transpose().replicate(5, 1);
  auto g = sae_backward(p, x, 0.0);
  for (const auto& v : g.grads.views()) {
    for (double d : v.data) EXPECT_EQ(d, 0.0) << v.name;
  }
}

// Activations that are sparse nonnegative combinations of a hidden dictionary.
ActivationSource<double> planted_source(std::size_t n, std::size_t k, std::uint64_t seed) {
  auto dict = std::make_shared<Matrix<double>>(random_batch(static_cast<Eigen::Index>(k),
                                                            static_cast<Eigen::Index>(n), seed));
  dict->rowwise().normalize();
  auto rng = std::make_shared<Rng>(seed + 1);
  return [dict, rng, k](std::size_t n_tokens) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Matrix<double> x = Matrix<double>::Zero(static_cast<Eigen::Index>(n_tokens), dict->cols());
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
      for (std::size_t j = 0; j < k; ++j) {
        if (u(*rng) < 0.1) x.row(t) += (0.5 + u(*rng)) * dict->row(static_cast<Eigen::Index>(j));
      }
    }
    return x;
  };
}

SaeConfig small_sae(double l1) {
  SaeConfig c;
  c.n = 8;
  c.expansion = 4;
  c.l1 = l1;
  c.lr = 3e-3;
  c.block_len = 8;
  c.batch_blocks = 8;
  c.train_tokens = 64 * 300;
  c.eval_every = 64 * 100;
  c.dead_window = 64 * 100;
  c.seed = 1;
  return c;
}

TEST(SaeTrainTest, DecoderStaysUnitNorm) {
  auto cfg = small_sae(3e-4);
  cfg.train_tokens = 64 * 20;
  cfg.eval_every = 64;
  std::size_t calls = 0;
  auto r = train_sae<double>(cfg, planted_source(8, 12, 1),
                             [&](SaeDiagnostics& d, const SaeParams<double>&) {
                               ++calls;
                               EXPECT_LT(d.max_decoder_norm_deviation, 1e-6);
                             });
  EXPECT_EQ(calls, 20u);
  EXPECT_LT(r.params.max_decoder_norm_deviation(), 1e-6);
  EXPECT_TRUE(r.params.all_finite());
}

TEST(SaeTrainTest, SparsityDecreasesWithL1AndMseFallsWithoutIt) {
  std::vector<double> l0;
  for (double lambda : {1e-4, 3e-4, 1e-3}) {
    auto r = train_sae<double>(small_sae(lambda), planted_source(8, 12, 2));
    l0.push_back(r.trace.back().mean_l0);
  }
  EXPECT_GE(l0[0], l0[1]);
  EXPECT_GE(l0[1], l0[2]);
  EXPECT_GT(l0[0], l0[2]) << l0[0] << " " << l0[1] << " " << l0[2];
  EXPECT_GT(l0[2], 0.0);

  auto free = train_sae<double>(small_sae(0.0), planted_source(8, 12, 2));
  EXPECT_LT(free.trace.back().mean_mse, 0.2 * free.trace.front().mean_mse);
  EXPECT_GE(free.trace.back().mean_l0, l0[2]);
}

TEST(SaeTrainTest, DeterministicAndReportsDeadFeatures) {
  auto cfg = small_sae(3e-4);
  cfg.train_tokens = 64 * 10;
  auto a = train_sae<double>(cfg, planted_source(8, 12, 3));
  auto b = train_sae<double>(cfg, planted_source(8, 12, 3));
  EXPECT_TRUE(a.params.w_e == b.params.w_e);
  EXPECT_TRUE(a.params.w_d == b.params.w_d);
  // A source of all zeros leaves codes z = b_e = 0: nothing fires, all dead.
  auto zero = [](std::size_t n) { return Matrix<double>::Zero(static_cast<Eigen::Index>(n), 8).eval(); };
  auto z = train_sae<double>(cfg, zero);
  EXPECT_EQ(z.trace.back().dead_features.size(), cfg.m());
}

TEST(SaeTrainTest, WidthMismatchIsRejected) {
  auto cfg = small_sae(3e-4);
  EXPECT_THROW(train_sae<double>(cfg, planted_source(6, 4, 1)), ContractViolation);
}

lm::LMConfig tiny_lm() {
  lm::LMConfig c;
  c.vocab_size = 20;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_mlp = 6;
  c.ctx_len = 16;
  c.init_std = 0.5;
  c.seed = 4;
  return c;
}

std::vector<std::vector<TokenId>> random_blocks(std::size_t n, std::size_t len, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<TokenId> d(0, 19);
  std::vector<std::vector<TokenId>> out(n, std::vector<TokenId>(len));
  for (auto& b : out) {
    for (auto& t : b) t = d(rng);
  }
  return out;
}

TEST(ExplainedLossTest, IdentityReconstructorExplainsEverything) {
  auto lm_params = lm::init_params<double>(tiny_lm());
  auto blocks = random_blocks(4, 12, 1);
  auto e = explained_loss(lm_params, identity_params(6), blocks, 1000);
  EXPECT_NEAR(e.raw, 1.0, 1e-9);
  EXPECT_NEAR(e.substituted, e.clean, 1e-12);
}

TEST(ExplainedLossTest, SilentReconstructorExplainsNothing) {
  auto lm_params = lm::init_params<double>(tiny_lm());
  auto blocks = random_blocks(4, 12, 2);
  auto dead = SaeParams<double>::zeros(6, 12);
  auto e = explained_loss(lm_params, dead, blocks, 1000);
  EXPECT_EQ(e.substituted, e.ablated);
  EXPECT_EQ(e.raw, 0.0);
}

TEST(ExplainedLossTest, DegenerateDenominatorIsUndefined) {
  auto cfg = tiny_lm();
  auto lm_params = lm::init_params<double>(cfg);
  lm_params.w_down.setZero();  // MLP has no effect
  EXPECT_THROW(explained_loss(lm_params, identity_params(6), random_blocks(2, 8, 3), 100),
               UndefinedMetric);
  EXPECT_THROW(explained_loss(lm_params, identity_params(5), random_blocks(2, 8, 3), 100),
               ContractViolation);
}

TEST(ActivationSourceTest, MatchesForwardCaptureAndIsDeterministic) {
  auto cfg = tiny_lm();
  auto params = lm::init_params<double>(cfg);
  SourceDocuments s;
  s.name = "s";
  s.train = random_blocks(5, 40, 4);
  auto corpus = TokenizedCorpus::from_documents({s}, {1.0}, 1);
  auto a = lm_activation_source(params, corpus, 8, 7);
  auto b = lm_activation_source(params, corpus, 8, 7);
  auto xa = a(32);
  auto xb = b(32);
  ASSERT_EQ(xa.rows(), 32);
  ASSERT_EQ(xa.cols(), 6);
  EXPECT_TRUE(xa == xb);
  EXPECT_FALSE(a(32) == xa);  // successive draws differ

  auto blocks = sample_blocks(corpus, Split::kTrain, 8, 32, mix_seed(7, 0));
  lm::ForwardOptions<double> opt;
  opt.capture_mlp_post = true;
  auto fwd = lm::forward(params, std::span<const TokenId>(blocks[0].tokens), opt);
  EXPECT_TRUE(xa.topRows(8) == *fwd.mlp_post);
}

}  // namespace
}  // namespace featflow::sae
