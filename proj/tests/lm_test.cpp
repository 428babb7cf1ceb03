#include "featflow/lm.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "featflow/rng.hpp"
#include "test_util.hpp"

namespace featflow::lm {
namespace {

LMConfig tiny_config() {
  LMConfig c;
  c.vocab_size = 32;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_mlp = 16;
  c.ctx_len = 16;
  c.seed = 7;
  return c;
}

std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<TokenId> d(0, static_cast<TokenId>(vocab - 1));
  std::vector<TokenId> out(n);
  for (auto& t : out) t = d(rng);
  return out;
}

TEST(LMInitTest, DeterministicGivenSeed) {
  auto a = init_params<double>(tiny_config());
  auto b = init_params<double>(tiny_config());
  auto va = a.views();
  auto vb = b.views();
  for (std::size_t i = 0; i < va.size(); ++i) {
    EXPECT_TRUE(std::equal(va[i].data.begin(), va[i].data.end(), vb[i].data.begin())) << va[i].name;
  }
  auto cfg = tiny_config();
  cfg.seed = 8;
  EXPECT_NE(init_params<double>(cfg).embed, a.embed);
}

TEST(LMInitTest, ParameterCountMatchesClosedForm) {
  // 32*8 + 8 + 4*8*8 + 8 + 3*8*16 + 8 + 8*32, summed by hand
  constexpr std::size_t kHandCount = 256 + 8 + 256 + 8 + 384 + 8 + 256;
  auto p = init_params<double>(tiny_config());
  std::size_t total = 0;
  for (const auto& v : p.views()) {
    EXPECT_EQ(static_cast<std::size_t>(v.rows * v.cols), v.data.size());
    total += v.data.size();
  }
  EXPECT_EQ(total, kHandCount);
  EXPECT_EQ(parameter_count(tiny_config()), kHandCount);
}

TEST(LMInitTest, NormGainsStartAtOne) {
  auto p = init_params<float>(tiny_config());
  EXPECT_TRUE((p.attn_norm.array() == 1.0f).all());
  EXPECT_TRUE((p.mlp_norm.array() == 1.0f).all());
  EXPECT_TRUE((p.final_norm.array() == 1.0f).all());
  EXPECT_TRUE(p.all_finite());
}

TEST(LMConfigTest, RejectsIndivisibleHeads) {
  auto c = tiny_config();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(LMForwardTest, CausalMaskKeepsEarlierLogitsBitIdentical) {
  auto p = init_params<double>(tiny_config());
  auto tokens = random_tokens(12, 32, 1);
  auto before = forward(p, tokens).logits;
  tokens.back() = (tokens.back() + 5) % 32;
  auto after = forward(p, tokens).logits;
  for (Eigen::Index i = 0; i + 1 < before.rows(); ++i) {
    for (Eigen::Index j = 0; j < before.cols(); ++j) ASSERT_EQ(before(i, j), after(i, j));
  }
  EXPECT_NE(before.row(before.rows() - 1), after.row(after.rows() - 1));
}

TEST(LMForwardTest, EveryPrefixPerturbationIsCausal) {
  auto p = init_params<double>(tiny_config());
  auto tokens = random_tokens(10, 32, 2);
  auto base = forward(p, tokens).logits;
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    auto changed = tokens;
    changed[k] = (changed[k] + 1) % 32;
    auto out = forward(p, changed).logits;
    EXPECT_EQ(out.topRows(static_cast<Eigen::Index>(k)), base.topRows(static_cast<Eigen::Index>(k)));
  }
}

TEST(LMForwardTest, MlpPostTapHasMlpWidthAndDoesNotPerturb) {
  auto cfg = tiny_config();
  cfg.d_mlp = 1024;
  auto p = init_params<float>(cfg);
  auto tokens = random_tokens(9, 32, 3);
  ForwardOptions<float> tap;
  tap.capture_mlp_post = true;
  auto with = forward(p, tokens, tap);
  auto without = forward(p, tokens);
  ASSERT_TRUE(with.mlp_post.has_value());
  EXPECT_EQ(with.mlp_post->rows(), 9);
  EXPECT_EQ(with.mlp_post->cols(), 1024);
  EXPECT_TRUE(with.logits == without.logits);
}

TEST(LMForwardTest, RejectsLongSequencesAndBadIds) {
  auto p = init_params<double>(tiny_config());
  EXPECT_THROW(forward(p, random_tokens(17, 32, 1)), ContractViolation);
  std::vector<TokenId> bad{1, 2, 32};
  EXPECT_THROW(forward(p, bad), ContractViolation);
}

TEST(LMForwardTest, ZeroedMlpPostEqualsZeroedDownProjection) {
  auto p = init_params<double>(tiny_config());
  auto tokens = random_tokens(8, 32, 4);
  ForwardOptions<double> ablate;
  ablate.edit_mlp_post = [](Matrix<double>& m) { m.setZero(); };
  auto q = p;
  q.w_down.setZero();
  EXPECT_TRUE(forward(p, tokens, ablate).logits.isApprox(forward(q, tokens).logits, 1e-14));
}

TEST(LMLossTest, UniformLogitsGiveLogVocab) {
  Matrix<double> logits = Matrix<double>::Constant(5, 4096, 0.25);
  std::vector<TokenId> targets{0, 17, 4095, 3, 2048};
  EXPECT_NEAR(lm_loss(logits, targets), std::log(4096.0), 1e-12);
}

TEST(LMLossTest, LossVanishesWithGrowingMargin) {
  std::vector<TokenId> targets{2, 0};
  double previous = std::numeric_limits<double>::infinity();
  for (double margin : {1.0, 5.0, 20.0, 50.0}) {
    Matrix<double> logits = Matrix<double>::Zero(2, 6);
    logits(0, 2) = margin;
    logits(1, 0) = margin;
    const double loss = lm_loss(logits, targets);
    EXPECT_LT(loss, previous);
    previous = loss;
  }
  EXPECT_LT(previous, 1e-15 + 6 * std::exp(-50.0));
}

TEST(LMLossTest, MatchesIndependentSoftmaxCrossEntropy) {
  auto p = init_params<double>(tiny_config());
  auto tokens = random_tokens(13, 32, 5);
  std::span<const TokenId> all(tokens);
  auto logits = forward(p, all.first(12)).logits;
  // straightforward re-computation: probabilities first, then -log p(target)
  double oracle = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double z = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) z += std::exp(logits(i, j));
    oracle += -std::log(std::exp(logits(i, tokens[static_cast<std::size_t>(i) + 1])) / z);
  }
  oracle /= static_cast<double>(logits.rows());
  EXPECT_NEAR(lm_loss(logits, all.subspan(1)), oracle, 1e-10);
}

TEST(LMLossTest, IgnoredTargetsAreMasked) {
  Matrix<double> logits = Matrix<double>::Zero(3, 4);
  logits(0, 1) = 3.0;
  std::vector<TokenId> targets{1, 3, 3};
  std::vector<TokenId> only_first{1};
  EXPECT_NEAR(lm_loss(logits, targets, TokenId{3}), lm_loss<double>(logits.topRows(1), only_first),
              1e-15);
}

TEST(LMAccuracyTest, ConstantCopyModelIsPerfectOnItsToken) {
  auto cfg = tiny_config();
  auto p = LMParams<double>::zeros(cfg);
  p.attn_norm.setOnes();
  p.mlp_norm.setOnes();
  p.final_norm.setOnes();
  p.embed.col(0).setOnes();
  p.unembed(0, 5) = 1.0;
  std::vector<std::vector<TokenId>> blocks(3, std::vector<TokenId>(16, 5));
  EXPECT_DOUBLE_EQ(next_token_accuracy(p, blocks, 45), 1.0);
}

TEST(LMAccuracyTest, UntrainedModelIsAtChance) {
  auto cfg = tiny_config();
  cfg.vocab_size = 4096;
  cfg.ctx_len = 64;
  auto p = init_params<float>(cfg);
  std::vector<std::vector<TokenId>> blocks;
  for (int b = 0; b < 128; ++b) blocks.push_back(random_tokens(65, 4096, 100 + b));
  const double acc = next_token_accuracy(p, blocks, 128 * 64);
  // expected 2 hits out of 8192; 12 would be a >4 sigma excursion
  EXPECT_LE(acc * 8192, 12.0);
}

TEST(LMAccuracyTest, ArgmaxIgnoresConstantShift) {
  auto p = init_params<double>(tiny_config());
  auto tokens = random_tokens(16, 32, 9);
  std::span<const TokenId> all(tokens);
  auto logits = forward(p, all.first(15)).logits;
  Matrix<double> shifted = logits.array() + 3.0;
  EXPECT_EQ(count_correct(logits, all.subspan(1)).correct,
            count_correct(shifted, all.subspan(1)).correct);
}

// ---------------------------------------------------------------------------
// Gradients

LMConfig grad_config() {
  auto c = tiny_config();
  c.init_std = 0.4;  // larger weights so every gradient is well above FD noise
  return c;
}

double batch_mean_loss(const LMParams<double>& p, const std::vector<std::vector<TokenId>>& blocks) {
  LossAndCount total;
  for (const auto& b : blocks) {
    auto l = block_loss(p, b);
    total.loss_sum += l.loss_sum;
    total.count += l.count;
  }
  return total.mean();
}

TEST(LMBackwardTest, GradientShapesMatchParameters) {
  auto p = init_params<double>(grad_config());
  std::vector<std::vector<TokenId>> blocks{random_tokens(10, 32, 1)};
  auto g = backward(p, blocks);
  auto pv = p.views();
  auto gv = g.grads.views();
  ASSERT_EQ(pv.size(), gv.size());
  for (std::size_t i = 0; i < pv.size(); ++i) {
    EXPECT_EQ(pv[i].name, gv[i].name);
    EXPECT_EQ(pv[i].rows, gv[i].rows);
    EXPECT_EQ(pv[i].cols, gv[i].cols);
  }
  EXPECT_NEAR(g.loss.mean(), batch_mean_loss(p, blocks), 1e-12);
}

TEST(LMBackwardTest, MatchesCentralFiniteDifferences) {
  auto p = init_params<double>(grad_config());
  std::vector<std::vector<TokenId>> blocks{random_tokens(12, 32, 11), random_tokens(9, 32, 12)};
  auto g = backward(p, blocks);

  Rng rng(2024);
  auto pv = p.views();
  auto gv = g.grads.views();
  int checked = 0;
  double worst = 0.0;
  while (checked < 60) {
    std::uniform_int_distribution<std::size_t> pick_tensor(0, pv.size() - 1);
    const std::size_t t = pick_tensor(rng);
    std::uniform_int_distribution<std::size_t> pick_index(0, pv[t].data.size() - 1);
    const std::size_t i = pick_index(rng);
    const double analytic = gv[t].data[i];
    if (t == 0 && analytic == 0.0) continue;  // unused embedding row
    const double orig = pv[t].data[i];
    const double h = 1e-5 * std::max(1.0, std::abs(orig));
    pv[t].data[i] = orig + h;
    const double up = batch_mean_loss(p, blocks);
    pv[t].data[i] = orig - h;
    const double down = batch_mean_loss(p, blocks);
    pv[t].data[i] = orig;
    const double numeric = (up - down) / (2 * h);
    const double err = featflow::testing::relative_error(analytic, numeric);
    worst = std::max(worst, err);
    EXPECT_LE(err, 1e-4) << pv[t].name << "[" << i << "] analytic " << analytic << " numeric "
                         << numeric;
    ++checked;
  }
  RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(LMBackwardTest, UnusedVocabularyRowsGetZeroGradient) {
  auto p = init_params<double>(grad_config());
  std::vector<std::vector<TokenId>> blocks{{1, 2, 3, 1, 2, 3, 4}};
  auto g = backward(p, blocks);
  for (TokenId t = 0; t < 32; ++t) {
    const bool used_as_input = t >= 1 && t <= 3;
    if (!used_as_input) {
      EXPECT_TRUE(g.grads.embed.row(t).isZero(0.0)) << "token " << t;
    } else {
      EXPECT_FALSE(g.grads.embed.row(t).isZero(0.0)) << "token " << t;
    }
  }
}

TEST(LMBackwardTest, FloatAndDoubleAgree) {
  auto pd = init_params<double>(grad_config());
  auto pf = pd.cast<float>();
  std::vector<std::vector<TokenId>> blocks{random_tokens(12, 32, 31)};
  auto gd = backward(pd, blocks);
  auto gf = backward(pf, blocks);
  EXPECT_NEAR(gd.loss.mean(), gf.loss.mean(), 1e-4);
  EXPECT_TRUE(gf.grads.w_up.cast<double>().isApprox(gd.grads.w_up, 1e-3));
}

}  // namespace
}  // namespace featflow::lm
