#include "featflow/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "test_util.hpp"

namespace featflow::train {
namespace {

constexpr TokenId kEos = 30;

lm::LMConfig tiny_config() {
  lm::LMConfig c;
  c.vocab_size = 32;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_mlp = 32;
  c.ctx_len = 16;
  c.init_std = 0.1;
  c.seed = 3;
  return c;
}

// next = (prev + stride) mod 10, repeated to `len` tokens
std::vector<TokenId> cycle_doc(TokenId stride, std::size_t len, TokenId start = 0) {
  std::vector<TokenId> d(len);
  TokenId t = start;
  for (auto& x : d) {
    x = t;
    t = (t + stride) % 10;
  }
  return d;
}

TokenizedCorpus cycle_corpus(std::vector<std::pair<std::string, TokenId>> specs) {
  std::vector<SourceDocuments> sources;
  for (auto& [name, stride] : specs) {
    SourceDocuments s;
    s.name = name;
    for (TokenId k = 0; k < 4; ++k) s.train.push_back(cycle_doc(stride, 300, k));
    s.validation.push_back(cycle_doc(stride, 400, 5));
    sources.push_back(std::move(s));
  }
  std::vector<double> w(sources.size(), 1.0 / static_cast<double>(sources.size()));
  return TokenizedCorpus::from_documents(std::move(sources), w, 11);
}

TrainConfig small_train(std::size_t tokens) {
  TrainConfig c;
  c.total_tokens = tokens;
  c.batch_blocks = 4;
  c.adam.lr = 1e-2;
  c.eval_every = tokens / 2;
  c.eval_tokens = 256;
  c.seed = 5;
  c.eos = kEos;
  c.ignore = std::nullopt;
  return c;
}

TEST(AdamTest, ZeroGradientLeavesParametersUnchanged) {
  std::vector<double> p{1.0, -2.0, 3.5};
  std::vector<double> g(3, 0.0);
  std::vector<TensorView<double>> pv{{"w", p, 1, 3}};
  std::vector<TensorView<const double>> gv{{"w", g, 1, 3}};
  auto state = AdamState<double>::init(pv, AdamConfig{});
  for (int i = 0; i < 5; ++i) adam_step(pv, gv, state);
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0, 3.5}));
  EXPECT_EQ(state.step, 5u);
}

TEST(AdamTest, FirstStepMatchesHandComputation) {
  std::vector<double> p{1.0};
  std::vector<double> g{0.5};
  std::vector<TensorView<double>> pv{{"w", p, 1, 1}};
  std::vector<TensorView<const double>> gv{{"w", g, 1, 1}};
  AdamConfig cfg{0.1, 0.9, 0.999, 1e-8};
  auto state = AdamState<double>::init(pv, cfg);
  adam_step(pv, gv, state);
  // m = 0.05, v = 0.00025; bias corrected: 0.5 and 0.25, so the step is 0.1 * 0.5 / (0.5 + 1e-8)
  EXPECT_NEAR(p[0], 0.900000002, 1e-12);
}

TEST(AdamTest, MultiStepMatchesReferenceLoop) {
  AdamConfig cfg{0.05, 0.8, 0.99, 1e-6};
  std::vector<double> p{0.3, -0.7};
  std::vector<double> g(2);
  std::vector<TensorView<double>> pv{{"w", p, 1, 2}};
  std::vector<TensorView<const double>> gv{{"w", g, 1, 2}};
  auto state = AdamState<double>::init(pv, cfg);

  double ref[2] = {0.3, -0.7}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 6; ++t) {
    for (int i = 0; i < 2; ++i) g[i] = std::sin(t * (i + 1.0)) + 0.1 * ref[i];
    for (int i = 0; i < 2; ++i) {
      m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(cfg.beta1, t));
      const double vh = v[i] / (1 - std::pow(cfg.beta2, t));
      ref[i] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    }
    adam_step(pv, gv, state);
  }
  EXPECT_NEAR(p[0], ref[0], 1e-12);
  EXPECT_NEAR(p[1], ref[1], 1e-12);
}

TEST(AdamTest, NonFiniteGradientNamesTensorAndLeavesState) {
  std::vector<double> a{1.0}, b{2.0};
  std::vector<double> ga{0.1}, gb{std::numeric_limits<double>::quiet_NaN()};
  std::vector<TensorView<double>> pv{{"alpha", a, 1, 1}, {"beta", b, 1, 1}};
  std::vector<TensorView<const double>> gv{{"alpha", ga, 1, 1}, {"beta", gb, 1, 1}};
  auto state = AdamState<double>::init(pv, AdamConfig{});
  try {
    adam_step(pv, gv, state);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("beta"), std::string::npos);
  }
  EXPECT_EQ(a[0], 1.0);
  EXPECT_EQ(b[0], 2.0);
  EXPECT_EQ(state.step, 0u);
}

TEST(ClipTest, ScalesOnlyAboveThreshold) {
  std::vector<double> x{3.0}, y{4.0};
  std::vector<TensorView<double>> v{{"x", x, 1, 1}, {"y", y, 1, 1}};
  EXPECT_DOUBLE_EQ(clip_global_norm(v, 10.0), 5.0);
  EXPECT_EQ(x[0], 3.0);
  EXPECT_DOUBLE_EQ(clip_global_norm(v, 1.0), 5.0);
  EXPECT_NEAR(x[0], 0.6, 1e-15);
  EXPECT_NEAR(y[0], 0.8, 1e-15);
}

TEST(EvaluateTest, ZeroModelAccuracyIsFrequencyOfTokenZero) {
  // All-zero weights give all-zero logits; argmax ties resolve to id 0.
  auto params = lm::LMParams<double>::zeros(tiny_config());
  EvalStream s{"s", {{0, 1, 0, 0, 2, 0, 3, 1, 0}, {4, 0, 0, 5, 6}}};
  auto m = evaluate(params, {s}, 100);
  std::size_t zeros = 0, total = 0;
  for (const auto& b : s.blocks) {
    for (std::size_t i = 1; i < b.size(); ++i) {
      zeros += b[i] == 0;
      ++total;
    }
  }
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m[0].tokens, total);
  EXPECT_DOUBLE_EQ(m[0].accuracy, static_cast<double>(zeros) / static_cast<double>(total));
  EXPECT_NEAR(m[0].loss, std::log(32.0), 1e-12);
}

TEST(EvaluateTest, StopsAtTokenBudget) {
  auto params = lm::init_params<double>(tiny_config());
  EvalStream s{"s", {cycle_doc(1, 11), cycle_doc(1, 11), cycle_doc(1, 11)}};
  auto m = evaluate(params, {s}, 25);
  EXPECT_EQ(m[0].tokens, 25u);
  auto again = evaluate(params, {s}, 25);
  EXPECT_EQ(m[0].loss, again[0].loss);
  EXPECT_EQ(m[0].accuracy, again[0].accuracy);
}

TEST(TrainTest, MemorizesACycle) {
  auto corpus = cycle_corpus({{"cycle", 1}});
  auto evals = validation_streams(corpus, 17, 256, 1, kEos);
  auto r = train_lm<double>(small_train(12'000), tiny_config(), corpus, evals);
  ASSERT_GE(r.trace.size(), 3u);
  EXPECT_LT(r.trace.front().streams[0].accuracy, 0.5);
  EXPECT_GE(r.trace.back().streams[0].accuracy, 0.99);
  EXPECT_LT(r.trace.back().streams[0].loss, r.trace.front().streams[0].loss);
}

TEST(TrainTest, TraceScheduleAndDeterminism) {
  auto corpus = cycle_corpus({{"cycle", 1}});
  auto evals = validation_streams(corpus, 17, 64, 1, kEos);
  auto cfg = small_train(1'280);
  std::size_t callbacks = 0;
  auto a = train_lm<double>(cfg, tiny_config(), corpus, evals, std::nullopt,
                            [&](const EvalRecord&, const lm::LMParams<double>&) { ++callbacks; });
  auto b = train_lm<double>(cfg, tiny_config(), corpus, evals);
  ASSERT_EQ(a.trace.size(), 3u);
  EXPECT_EQ(callbacks, 3u);
  EXPECT_EQ(a.trace[0].tokens_seen, 0u);
  EXPECT_EQ(a.trace[1].tokens_seen, 640u);
  EXPECT_EQ(a.trace[2].tokens_seen, 1'280u);
  auto va = a.params.views();
  auto vb = b.params.views();
  for (std::size_t i = 0; i < va.size(); ++i) {
    EXPECT_TRUE(std::equal(va[i].data.begin(), va[i].data.end(), vb[i].data.begin())) << va[i].name;
  }
}

TEST(TrainTest, ZeroTokensWithInitReturnsInit) {
  auto corpus = cycle_corpus({{"cycle", 1}});
  auto init = lm::init_params<double>(tiny_config());
  auto cfg = small_train(0);
  cfg.eval_every = 1;
  auto r = train_lm<double>(cfg, tiny_config(), corpus, {}, init);
  EXPECT_TRUE(r.params.embed == init.embed);
  EXPECT_TRUE(r.params.unembed == init.unembed);
  EXPECT_THROW(train_lm<double>(cfg, tiny_config(), corpus, {}), ConfigError);
}

TEST(TrainTest, MismatchedInitIsRejected) {
  auto corpus = cycle_corpus({{"cycle", 1}});
  auto other = tiny_config();
  other.d_mlp = 64;
  EXPECT_THROW(train_lm<double>(small_train(128), tiny_config(), corpus, {},
                                lm::init_params<double>(other)),
               ConfigError);
}

TEST(TrainTest, NonFiniteLossReportsLastGoodParameters) {
  auto corpus = cycle_corpus({{"cycle", 1}});
  auto init = lm::init_params<double>(tiny_config());
  init.unembed(0, 0) = std::numeric_limits<double>::infinity();
  try {
    train_lm<double>(small_train(256), tiny_config(), corpus, {}, init);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError<double>& e) {
    EXPECT_TRUE(std::isinf(e.last_good().unembed(0, 0)));
    EXPECT_TRUE(e.last_good().embed == init.embed);
  }
}

TEST(TrainTest, FineTuningSpecializesToItsDomain) {
  auto corpus = cycle_corpus({{"plus1", 1}, {"plus3", 3}});
  auto evals = validation_streams(corpus, 17, 256, 1, kEos);
  auto base = train_lm<double>(small_train(2'048), tiny_config(), corpus, evals);
  const std::string only[] = {"plus1"};
  auto ft = train_lm<double>(small_train(6'144), tiny_config(), corpus.subset(only), evals,
                             base.params);
  const auto& b = base.trace.back().streams;
  const auto& f = ft.trace.back().streams;
  EXPECT_GT(f[0].accuracy, b[0].accuracy);
  EXPECT_GT(f[0].accuracy, f[1].accuracy);
}

}  // namespace
}  // namespace featflow::train
