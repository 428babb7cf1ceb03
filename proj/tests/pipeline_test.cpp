#include "featflow/pipeline.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include "featflow/io.hpp"
#include "featflow/report.hpp"
#include "test_util.hpp"

namespace featflow::pipeline {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

/// A lineage small enough to run end to end in a few seconds.
json tiny_config(const fs::path& out) {
  const json train = {{"total_tokens", 3000}, {"batch_blocks", 4}, {"lr", 0.01}, {"eval_every", 3000},
                      {"eval_tokens", 256}};
  return {
      {"out_dir", out.string()},
      {"seed", 7},
      {"tokenizer", {{"vocab_size", 300}, {"sample_docs", 100}}},
      {"sources",
       {{{"name", "english"}, {"synthetic", "english_like"}, {"docs", 300}, {"seed", 1}},
        {{"name", "code"}, {"synthetic", "code_like"}, {"docs", 300}, {"seed", 2}}}},
      {"model", {{"d_model", 16}, {"n_heads", 2}, {"d_mlp", 32}, {"ctx_len", 16}}},
      {"lineage",
       {{"base", {{"name", "base"}, {"sources", {"english", "code"}}, {"train", train}}},
        {"finetunes",
         {{{"name", "ft_a"}, {"parent", "base"}, {"sources", {"english"}}, {"train", train}},
          {{"name", "ft_b"}, {"parent", "base"}, {"sources", {"code"}}, {"train", train}}}},
        {"merge",
         {{"a", "ft_a"}, {"b", "ft_b"}, {"eval_a", "english"}, {"eval_b", "code"}, {"grid_points", 5},
          {"eval_tokens", 256}}}}},
      {"sae",
       {{"expansion", 2}, {"l1", 1e-3}, {"lr", 1e-3}, {"block_len", 8}, {"batch_blocks", 8},
        {"train_tokens", 2048}, {"eval_every", 1024}, {"dead_window", 1024}}},
      {"sae_eval_tokens", 256},
      {"collect", {{"tokens", 1000}, {"block_len", 16}}},
      {"hypotheses", {{{"name", "digits"}, {"strings", {"0", "1", "2", "3", "4", "5", "6", "7", "8", "9"}}}}},
      {"llr", {{"top", 3}}},
      {"autointerp", {{"model", "stub-model"}, {"features", 2}, {"k_explain", 6}, {"k_score", 6}}},
      {"report", {{"features", 2}, {"window", 12}}},
  };
}

fs::path write_config(const fs::path& dir, const json& j) {
  const auto p = dir / "config.json";
  io::write_atomic(p, j.dump(2));
  return p;
}

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

CliResult cli(const fs::path& config, const std::string& args) {
  const auto tag = std::to_string(::getpid());
  const auto out = fs::temp_directory_path() / ("featflow_cli_stdout_" + tag + ".txt");
  const auto err = fs::temp_directory_path() / ("featflow_cli_stderr_" + tag + ".txt");
  const std::string cmd = std::string(FEATFLOW_CLI) + " --config '" + config.string() + "' " + args + " > '" +
                          out.string() + "' 2> '" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = io::read_file(out);
  r.err = io::read_file(err);
  fs::remove(out);
  fs::remove(err);
  return r;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = io::read_file(e.path());
  }
  return files;
}

std::string chat_body(const std::string& content) {
  return json{{"model", "stub-model"},
              {"choices", json::array({{{"message", {{"role", "assistant"}, {"content", content}}}}})}}
      .dump();
}

// Explains every feature as digit-driven and predicts 10 for digit tokens.
class DigitTransport : public autointerp::Transport {
 public:
  std::string post(const std::string& body) override {
    ++calls;
    const std::string user = json::parse(body)["messages"][1]["content"];
    if (user.find("predict the feature's activation") == std::string::npos) {
      return chat_body("Fires on digits.");
    }
    std::istringstream in(user);
    std::string out;
    for (std::string line; std::getline(in, line);) {
      const auto tab = line.find('\t');
      if (tab == std::string::npos || line.empty() || !std::isdigit(static_cast<unsigned char>(line[0]))) continue;
      const std::string tok = json::parse(line.substr(tab + 1));
      const bool digit = !tok.empty() && std::isdigit(static_cast<unsigned char>(tok[0]));
      out += line.substr(0, tab) + "\t" + (digit ? "10" : "0") + "\n";
    }
    return chat_body(out);
  }
  int calls = 0;
};

// One full CLI run shared by the end-to-end tests.
class CliPipelineTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("pipeline");
    config_ = write_config(dir_->path(), tiny_config(dir_->path() / "run"));
    first_ = cli(config_, "--quiet run-all");
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path out() { return dir_->path() / "run"; }

  static TempDir* dir_;
  static fs::path config_;
  static CliResult first_;
};

TempDir* CliPipelineTest::dir_ = nullptr;
fs::path CliPipelineTest::config_;
CliResult CliPipelineTest::first_;

TEST_F(CliPipelineTest, RunAllEmitsFourEdgeFlowGraph) {
  ASSERT_EQ(first_.code, 0) << first_.err;
  const auto sankey = json::parse(io::read_file(out() / "flow" / "sankey.json"));
  EXPECT_NO_THROW(report::validate_sankey(sankey));
  EXPECT_EQ(sankey["nodes"].size(), 4u);
  ASSERT_EQ(sankey["links"].size(), 4u);
  const auto lineage = json::parse(io::read_file(out() / "flow" / "lineage.json"));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(sankey["links"][i]["value"], lineage["edges"][i]["persisting"]);
  }
  for (const char* f : {"tokenizer.txt", "models/merged/lm.ckpt", "models/ft_b/activations.fam", "llr.jsonl",
                        "merge/sweep.csv", "reports/index.html", "reports/sweep.html"}) {
    EXPECT_TRUE(fs::exists(out() / f)) << f;
  }
}

TEST_F(CliPipelineTest, ArtifactsCarryInputDigests) {
  ASSERT_EQ(first_.code, 0) << first_.err;
  const auto base = io::load_lm(out() / "models" / "base" / "lm.ckpt");
  const auto ft = io::load_lm(out() / "models" / "ft_a" / "lm.ckpt");
  const auto merged = io::load_lm(out() / "models" / "merged" / "lm.ckpt");
  const auto ft_b = io::load_lm(out() / "models" / "ft_b" / "lm.ckpt");
  EXPECT_EQ(ft.lineage.parents, std::vector<std::uint64_t>{base.digest});
  EXPECT_EQ(merged.lineage.parents, (std::vector<std::uint64_t>{ft.digest, ft_b.digest}));
  const auto sae = io::load_sae(out() / "models" / "merged" / "sae.ckpt");
  EXPECT_EQ(sae.lineage.parents, std::vector<std::uint64_t>{merged.digest});
  json prov;
  io::load_matrix(out() / "models" / "merged" / "activations.fam", &prov);
  EXPECT_EQ(prov["sae"], to_hex(sae.digest));
  EXPECT_EQ(prov["lm"], to_hex(merged.digest));
}

TEST_F(CliPipelineTest, MergeSelectPrintsPercent) {
  ASSERT_EQ(first_.code, 0) << first_.err;
  const auto r = cli(config_, "--quiet merge-select");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto sel = json::parse(io::read_file(out() / "merge" / "selection.json"));
  const std::string pct = sel["t_star_percent"];
  EXPECT_EQ(pct, report::percent(sel["t_star"].get<double>()));
  EXPECT_NE(r.out.find("t_star " + pct), std::string::npos) << r.out;
}

TEST_F(CliPipelineTest, SelfLineageClassifiesEveryLiveFeatureAsPersisting) {
  ASSERT_EQ(first_.code, 0) << first_.err;
  ASSERT_EQ(cli(config_, "--quiet correlate --parent ft_a --child ft_a").code, 0);
  const auto r = cli(config_, "--quiet classify --parent ft_a --child ft_a");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto summary = json::parse(r.out);
  EXPECT_EQ(summary[0]["persisting_share_of_live_children"], 1.0);
  const auto cls = json::parse(io::read_file(out() / "flow" / "ft_a__ft_a.classification.json"));
  EXPECT_GT(cls["persisting"].size(), 10u);
  EXPECT_EQ(cls["counts"]["emerging"], 0);
  EXPECT_EQ(cls["counts"]["disappearing"], 0);
  for (const auto& p : cls["persisting"]) {
    EXPECT_EQ(p[0], p[1]);
    EXPECT_NEAR(p[2].get<double>(), 1.0, 1e-12);
  }
}

TEST_F(CliPipelineTest, RerunIsByteIdentical) {
  ASSERT_EQ(first_.code, 0) << first_.err;
  // Drop the extra pair written by the self-lineage test so both snapshots cover the same run.
  for (const auto& f : {"ft_a__ft_a.matches.json", "ft_a__ft_a.classification.json"}) {
    fs::remove(out() / "flow" / f);
  }
  const auto before = snapshot(out());
  const auto r = cli(config_, "--quiet run-all");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto after = snapshot(out());
  ASSERT_EQ(before.size(), after.size());
  for (const auto& [name, bytes] : before) {
    EXPECT_TRUE(after.at(name) == bytes) << name << " changed";
  }
}

TEST_F(CliPipelineTest, ExplainWithoutFixturesIsAProviderError) {
  ASSERT_EQ(first_.code, 0) << first_.err;
  const auto r = cli(config_, "explain --model base");
  EXPECT_EQ(r.code, 5) << r.err;
  EXPECT_NE(r.err.find("record mode"), std::string::npos) << r.err;
}

TEST(CliTest, MissingArtifactNamesItsProducer) {
  TempDir dir("cli");
  const auto config = write_config(dir.path(), tiny_config(dir.path() / "run"));
  auto r = cli(config, "lm-train");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("featflow tokenizer-train"), std::string::npos) << r.err;
  r = cli(config, "merge-select");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("featflow merge-sweep"), std::string::npos) << r.err;
  r = cli(config, "flow-graph");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("featflow classify"), std::string::npos) << r.err;
}

TEST(CliTest, ConfigAndUsageErrorsExitWithTwo) {
  TempDir dir("cli");
  auto bad = tiny_config(dir.path() / "run");
  bad["sae"]["centring"] = "x";
  auto r = cli(write_config(dir.path(), bad), "lm-train");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("centring"), std::string::npos) << r.err;
  r = cli(dir.path() / "missing.json", "lm-train");
  EXPECT_EQ(r.code, 2);
  r = cli(write_config(dir.path(), tiny_config(dir.path() / "run")), "no-such-step");
  EXPECT_EQ(r.code, 2);
  r = cli(dir.path() / "config.json", "--live-llm --quiet explain");
  EXPECT_EQ(r.code, 3) << "needs activations before any provider call: " << r.err;
}

TEST(RunConfigTest, RejectsBrokenLineages) {
  TempDir dir("cfg");
  const auto good = tiny_config(dir.path() / "run");
  EXPECT_NO_THROW(RunConfig::from_json(good, dir.path()));
  auto expect_bad = [&](json j, const std::string& what) {
    EXPECT_THROW(RunConfig::from_json(j, dir.path()), ConfigError) << what;
  };
  auto j = good;
  j["lineage"]["finetunes"][1]["parent"] = "ft_a";
  expect_bad(j, "fine-tune of a fine-tune");
  j = good;
  j["lineage"]["finetunes"].erase(1);
  expect_bad(j, "one fine-tune");
  j = good;
  j["lineage"]["merge"]["b"] = "base";
  expect_bad(j, "merge of base");
  j = good;
  j["lineage"]["merge"]["name"] = "ft_a";
  expect_bad(j, "merged name collides");
  j = good;
  j["sources"][0]["synthetic"] = "poetry";
  expect_bad(j, "unknown grammar");
  j = good;
  j["sources"][0] = {{"name", "english"}, {"path", "nope.txt"}};
  expect_bad(j, "missing file");
  j = good;
  j["lineage"]["base"]["sources"] = {"english", "klingon"};
  expect_bad(j, "unknown source");
  j = good;
  j["autointerp"]["mode"] = "record";
  j["autointerp"]["model"] = "";
  expect_bad(j, "record without model");
  j = good;
  j["collect"]["block_len"] = 99;
  expect_bad(j, "block longer than context");
  j = good;
  j["extra"] = 1;
  expect_bad(j, "unknown key");
}

TEST(RunConfigTest, FileSourcesResolveAgainstConfigDir) {
  TempDir dir("cfg");
  synthetic::write_plain_text(dir.path() / "eng.txt", synthetic::english_like(5, 1));
  auto j = tiny_config("run");
  j["sources"][0] = {{"name", "english"}, {"path", "eng.txt"}};
  const auto c = RunConfig::from_json(j, dir.path());
  EXPECT_EQ(c.sources[0].uri, dir.path() / "eng.txt");
  EXPECT_EQ(c.out_dir, dir.path() / "run");
  const auto e = c.edges();
  ASSERT_EQ(e.size(), 4u);
  EXPECT_EQ(e[0], (std::pair<std::string, std::string>{"base", "ft_a"}));
  EXPECT_EQ(e[3], (std::pair<std::string, std::string>{"ft_b", "merged"}));
  EXPECT_NE(c.stage_seed(1), c.stage_seed(2));
}

TEST(ExplainTest, RecordThenReplayIsBitIdenticalOffline) {
  TempDir dir("explain");
  auto j = tiny_config(dir.path() / "run");
  j["autointerp"]["mode"] = "record";
  j["autointerp"]["fixtures"] = (dir.path() / "fixtures").string();
  Context ctx(RunConfig::from_json(j, dir.path()));
  run_all(ctx);
  auto scripted = std::make_unique<DigitTransport>();
  auto* transport = scripted.get();
  ctx.transport = std::move(scripted);
  explain(ctx);
  EXPECT_EQ(transport->calls, 4 * 2 * 2);  // models x features x (explain + simulate)
  const auto recorded = snapshot(ctx.paths.root / "autointerp");
  ASSERT_EQ(recorded.size(), 5u);

  fs::remove_all(ctx.paths.root / "autointerp");
  ctx.config.autointerp.mode = autointerp::ClientMode::kReplay;
  ctx.transport.reset();
  explain(ctx);
  EXPECT_EQ(snapshot(ctx.paths.root / "autointerp"), recorded);
  const auto recs = io::read_jsonl(ctx.paths.autointerp("merged"));
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0]["explanation"], "Fires on digits.");
  EXPECT_EQ(recs[0]["predicted"].size(), 6u);

  // The report picks explanations up.
  report(ctx);
  const auto f = recs[0]["feature"].get<std::size_t>();
  const auto page = io::read_file(ctx.paths.reports() / "merged" / ("feature_" + std::to_string(f) + ".html"));
  EXPECT_NE(page.find("Fires on digits."), std::string::npos);
}

}  // namespace
}  // namespace featflow::pipeline
