#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "featflow/autointerp.hpp"
#include "featflow/lm.hpp"
#include "featflow/merge.hpp"
#include "featflow/sae.hpp"
#include "featflow/train.hpp"

namespace featflow::pipeline {

using nlohmann::json;

/// A corpus source: either an existing file or a synthetic grammar that
/// tokenizer-train writes into the output directory.
struct SourceSpec {
  std::string name;
  std::filesystem::path uri;  // empty for synthetic sources
  SourceFormat format = SourceFormat::kPlainText;
  std::string grammar;        // "english_like" | "code_like"
  std::size_t docs = 0;
  std::uint64_t seed = 0;
};

struct ModelSpec {
  std::string name;
  std::string parent;  // empty for the base model
  std::vector<std::string> sources;
  train::TrainConfig train;
};

struct MergeSpec {
  std::string name = "merged";
  std::string a;
  std::string b;
  std::string eval_a;  // source evaluated as domain a
  std::string eval_b;
  std::size_t grid_points = 21;
  std::size_t eval_tokens = 4096;
  merge::MergeMode mode = merge::MergeMode::kWholeVector;
};

struct CollectSpec {
  std::size_t tokens = 20'000;
  std::size_t block_len = 64;
  std::uint64_t seed = 0;
};

struct HypothesisSpec {
  std::string name;
  std::vector<std::string> strings;
  double epsilon = 1e-3;
};

struct AutointerpSpec {
  autointerp::ClientMode mode = autointerp::ClientMode::kReplay;
  std::string model;
  std::string base_url = autointerp::HttpSettings{}.base_url;
  std::string api_key_env = autointerp::HttpSettings{}.api_key_env;
  std::filesystem::path fixtures = "fixtures";  // relative to the config file
  std::size_t features = 4;                     // per model
  std::size_t k_explain = 20;
  std::size_t k_score = 20;
  double cost_per_call = 0.055;
  std::uint64_t seed = 0;
};

/// Declarative description of the whole four-model experiment.
struct RunConfig {
  std::filesystem::path config_dir;  // relative paths resolve against this
  std::filesystem::path out_dir;
  std::uint64_t seed = 0;

  std::size_t tokenizer_vocab = 512;
  std::size_t tokenizer_sample_docs = 0;  // per source; 0 uses every document
  std::vector<SourceSpec> sources;
  double validation_fraction = 0.1;

  lm::LMConfig model;  // vocab_size is taken from the trained tokenizer
  ModelSpec base;
  std::vector<ModelSpec> finetunes;
  MergeSpec merge;

  sae::SaeConfig sae;  // n is taken from model.d_mlp
  std::size_t sae_eval_tokens = 4096;
  CollectSpec collect;
  double threshold = 0.80;

  std::vector<HypothesisSpec> hypotheses;
  double llr_alpha = 0.5;
  std::size_t llr_top = 5;

  AutointerpSpec autointerp;
  std::size_t report_features = 4;
  std::size_t report_window = 64;

  /// Parses and validates; unknown keys are errors.
  static RunConfig from_json(const json& j, const std::filesystem::path& config_dir);
  static RunConfig load(const std::filesystem::path& path);
  /// Structure and value checks, including that every referenced file exists.
  void validate() const;

  /// Lineage order: base, fine-tunes, merged.
  std::vector<std::string> model_names() const;
  const ModelSpec& spec(const std::string& name) const;
  /// The four parent -> child edges of the lineage.
  std::vector<std::pair<std::string, std::string>> edges() const;
  /// Stage seed derived from the master seed.
  std::uint64_t stage_seed(std::uint64_t local) const;
};

/// Fixed relative layout under out_dir.
struct Paths {
  std::filesystem::path root;

  std::filesystem::path tokenizer() const { return root / "tokenizer.txt"; }
  std::filesystem::path corpus(const std::string& source) const { return root / "corpora" / (source + ".txt"); }
  std::filesystem::path model_dir(const std::string& m) const { return root / "models" / m; }
  std::filesystem::path lm(const std::string& m) const { return model_dir(m) / "lm.ckpt"; }
  std::filesystem::path train_trace(const std::string& m) const { return model_dir(m) / "train.jsonl"; }
  std::filesystem::path eval(const std::string& m) const { return model_dir(m) / "eval.json"; }
  std::filesystem::path sae(const std::string& m) const { return model_dir(m) / "sae.ckpt"; }
  std::filesystem::path sae_trace(const std::string& m) const { return model_dir(m) / "sae.jsonl"; }
  std::filesystem::path matrix(const std::string& m) const { return model_dir(m) / "activations.fam"; }
  std::filesystem::path sweep_csv() const { return root / "merge" / "sweep.csv"; }
  std::filesystem::path sweep_json() const { return root / "merge" / "sweep.json"; }
  std::filesystem::path selection() const { return root / "merge" / "selection.json"; }
  std::filesystem::path matches(const std::string& p, const std::string& c) const {
    return root / "flow" / (p + "__" + c + ".matches.json");
  }
  std::filesystem::path classification(const std::string& p, const std::string& c) const {
    return root / "flow" / (p + "__" + c + ".classification.json");
  }
  std::filesystem::path sankey() const { return root / "flow" / "sankey.json"; }
  std::filesystem::path sankey_html() const { return root / "flow" / "sankey.html"; }
  std::filesystem::path lineage() const { return root / "flow" / "lineage.json"; }
  std::filesystem::path llr() const { return root / "llr.jsonl"; }
  std::filesystem::path autointerp(const std::string& m) const { return root / "autointerp" / (m + ".jsonl"); }
  std::filesystem::path histogram() const { return root / "autointerp" / "histogram.json"; }
  std::filesystem::path reports() const { return root / "reports"; }
};

/// Throws IoError naming the subcommand that produces `path` when it is missing.
void require(const std::filesystem::path& path, const std::string& producer);

/// Progress lines go here (stderr in the CLI, silent in tests).
using Log = std::function<void(const std::string&)>;

struct Context {
  RunConfig config;
  Paths paths;
  Log log;
  std::unique_ptr<autointerp::Transport> transport;  // test override for live/record modes

  explicit Context(RunConfig cfg, Log log = {});
  void say(const std::string& s) const {
    if (log) log(s);
  }
};

// One function per subcommand. `model` limits work to one lineage member;
// empty means every member the step applies to.
void tokenizer_train(Context& ctx);
void lm_train(Context& ctx);
void lm_finetune(Context& ctx, const std::string& model = {});
void lm_eval(Context& ctx, const std::string& model = {});
void merge_sweep(Context& ctx);
merge::MergeSelection merge_select(Context& ctx);
void sae_train(Context& ctx, const std::string& model = {});
void collect(Context& ctx, const std::string& model = {});
void correlate(Context& ctx, const std::string& parent = {}, const std::string& child = {});
json classify(Context& ctx, const std::string& parent = {}, const std::string& child = {});
json flow_graph(Context& ctx);
void llr(Context& ctx);
void explain(Context& ctx, const std::string& model = {});
void report(Context& ctx);
/// Every step in lineage order, except explain unless `with_explain`.
void run_all(Context& ctx, bool with_explain = false);

}  // namespace featflow::pipeline
