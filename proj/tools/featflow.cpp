// featflow: runs the base -> fine-tunes -> merge feature-flow pipeline one
// step at a time from a JSON run config.

#include <Eigen/Core>

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "featflow/pipeline.hpp"
#include "featflow/report.hpp"

namespace fs = std::filesystem;
using namespace featflow;

namespace {

enum ExitCode : int {
  kOk = 0,
  kOther = 1,
  kConfig = 2,
  kIo = 3,
  kContract = 4,
  kProvider = 5,
  kNumeric = 6,
  kUndefined = 7,
};

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  int threads = 0;
  bool live_llm = false;
  bool quiet = false;
  std::string model;
  std::string parent;
  std::string child;
  bool with_explain = false;
};

pipeline::Context make_context(const Options& o) {
  auto cfg = pipeline::RunConfig::load(o.config);
  if (!o.out.empty()) cfg.out_dir = fs::absolute(o.out);
  if (o.seed) cfg.seed = *o.seed;
  if (o.live_llm) cfg.autointerp.mode = autointerp::ClientMode::kRecord;
  cfg.validate();
  pipeline::Log log;
  if (!o.quiet) log = [](const std::string& s) { std::cerr << "featflow: " << s << "\n"; };
  return pipeline::Context(std::move(cfg), log);
}

int run(const std::string& cmd, const Options& o) {
  if (o.threads > 0) Eigen::setNbThreads(o.threads);
  auto ctx = make_context(o);
  if (cmd == "tokenizer-train") {
    pipeline::tokenizer_train(ctx);
  } else if (cmd == "lm-train") {
    pipeline::lm_train(ctx);
  } else if (cmd == "lm-finetune") {
    pipeline::lm_finetune(ctx, o.model);
  } else if (cmd == "lm-eval") {
    pipeline::lm_eval(ctx, o.model);
  } else if (cmd == "merge-sweep") {
    pipeline::merge_sweep(ctx);
  } else if (cmd == "merge-select") {
    const auto sel = pipeline::merge_select(ctx);
    std::cout << "t_star " << report::percent(sel.t_star) << " acc_a " << sel.acc_a << " acc_b " << sel.acc_b
              << "\n";
  } else if (cmd == "sae-train") {
    pipeline::sae_train(ctx, o.model);
  } else if (cmd == "collect") {
    pipeline::collect(ctx, o.model);
  } else if (cmd == "correlate") {
    pipeline::correlate(ctx, o.parent, o.child);
  } else if (cmd == "classify") {
    std::cout << pipeline::classify(ctx, o.parent, o.child).dump(2) << "\n";
  } else if (cmd == "flow-graph") {
    std::cout << pipeline::flow_graph(ctx).at("summary").dump(2) << "\n";
  } else if (cmd == "llr") {
    pipeline::llr(ctx);
  } else if (cmd == "explain") {
    pipeline::explain(ctx, o.model);
  } else if (cmd == "report") {
    pipeline::report(ctx);
  } else if (cmd == "run-all") {
    pipeline::run_all(ctx, o.with_explain);
  }
  return kOk;
}

int fail(int code, const std::string& kind, const std::exception& e) {
  std::cerr << "featflow: " << kind << ": " << e.what() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature flow across a base model, two fine-tunes and their merge"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config,-c", o.config, "JSON run config")->required();
  app.add_option("--out,-o", o.out, "Output directory (overrides out_dir)");
  app.add_option("--seed", o.seed, "Master seed (overrides seed)");
  app.add_option("--threads", o.threads, "Eigen worker threads")->check(CLI::NonNegativeNumber);
  app.add_flag("--live-llm", o.live_llm,
               "Call the LLM endpoint for explain, recording new fixtures (key from the configured env var)");
  app.add_flag("--quiet,-q", o.quiet, "No progress lines on stderr");

  const std::pair<const char*, const char*> commands[] = {
      {"tokenizer-train", "Write synthetic corpora and learn the tokenizer"},
      {"lm-train", "Train the base model on the mix"},
      {"lm-finetune", "Fine-tune the base on each domain"},
      {"lm-eval", "Evaluate lineage members on every validation stream"},
      {"merge-sweep", "Accuracy of SLERP merges over the interpolation grid"},
      {"merge-select", "Pick the equilibrium and write the merged model"},
      {"sae-train", "Train one SAE per lineage member"},
      {"collect", "Record SAE activations on the shared stream"},
      {"correlate", "Best-match correlations along lineage edges"},
      {"classify", "Persisting, emerging and disappearing features per edge"},
      {"flow-graph", "Four-edge flow graph and Sankey export"},
      {"llr", "Log-likelihood-ratio proxy for the configured hypotheses"},
      {"explain", "Explain, simulate and score top features through the LLM client"},
      {"report", "HTML reports for sweep, flow and top features"},
      {"run-all", "Every step in order (explain only with --with-explain)"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->fallthrough();
    const std::string n = name;
    if (n == "lm-finetune" || n == "lm-eval" || n == "sae-train" || n == "collect" || n == "explain") {
      sub->add_option("--model,-m", o.model, "Limit to one lineage member");
    }
    if (n == "correlate" || n == "classify") {
      sub->add_option("--parent", o.parent, "Parent model of a single pair");
      sub->add_option("--child", o.child, "Child model of a single pair");
    }
    if (n == "run-all") sub->add_flag("--with-explain", o.with_explain, "Include explain");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    return run(app.get_subcommands().front()->get_name(), o);
  } catch (const ConfigError& e) {
    return fail(kConfig, "config error", e);
  } catch (const IoError& e) {
    return fail(kIo, "i/o error", e);
  } catch (const ContractViolation& e) {
    return fail(kContract, "contract violation", e);
  } catch (const ProviderError& e) {
    return fail(kProvider, "provider error", e);
  } catch (const NumericError& e) {
    return fail(kNumeric, "numeric error", e);
  } catch (const UndefinedMetric& e) {
    return fail(kUndefined, "undefined metric", e);
  } catch (const std::exception& e) {
    return fail(kOther, "error", e);
  }
}
