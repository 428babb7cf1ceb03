#include "featflow/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "featflow/flow.hpp"
#include "featflow/io.hpp"
#include "featflow/proxy.hpp"
#include "featflow/report.hpp"
#include "featflow/rng.hpp"

namespace featflow::pipeline {

namespace fs = std::filesystem;
using io::Fields;

namespace {

fs::path resolve(const fs::path& base, const fs::path& p) {
  return p.empty() || p.is_absolute() ? p : base / p;
}

std::string merge_mode_name(merge::MergeMode m) {
  return m == merge::MergeMode::kPerTensor ? "per_tensor" : "whole_vector";
}

merge::MergeMode merge_mode_from(const std::string& s) {
  if (s == "whole_vector") return merge::MergeMode::kWholeVector;
  if (s == "per_tensor") return merge::MergeMode::kPerTensor;
  throw ConfigError("merge.mode must be whole_vector or per_tensor, got '" + s + "'");
}

SourceFormat source_format_from(const std::string& s) {
  if (s == "plain") return SourceFormat::kPlainText;
  if (s == "lines") return SourceFormat::kLines;
  throw ConfigError("source format must be plain or lines, got '" + s + "'");
}

ModelSpec model_spec_from(const json& j, const std::string& what) {
  Fields f(j, what);
  ModelSpec m;
  f.get("name", m.name);
  f.get("parent", m.parent);
  f.get("sources", m.sources);
  if (const json* t = f.child("train")) m.train = io::train_config_from_json(*t);
  f.finish();
  return m;
}

void write_json(const fs::path& path, const json& j) { io::write_atomic(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  try {
    return json::parse(io::read_file(path));
  } catch (const json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

std::string file_digest(const fs::path& path) { return to_hex(fnv1a(io::read_file(path))); }

std::uint64_t seed_for(const RunConfig& c, const std::string& stage, std::uint64_t extra = 0) {
  return mix_seed(c.stage_seed(fnv1a(stage)), extra);
}

// ---------------------------------------------------------------------------
// Shared loading

struct Inputs {
  Tokenizer tokenizer;
  TokenizedCorpus corpus;
  json digests;  // tokenizer and corpus file digests
};

std::vector<CorpusSource> corpus_sources(const Context& ctx) {
  std::vector<CorpusSource> out;
  for (const auto& s : ctx.config.sources) {
    CorpusSource c;
    c.name = s.name;
    c.domain_tag = s.grammar.empty() ? s.name : s.grammar;
    c.format = s.format;
    c.uri = s.uri.empty() ? ctx.paths.corpus(s.name) : s.uri;
    require(c.uri, "tokenizer-train");
    out.push_back(std::move(c));
  }
  return out;
}

Inputs load_inputs(const Context& ctx) {
  require(ctx.paths.tokenizer(), "tokenizer-train");
  const auto sources = corpus_sources(ctx);
  Inputs in{Tokenizer::deserialize(io::read_file(ctx.paths.tokenizer())), {}, json::object()};
  DatasetMix mix;
  mix.sources = sources;
  mix.seed = seed_for(ctx.config, "split");
  mix.validation_fraction = ctx.config.validation_fraction;
  in.corpus = TokenizedCorpus::build(mix, in.tokenizer);
  in.digests["tokenizer"] = to_hex(in.tokenizer.digest());
  json corpora = json::object();
  for (const auto& s : sources) corpora[s.name] = file_digest(s.uri);
  in.digests["corpora"] = corpora;
  return in;
}

lm::LMConfig model_config(const Context& ctx, const Tokenizer& tok) {
  auto c = ctx.config.model;
  c.vocab_size = tok.vocab_size();
  c.seed = mix_seed(seed_for(ctx.config, "init"), ctx.config.model.seed);
  return c;
}

std::vector<train::EvalStream> eval_streams(const Context& ctx, const Inputs& in, std::size_t n_tokens) {
  return train::validation_streams(in.corpus, ctx.config.model.ctx_len + 1, n_tokens,
                                   seed_for(ctx.config, "eval"), in.tokenizer.special().eos);
}

std::string lm_producer(const RunConfig& c, const std::string& model) {
  if (model == c.base.name) return "lm-train";
  if (model == c.merge.name) return "merge-select";
  return "lm-finetune";
}

io::LmCheckpoint load_model(const Context& ctx, const std::string& model) {
  require(ctx.paths.lm(model), lm_producer(ctx.config, model));
  return io::load_lm(ctx.paths.lm(model));
}

void check_model(const RunConfig& c, const std::string& model) {
  const auto names = c.model_names();
  if (std::find(names.begin(), names.end(), model) == names.end()) {
    throw ConfigError("unknown model '" + model + "'");
  }
}

std::vector<std::string> selected(const RunConfig& c, const std::string& model) {
  if (model.empty()) return c.model_names();
  check_model(c, model);
  return {model};
}

train::TrainConfig train_config(const Context& ctx, const ModelSpec& spec, const Tokenizer& tok) {
  auto tc = spec.train;
  tc.seed = mix_seed(seed_for(ctx.config, "train:" + spec.name), spec.train.seed);
  tc.eos = tok.special().eos;
  tc.ignore = tok.special().pad;
  return tc;
}

void write_trace(const fs::path& path, const std::vector<train::EvalRecord>& trace) {
  std::vector<json> recs;
  for (const auto& r : trace) recs.push_back(io::to_json(r));
  io::write_atomic(path, io::to_jsonl(recs));
}

void train_model(Context& ctx, const ModelSpec& spec) {
  const auto in = load_inputs(ctx);
  const auto lc = model_config(ctx, in.tokenizer);
  const auto tc = train_config(ctx, spec, in.tokenizer);
  const auto subset = in.corpus.subset(spec.sources);
  const auto evals = eval_streams(ctx, in, tc.eval_tokens);
  auto log = [&](const train::EvalRecord& r, const lm::LMParams<float>&) {
    std::string line = spec.name + ": " + std::to_string(r.tokens_seen) + " tokens";
    for (const auto& s : r.streams) line += ", " + s.name + " acc " + std::to_string(s.accuracy);
    ctx.say(line);
  };
  io::Lineage lineage{{}, in.digests};
  train::TrainResult<float> result;
  if (spec.parent.empty()) {
    result = train::train_lm<float>(tc, lc, subset, evals, std::nullopt, log);
  } else {
    auto parent = load_model(ctx, spec.parent);
    if (!(parent.params.config == lc)) {
      throw ContractViolation("checkpoint of '" + spec.parent + "' does not match the configured model");
    }
    lineage.parents.push_back(parent.digest);
    result = train::train_lm<float>(tc, lc, subset, evals, std::move(parent.params), log);
  }
  fs::create_directories(ctx.paths.model_dir(spec.name));
  io::save_lm(ctx.paths.lm(spec.name), result.params, lineage);
  write_trace(ctx.paths.train_trace(spec.name), result.trace);
}

/// Collection stream: validation blocks of every source, interleaved.
std::vector<TokenBlock> collect_blocks(const Context& ctx, const Inputs& in) {
  const auto& c = ctx.config.collect;
  const std::size_t n_src = in.corpus.sources.size();
  const std::size_t total = (c.tokens + c.block_len - 1) / c.block_len;
  const std::size_t per = (total + n_src - 1) / n_src;
  std::vector<std::vector<TokenBlock>> by_source;
  for (std::size_t s = 0; s < n_src; ++s) {
    by_source.push_back(validation_blocks(in.corpus, s, c.block_len, per,
                                          mix_seed(seed_for(ctx.config, "collect"), c.seed),
                                          in.tokenizer.special().eos));
  }
  std::vector<TokenBlock> out;
  for (std::size_t i = 0; out.size() < total; ++i) {
    for (std::size_t s = 0; s < n_src && out.size() < total; ++s) out.push_back(by_source[s][i]);
  }
  return out;
}

std::vector<TokenId> collect_tokens(const Context& ctx, const Inputs& in) {
  const auto blocks = collect_blocks(ctx, in);
  return flow::stream_tokens(blocks, ctx.config.collect.tokens);
}

flow::ActivationMatrix load_activations(const Context& ctx, const std::string& model,
                                        json* provenance = nullptr) {
  require(ctx.paths.matrix(model), "collect");
  return io::load_matrix(ctx.paths.matrix(model), provenance);
}

/// Stream tokens matching the stored matrices; refuses a stale stream.
std::vector<TokenId> matrix_tokens(const Context& ctx, const Inputs& in, const flow::ActivationMatrix& m) {
  auto tokens = collect_tokens(ctx, in);
  if (tokens.size() != m.n_tokens || flow::token_digest(tokens) != m.stream_digest) {
    throw ComparabilityError("activations of '" + m.model_id +
                             "' were collected on a different stream; re-run collect");
  }
  return tokens;
}

/// Live features ordered by total activation mass, heaviest first.
std::vector<std::size_t> top_features(const flow::ActivationMatrix& m, std::size_t k) {
  std::vector<std::pair<double, std::size_t>> mass;
  for (std::size_t f = 0; f < m.n_features(); ++f) {
    if (m.is_dead(f)) continue;
    double sum = 0.0;
    for (float v : m.rows[f].value) sum += v;
    mass.emplace_back(-sum, f);
  }
  std::sort(mass.begin(), mass.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < mass.size() && i < k; ++i) out.push_back(mass[i].second);
  return out;
}

std::vector<std::pair<std::string, std::string>> selected_pairs(const RunConfig& c, const std::string& parent,
                                                                const std::string& child) {
  if (parent.empty() != child.empty()) throw ConfigError("--parent and --child must be given together");
  if (parent.empty()) return c.edges();
  check_model(c, parent);
  check_model(c, child);
  return {{parent, child}};
}

json match_json(const std::optional<flow::FeatureMatch>& m, bool parent_side) {
  if (!m) return nullptr;
  return {{parent_side ? "child" : "parent", parent_side ? m->child : m->parent}, {"r", m->r}};
}

std::vector<std::size_t> dead_list(const std::vector<bool>& dead) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < dead.size(); ++i) {
    if (dead[i]) out.push_back(i);
  }
  return out;
}

flow::BestMatches matches_from_json(const json& j) {
  flow::BestMatches b;
  b.parent_model = j.at("parent").get<std::string>();
  b.child_model = j.at("child").get<std::string>();
  b.n_parent = j.at("n_parent").get<std::size_t>();
  b.n_child = j.at("n_child").get<std::size_t>();
  for (const auto& m : j.at("for_child")) {
    if (m.is_null()) {
      b.for_child.emplace_back();
    } else {
      b.for_child.push_back(flow::FeatureMatch{m.at("parent").get<std::size_t>(), b.for_child.size(),
                                               m.at("r").get<double>()});
    }
  }
  for (const auto& m : j.at("for_parent")) {
    if (m.is_null()) {
      b.for_parent.emplace_back();
    } else {
      b.for_parent.push_back(flow::FeatureMatch{b.for_parent.size(), m.at("child").get<std::size_t>(),
                                                m.at("r").get<double>()});
    }
  }
  b.dead_parent.assign(b.n_parent, false);
  b.dead_child.assign(b.n_child, false);
  for (auto i : j.at("dead_parent").get<std::vector<std::size_t>>()) b.dead_parent.at(i) = true;
  for (auto i : j.at("dead_child").get<std::vector<std::size_t>>()) b.dead_child.at(i) = true;
  if (b.for_child.size() != b.n_child || b.for_parent.size() != b.n_parent) {
    throw IoError("match file for " + b.parent_model + " -> " + b.child_model + " is inconsistent");
  }
  return b;
}

json classification_json(const flow::EvolutionClassification& c, std::size_t n_parent, std::size_t n_child) {
  json persisting = json::array();
  for (const auto& m : c.persisting) persisting.push_back({m.parent, m.child, m.r});
  const std::size_t live_child = n_child - c.dead_child.size();
  const std::size_t live_parent = n_parent - c.dead_parent.size();
  auto share = [](std::size_t k, std::size_t n) -> json {
    return n == 0 ? json(nullptr) : json(static_cast<double>(k) / static_cast<double>(n));
  };
  return {{"parent", c.parent_model},
          {"child", c.child_model},
          {"threshold", c.threshold},
          {"n_parent", n_parent},
          {"n_child", n_child},
          {"counts",
           {{"persisting_pairs", c.persisting.size()},
            {"persisting_parents", c.persisting_parents.size()},
            {"persisting_children", c.persisting_children.size()},
            {"emerging", c.emerging.size()},
            {"disappearing", c.disappearing.size()},
            {"dead_parent", c.dead_parent.size()},
            {"dead_child", c.dead_child.size()}}},
          {"persisting_share_of_live_parents", share(c.persisting_parents.size(), live_parent)},
          {"persisting_share_of_live_children", share(c.persisting_children.size(), live_child)},
          {"persisting", persisting},
          {"persisting_parents", c.persisting_parents},
          {"persisting_children", c.persisting_children},
          {"emerging", c.emerging},
          {"disappearing", c.disappearing},
          {"dead_parent", c.dead_parent},
          {"dead_child", c.dead_child}};
}

flow::EvolutionClassification classification_from_json(const json& j) {
  flow::EvolutionClassification c;
  c.parent_model = j.at("parent").get<std::string>();
  c.child_model = j.at("child").get<std::string>();
  c.threshold = j.at("threshold").get<double>();
  for (const auto& p : j.at("persisting")) {
    c.persisting.push_back({p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>(), p.at(2).get<double>()});
  }
  j.at("persisting_parents").get_to(c.persisting_parents);
  j.at("persisting_children").get_to(c.persisting_children);
  j.at("emerging").get_to(c.emerging);
  j.at("disappearing").get_to(c.disappearing);
  j.at("dead_parent").get_to(c.dead_parent);
  j.at("dead_child").get_to(c.dead_child);
  c.validate(j.at("n_parent").get<std::size_t>(), j.at("n_child").get<std::size_t>());
  return c;
}

class BorrowedTransport : public autointerp::Transport {
 public:
  explicit BorrowedTransport(autointerp::Transport& inner) : inner_(inner) {}
  std::string post(const std::string& body) override { return inner_.post(body); }

 private:
  autointerp::Transport& inner_;
};

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

RunConfig RunConfig::from_json(const json& j, const fs::path& config_dir) {
  RunConfig c;
  c.config_dir = config_dir;
  Fields f(j, "config");
  std::string out_dir;
  f.get("out_dir", out_dir);
  c.out_dir = resolve(config_dir, out_dir);
  f.get("seed", c.seed);
  if (const json* t = f.child("tokenizer")) {
    Fields tf(*t, "tokenizer");
    tf.get("vocab_size", c.tokenizer_vocab);
    tf.get("sample_docs", c.tokenizer_sample_docs);
    tf.finish();
  }
  f.get("validation_fraction", c.validation_fraction);
  if (const json* ss = f.child("sources")) {
    if (!ss->is_array()) throw ConfigError("sources must be an array");
    for (const auto& sj : *ss) {
      Fields sf(sj, "source");
      SourceSpec s;
      std::string path, format = "plain";
      sf.get("name", s.name);
      sf.get("path", path);
      sf.get("format", format);
      sf.get("synthetic", s.grammar);
      sf.get("docs", s.docs);
      sf.get("seed", s.seed);
      sf.finish();
      s.uri = resolve(config_dir, path);
      s.format = source_format_from(format);
      c.sources.push_back(std::move(s));
    }
  }
  if (const json* m = f.child("model")) c.model = io::lm_config_from_json(*m);
  if (const json* l = f.child("lineage")) {
    Fields lf(*l, "lineage");
    if (const json* b = lf.child("base")) c.base = model_spec_from(*b, "lineage.base");
    if (const json* fts = lf.child("finetunes")) {
      if (!fts->is_array()) throw ConfigError("lineage.finetunes must be an array");
      for (const auto& ft : *fts) c.finetunes.push_back(model_spec_from(ft, "lineage.finetunes[]"));
    }
    if (const json* mj = lf.child("merge")) {
      Fields mf(*mj, "lineage.merge");
      std::string mode = merge_mode_name(c.merge.mode);
      mf.get("name", c.merge.name);
      mf.get("a", c.merge.a);
      mf.get("b", c.merge.b);
      mf.get("eval_a", c.merge.eval_a);
      mf.get("eval_b", c.merge.eval_b);
      mf.get("grid_points", c.merge.grid_points);
      mf.get("eval_tokens", c.merge.eval_tokens);
      mf.get("mode", mode);
      mf.finish();
      c.merge.mode = merge_mode_from(mode);
    }
    lf.finish();
  }
  if (const json* s = f.child("sae")) c.sae = io::sae_config_from_json(*s);
  f.get("sae_eval_tokens", c.sae_eval_tokens);
  if (const json* cj = f.child("collect")) {
    Fields cf(*cj, "collect");
    cf.get("tokens", c.collect.tokens);
    cf.get("block_len", c.collect.block_len);
    cf.get("seed", c.collect.seed);
    cf.finish();
  }
  if (const json* cl = f.child("classify")) {
    Fields cf(*cl, "classify");
    cf.get("threshold", c.threshold);
    cf.finish();
  }
  if (const json* hs = f.child("hypotheses")) {
    if (!hs->is_array()) throw ConfigError("hypotheses must be an array");
    for (const auto& hj : *hs) {
      Fields hf(hj, "hypothesis");
      HypothesisSpec h;
      hf.get("name", h.name);
      hf.get("strings", h.strings);
      hf.get("epsilon", h.epsilon);
      hf.finish();
      c.hypotheses.push_back(std::move(h));
    }
  }
  if (const json* lj = f.child("llr")) {
    Fields lf(*lj, "llr");
    lf.get("alpha", c.llr_alpha);
    lf.get("top", c.llr_top);
    lf.finish();
  }
  if (const json* aj = f.child("autointerp")) {
    Fields af(*aj, "autointerp");
    auto& a = c.autointerp;
    std::string mode = "replay", fixtures = a.fixtures.string();
    af.get("mode", mode);
    af.get("model", a.model);
    af.get("base_url", a.base_url);
    af.get("api_key_env", a.api_key_env);
    af.get("fixtures", fixtures);
    af.get("features", a.features);
    af.get("k_explain", a.k_explain);
    af.get("k_score", a.k_score);
    af.get("cost_per_call", a.cost_per_call);
    af.get("seed", a.seed);
    af.finish();
    a.mode = autointerp::client_mode_from_string(mode);
    a.fixtures = fixtures;
  }
  if (const json* rj = f.child("report")) {
    Fields rf(*rj, "report");
    rf.get("features", c.report_features);
    rf.get("window", c.report_window);
    rf.finish();
  }
  f.finish();
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j, fs::absolute(path).parent_path());
}

void RunConfig::validate() const {
  if (out_dir.empty()) throw ConfigError("out_dir is required");
  if (tokenizer_vocab < Tokenizer::kBaseVocab) {
    throw ConfigError("tokenizer.vocab_size must be at least " + std::to_string(Tokenizer::kBaseVocab));
  }
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("validation_fraction must lie in (0, 1)");
  }
  if (sources.empty()) throw ConfigError("at least one source is required");
  std::set<std::string> source_names;
  for (const auto& s : sources) {
    if (s.name.empty()) throw ConfigError("every source needs a name");
    if (!source_names.insert(s.name).second) throw ConfigError("duplicate source '" + s.name + "'");
    if (s.uri.empty() == s.grammar.empty()) {
      throw ConfigError("source '" + s.name + "' needs exactly one of path and synthetic");
    }
    if (!s.uri.empty() && !fs::exists(s.uri)) {
      throw ConfigError("source '" + s.name + "': file " + s.uri.string() + " does not exist");
    }
    if (!s.grammar.empty()) {
      if (s.grammar != "english_like" && s.grammar != "code_like") {
        throw ConfigError("source '" + s.name + "': unknown synthetic grammar '" + s.grammar + "'");
      }
      if (s.docs < 2) throw ConfigError("source '" + s.name + "': docs must be at least 2");
    }
  }
  auto check_sources = [&](const ModelSpec& m) {
    if (m.sources.empty()) throw ConfigError("model '" + m.name + "' needs at least one source");
    for (const auto& s : m.sources) {
      if (!source_names.count(s)) throw ConfigError("model '" + m.name + "' uses unknown source '" + s + "'");
    }
  };

  auto lc = model;
  lc.vocab_size = tokenizer_vocab;
  lc.validate();

  if (base.name.empty()) throw ConfigError("lineage.base.name is required");
  if (!base.parent.empty()) throw ConfigError("the base model cannot have a parent");
  check_sources(base);
  base.train.validate(false);
  if (finetunes.size() != 2) throw ConfigError("the lineage needs exactly two fine-tuned models");
  std::set<std::string> names{base.name};
  for (const auto& ft : finetunes) {
    if (ft.name.empty()) throw ConfigError("every fine-tuned model needs a name");
    if (ft.parent != base.name) {
      throw ConfigError("fine-tuned model '" + ft.name + "' must have parent '" + base.name + "'");
    }
    check_sources(ft);
    ft.train.validate(true);
    if (!names.insert(ft.name).second) throw ConfigError("duplicate model name '" + ft.name + "'");
  }
  if (merge.name.empty() || !names.insert(merge.name).second) {
    throw ConfigError("the merged model needs a name distinct from the others");
  }
  const std::set<std::string> merged_from{merge.a, merge.b};
  const std::set<std::string> fts{finetunes[0].name, finetunes[1].name};
  if (merged_from != fts) throw ConfigError("lineage.merge.a and .b must name the two fine-tuned models");
  if (!source_names.count(merge.eval_a) || !source_names.count(merge.eval_b)) {
    throw ConfigError("lineage.merge.eval_a and .eval_b must name sources");
  }
  if (merge.grid_points < 2) throw ConfigError("lineage.merge.grid_points must be at least 2");
  if (merge.eval_tokens == 0) throw ConfigError("lineage.merge.eval_tokens must be positive");

  auto sc = sae;
  sc.n = model.d_mlp;
  sc.validate();
  if (sae.block_len > model.ctx_len) throw ConfigError("sae.block_len exceeds model.ctx_len");
  if (sae_eval_tokens == 0) throw ConfigError("sae_eval_tokens must be positive");
  if (collect.tokens == 0) throw ConfigError("collect.tokens must be positive");
  if (collect.block_len < 2 || collect.block_len > model.ctx_len) {
    throw ConfigError("collect.block_len must lie in [2, model.ctx_len]");
  }
  if (!(threshold >= -1.0 && threshold <= 1.0)) throw ConfigError("classify.threshold must lie in [-1, 1]");

  std::set<std::string> hyp;
  for (const auto& h : hypotheses) {
    if (h.name.empty() || !hyp.insert(h.name).second) throw ConfigError("hypothesis names must be unique");
    if (h.strings.empty()) throw ConfigError("hypothesis '" + h.name + "' has no strings");
    if (!(h.epsilon > 0.0 && h.epsilon <= 1.0)) {
      throw ConfigError("hypothesis '" + h.name + "': epsilon must lie in (0, 1]");
    }
  }
  if (!(llr_alpha > 0.0)) throw ConfigError("llr.alpha must be positive");
  if (llr_top == 0) throw ConfigError("llr.top must be positive");

  const auto& a = autointerp;
  if (a.features == 0 || a.k_explain == 0 || a.k_score < 2) {
    throw ConfigError("autointerp.features and k_explain must be positive, k_score at least 2");
  }
  if (a.mode != autointerp::ClientMode::kReplay && a.model.empty()) {
    throw ConfigError("autointerp.model is required for live and record modes");
  }
  if (!(a.cost_per_call >= 0.0)) throw ConfigError("autointerp.cost_per_call must be non-negative");
  if (report_features == 0 || report_window == 0) throw ConfigError("report.features and window must be positive");
}

std::vector<std::string> RunConfig::model_names() const {
  std::vector<std::string> out{base.name};
  for (const auto& ft : finetunes) out.push_back(ft.name);
  out.push_back(merge.name);
  return out;
}

const ModelSpec& RunConfig::spec(const std::string& name) const {
  if (name == base.name) return base;
  for (const auto& ft : finetunes) {
    if (ft.name == name) return ft;
  }
  throw ConfigError("no trained model named '" + name + "'");
}

std::vector<std::pair<std::string, std::string>> RunConfig::edges() const {
  return {{base.name, finetunes[0].name},
          {base.name, finetunes[1].name},
          {finetunes[0].name, merge.name},
          {finetunes[1].name, merge.name}};
}

std::uint64_t RunConfig::stage_seed(std::uint64_t local) const { return mix_seed(seed, local); }

void require(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path)) {
    throw IoError("missing " + path.string() + "; run `featflow " + producer + "` first");
  }
}

Context::Context(RunConfig cfg, Log l) : config(std::move(cfg)), paths{config.out_dir}, log(std::move(l)) {}

// ---------------------------------------------------------------------------
// Subcommands

void tokenizer_train(Context& ctx) {
  const auto& c = ctx.config;
  std::vector<std::string> sample;
  for (const auto& s : c.sources) {
    std::vector<std::string> docs;
    if (!s.grammar.empty()) {
      const auto seed = mix_seed(seed_for(c, "source:" + s.name), s.seed);
      docs = s.grammar == "english_like" ? synthetic::english_like(s.docs, seed)
                                         : synthetic::code_like(s.docs, seed);
      fs::create_directories(ctx.paths.corpus(s.name).parent_path());
      synthetic::write_plain_text(ctx.paths.corpus(s.name), docs);
      ctx.say("wrote " + std::to_string(docs.size()) + " synthetic documents for " + s.name);
    } else {
      docs = read_documents(CorpusSource{s.name, s.uri, s.format, s.name, 1.0});
    }
    if (c.tokenizer_sample_docs > 0 && docs.size() > c.tokenizer_sample_docs) {
      Rng rng(seed_for(c, "tokenizer:" + s.name));
      std::shuffle(docs.begin(), docs.end(), rng);
      docs.resize(c.tokenizer_sample_docs);
    }
    for (auto& d : docs) sample.push_back(std::move(d));
  }
  const auto tok = Tokenizer::train(sample, c.tokenizer_vocab);
  fs::create_directories(ctx.paths.root);
  io::write_atomic(ctx.paths.tokenizer(), tok.serialize());
  ctx.say("tokenizer: " + std::to_string(tok.vocab_size()) + " ids from " + std::to_string(sample.size()) +
          " documents");
}

void lm_train(Context& ctx) { train_model(ctx, ctx.config.base); }

void lm_finetune(Context& ctx, const std::string& model) {
  for (const auto& ft : ctx.config.finetunes) {
    if (model.empty() || model == ft.name) train_model(ctx, ft);
  }
  if (!model.empty()) ctx.config.spec(model);  // rejects unknown names
}

void lm_eval(Context& ctx, const std::string& model) {
  const auto in = load_inputs(ctx);
  const auto n = ctx.config.merge.eval_tokens;
  const auto evals = eval_streams(ctx, in, n);
  for (const auto& name : selected(ctx.config, model)) {
    const auto ck = load_model(ctx, name);
    json streams = json::array();
    for (const auto& s : train::evaluate(ck.params, evals, n, in.tokenizer.special().pad)) {
      streams.push_back({{"name", s.name}, {"loss", s.loss}, {"accuracy", s.accuracy}, {"tokens", s.tokens}});
      ctx.say(name + " on " + s.name + ": accuracy " + std::to_string(s.accuracy));
    }
    write_json(ctx.paths.eval(name), {{"model", name},
                                      {"eval_tokens", n},
                                      {"streams", streams},
                                      {"inputs", {{"lm", to_hex(ck.digest)}, {"data", in.digests}}}});
  }
}

void merge_sweep(Context& ctx) {
  const auto& m = ctx.config.merge;
  const auto in = load_inputs(ctx);
  const auto a = load_model(ctx, m.a);
  const auto b = load_model(ctx, m.b);
  const auto base = load_model(ctx, ctx.config.base.name);
  const auto evals = eval_streams(ctx, in, m.eval_tokens);
  const auto& ea = evals.at(in.corpus.index_of(m.eval_a));
  const auto& eb = evals.at(in.corpus.index_of(m.eval_b));
  const auto result = merge::sweep(a.params, b.params, merge::uniform_grid(m.grid_points), ea, eb, m.eval_tokens,
                                   &base.params, m.mode);
  fs::create_directories(ctx.paths.sweep_csv().parent_path());
  io::write_atomic(ctx.paths.sweep_csv(), report::sweep_csv(result));
  write_json(ctx.paths.sweep_json(), {{"a", m.a},
                                      {"b", m.b},
                                      {"eval_a", m.eval_a},
                                      {"eval_b", m.eval_b},
                                      {"eval_tokens", m.eval_tokens},
                                      {"mode", merge_mode_name(m.mode)},
                                      {"inputs",
                                       {{"a", to_hex(a.digest)},
                                        {"b", to_hex(b.digest)},
                                        {"base", to_hex(base.digest)},
                                        {"sweep_csv", file_digest(ctx.paths.sweep_csv())}}}});
  ctx.say("sweep: " + std::to_string(result.grid.size()) + " points");
}

merge::MergeSelection merge_select(Context& ctx) {
  const auto& m = ctx.config.merge;
  require(ctx.paths.sweep_csv(), "merge-sweep");
  require(ctx.paths.sweep_json(), "merge-sweep");
  const auto meta = read_json(ctx.paths.sweep_json());
  const auto result = report::sweep_from_csv(io::read_file(ctx.paths.sweep_csv()));
  const auto sel = merge::select_equilibrium(result);
  const auto a = load_model(ctx, m.a);
  const auto b = load_model(ctx, m.b);
  if (to_hex(a.digest) != meta.at("inputs").at("a") || to_hex(b.digest) != meta.at("inputs").at("b")) {
    throw ContractViolation("the sweep was computed on other checkpoints; re-run merge-sweep");
  }
  const auto merged = merge::merge_models(a.params, b.params, sel.t_star, m.mode);
  fs::create_directories(ctx.paths.model_dir(m.name));
  const auto digest = io::save_lm(
      ctx.paths.lm(m.name), merged,
      {{a.digest, b.digest}, {{"t_star", sel.t_star}, {"sweep_csv", file_digest(ctx.paths.sweep_csv())}}});
  write_json(ctx.paths.selection(), {{"t_star", sel.t_star},
                                     {"t_star_percent", report::percent(sel.t_star)},
                                     {"index", sel.index},
                                     {"acc_a", sel.acc_a},
                                     {"acc_b", sel.acc_b},
                                     {"gap", sel.gap},
                                     {"base_acc_a", result.base_acc_a ? json(*result.base_acc_a) : json(nullptr)},
                                     {"base_acc_b", result.base_acc_b ? json(*result.base_acc_b) : json(nullptr)},
                                     {"merged", m.name},
                                     {"inputs",
                                      {{"sweep_csv", file_digest(ctx.paths.sweep_csv())},
                                       {"a", to_hex(a.digest)},
                                       {"b", to_hex(b.digest)},
                                       {"merged", to_hex(digest)}}}});
  ctx.say("t* = " + report::percent(sel.t_star) + ", accuracies " + std::to_string(sel.acc_a) + " / " +
          std::to_string(sel.acc_b));
  return sel;
}

void sae_train(Context& ctx, const std::string& model) {
  const auto in = load_inputs(ctx);
  auto streams = eval_streams(
      ctx, in, (ctx.config.sae_eval_tokens + in.corpus.sources.size() - 1) / in.corpus.sources.size());
  std::vector<std::vector<TokenId>> eval_blocks;
  for (std::size_t i = 0; i < streams.front().blocks.size(); ++i) {
    for (auto& s : streams) eval_blocks.push_back(s.blocks.at(i));
  }
  for (const auto& name : selected(ctx.config, model)) {
    const auto lm_ck = load_model(ctx, name);
    auto cfg = ctx.config.sae;
    cfg.n = lm_ck.params.config.d_mlp;
    cfg.seed = mix_seed(seed_for(ctx.config, "sae:" + name), ctx.config.sae.seed);
    const auto source = sae::lm_activation_source<float>(lm_ck.params, in.corpus, cfg.block_len, cfg.seed);
    auto on_eval = [&](sae::SaeDiagnostics& d, const sae::SaeParams<float>& p) {
      try {
        d.explained_loss = sae::explained_loss(lm_ck.params, p, eval_blocks, ctx.config.sae_eval_tokens).raw;
      } catch (const UndefinedMetric&) {
        d.explained_loss.reset();
      }
      ctx.say(name + " sae: " + std::to_string(d.tokens_seen) + " tokens, L0 " + std::to_string(d.mean_l0) +
              ", mse " + std::to_string(d.mean_mse) + ", dead " + std::to_string(d.dead_features.size()));
    };
    const auto result = sae::train_sae<float>(cfg, source, on_eval);
    io::save_sae(ctx.paths.sae(name), cfg, result.params, {{lm_ck.digest}, in.digests});
    std::vector<json> recs;
    for (const auto& d : result.trace) recs.push_back(io::to_json(d));
    io::write_atomic(ctx.paths.sae_trace(name), io::to_jsonl(recs));
  }
}

void collect(Context& ctx, const std::string& model) {
  const auto in = load_inputs(ctx);
  const auto blocks = collect_blocks(ctx, in);
  const std::string stream_id = "collect:" + to_hex(stream_digest(blocks));
  for (const auto& name : selected(ctx.config, model)) {
    const auto lm_ck = load_model(ctx, name);
    require(ctx.paths.sae(name), "sae-train");
    const auto sae_ck = io::load_sae(ctx.paths.sae(name));
    if (sae_ck.lineage.parents != std::vector<std::uint64_t>{lm_ck.digest}) {
      throw ContractViolation("the SAE of '" + name + "' was trained on another checkpoint; re-run sae-train");
    }
    const auto m = flow::collect_activations(lm_ck.params, sae_ck.params, blocks, ctx.config.collect.tokens, name,
                                             to_hex(sae_ck.digest), stream_id);
    io::save_matrix(ctx.paths.matrix(name), m,
                    {{"lm", to_hex(lm_ck.digest)}, {"sae", to_hex(sae_ck.digest)}, {"data", in.digests}});
    std::size_t dead = 0;
    for (std::size_t f = 0; f < m.n_features(); ++f) dead += m.is_dead(f);
    ctx.say(name + ": " + std::to_string(m.n_features()) + " features over " + std::to_string(m.n_tokens) +
            " tokens, " + std::to_string(dead) + " dead");
  }
}

void correlate(Context& ctx, const std::string& parent, const std::string& child) {
  for (const auto& [p, c] : selected_pairs(ctx.config, parent, child)) {
    const auto mp = load_activations(ctx, p);
    const auto mc = load_activations(ctx, c);
    const auto bm = flow::best_matches(mp, mc);
    json for_child = json::array(), for_parent = json::array();
    for (const auto& m : bm.for_child) for_child.push_back(match_json(m, false));
    for (const auto& m : bm.for_parent) for_parent.push_back(match_json(m, true));
    fs::create_directories(ctx.paths.matches(p, c).parent_path());
    write_json(ctx.paths.matches(p, c), {{"parent", p},
                                         {"child", c},
                                         {"n_parent", bm.n_parent},
                                         {"n_child", bm.n_child},
                                         {"n_tokens", mp.n_tokens},
                                         {"for_child", for_child},
                                         {"for_parent", for_parent},
                                         {"dead_parent", dead_list(bm.dead_parent)},
                                         {"dead_child", dead_list(bm.dead_child)},
                                         {"inputs",
                                          {{"parent", file_digest(ctx.paths.matrix(p))},
                                           {"child", file_digest(ctx.paths.matrix(c))}}}});
    ctx.say("correlated " + p + " -> " + c);
  }
}

json classify(Context& ctx, const std::string& parent, const std::string& child) {
  json out = json::array();
  for (const auto& [p, c] : selected_pairs(ctx.config, parent, child)) {
    require(ctx.paths.matches(p, c), "correlate");
    const auto mj = read_json(ctx.paths.matches(p, c));
    const auto bm = matches_from_json(mj);
    const auto cls = flow::classify(bm, ctx.config.threshold);
    cls.validate(bm.n_parent, bm.n_child);
    auto j = classification_json(cls, bm.n_parent, bm.n_child);
    j["inputs"] = {{"matches", file_digest(ctx.paths.matches(p, c))}};
    write_json(ctx.paths.classification(p, c), j);
    json summary = {{"parent", p}, {"child", c}, {"counts", j["counts"]},
                    {"persisting_share_of_live_children", j["persisting_share_of_live_children"]}};
    const auto& share = j["persisting_share_of_live_children"];
    ctx.say(p + " -> " + c + ": " + std::to_string(cls.persisting.size()) + " persisting pairs, " +
            (share.is_null() ? std::string("n/a") : report::percent(share.get<double>())) +
            " of live child features persist");
    out.push_back(summary);
  }
  return out;
}

json flow_graph(Context& ctx) {
  std::vector<flow::EvolutionClassification> cls;
  json inputs = json::object();
  for (const auto& [p, c] : ctx.config.edges()) {
    require(ctx.paths.classification(p, c), "classify");
    cls.push_back(classification_from_json(read_json(ctx.paths.classification(p, c))));
    inputs[p + "__" + c] = file_digest(ctx.paths.classification(p, c));
  }
  const auto g = flow::build_flow_graph(cls[0], cls[1], cls[2], cls[3]);
  auto sankey = report::sankey_json(g);
  report::validate_sankey(sankey);
  write_json(ctx.paths.sankey(), sankey);
  io::write_atomic(ctx.paths.sankey_html(), report::sankey_html(sankey));
  json edges = json::array();
  for (const auto& e : g.edges) {
    edges.push_back({{"parent", e.parent},
                     {"child", e.child},
                     {"persisting", e.persisting},
                     {"persisting_parents", e.persisting_parents},
                     {"persisting_children", e.persisting_children},
                     {"emerging", e.emerging},
                     {"disappearing", e.disappearing},
                     {"dead_parent", e.dead_parent},
                     {"dead_child", e.dead_child}});
  }
  json chains = json::array();
  for (const auto& ch : g.chains) chains.push_back({{"via", ch.via}, {"merged_features", ch.merged_features}});
  write_json(ctx.paths.lineage(), {{"nodes", g.nodes},
                                   {"edges", edges},
                                   {"chains", chains},
                                   {"traced_to_base", g.traced_to_base},
                                   {"traced_to_finetunes", g.traced_to_finetunes},
                                   {"base_persisting_any", g.base_persisting_any},
                                   {"inputs", inputs}});
  ctx.say("flow graph: " + std::to_string(g.edges.size()) + " edges, " + std::to_string(g.traced_to_base.size()) +
          " merged features trace back to the base");
  return sankey;
}

void llr(Context& ctx) {
  if (ctx.config.hypotheses.empty()) throw ConfigError("llr needs at least one hypothesis in the config");
  const auto in = load_inputs(ctx);
  std::vector<TokenId> train_tokens;
  for (const auto& s : in.corpus.sources) {
    for (const auto& d : s.train) train_tokens.insert(train_tokens.end(), d.begin(), d.end());
  }
  const auto unigram = proxy::fit_unigram(train_tokens, in.tokenizer.vocab_size(), ctx.config.llr_alpha);
  std::vector<proxy::FeatureHypothesis> hyps;
  for (const auto& h : ctx.config.hypotheses) {
    hyps.push_back(proxy::hypothesis_from_strings(h.name, h.strings, in.tokenizer, h.epsilon));
  }
  std::vector<json> recs;
  for (const auto& name : ctx.config.model_names()) {
    const auto m = load_activations(ctx, name);
    const auto tokens = matrix_tokens(ctx, in, m);
    for (const auto& h : hyps) {
      std::vector<proxy::LlrReport> reports;
      for (std::size_t f = 0; f < m.n_features(); ++f) {
        if (m.is_dead(f)) continue;
        reports.push_back(proxy::feature_llr(m.rows[f], f, tokens, h, unigram));
      }
      std::stable_sort(reports.begin(), reports.end(),
                       [](const auto& a, const auto& b) { return a.llr > b.llr; });
      for (std::size_t r = 0; r < reports.size() && r < ctx.config.llr_top; ++r) {
        const auto& rep = reports[r];
        recs.push_back({{"model", name},
                        {"hypothesis", h.name},
                        {"rank", r + 1},
                        {"feature", rep.feature},
                        {"llr", rep.llr},
                        {"mass_on_target", rep.mass_on_target},
                        {"off_target_ratio", rep.off_target_ratio ? json(*rep.off_target_ratio) : json(nullptr)},
                        {"active_tokens", rep.active_tokens}});
      }
      if (!reports.empty()) {
        ctx.say(name + " / " + h.name + ": best feature " + std::to_string(reports[0].feature) + " llr " +
                std::to_string(reports[0].llr));
      }
    }
  }
  io::write_atomic(ctx.paths.llr(), io::to_jsonl(recs));
}

void explain(Context& ctx, const std::string& model) {
  const auto& a = ctx.config.autointerp;
  const auto in = load_inputs(ctx);
  auto store = std::make_shared<autointerp::FixtureStore>(resolve(ctx.config.config_dir, a.fixtures));
  std::unique_ptr<autointerp::Transport> transport;
  if (a.mode != autointerp::ClientMode::kReplay) {
    if (ctx.transport) {
      transport = std::make_unique<BorrowedTransport>(*ctx.transport);
    } else {
      autointerp::HttpSettings hs;
      hs.base_url = a.base_url;
      hs.api_key_env = a.api_key_env;
      transport = autointerp::make_http_transport(hs);
    }
  }
  autointerp::ClientSettings cs;
  cs.mode = a.mode;
  cs.model = a.model;
  cs.cost_per_call = a.cost_per_call;
  autointerp::Client client(cs, std::move(transport), store);

  for (const auto& name : selected(ctx.config, model)) {
    const auto m = load_activations(ctx, name);
    const auto tokens = matrix_tokens(ctx, in, m);
    std::vector<json> recs;
    for (auto f : top_features(m, a.features)) {
      const auto [ex, sc] = autointerp::sample_evidence(m.rows[f], f, tokens, in.tokenizer, a.k_explain, a.k_score,
                                                        mix_seed(seed_for(ctx.config, "explain:" + name), a.seed));
      json rec = {{"model", name}, {"feature", f}, {"prompt_version", autointerp::kPromptVersion}};
      try {
        const auto e = autointerp::generate_explanation(client, ex);
        const auto sim = autointerp::simulate(client, e, sc);
        std::vector<int> truth;
        for (const auto& item : sc.items) truth.push_back(item.level);
        const auto s = autointerp::score(sim.levels, truth, f);
        rec["explanation"] = e.text;
        rec["predicted"] = s.predicted;
        rec["truth"] = s.truth;
        rec["pearson_r"] = s.pearson_r ? json(*s.pearson_r) : json(nullptr);
        rec["imputed"] = std::count(sim.imputed.begin(), sim.imputed.end(), true);
        rec["clamped"] = std::count(sim.clamped.begin(), sim.clamped.end(), true);
      } catch (const ProtocolError& e) {
        rec["error"] = e.what();
      }
      recs.push_back(rec);
    }
    fs::create_directories(ctx.paths.autointerp(name).parent_path());
    io::write_atomic(ctx.paths.autointerp(name), io::to_jsonl(recs));
    ctx.say(name + ": explained " + std::to_string(recs.size()) + " features");
  }

  std::vector<autointerp::SimulationScore> scores;
  json covered = json::array();
  for (const auto& name : ctx.config.model_names()) {
    if (!fs::exists(ctx.paths.autointerp(name))) continue;
    covered.push_back(name);
    for (const auto& r : io::read_jsonl(ctx.paths.autointerp(name))) {
      if (!r.contains("pearson_r")) continue;
      autointerp::SimulationScore s;
      if (!r["pearson_r"].is_null()) s.pearson_r = r["pearson_r"].get<double>();
      scores.push_back(s);
    }
  }
  const auto h = autointerp::correlation_histogram(scores);
  write_json(ctx.paths.histogram(),
             {{"lo", h.lo}, {"hi", h.hi}, {"counts", h.counts}, {"undefined", h.undefined}, {"models", covered}});
  ctx.say("requests " + std::to_string(client.requests()) + ", network calls " +
          std::to_string(client.network_calls()) + ", estimated cost $" + std::to_string(client.estimated_cost()));
}

void report(Context& ctx) {
  const auto& c = ctx.config;
  require(ctx.paths.sweep_csv(), "merge-sweep");
  require(ctx.paths.selection(), "merge-select");
  require(ctx.paths.sankey(), "flow-graph");
  const auto in = load_inputs(ctx);
  const auto sweep = report::sweep_from_csv(io::read_file(ctx.paths.sweep_csv()));
  const auto sel = read_json(ctx.paths.selection());
  fs::create_directories(ctx.paths.reports());
  io::write_atomic(ctx.paths.reports() / "sweep.html",
                   report::sweep_html(sweep, c.merge.a, c.merge.b, sel.at("t_star").get<double>()));
  io::write_atomic(ctx.paths.reports() / "sankey.html", io::read_file(ctx.paths.sankey_html()));

  std::string index =
      "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Feature flow run</title></head>"
      "<body style=\"font-family:sans-serif;margin:2em\">\n<h1>Feature flow run</h1>\n<ul>\n"
      "<li><a href=\"sweep.html\">Merge sweep</a> (t* = " +
      report::percent(sel.at("t_star").get<double>()) +
      ")</li>\n<li><a href=\"sankey.html\">Feature flow</a></li>\n</ul>\n";
  for (const auto& name : c.model_names()) {
    const auto m = load_activations(ctx, name);
    const auto tokens = matrix_tokens(ctx, in, m);
    std::map<std::size_t, std::string> explanations;
    if (fs::exists(ctx.paths.autointerp(name))) {
      for (const auto& r : io::read_jsonl(ctx.paths.autointerp(name))) {
        if (r.contains("explanation")) explanations[r["feature"].get<std::size_t>()] = r["explanation"];
      }
    }
    std::vector<std::pair<std::string, flow::BestMatches>> neighbours;
    for (const auto& [p, ch] : c.edges()) {
      if (p != name && ch != name) continue;
      if (!fs::exists(ctx.paths.matches(p, ch))) continue;
      neighbours.emplace_back(p == name ? ch : p, matches_from_json(read_json(ctx.paths.matches(p, ch))));
    }
    fs::create_directories(ctx.paths.reports() / name);
    index += "<h2>" + report::html_escape(name) + "</h2>\n<ul>\n";
    for (auto f : top_features(m, c.report_features)) {
      report::FeatureReportInput ri;
      ri.model_id = name;
      ri.feature = f;
      ri.window_len = std::min(c.report_window, m.n_tokens);
      ri.window_start = report::window_around_max(m.rows[f], m.n_tokens, ri.window_len);
      for (const auto& [other, bm] : neighbours) {
        const bool is_parent = bm.parent_model == name;
        const auto& match = is_parent ? bm.for_parent[f] : bm.for_child[f];
        if (!match) continue;
        ri.annotations.push_back({"best match in " + other + ": feature " +
                                      std::to_string(is_parent ? match->child : match->parent),
                                  match->r});
      }
      if (auto it = explanations.find(f); it != explanations.end()) ri.explanation = it->second;
      const std::string file = "feature_" + std::to_string(f) + ".html";
      io::write_atomic(ctx.paths.reports() / name / file,
                       report::render_feature_report(m.rows[f], tokens, in.tokenizer, ri));
      index += "<li><a href=\"" + report::html_escape(name) + "/" + file + "\">feature " + std::to_string(f) +
               "</a></li>\n";
    }
    index += "</ul>\n";
  }
  index += "</body></html>\n";
  io::write_atomic(ctx.paths.reports() / "index.html", index);
  ctx.say("reports written to " + ctx.paths.reports().string());
}

void run_all(Context& ctx, bool with_explain) {
  tokenizer_train(ctx);
  lm_train(ctx);
  lm_finetune(ctx);
  merge_sweep(ctx);
  merge_select(ctx);
  lm_eval(ctx);
  sae_train(ctx);
  collect(ctx);
  correlate(ctx);
  classify(ctx);
  flow_graph(ctx);
  if (!ctx.config.hypotheses.empty()) llr(ctx);
  if (with_explain) explain(ctx);
  report(ctx);
}

}  // namespace featflow::pipeline
