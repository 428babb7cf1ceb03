#include "featflow/autointerp.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "featflow/rng.hpp"

namespace featflow::autointerp {

using nlohmann::json;

int quantize(double activation, double feature_max) {
  if (!(feature_max > 0.0) || !(activation > 0.0)) return 0;
  const double scaled = std::floor(kMaxLevel * activation / feature_max + 0.5);
  return static_cast<int>(std::clamp(scaled, 0.0, static_cast<double>(kMaxLevel)));
}

std::string token_text(const Tokenizer& tokenizer, TokenId id) {
  const auto& s = tokenizer.special();
  if (id == s.bos) return "<bos>";
  if (id == s.eos) return "<eos>";
  if (id == s.pad) return "<pad>";
  return tokenizer.token_bytes(id);
}

std::pair<EvidenceSample, EvidenceSample> sample_evidence(
    const flow::SparseRow& row, std::size_t feature, std::span<const TokenId> tokens,
    const Tokenizer& tokenizer, std::size_t k_explain, std::size_t k_score, std::uint64_t seed) {
  if (row.nnz() == 0) {
    throw UndefinedMetric("feature " + std::to_string(feature) + " never fires; no evidence to sample");
  }
  if (row.index.back() >= tokens.size()) {
    throw ContractViolation("activation row extends past the token stream");
  }
  const double max = *std::max_element(row.value.begin(), row.value.end());

  std::vector<std::size_t> order(row.nnz());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return row.value[a] > row.value[b]; });

  const std::size_t top_quota[2] = {(k_explain + 1) / 2, (k_score + 1) / 2};
  std::vector<std::uint32_t> picked[2];
  std::vector<bool> used(tokens.size(), false);
  std::size_t side = 0;
  for (std::size_t k : order) {
    if (picked[0].size() >= top_quota[0] && picked[1].size() >= top_quota[1]) break;
    if (picked[side].size() >= top_quota[side]) side ^= 1;
    picked[side].push_back(row.index[k]);
    used[row.index[k]] = true;
    side ^= 1;
  }

  std::vector<std::uint32_t> rest;
  for (std::uint32_t t = 0; t < tokens.size(); ++t) {
    if (!used[t]) rest.push_back(t);
  }
  Rng rng(mix_seed(seed, feature));
  std::shuffle(rest.begin(), rest.end(), rng);
  std::size_t next = 0;
  const std::size_t total[2] = {k_explain, k_score};
  for (int s = 0; s < 2; ++s) {
    while (picked[s].size() < total[s] && next < rest.size()) picked[s].push_back(rest[next++]);
  }

  auto build = [&](std::vector<std::uint32_t>& pos, SplitKind kind) {
    std::sort(pos.begin(), pos.end());
    EvidenceSample e{feature, kind, {}};
    for (std::uint32_t p : pos) {
      auto it = std::lower_bound(row.index.begin(), row.index.end(), p);
      const double a =
          (it != row.index.end() && *it == p) ? row.value[static_cast<std::size_t>(it - row.index.begin())] : 0.0;
      e.items.push_back({p, token_text(tokenizer, tokens[p]), quantize(a, max)});
    }
    return e;
  };
  return {build(picked[0], SplitKind::kExplain), build(picked[1], SplitKind::kScore)};
}

// ---------------------------------------------------------------------------

std::string ChatRequest::to_json() const {
  json msgs = json::array();
  for (const auto& m : messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
  json j = {{"model", model}, {"messages", msgs}, {"temperature", temperature},
            {"max_tokens", max_tokens}};
  return j.dump();
}

std::string ChatRequest::key() const { return to_hex(fnv1a(to_json())); }

ChatResponse parse_chat_response(const std::string& raw) {
  json j;
  try {
    j = json::parse(raw);
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("provider response is not JSON: ") + e.what(), raw);
  }
  try {
    const auto& content = j.at("choices").at(0).at("message").at("content");
    if (!content.is_string()) throw ProtocolError("provider message content is not a string", raw);
    ChatResponse r;
    r.content = content.get<std::string>();
    if (j.contains("model") && j["model"].is_string()) r.model = j["model"].get<std::string>();
    r.raw = raw;
    return r;
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("provider response lacks choices[0].message.content: ") + e.what(),
                        raw);
  }
}

FixtureStore::FixtureStore(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

std::optional<std::string> FixtureStore::find(const ChatRequest& request) const {
  const auto path = dir_ / (request.key() + ".json");
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::stringstream ss;
  ss << in.rdbuf();
  json j;
  try {
    j = json::parse(ss.str());
  } catch (const json::exception& e) {
    throw IoError("fixture " + path.string() + " is not valid JSON: " + e.what());
  }
  if (j.value("request", json()).dump() != json::parse(request.to_json()).dump()) {
    throw IoError("fixture " + path.string() + " holds a different request (hash collision)");
  }
  return j.at("response").get<std::string>();
}

void FixtureStore::put(const ChatRequest& request, const std::string& raw_response) {
  const auto path = dir_ / (request.key() + ".json");
  if (std::filesystem::exists(path)) return;
  json j = {{"key", request.key()},
            {"prompt_version", std::string(kPromptVersion)},
            {"request", json::parse(request.to_json())},
            {"response", raw_response}};
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write fixture " + tmp);
    out << j.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

ClientMode client_mode_from_string(const std::string& s) {
  if (s == "live") return ClientMode::kLive;
  if (s == "record") return ClientMode::kRecord;
  if (s == "replay") return ClientMode::kReplay;
  throw ConfigError("unknown client mode '" + s + "' (live, record, replay)");
}

Client::Client(ClientSettings settings, std::unique_ptr<Transport> transport,
               std::shared_ptr<FixtureStore> store)
    : settings_(std::move(settings)), transport_(std::move(transport)), store_(std::move(store)) {
  if (settings_.mode != ClientMode::kReplay && !transport_) {
    throw ConfigError("live and record modes need a transport");
  }
  if (settings_.mode != ClientMode::kReplay && settings_.model.empty()) {
    throw ConfigError("live and record modes need a provider model name");
  }
  if (settings_.mode != ClientMode::kLive && !store_) {
    throw ConfigError("record and replay modes need a fixture store");
  }
}

std::string Client::send_with_retry(const std::string& body) {
  std::string last;
  for (int attempt = 0; attempt <= settings_.max_retries; ++attempt) {
    if (settings_.min_interval.count() > 0 && last_call_ != std::chrono::steady_clock::time_point{}) {
      std::this_thread::sleep_until(last_call_ + settings_.min_interval);
    }
    last_call_ = std::chrono::steady_clock::now();
    ++network_calls_;
    try {
      return transport_->post(body);
    } catch (const ProviderError& e) {
      if (!e.retriable()) throw;
      last = e.what();
      if (attempt < settings_.max_retries) std::this_thread::sleep_for(settings_.backoff * (1 << attempt));
    }
  }
  throw ProviderError("provider unreachable after " + std::to_string(settings_.max_retries + 1) +
                          " attempts: " + last,
                      true);
}

ChatResponse Client::complete(const ChatRequest& request) {
  ++requests_;
  if (settings_.mode != ClientMode::kLive) {
    if (auto raw = store_->find(request)) return parse_chat_response(*raw);
    if (settings_.mode == ClientMode::kReplay) {
      throw ProviderError("no fixture for request " + request.key() + " in " +
                              store_->dir().string() + "; run once in record mode",
                          false);
    }
  }
  const std::string raw = send_with_retry(request.to_json());
  auto parsed = parse_chat_response(raw);
  if (settings_.mode == ClientMode::kRecord) store_->put(request, raw);
  return parsed;
}

// ---------------------------------------------------------------------------

std::string format_item(const EvidenceItem& item) {
  return json(item.token).dump() + "\t" + std::to_string(item.level);
}

ChatRequest explain_request(const EvidenceSample& sample, const std::string& model) {
  std::string user =
      "Below are tokens from a text corpus, one per line, each followed by how strongly a "
      "single neuron-like feature fires on it, on a scale from 0 (not at all) to 10 (its "
      "maximum).\n\n";
  for (const auto& item : sample.items) user += format_item(item) + "\n";
  user +=
      "\nIn one short sentence, describe what the feature responds to. Do not list tokens "
      "together with their levels and do not repeat any line above.";
  return ChatRequest{model,
                     {{"system", "You explain the behaviour of features inside a language model."},
                      {"user", std::move(user)}},
                     0.0,
                     128};
}

ChatRequest simulate_request(const std::string& explanation, const EvidenceSample& sample,
                             const std::string& model) {
  std::string user = "A feature inside a language model is described as follows:\n" +
                     explanation +
                     "\n\nFor each numbered token below, predict the feature's activation from 0 "
                     "to 10.\n\n";
  for (std::size_t i = 0; i < sample.items.size(); ++i) {
    user += std::to_string(i + 1) + "\t" + json(sample.items[i].token).dump() + "\n";
  }
  user += "\nAnswer with one line per token in the form <number><TAB><level> and nothing else.";
  return ChatRequest{model,
                     {{"system", "You simulate features inside a language model."},
                      {"user", std::move(user)}},
                     0.0,
                     static_cast<int>(16 + 8 * sample.items.size())};
}

namespace {
std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}
}  // namespace

Explanation generate_explanation(Client& client, const EvidenceSample& sample) {
  auto req = explain_request(sample, client.settings().model);
  auto resp = client.complete(req);
  Explanation e{sample.feature, trim(resp.content),
                resp.model.empty() ? client.settings().model : resp.model,
                client.settings().cost_per_call};
  if (e.text.empty()) throw ProtocolError("provider returned an empty explanation", resp.raw);
  for (const auto& item : sample.items) {
    if (e.text.find(format_item(item)) != std::string::npos) {
      throw ProtocolError("explanation repeats an evidence line verbatim", resp.raw);
    }
  }
  return e;
}

bool SimulationParse::any_flagged() const {
  return std::find(imputed.begin(), imputed.end(), true) != imputed.end() ||
         std::find(clamped.begin(), clamped.end(), true) != clamped.end();
}

SimulationParse parse_simulation(const std::string& text, std::size_t n_items) {
  static const std::regex quoted(R"("(?:[^"\\]|\\.)*")");
  static const std::regex number(R"(-?\d+(?:\.\d+)?)");
  auto numbers_in = [](const std::string& line) {
    std::vector<double> out;
    const std::string stripped = std::regex_replace(line, quoted, " ");
    for (std::sregex_iterator it(stripped.begin(), stripped.end(), number), end; it != end; ++it) {
      out.push_back(std::stod(it->str()));
    }
    return out;
  };

  SimulationParse p;
  p.levels.assign(n_items, 0);
  p.imputed.assign(n_items, true);
  p.clamped.assign(n_items, false);
  auto set = [&](std::size_t i, double v) {
    double r = std::floor(v + 0.5);
    if (r < 0 || r > kMaxLevel) {
      p.clamped[i] = true;
      r = std::clamp(r, 0.0, static_cast<double>(kMaxLevel));
    }
    p.levels[i] = static_cast<int>(r);
    p.imputed[i] = false;
  };

  // A structured line opens with its index, e.g. "3\t7", "[3] \"x\": 7" or "#3 -> 7".
  static const std::regex leading_index(R"(^\s*[\[(#]?\d+\b)");
  bool structured = false;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (!std::regex_search(line, leading_index)) continue;
    auto nums = numbers_in(line);
    if (nums.size() != 2 || nums[0] != std::floor(nums[0])) continue;
    if (nums[0] < 1 || nums[0] > static_cast<double>(n_items)) continue;
    structured = true;
    const auto i = static_cast<std::size_t>(nums[0]) - 1;
    if (p.imputed[i]) set(i, nums[1]);
  }
  if (!structured) {
    auto nums = numbers_in(text);
    for (std::size_t i = 0; i < std::min(nums.size(), n_items); ++i) set(i, nums[i]);
  }
  return p;
}

SimulationParse simulate(Client& client, const Explanation& explanation,
                         const EvidenceSample& sample) {
  auto resp = client.complete(simulate_request(explanation.text, sample, client.settings().model));
  return parse_simulation(resp.content, sample.items.size());
}

SimulationScore score(const std::vector<int>& predicted, const std::vector<int>& truth,
                      std::size_t feature) {
  if (predicted.size() != truth.size() || predicted.size() < 2) {
    throw ContractViolation("score needs two level lists of equal length >= 2");
  }
  SimulationScore s{feature, predicted, truth, std::nullopt};
  const double n = static_cast<double>(truth.size());
  double mp = 0, mt = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    mp += predicted[i];
    mt += truth[i];
  }
  mp /= n;
  mt /= n;
  double cov = 0, vp = 0, vt = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double a = predicted[i] - mp, b = truth[i] - mt;
    cov += a * b;
    vp += a * a;
    vt += b * b;
  }
  if (vp > 0 && vt > 0) s.pearson_r = std::clamp(cov / std::sqrt(vp * vt), -1.0, 1.0);
  return s;
}

Histogram correlation_histogram(std::span<const SimulationScore> scores, std::size_t bins) {
  if (bins == 0) throw ContractViolation("histogram needs at least one bin");
  Histogram h;
  h.counts.assign(bins, 0);
  for (const auto& s : scores) {
    if (!s.pearson_r) {
      ++h.undefined;
      continue;
    }
    const double x = (*s.pearson_r - h.lo) / (h.hi - h.lo);
    auto b = static_cast<std::size_t>(std::floor(x * static_cast<double>(bins)));
    ++h.counts[std::min(b, bins - 1)];
  }
  return h;
}

}  // namespace featflow::autointerp
