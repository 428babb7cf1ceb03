#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "featflow/common.hpp"
#include "featflow/corpus.hpp"
#include "featflow/flow.hpp"

namespace featflow::autointerp {

inline constexpr int kMaxLevel = 10;

/// round(10 * a / max), clamped to [0, 10]. Level 0 iff a < max / 20.
int quantize(double activation, double feature_max);

enum class SplitKind { kExplain, kScore };

struct EvidenceItem {
  std::uint32_t position = 0;
  std::string token;
  int level = 0;
};

struct EvidenceSample {
  std::size_t feature = 0;
  SplitKind split = SplitKind::kExplain;
  std::vector<EvidenceItem> items;
};

/// Printable text of a token; special ids render as <bos>, <eos>, <pad>.
std::string token_text(const Tokenizer& tokenizer, TokenId id);

/// Two disjoint samples. Each takes half of its items from the highest
/// activations (ranks alternate between the two splits) and the rest
/// uniformly from the remaining positions. Levels are scaled by the row max.
/// Throws UndefinedMetric for a feature that never fires.
std::pair<EvidenceSample, EvidenceSample> sample_evidence(
    const flow::SparseRow& row, std::size_t feature, std::span<const TokenId> tokens,
    const Tokenizer& tokenizer, std::size_t k_explain, std::size_t k_score, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Chat-style provider
// ---------------------------------------------------------------------------

struct ChatMessage {
  std::string role;
  std::string content;
};

struct ChatRequest {
  std::string model;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  int max_tokens = 512;

  /// Canonical JSON body; identical requests give identical bytes.
  std::string to_json() const;
  /// Fixture key: hex digest of the canonical body.
  std::string key() const;
};

struct ChatResponse {
  std::string content;
  std::string model;
  std::string raw;
};

/// Extracts choices[0].message.content. Throws ProtocolError carrying the
/// raw payload when the shape is wrong.
ChatResponse parse_chat_response(const std::string& raw);

/// Sends one request body, returns the raw response body. Throws
/// ProviderError(retriable) on transport failures.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual std::string post(const std::string& body) = 0;
};

struct HttpSettings {
  std::string base_url = "https://api.openai.com/v1";
  std::string path = "/chat/completions";
  std::string api_key_env = "FEATFLOW_LLM_API_KEY";
  std::chrono::seconds timeout{60};
};

std::unique_ptr<Transport> make_http_transport(const HttpSettings& settings);

/// Request/response records keyed by content hash, one JSON file each.
/// Existing records are never overwritten.
class FixtureStore {
 public:
  explicit FixtureStore(std::filesystem::path dir);

  std::optional<std::string> find(const ChatRequest& request) const;
  void put(const ChatRequest& request, const std::string& raw_response);
  const std::filesystem::path& dir() const noexcept { return dir_; }

 private:
  std::filesystem::path dir_;
};

enum class ClientMode { kLive, kRecord, kReplay };

ClientMode client_mode_from_string(const std::string& s);

struct ClientSettings {
  ClientMode mode = ClientMode::kReplay;
  std::string model;  // required outside replay mode
  double cost_per_call = 0.055;  // USD estimate per request
  int max_retries = 4;
  std::chrono::milliseconds backoff{500};  // doubled after each failed attempt
  std::chrono::milliseconds min_interval{0};
};

class Client {
 public:
  /// `transport` may be null in replay mode; `store` may be null in live mode.
  Client(ClientSettings settings, std::unique_ptr<Transport> transport,
         std::shared_ptr<FixtureStore> store);

  ChatResponse complete(const ChatRequest& request);

  const ClientSettings& settings() const noexcept { return settings_; }
  std::size_t network_calls() const noexcept { return network_calls_; }
  std::size_t requests() const noexcept { return requests_; }
  double estimated_cost() const noexcept { return requests_ * settings_.cost_per_call; }

 private:
  std::string send_with_retry(const std::string& body);

  ClientSettings settings_;
  std::unique_ptr<Transport> transport_;
  std::shared_ptr<FixtureStore> store_;
  std::size_t network_calls_ = 0;
  std::size_t requests_ = 0;
  std::chrono::steady_clock::time_point last_call_{};
};

// ---------------------------------------------------------------------------
// Explain, simulate, score
// ---------------------------------------------------------------------------

inline constexpr std::string_view kPromptVersion = "v1";

/// How an evidence item appears in prompts: JSON-quoted token, tab, level.
std::string format_item(const EvidenceItem& item);

ChatRequest explain_request(const EvidenceSample& sample, const std::string& model);
ChatRequest simulate_request(const std::string& explanation, const EvidenceSample& sample,
                             const std::string& model);

struct Explanation {
  std::size_t feature = 0;
  std::string text;
  std::string model;
  double cost = 0.0;
};

/// Throws ProtocolError when the text is empty or repeats an evidence line verbatim.
Explanation generate_explanation(Client& client, const EvidenceSample& sample);

struct SimulationParse {
  std::vector<int> levels;
  std::vector<bool> imputed;  // missing entries, set to 0
  std::vector<bool> clamped;  // values outside [0, 10]
  bool any_flagged() const;
};

/// Reads "index<sep>level" lines (1-based index first on the line, optional
/// quoted token in between). Without any such line, numbers are read in order
/// as levels.
SimulationParse parse_simulation(const std::string& text, std::size_t n_items);

SimulationParse simulate(Client& client, const Explanation& explanation,
                         const EvidenceSample& sample);

struct SimulationScore {
  std::size_t feature = 0;
  std::vector<int> predicted;
  std::vector<int> truth;
  std::optional<double> pearson_r;  // none on zero variance
};

/// Pearson r of two equal-length level lists (length >= 2).
SimulationScore score(const std::vector<int>& predicted, const std::vector<int>& truth,
                      std::size_t feature = 0);

struct Histogram {
  double lo = -1.0;
  double hi = 1.0;
  std::vector<std::size_t> counts;
  std::size_t undefined = 0;
};

/// Equal-width bins over [lo, hi]; the top edge falls in the last bin.
Histogram correlation_histogram(std::span<const SimulationScore> scores, std::size_t bins = 20);

}  // namespace featflow::autointerp
