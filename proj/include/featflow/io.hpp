#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "featflow/common.hpp"
#include "featflow/flow.hpp"
#include "featflow/lm.hpp"
#include "featflow/sae.hpp"
#include "featflow/train.hpp"

namespace featflow::io {

using nlohmann::json;

/// Writes to a sibling temp file, then renames over `path`.
void write_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Config <-> JSON. Unknown keys are rejected so typos fail loudly.
// ---------------------------------------------------------------------------

/// Reads fields from a JSON object and rejects keys nobody asked for.
class Fields {
 public:
  Fields(const json& j, std::string what) : j_(j), what_(std::move(what)) {
    if (!j.is_object()) throw ConfigError(what_ + " must be a JSON object");
  }
  template <typename T>
  void get(const char* key, T& into) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      into = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(what_ + "." + key + ": " + e.what());
    }
  }
  /// Raw value of a nested key, or null when absent.
  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown key '" + k + "' in " + what_);
    }
  }

 private:
  const json& j_;
  std::string what_;
  std::set<std::string> seen_;
};


json to_json(const lm::LMConfig& c);
lm::LMConfig lm_config_from_json(const json& j, lm::LMConfig defaults = {});
json to_json(const sae::SaeConfig& c);
sae::SaeConfig sae_config_from_json(const json& j, sae::SaeConfig defaults = {});
json to_json(const train::TrainConfig& c);
train::TrainConfig train_config_from_json(const json& j, train::TrainConfig defaults = {});

json to_json(const train::EvalRecord& r);
json to_json(const sae::SaeDiagnostics& d);

// ---------------------------------------------------------------------------
// Checkpoint container
//
//   "FFCK" | u32 version | u64 header bytes | header JSON
//   | u64 payload floats | f32 payload (little endian) | u64 FNV-1a digest
//
// The digest covers every byte before it. Loading verifies magic, version
// and digest before anything is decoded, so a damaged file never yields a
// partially filled object.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointKind { kLm, kSae };

struct Lineage {
  std::vector<std::uint64_t> parents;  // digests of the checkpoints this one derives from
  json inputs = json::object();        // digests of other inputs (tokenizer, corpora)
  bool operator==(const Lineage&) const = default;
};

struct LmCheckpoint {
  lm::LMParams<float> params;
  Lineage lineage;
  std::uint64_t digest = 0;
};

struct SaeCheckpoint {
  sae::SaeConfig config;
  sae::SaeParams<float> params;
  Lineage lineage;
  std::uint64_t digest = 0;
};

/// Returns the file digest, which later artifacts cite as their parent.
std::uint64_t save_lm(const std::filesystem::path& path, const lm::LMParams<float>& params,
                      const Lineage& lineage = {});
LmCheckpoint load_lm(const std::filesystem::path& path);

std::uint64_t save_sae(const std::filesystem::path& path, const sae::SaeConfig& config,
                       const sae::SaeParams<float>& params, const Lineage& lineage = {});
SaeCheckpoint load_sae(const std::filesystem::path& path);

/// Kind, version and digest of a verified checkpoint file.
struct CheckpointInfo {
  CheckpointKind kind;
  std::uint32_t version;
  std::uint64_t digest;
  json header;
};
CheckpointInfo inspect_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Activation-matrix container
//
//   "FFAM" | u32 version | u64 header bytes | header JSON
//   | per row: varint nnz, varint index deltas, f32 values
//   | u64 FNV-1a digest
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kMatrixVersion = 1;

std::string encode_matrix(const flow::ActivationMatrix& m, const json& provenance = json::object());
flow::ActivationMatrix decode_matrix(std::string_view bytes, json* provenance = nullptr);
std::uint64_t save_matrix(const std::filesystem::path& path, const flow::ActivationMatrix& m,
                          const json& provenance = json::object());
flow::ActivationMatrix load_matrix(const std::filesystem::path& path, json* provenance = nullptr);

void put_varint(std::string& out, std::uint64_t v);
/// Advances `pos`; throws IoError on truncation or overlong encodings.
std::uint64_t get_varint(std::string_view in, std::size_t& pos);

// ---------------------------------------------------------------------------
// Line-delimited records
// ---------------------------------------------------------------------------

std::string to_jsonl(const std::vector<json>& records);
std::vector<json> read_jsonl(const std::filesystem::path& path);

}  // namespace featflow::io
