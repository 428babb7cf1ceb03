#include "featflow/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <unistd.h>

namespace featflow::io {

static_assert(std::endian::native == std::endian::little,
              "containers store raw little-endian floats");

void write_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

json to_json(const lm::LMConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_heads", c.n_heads},
          {"d_mlp", c.d_mlp},           {"ctx_len", c.ctx_len},   {"rope_base", c.rope_base},
          {"norm_eps", c.norm_eps},     {"init_std", c.init_std}, {"seed", c.seed}};
}

lm::LMConfig lm_config_from_json(const json& j, lm::LMConfig c) {
  Fields f(j, "model");
  f.get("vocab_size", c.vocab_size);
  f.get("d_model", c.d_model);
  f.get("n_heads", c.n_heads);
  f.get("d_mlp", c.d_mlp);
  f.get("ctx_len", c.ctx_len);
  f.get("rope_base", c.rope_base);
  f.get("norm_eps", c.norm_eps);
  f.get("init_std", c.init_std);
  f.get("seed", c.seed);
  f.finish();
  return c;
}

json to_json(const sae::SaeConfig& c) {
  return {{"n", c.n},
          {"expansion", c.expansion},
          {"l1", c.l1},
          {"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"block_len", c.block_len},
          {"batch_blocks", c.batch_blocks},
          {"train_tokens", c.train_tokens},
          {"eval_every", c.eval_every},
          {"dead_window", c.dead_window},
          {"centering", sae::to_string(c.centering)},
          {"seed", c.seed}};
}

sae::SaeConfig sae_config_from_json(const json& j, sae::SaeConfig c) {
  Fields f(j, "sae");
  f.get("n", c.n);
  f.get("expansion", c.expansion);
  f.get("l1", c.l1);
  f.get("lr", c.lr);
  f.get("beta1", c.beta1);
  f.get("beta2", c.beta2);
  f.get("block_len", c.block_len);
  f.get("batch_blocks", c.batch_blocks);
  f.get("train_tokens", c.train_tokens);
  f.get("eval_every", c.eval_every);
  f.get("dead_window", c.dead_window);
  std::string centering = sae::to_string(c.centering);
  f.get("centering", centering);
  c.centering = sae::centering_from_string(centering);
  f.get("seed", c.seed);
  f.finish();
  return c;
}

json to_json(const train::TrainConfig& c) {
  return {{"total_tokens", c.total_tokens}, {"batch_blocks", c.batch_blocks},
          {"lr", c.adam.lr},                {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},          {"eps", c.adam.eps},
          {"clip_norm", c.clip_norm},       {"eval_every", c.eval_every},
          {"eval_tokens", c.eval_tokens},   {"block_len", c.block_len},
          {"seed", c.seed}};
}

train::TrainConfig train_config_from_json(const json& j, train::TrainConfig c) {
  Fields f(j, "train");
  f.get("total_tokens", c.total_tokens);
  f.get("batch_blocks", c.batch_blocks);
  f.get("lr", c.adam.lr);
  f.get("beta1", c.adam.beta1);
  f.get("beta2", c.adam.beta2);
  f.get("eps", c.adam.eps);
  f.get("clip_norm", c.clip_norm);
  f.get("eval_every", c.eval_every);
  f.get("eval_tokens", c.eval_tokens);
  f.get("block_len", c.block_len);
  f.get("seed", c.seed);
  f.finish();
  return c;
}

json to_json(const train::EvalRecord& r) {
  json streams = json::array();
  for (const auto& s : r.streams) {
    streams.push_back({{"name", s.name}, {"loss", s.loss}, {"accuracy", s.accuracy},
                       {"tokens", s.tokens}});
  }
  return {{"step", r.step}, {"tokens_seen", r.tokens_seen}, {"train_loss", r.train_loss},
          {"streams", streams}};
}

json to_json(const sae::SaeDiagnostics& d) {
  json j = {{"step", d.step},
            {"tokens_seen", d.tokens_seen},
            {"mean_l0", d.mean_l0},
            {"mean_mse", d.mean_mse},
            {"mean_l1", d.mean_l1},
            {"max_decoder_norm_deviation", d.max_decoder_norm_deviation},
            {"dead_features", d.dead_features.size()}};
  j["explained_loss"] = d.explained_loss ? json(*d.explained_loss) : json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------
// Containers
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void put_raw(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

/// Bounds-checked little-endian reader over a verified buffer.
class Reader {
 public:
  Reader(std::string_view bytes, std::string what) : b_(bytes), what_(std::move(what)) {}
  template <typename T>
  T raw() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t& pos() { return pos_; }
  bool done() const { return pos_ == b_.size(); }
  void need(std::size_t n) const {
    if (n > b_.size() - pos_) throw IoError(what_ + " is truncated");
  }

 private:
  std::string_view b_;
  std::string what_;
  std::size_t pos_ = 0;
};

/// Checks magic, version and trailing digest; returns the body without the digest.
std::string_view verify_container(std::string_view bytes, std::string_view magic,
                                  std::uint32_t version, const std::string& what) {
  if (bytes.size() < magic.size() + 4 + 8 || bytes.substr(0, magic.size()) != magic) {
    throw IoError(what + " is not a " + std::string(magic) + " container");
  }
  std::uint32_t v;
  std::memcpy(&v, bytes.data() + magic.size(), 4);
  if (v != version) {
    throw IoError(what + " has format version " + std::to_string(v) + ", expected " +
                  std::to_string(version));
  }
  const auto body = bytes.substr(0, bytes.size() - 8);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 8);
  if (fnv1a(body) != stored) throw IoError(what + " failed its digest check (corrupted file)");
  return body;
}

json parse_header(Reader& r, std::size_t magic_len, const std::string& what) {
  r.take(magic_len + 4);
  const auto len = r.raw<std::uint64_t>();
  const auto text = r.take(len);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(what + " has an unreadable header: " + e.what());
  }
}

std::string seal(std::string body) {
  put_raw(body, fnv1a(body));
  return body;
}

json lineage_json(const Lineage& l) {
  json parents = json::array();
  for (auto p : l.parents) parents.push_back(to_hex(p));
  return {{"parents", parents}, {"inputs", l.inputs}};
}

Lineage lineage_from(const json& j) {
  Lineage l;
  for (const auto& p : j.at("parents")) l.parents.push_back(from_hex(p.get<std::string>()));
  l.inputs = j.at("inputs");
  return l;
}

template <typename Views>
json manifest_json(const Views& views) {
  json m = json::array();
  std::size_t offset = 0;
  for (const auto& v : views) {
    m.push_back({{"name", v.name}, {"rows", v.rows}, {"cols", v.cols}, {"offset", offset}});
    offset += v.data.size();
  }
  return m;
}

constexpr std::string_view kCkMagic = "FFCK";
constexpr std::string_view kAmMagic = "FFAM";

std::string checkpoint_bytes(const json& header, const std::vector<TensorView<const float>>& views) {
  std::string out(kCkMagic);
  put_raw(out, kCheckpointVersion);
  const std::string h = header.dump();
  put_raw<std::uint64_t>(out, h.size());
  out += h;
  std::uint64_t total = 0;
  for (const auto& v : views) total += v.data.size();
  put_raw<std::uint64_t>(out, total);
  for (const auto& v : views) {
    out.append(reinterpret_cast<const char*>(v.data.data()), v.data.size_bytes());
  }
  return seal(std::move(out));
}

/// Fills `views` from the payload after matching the stored manifest exactly.
void fill_payload(Reader& r, const json& header, const std::vector<TensorView<float>>& views,
                  const std::string& what) {
  const auto& m = header.at("manifest");
  if (m.size() != views.size()) throw IoError(what + " manifest has the wrong tensor count");
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (m[i].at("name") != views[i].name || m[i].at("rows") != views[i].rows ||
        m[i].at("cols") != views[i].cols) {
      throw IoError(what + " manifest entry " + std::to_string(i) + " does not match tensor " +
                    views[i].name);
    }
    total += views[i].data.size();
  }
  if (r.raw<std::uint64_t>() != total) throw IoError(what + " payload size does not match manifest");
  for (const auto& v : views) std::memcpy(v.data.data(), r.take(v.data.size_bytes()).data(), v.data.size_bytes());
  if (!r.done()) throw IoError(what + " has trailing bytes");
}

std::vector<TensorView<const float>> sae_views(const sae::SaeParams<float>& p) {
  auto v = p.views();
  v.push_back({"mu", std::span<const float>(p.mu.data(), static_cast<std::size_t>(p.mu.size())),
               p.mu.rows(), p.mu.cols()});
  return v;
}

std::vector<TensorView<float>> sae_views(sae::SaeParams<float>& p) {
  auto v = p.views();
  v.push_back({"mu", std::span<float>(p.mu.data(), static_cast<std::size_t>(p.mu.size())),
               p.mu.rows(), p.mu.cols()});
  return v;
}

struct Verified {
  std::string bytes;
  std::uint64_t digest;
  json header;
};

Verified open_checkpoint(const std::filesystem::path& path) {
  Verified v{read_file(path), 0, {}};
  const std::string what = "checkpoint " + path.string();
  const auto body = verify_container(v.bytes, kCkMagic, kCheckpointVersion, what);
  std::memcpy(&v.digest, v.bytes.data() + body.size(), 8);
  Reader r(body, what);
  v.header = parse_header(r, kCkMagic.size(), what);
  return v;
}

}  // namespace

std::uint64_t save_lm(const std::filesystem::path& path, const lm::LMParams<float>& params,
                      const Lineage& lineage) {
  const auto views = params.views();
  json header = {{"kind", "lm"},
                 {"config", to_json(params.config)},
                 {"manifest", manifest_json(views)},
                 {"lineage", lineage_json(lineage)}};
  const auto bytes = checkpoint_bytes(header, views);
  write_atomic(path, bytes);
  std::uint64_t d;
  std::memcpy(&d, bytes.data() + bytes.size() - 8, 8);
  return d;
}

LmCheckpoint load_lm(const std::filesystem::path& path) {
  auto v = open_checkpoint(path);
  const std::string what = "checkpoint " + path.string();
  if (v.header.value("kind", "") != "lm") {
    throw IoError(what + " holds a '" + v.header.value("kind", "?") + "' checkpoint, not an lm");
  }
  LmCheckpoint ck;
  try {
    const auto cfg = lm_config_from_json(v.header.at("config"));
    cfg.validate();
    ck.params = lm::LMParams<float>::zeros(cfg);
    ck.lineage = lineage_from(v.header.at("lineage"));
  } catch (const json::exception& e) {
    throw IoError(what + " header is incomplete: " + e.what());
  } catch (const ConfigError& e) {
    throw IoError(what + " header is invalid: " + e.what());
  }
  std::string_view body(v.bytes.data(), v.bytes.size() - 8);
  Reader r(body, what);
  parse_header(r, kCkMagic.size(), what);
  fill_payload(r, v.header, ck.params.views(), what);
  ck.digest = v.digest;
  return ck;
}

std::uint64_t save_sae(const std::filesystem::path& path, const sae::SaeConfig& config,
                       const sae::SaeParams<float>& params, const Lineage& lineage) {
  if (params.n() != config.n || params.m() != config.m() || params.centering != config.centering) {
    throw ContractViolation("SAE parameters do not match their config");
  }
  const auto views = sae_views(params);
  json header = {{"kind", "sae"},
                 {"config", to_json(config)},
                 {"manifest", manifest_json(views)},
                 {"lineage", lineage_json(lineage)}};
  const auto bytes = checkpoint_bytes(header, views);
  write_atomic(path, bytes);
  std::uint64_t d;
  std::memcpy(&d, bytes.data() + bytes.size() - 8, 8);
  return d;
}

SaeCheckpoint load_sae(const std::filesystem::path& path) {
  auto v = open_checkpoint(path);
  const std::string what = "checkpoint " + path.string();
  if (v.header.value("kind", "") != "sae") {
    throw IoError(what + " holds a '" + v.header.value("kind", "?") + "' checkpoint, not an sae");
  }
  SaeCheckpoint ck;
  try {
    ck.config = sae_config_from_json(v.header.at("config"));
    ck.config.validate();
    ck.params = sae::SaeParams<float>::zeros(ck.config.n, ck.config.m(), ck.config.centering);
    ck.lineage = lineage_from(v.header.at("lineage"));
  } catch (const json::exception& e) {
    throw IoError(what + " header is incomplete: " + e.what());
  } catch (const ConfigError& e) {
    throw IoError(what + " header is invalid: " + e.what());
  }
  std::string_view body(v.bytes.data(), v.bytes.size() - 8);
  Reader r(body, what);
  parse_header(r, kCkMagic.size(), what);
  fill_payload(r, v.header, sae_views(ck.params), what);
  ck.digest = v.digest;
  return ck;
}

CheckpointInfo inspect_checkpoint(const std::filesystem::path& path) {
  auto v = open_checkpoint(path);
  const auto kind = v.header.value("kind", "");
  if (kind != "lm" && kind != "sae") throw IoError("checkpoint " + path.string() + " has unknown kind");
  return {kind == "lm" ? CheckpointKind::kLm : CheckpointKind::kSae, kCheckpointVersion, v.digest,
          v.header};
}

// ---------------------------------------------------------------------------

void put_varint(std::string& out, std::uint64_t v) {
  while (v >= 0x80) {
    out.push_back(static_cast<char>((v & 0x7f) | 0x80));
    v >>= 7;
  }
  out.push_back(static_cast<char>(v));
}

std::uint64_t get_varint(std::string_view in, std::size_t& pos) {
  std::uint64_t v = 0;
  for (int shift = 0; shift < 64; shift += 7) {
    if (pos >= in.size()) throw IoError("varint runs past the end of the buffer");
    const auto byte = static_cast<unsigned char>(in[pos++]);
    if (shift == 63 && byte > 1) throw IoError("varint overflows 64 bits");
    v |= static_cast<std::uint64_t>(byte & 0x7f) << shift;
    if (!(byte & 0x80)) return v;
  }
  throw IoError("varint overflows 64 bits");
}

std::string encode_matrix(const flow::ActivationMatrix& m, const json& provenance) {
  m.validate();
  std::string out(kAmMagic);
  put_raw(out, kMatrixVersion);
  const json header = {{"model_id", m.model_id},
                       {"sae_id", m.sae_id},
                       {"stream_id", m.stream_id},
                       {"n_tokens", m.n_tokens},
                       {"stream_digest", to_hex(m.stream_digest)},
                       {"n_features", m.n_features()},
                       {"provenance", provenance}};
  const std::string h = header.dump();
  put_raw<std::uint64_t>(out, h.size());
  out += h;
  for (const auto& row : m.rows) {
    put_varint(out, row.nnz());
    std::uint32_t prev = 0;
    for (std::size_t k = 0; k < row.nnz(); ++k) {
      put_varint(out, row.index[k] - (k == 0 ? 0 : prev));
      prev = row.index[k];
    }
    out.append(reinterpret_cast<const char*>(row.value.data()), row.value.size() * sizeof(float));
  }
  return seal(std::move(out));
}

flow::ActivationMatrix decode_matrix(std::string_view bytes, json* provenance) {
  const std::string what = "activation matrix";
  const auto body = verify_container(bytes, kAmMagic, kMatrixVersion, what);
  Reader r(body, what);
  const json h = parse_header(r, kAmMagic.size(), what);
  flow::ActivationMatrix m;
  std::size_t n_features = 0;
  try {
    m.model_id = h.at("model_id");
    m.sae_id = h.at("sae_id");
    m.stream_id = h.at("stream_id");
    m.n_tokens = h.at("n_tokens");
    m.stream_digest = from_hex(h.at("stream_digest").get<std::string>());
    n_features = h.at("n_features");
    if (provenance) *provenance = h.at("provenance");
  } catch (const json::exception& e) {
    throw IoError(what + " header is incomplete: " + e.what());
  }
  m.rows.resize(n_features);
  for (auto& row : m.rows) {
    const auto nnz = get_varint(body, r.pos());
    if (nnz > m.n_tokens) throw IoError(what + " row has more entries than tokens");
    row.index.resize(nnz);
    std::uint64_t at = 0;
    for (std::size_t k = 0; k < nnz; ++k) {
      at = (k == 0 ? 0 : at) + get_varint(body, r.pos());
      if (at >= m.n_tokens) throw IoError(what + " index out of range");
      row.index[k] = static_cast<std::uint32_t>(at);
    }
    row.value.resize(nnz);
    const auto raw = r.take(nnz * sizeof(float));
    std::memcpy(row.value.data(), raw.data(), raw.size());
  }
  if (!r.done()) throw IoError(what + " has trailing bytes");
  try {
    m.validate();
  } catch (const ContractViolation& e) {
    throw IoError(what + " is malformed: " + e.what());
  }
  return m;
}

std::uint64_t save_matrix(const std::filesystem::path& path, const flow::ActivationMatrix& m,
                          const json& provenance) {
  const auto bytes = encode_matrix(m, provenance);
  write_atomic(path, bytes);
  std::uint64_t d;
  std::memcpy(&d, bytes.data() + bytes.size() - 8, 8);
  return d;
}

flow::ActivationMatrix load_matrix(const std::filesystem::path& path, json* provenance) {
  try {
    return decode_matrix(read_file(path), provenance);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::string to_jsonl(const std::vector<json>& records) {
  std::string out;
  for (const auto& r : records) out += r.dump() + "\n";
  return out;
}

std::vector<json> read_jsonl(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<json> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace featflow::io
