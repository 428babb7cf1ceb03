#include "featflow/corpus.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "featflow/rng.hpp"

namespace featflow {

namespace {

enum class CharClass { kWord, kBlank, kNewline, kPunct };

CharClass classify(unsigned char c) {
  if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' ||
      c >= 0x80) {
    return CharClass::kWord;
  }
  if (c == ' ' || c == '\t') return CharClass::kBlank;
  if (c == '\n' || c == '\r') return CharClass::kNewline;
  return CharClass::kPunct;
}

std::uint64_t pair_key(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(a) << 32) | b;
}

std::string read_file(const std::filesystem::path& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + what + " '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::vector<std::string_view> split_chunks(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 1; i <= text.size(); ++i) {
    if (i == text.size() || classify(static_cast<unsigned char>(text[i])) !=
                                classify(static_cast<unsigned char>(text[start]))) {
      out.push_back(text.substr(start, i - start));
      start = i;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// base64

namespace {
constexpr std::string_view kB64 =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(std::string_view bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    std::uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                      (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                      static_cast<unsigned char>(bytes[i + 2]);
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += kB64[v & 63];
  }
  const std::size_t rest = bytes.size() - i;
  if (rest == 1) {
    std::uint32_t v = static_cast<unsigned char>(bytes[i]) << 16;
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += "==";
  } else if (rest == 2) {
    std::uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                      (static_cast<unsigned char>(bytes[i + 1]) << 8);
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::string base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw IoError("base64 length is not a multiple of 4");
  std::string out;
  std::uint32_t acc = 0;
  int bits = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '=') {
      if (i + 2 < text.size()) throw IoError("misplaced base64 padding");
      break;
    }
    const auto pos = kB64.find(c);
    if (pos == std::string_view::npos) throw IoError("invalid base64 character");
    acc = (acc << 6) | static_cast<std::uint32_t>(pos);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out += static_cast<char>((acc >> bits) & 0xFF);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tokenizer

Tokenizer::Tokenizer() {
  table_.reserve(kBaseVocab);
  for (TokenId b = 0; b < kByteCount; ++b) table_.emplace_back(1, static_cast<char>(b));
  for (TokenId s = 0; s < kSpecialCount; ++s) table_.emplace_back();
}

void Tokenizer::add_merge(TokenId left, TokenId right) {
  const auto id = static_cast<TokenId>(table_.size());
  merge_rank_.emplace(pair_key(left, right), static_cast<TokenId>(merges_.size()));
  merges_.emplace_back(left, right);
  table_.push_back(table_.at(left) + table_.at(right));
  (void)id;
}

Tokenizer Tokenizer::train(std::span<const std::string> texts, std::size_t vocab_size) {
  if (vocab_size < kBaseVocab) {
    throw ConfigError("vocab_size " + std::to_string(vocab_size) +
                      " is below the byte alphabet plus specials (" +
                      std::to_string(kBaseVocab) + ")");
  }
  std::size_t total_bytes = 0;
  std::map<std::string, std::uint64_t> chunk_counts;
  for (const auto& t : texts) {
    total_bytes += t.size();
    for (auto c : split_chunks(t)) ++chunk_counts[std::string(c)];
  }
  if (total_bytes == 0) throw ConfigError("cannot train a tokenizer on an empty corpus");

  Tokenizer tok;
  std::vector<std::vector<TokenId>> words;
  std::vector<std::uint64_t> freq;
  words.reserve(chunk_counts.size());
  for (const auto& [chunk, count] : chunk_counts) {
    if (chunk.size() < 2) continue;
    std::vector<TokenId> w(chunk.size());
    for (std::size_t i = 0; i < chunk.size(); ++i) w[i] = static_cast<unsigned char>(chunk[i]);
    words.push_back(std::move(w));
    freq.push_back(count);
  }

  std::unordered_map<std::uint64_t, std::uint64_t> pair_counts;
  while (tok.vocab_size() < vocab_size) {
    pair_counts.clear();
    for (std::size_t w = 0; w < words.size(); ++w) {
      const auto& ids = words[w];
      for (std::size_t i = 0; i + 1 < ids.size(); ++i) pair_counts[pair_key(ids[i], ids[i + 1])] += freq[w];
    }
    std::uint64_t best_key = 0;
    std::uint64_t best_count = 0;
    for (const auto& [key, count] : pair_counts) {
      if (count > best_count || (count == best_count && key < best_key)) {
        best_key = key;
        best_count = count;
      }
    }
    if (best_count < 2) break;
    const auto left = static_cast<TokenId>(best_key >> 32);
    const auto right = static_cast<TokenId>(best_key & 0xFFFFFFFFu);
    const auto new_id = static_cast<TokenId>(tok.vocab_size());
    tok.add_merge(left, right);
    for (auto& ids : words) {
      if (ids.size() < 2) continue;
      std::size_t out = 0;
      for (std::size_t i = 0; i < ids.size();) {
        if (i + 1 < ids.size() && ids[i] == left && ids[i + 1] == right) {
          ids[out++] = new_id;
          i += 2;
        } else {
          ids[out++] = ids[i++];
        }
      }
      ids.resize(out);
    }
  }
  return tok;
}

void Tokenizer::encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const {
  std::vector<TokenId> ids(chunk.size());
  for (std::size_t i = 0; i < chunk.size(); ++i) ids[i] = static_cast<unsigned char>(chunk[i]);
  while (ids.size() >= 2) {
    TokenId best_rank = std::numeric_limits<TokenId>::max();
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      auto it = merge_rank_.find(pair_key(ids[i], ids[i + 1]));
      if (it != merge_rank_.end() && it->second < best_rank) best_rank = it->second;
    }
    if (best_rank == std::numeric_limits<TokenId>::max()) break;
    const auto [left, right] = merges_[best_rank];
    const TokenId merged = kBaseVocab + best_rank;
    std::size_t w = 0;
    for (std::size_t i = 0; i < ids.size();) {
      if (i + 1 < ids.size() && ids[i] == left && ids[i + 1] == right) {
        ids[w++] = merged;
        i += 2;
      } else {
        ids[w++] = ids[i++];
      }
    }
    ids.resize(w);
  }
  out.insert(out.end(), ids.begin(), ids.end());
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> out;
  out.reserve(text.size() / 2 + 1);
  for (auto chunk : split_chunks(text)) encode_chunk(chunk, out);
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id >= table_.size()) {
      throw ContractViolation("token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(table_.size()));
    }
    out += table_[id];
  }
  return out;
}

std::string Tokenizer::serialize() const {
  std::ostringstream os;
  os << "featflow-tokenizer 1\n";
  os << "vocab_size " << table_.size() << "\n";
  os << "special bos=" << special_.bos << " eos=" << special_.eos << " pad=" << special_.pad
     << "\n";
  os << "merges " << merges_.size() << "\n";
  for (const auto& [l, r] : merges_) os << l << ' ' << r << "\n";
  os << "tokens " << table_.size() << "\n";
  for (std::size_t i = 0; i < table_.size(); ++i) os << i << ' ' << base64_encode(table_[i]) << "\n";
  return os.str();
}

Tokenizer Tokenizer::deserialize(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  auto expect = [&](const std::string& key) -> std::string {
    if (!std::getline(in, line) || line.rfind(key, 0) != 0) {
      throw IoError("tokenizer file: expected '" + key + "'");
    }
    return line.substr(key.size());
  };
  if (expect("featflow-tokenizer ") != "1") throw IoError("tokenizer file: unsupported version");
  const std::size_t vocab = std::stoul(expect("vocab_size "));
  const std::string special = expect("special ");
  if (special != "bos=256 eos=257 pad=258") throw IoError("tokenizer file: unexpected special ids");
  const std::size_t n_merges = std::stoul(expect("merges "));
  Tokenizer tok;
  for (std::size_t i = 0; i < n_merges; ++i) {
    if (!std::getline(in, line)) throw IoError("tokenizer file: truncated merge list");
    std::istringstream ls(line);
    TokenId l = 0, r = 0;
    if (!(ls >> l >> r) || l >= tok.vocab_size() || r >= tok.vocab_size()) {
      throw IoError("tokenizer file: bad merge line " + std::to_string(i));
    }
    tok.add_merge(l, r);
  }
  if (std::stoul(expect("tokens ")) != vocab || tok.vocab_size() != vocab) {
    throw IoError("tokenizer file: token table size disagrees with merges");
  }
  for (std::size_t i = 0; i < vocab; ++i) {
    if (!std::getline(in, line)) throw IoError("tokenizer file: truncated token table");
    const auto sp = line.find(' ');
    if (sp == std::string::npos || std::stoul(line.substr(0, sp)) != i ||
        base64_decode(line.substr(sp + 1)) != tok.table_[i]) {
      throw IoError("tokenizer file: token " + std::to_string(i) + " disagrees with merges");
    }
  }
  return tok;
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write tokenizer '" + path.string() + "'");
  out << serialize();
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  return deserialize(read_file(path, "tokenizer"));
}

// ---------------------------------------------------------------------------
// Documents and mixes

std::string escape_line_document(std::string_view doc) {
  std::string out;
  for (char c : doc) {
    switch (c) {
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\\': out += "\\\\"; break;
      default: out += c;
    }
  }
  return out;
}

namespace {
std::string unescape_line(std::string_view line) {
  std::string out;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '\\' && i + 1 < line.size()) {
      const char n = line[++i];
      out += n == 'n' ? '\n' : n == 't' ? '\t' : n;
    } else {
      out += line[i];
    }
  }
  return out;
}
}  // namespace

std::vector<std::string> read_documents(const CorpusSource& source) {
  const std::string text = read_file(source.uri, "corpus source '" + source.name + "'");
  std::vector<std::string> docs;
  std::istringstream in(text);
  std::string line;
  if (source.format == SourceFormat::kLines) {
    while (std::getline(in, line)) {
      if (!line.empty()) docs.push_back(unescape_line(line));
    }
    return docs;
  }
  std::string current;
  bool has_content = false;
  auto flush = [&] {
    if (has_content && !current.empty()) docs.push_back(current);
    current.clear();
    has_content = false;
  };
  while (std::getline(in, line)) {
    if (line == kDocSeparator) {
      flush();
      continue;
    }
    if (has_content) current += '\n';
    current += line;
    has_content = true;
  }
  flush();
  return docs;
}

void DatasetMix::validate() const {
  if (sources.empty()) throw ConfigError("dataset mix has no sources");
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto& s = sources[i];
    if (s.name.empty()) throw ConfigError("corpus source without a name");
    for (std::size_t j = 0; j < i; ++j) {
      if (sources[j].name == s.name) throw ConfigError("duplicate corpus source '" + s.name + "'");
    }
    if (!(s.subsample > 0.0 && s.subsample <= 1.0)) {
      throw ConfigError("source '" + s.name + "': subsample must be in (0, 1]");
    }
  }
  for (const auto& s : sources) {
    std::error_code ec;
    if (!std::filesystem::is_regular_file(s.uri, ec)) {
      throw IoError("corpus source '" + s.name + "': cannot read '" + s.uri.string() + "'");
    }
  }
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("validation fraction must be in [0, 1)");
  }
  if (policy == MixPolicy::kExplicitWeights) {
    if (weights.size() != sources.size()) throw ConfigError("one weight per source is required");
    for (double w : weights) {
      if (!(w > 0.0)) throw ConfigError("mix weights must be positive");
    }
  }
}

std::vector<double> DatasetMix::normalized_weights() const {
  std::vector<double> w = policy == MixPolicy::kExplicitWeights
                              ? weights
                              : std::vector<double>(sources.size(), 1.0);
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& x : w) x /= total;
  return w;
}

std::size_t SourceDocuments::train_tokens() const {
  std::size_t n = 0;
  for (const auto& d : train) n += d.size();
  return n;
}

TokenizedCorpus TokenizedCorpus::build(const DatasetMix& mix, const Tokenizer& tokenizer) {
  mix.validate();
  TokenizedCorpus corpus;
  corpus.seed = mix.seed;
  corpus.weights = mix.normalized_weights();
  for (const auto& src : mix.sources) {
    auto docs = read_documents(src);
    if (docs.empty()) throw ConfigError("corpus source '" + src.name + "' has no documents");
    Rng rng(mix_seed(mix.seed, fnv1a(src.name)));
    std::vector<std::size_t> perm(docs.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);

    std::size_t n_val = static_cast<std::size_t>(mix.validation_fraction * docs.size() + 0.5);
    if (mix.validation_fraction > 0.0 && n_val == 0 && docs.size() > 1) n_val = 1;
    n_val = std::min(n_val, docs.size() - 1);
    const std::size_t n_train_all = docs.size() - n_val;
    const auto n_train = std::max<std::size_t>(
        1, static_cast<std::size_t>(src.subsample * static_cast<double>(n_train_all) + 0.5));

    SourceDocuments sd;
    sd.name = src.name;
    sd.domain_tag = src.domain_tag;
    for (std::size_t i = 0; i < n_val; ++i) sd.validation.push_back(tokenizer.encode(docs[perm[i]]));
    for (std::size_t i = 0; i < n_train; ++i) {
      sd.train.push_back(tokenizer.encode(docs[perm[n_val + i]]));
    }
    corpus.sources.push_back(std::move(sd));
  }
  return corpus;
}

TokenizedCorpus TokenizedCorpus::from_documents(std::vector<SourceDocuments> sources,
                                                std::vector<double> weights, std::uint64_t seed) {
  if (sources.empty()) throw ConfigError("corpus has no sources");
  if (weights.empty()) weights.assign(sources.size(), 1.0);
  if (weights.size() != sources.size()) throw ConfigError("one weight per source is required");
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(total > 0.0)) throw ConfigError("mix weights must be positive");
  for (auto& w : weights) w /= total;
  TokenizedCorpus c;
  c.sources = std::move(sources);
  c.weights = std::move(weights);
  c.seed = seed;
  return c;
}

std::size_t TokenizedCorpus::index_of(std::string_view source_name) const {
  for (std::size_t i = 0; i < sources.size(); ++i) {
    if (sources[i].name == source_name) return i;
  }
  throw ConfigError("unknown corpus source '" + std::string(source_name) + "'");
}

TokenizedCorpus TokenizedCorpus::subset(std::span<const std::string> names) const {
  std::vector<SourceDocuments> picked;
  std::vector<double> w;
  for (const auto& n : names) {
    const auto i = index_of(n);
    picked.push_back(sources[i]);
    w.push_back(weights[i]);
  }
  return from_documents(std::move(picked), std::move(w), seed);
}

Tokenizer train_tokenizer(std::span<const CorpusSource> sources, std::size_t vocab_size,
                          std::uint64_t seed) {
  std::vector<std::string> texts;
  for (const auto& src : sources) {
    auto docs = read_documents(src);
    if (src.subsample < 1.0) {
      Rng rng(mix_seed(seed, fnv1a(src.name)));
      std::shuffle(docs.begin(), docs.end(), rng);
      docs.resize(std::max<std::size_t>(1, static_cast<std::size_t>(src.subsample * docs.size())));
    }
    for (auto& d : docs) texts.push_back(std::move(d));
  }
  return Tokenizer::train(texts, vocab_size);
}

// ---------------------------------------------------------------------------
// Block streams

BlockStream::BlockStream(const TokenizedCorpus& corpus, std::size_t block_len, Split split,
                         std::uint64_t seed, TokenId eos)
    : corpus_(&corpus), block_len_(block_len), split_(split), seed_(seed), eos_(eos) {
  if (block_len < 2) throw ContractViolation("block length must be at least 2");
  cursors_.resize(corpus.sources.size());
  drawn_.assign(corpus.sources.size(), 0);
  for (std::size_t s = 0; s < cursors_.size(); ++s) {
    if (docs(s).empty()) {
      throw ConfigError("source '" + corpus.sources[s].name + "' has no documents in this split");
    }
    reshuffle(s);
  }
}

const std::vector<std::vector<TokenId>>& BlockStream::docs(std::size_t source) const {
  const auto& s = corpus_->sources[source];
  return split_ == Split::kTrain ? s.train : s.validation;
}

void BlockStream::reshuffle(std::size_t source) {
  auto& c = cursors_[source];
  c.order.resize(docs(source).size());
  std::iota(c.order.begin(), c.order.end(), 0);
  Rng rng(mix_seed(mix_seed(seed_, source), c.epoch));
  std::shuffle(c.order.begin(), c.order.end(), rng);
  c.doc = 0;
  c.pos = 0;
}

TokenId BlockStream::pull(std::size_t source) {
  auto& c = cursors_[source];
  const auto& doc = docs(source)[c.order[c.doc]];
  ++c.packed;
  if (c.pos < doc.size()) return doc[c.pos++];
  // document boundary
  c.pos = 0;
  if (++c.doc == c.order.size()) {
    ++c.epoch;
    reshuffle(source);
  }
  return eos_;
}

TokenBlock BlockStream::next() {
  std::size_t best = 0;
  double best_share = std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < drawn_.size(); ++s) {
    const double share = static_cast<double>(drawn_[s]) / corpus_->weights[s];
    if (share < best_share) {
      best_share = share;
      best = s;
    }
  }
  TokenBlock block;
  block.source = best;
  block.offset = cursors_[best].packed;
  block.tokens.resize(block_len_);
  for (auto& t : block.tokens) t = pull(best);
  drawn_[best] += block_len_;
  return block;
}

std::vector<TokenBlock> BlockStream::take(std::size_t n_blocks) {
  std::vector<TokenBlock> out;
  out.reserve(n_blocks);
  for (std::size_t i = 0; i < n_blocks; ++i) out.push_back(next());
  return out;
}

BlockStream build_stream(const TokenizedCorpus& corpus, std::size_t block_len, std::uint64_t seed,
                         TokenId eos) {
  return BlockStream(corpus, block_len, Split::kTrain, seed, eos);
}

std::vector<TokenBlock> validation_blocks(const TokenizedCorpus& corpus, std::size_t source,
                                          std::size_t block_len, std::size_t n_blocks,
                                          std::uint64_t seed, TokenId eos) {
  if (source >= corpus.sources.size()) throw ContractViolation("source index out of range");
  std::vector<std::string> name{corpus.sources[source].name};
  const auto single = corpus.subset(name);
  BlockStream stream(single, block_len, Split::kValidation, seed, eos);
  auto blocks = stream.take(n_blocks);
  for (auto& b : blocks) b.source = source;
  return blocks;
}

std::vector<TokenBlock> sample_blocks(const TokenizedCorpus& corpus, Split split,
                                      std::size_t block_len, std::size_t n_tokens,
                                      std::uint64_t seed) {
  if (block_len < 2) throw ContractViolation("block length must be at least 2");
  const std::size_t n_blocks = (n_tokens + block_len - 1) / block_len;
  std::vector<TokenBlock> out;
  if (n_blocks == 0) return out;

  struct SourceStarts {
    std::vector<std::size_t> doc_index;
    std::vector<std::size_t> cumulative;  // cumulative valid starts
  };
  std::vector<SourceStarts> starts(corpus.sources.size());
  std::vector<double> weights(corpus.sources.size(), 0.0);
  for (std::size_t s = 0; s < corpus.sources.size(); ++s) {
    const auto& docs = split == Split::kTrain ? corpus.sources[s].train : corpus.sources[s].validation;
    std::size_t total = 0;
    for (std::size_t d = 0; d < docs.size(); ++d) {
      if (docs[d].size() < block_len) continue;
      total += docs[d].size() - block_len + 1;
      starts[s].doc_index.push_back(d);
      starts[s].cumulative.push_back(total);
    }
    if (total > 0) weights[s] = corpus.weights[s];
  }
  if (std::all_of(weights.begin(), weights.end(), [](double w) { return w == 0.0; })) {
    throw ConfigError("no document is at least " + std::to_string(block_len) + " tokens long");
  }

  Rng rng(seed);
  std::discrete_distribution<std::size_t> pick_source(weights.begin(), weights.end());
  out.reserve(n_blocks);
  for (std::size_t b = 0; b < n_blocks; ++b) {
    const std::size_t s = pick_source(rng);
    const auto& st = starts[s];
    std::uniform_int_distribution<std::size_t> pick(0, st.cumulative.back() - 1);
    const std::size_t k = pick(rng);
    const auto it = std::upper_bound(st.cumulative.begin(), st.cumulative.end(), k);
    const auto slot = static_cast<std::size_t>(it - st.cumulative.begin());
    const std::size_t before = slot == 0 ? 0 : st.cumulative[slot - 1];
    const std::size_t doc = st.doc_index[slot];
    const std::size_t start = k - before;
    const auto& tokens =
        (split == Split::kTrain ? corpus.sources[s].train : corpus.sources[s].validation)[doc];
    TokenBlock block;
    block.source = s;
    block.document = doc;
    block.offset = start;
    block.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                        tokens.begin() + static_cast<std::ptrdiff_t>(start + block_len));
    out.push_back(std::move(block));
  }
  return out;
}

std::uint64_t stream_digest(std::span<const TokenBlock> blocks) {
  Fnv1a h;
  const std::uint64_t n = blocks.size();
  h.update(&n, sizeof n);
  for (const auto& b : blocks) {
    const std::uint64_t len = b.tokens.size();
    h.update(&len, sizeof len);
    for (TokenId t : b.tokens) {
      const std::array<unsigned char, 4> le{
          static_cast<unsigned char>(t), static_cast<unsigned char>(t >> 8),
          static_cast<unsigned char>(t >> 16), static_cast<unsigned char>(t >> 24)};
      h.update(le.data(), le.size());
    }
  }
  return h.digest();
}

}  // namespace featflow
