#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "featflow/common.hpp"

namespace featflow {

// ---------------------------------------------------------------------------
// Tokenizer: byte-fallback pair-merge vocabulary.
//
// Ids 0..255 are raw bytes, followed by the special ids (bos, eos, pad), then
// one id per learned merge in rule order. Text is first cut into chunks that
// are maximal runs of one character class; merges never cross chunk borders.
// ---------------------------------------------------------------------------

struct SpecialIds {
  TokenId bos = 256;
  TokenId eos = 257;
  TokenId pad = 258;
};

class Tokenizer {
 public:
  static constexpr TokenId kByteCount = 256;
  static constexpr TokenId kSpecialCount = 3;
  static constexpr TokenId kBaseVocab = kByteCount + kSpecialCount;

  /// Byte-level tokenizer with no merges.
  Tokenizer();

  /// Learns merges on `texts` until the vocabulary reaches `vocab_size` or no
  /// pair occurs at least twice. Ties go to the numerically smaller pair.
  static Tokenizer train(std::span<const std::string> texts, std::size_t vocab_size);

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  std::size_t vocab_size() const noexcept { return table_.size(); }
  const SpecialIds& special() const noexcept { return special_; }
  bool is_special(TokenId id) const noexcept {
    return id >= kByteCount && id < kBaseVocab;
  }
  /// Surface bytes of a token; empty for special ids.
  const std::string& token_bytes(TokenId id) const { return table_.at(id); }
  const std::vector<std::pair<TokenId, TokenId>>& merges() const noexcept { return merges_; }

  /// Self-describing text form: header lines, the ordered merge list and the
  /// base64 token table. Byte-identical for identical tokenizers.
  std::string serialize() const;
  static Tokenizer deserialize(std::string_view text);

  void save(const std::filesystem::path& path) const;
  static Tokenizer load(const std::filesystem::path& path);

  std::uint64_t digest() const { return fnv1a(serialize()); }

 private:
  void encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const;
  void add_merge(TokenId left, TokenId right);

  SpecialIds special_;
  std::vector<std::string> table_;
  std::vector<std::pair<TokenId, TokenId>> merges_;
  std::unordered_map<std::uint64_t, TokenId> merge_rank_;  // pair key -> merge index
};

/// Splits text into maximal runs of one character class. Concatenating the
/// chunks gives back the input, and any substring of a chunk is one chunk.
std::vector<std::string_view> split_chunks(std::string_view text);

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

// ---------------------------------------------------------------------------
// Corpora and mixing
// ---------------------------------------------------------------------------

enum class SourceFormat {
  kPlainText,   // whole file; documents separated by lines equal to kDocSeparator
  kLines,       // one document per line, with \n \t \\ escapes
};

inline constexpr std::string_view kDocSeparator = "<|endoftext|>";

struct CorpusSource {
  std::string name;
  std::filesystem::path uri;
  SourceFormat format = SourceFormat::kPlainText;
  std::string domain_tag;
  double subsample = 1.0;  // fraction of training documents kept
};

enum class MixPolicy { kTokenBalanced, kExplicitWeights };

struct DatasetMix {
  std::vector<CorpusSource> sources;
  MixPolicy policy = MixPolicy::kTokenBalanced;
  std::vector<double> weights;  // only for kExplicitWeights; one per source
  std::uint64_t seed = 0;
  double validation_fraction = 0.1;

  /// Throws ConfigError on duplicate names, bad weights or fractions, and
  /// IoError naming the source when a file is missing.
  void validate() const;
  std::vector<double> normalized_weights() const;
};

std::vector<std::string> read_documents(const CorpusSource& source);
std::string escape_line_document(std::string_view doc);

struct SourceDocuments {
  std::string name;
  std::string domain_tag;
  std::vector<std::vector<TokenId>> train;
  std::vector<std::vector<TokenId>> validation;

  std::size_t train_tokens() const;
};

/// A tokenized mix: per-source train/validation documents. Validation
/// documents are chosen by a seeded permutation and never enter training.
struct TokenizedCorpus {
  std::vector<SourceDocuments> sources;
  std::vector<double> weights;  // normalized, one per source
  std::uint64_t seed = 0;

  static TokenizedCorpus build(const DatasetMix& mix, const Tokenizer& tokenizer);
  static TokenizedCorpus from_documents(std::vector<SourceDocuments> sources,
                                        std::vector<double> weights, std::uint64_t seed);

  std::size_t index_of(std::string_view source_name) const;
  /// Corpus restricted to a subset of sources (weights renormalized).
  TokenizedCorpus subset(std::span<const std::string> names) const;
};

Tokenizer train_tokenizer(std::span<const CorpusSource> sources, std::size_t vocab_size,
                          std::uint64_t seed);

struct TokenBlock {
  std::vector<TokenId> tokens;
  std::size_t source = 0;    // index into the corpus sources
  std::size_t document = 0;  // sampled blocks only
  std::size_t offset = 0;    // start inside the document, or inside the packed source stream
};

enum class Split { kTrain, kValidation };

/// Infinite stream of fixed-length blocks. Each source is packed as
/// eos-separated documents in a per-epoch shuffled order; the next block
/// always comes from the source furthest below its weight share, so token
/// counts never drift more than one block from the policy.
class BlockStream {
 public:
  BlockStream(const TokenizedCorpus& corpus, std::size_t block_len, Split split,
              std::uint64_t seed, TokenId eos);

  TokenBlock next();
  std::vector<TokenBlock> take(std::size_t n_blocks);

  std::size_t block_len() const noexcept { return block_len_; }
  const std::vector<std::size_t>& tokens_drawn() const noexcept { return drawn_; }

 private:
  struct Cursor {
    std::vector<std::size_t> order;
    std::size_t doc = 0;
    std::size_t pos = 0;  // position inside the current doc, == size means eos
    std::size_t packed = 0;
    std::uint64_t epoch = 0;
  };
  TokenId pull(std::size_t source);
  void reshuffle(std::size_t source);
  const std::vector<std::vector<TokenId>>& docs(std::size_t source) const;

  const TokenizedCorpus* corpus_;
  std::size_t block_len_;
  Split split_;
  std::uint64_t seed_;
  TokenId eos_;
  std::vector<Cursor> cursors_;
  std::vector<std::size_t> drawn_;
};

/// Builds the training block stream for a mix (block length includes the one
/// extra token needed for next-token targets).
BlockStream build_stream(const TokenizedCorpus& corpus, std::size_t block_len, std::uint64_t seed,
                         TokenId eos);

/// Deterministic evaluation blocks from one source's validation documents.
std::vector<TokenBlock> validation_blocks(const TokenizedCorpus& corpus, std::size_t source,
                                          std::size_t block_len, std::size_t n_blocks,
                                          std::uint64_t seed, TokenId eos);

/// Draws ceil(n_tokens / block_len) contiguous in-document windows. The
/// source is drawn by weight, then the start position uniformly over all
/// valid starts of that source; documents shorter than block_len are skipped.
std::vector<TokenBlock> sample_blocks(const TokenizedCorpus& corpus, Split split,
                                      std::size_t block_len, std::size_t n_tokens,
                                      std::uint64_t seed);

/// Stable content digest of a token sequence.
std::uint64_t stream_digest(std::span<const TokenBlock> blocks);

// ---------------------------------------------------------------------------
// Synthetic toy domains used for desk-scale lineages.
// ---------------------------------------------------------------------------
namespace synthetic {

/// Short stories from a small English-like template grammar.
std::vector<std::string> english_like(std::size_t n_docs, std::uint64_t seed);
/// Small functions in a Python-like toy language.
std::vector<std::string> code_like(std::size_t n_docs, std::uint64_t seed);
/// A single document repeating `unit` until `length` bytes.
std::string repeating(std::string_view unit, std::size_t length);

void write_plain_text(const std::filesystem::path& path, std::span<const std::string> docs);

}  // namespace synthetic

}  // namespace featflow
