#include "featflow/corpus.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include "featflow/rng.hpp"
#include "test_util.hpp"

namespace featflow {
namespace {

std::string mixed_sample(std::size_t bytes) {
  std::string s;
  auto en = synthetic::english_like(200, 1);
  auto code = synthetic::code_like(200, 2);
  Rng rng(3);
  std::uniform_int_distribution<int> byte(0, 255);
  for (std::size_t i = 0; s.size() < bytes; ++i) {
    s += en[i % en.size()];
    s += "\n";
    s += code[i % code.size()];
    for (int k = 0; k < 8; ++k) s += static_cast<char>(byte(rng));
  }
  s.resize(bytes);
  return s;
}

TEST(TokenizerTest, MinimumVocabHasNoMerges) {
  std::vector<std::string> texts{"hello hello hello world"};
  auto tok = Tokenizer::train(texts, Tokenizer::kBaseVocab);
  EXPECT_TRUE(tok.merges().empty());
  EXPECT_EQ(tok.vocab_size(), 259u);
  auto ids = tok.encode("hi!");
  EXPECT_EQ(ids, (std::vector<TokenId>{'h', 'i', '!'}));
}

TEST(TokenizerTest, RejectsBadTrainingInput) {
  std::vector<std::string> texts{"abc"};
  EXPECT_THROW(Tokenizer::train(texts, 200), ConfigError);
  std::vector<std::string> empty{"", ""};
  EXPECT_THROW(Tokenizer::train(empty, 300), ConfigError);
}

TEST(TokenizerTest, FirstMergeIsTheMostFrequentPair) {
  const std::string text = synthetic::repeating("ab", 1000);
  // brute-force pair count
  std::map<std::pair<char, char>, int> counts;
  for (std::size_t i = 0; i + 1 < text.size(); ++i) ++counts[{text[i], text[i + 1]}];
  auto best = std::max_element(counts.begin(), counts.end(),
                               [](const auto& a, const auto& b) { return a.second < b.second; });
  ASSERT_EQ(best->first, std::make_pair('a', 'b'));

  std::vector<std::string> texts{text};
  auto tok = Tokenizer::train(texts, 262);
  ASSERT_FALSE(tok.merges().empty());
  EXPECT_EQ(tok.merges()[0], std::make_pair(TokenId{'a'}, TokenId{'b'}));
}

TEST(TokenizerTest, EmptyInputEncodesToNothing) {
  Tokenizer tok;
  EXPECT_TRUE(tok.encode("").empty());
  EXPECT_EQ(tok.decode(std::vector<TokenId>{}), "");
}

TEST(TokenizerTest, RoundTripOnMixedSample) {
  const std::string sample = mixed_sample(10 * 1024);
  auto docs = synthetic::english_like(300, 5);
  auto code = synthetic::code_like(300, 6);
  docs.insert(docs.end(), code.begin(), code.end());
  auto tok = Tokenizer::train(docs, 600);
  ASSERT_GT(tok.merges().size(), 100u);

  const auto ids = tok.encode(sample);
  EXPECT_EQ(tok.decode(ids), sample);
  // byte-level encoding is the oracle upper bound on length
  EXPECT_LE(ids.size(), Tokenizer().encode(sample).size());
  EXPECT_LE(ids.size(), sample.size());
  EXPECT_LT(ids.size(), sample.size() * 3 / 4);
}

TEST(TokenizerTest, EveryRegularTokenRoundTrips) {
  auto docs = synthetic::code_like(300, 8);
  auto tok = Tokenizer::train(docs, 700);
  for (TokenId i = 0; i < tok.vocab_size(); ++i) {
    if (tok.is_special(i)) continue;
    std::vector<TokenId> one{i};
    EXPECT_EQ(tok.encode(tok.decode(one)), one) << "token " << i;
  }
}

TEST(TokenizerTest, TrainingAndSerializationAreDeterministic) {
  auto docs = synthetic::english_like(100, 9);
  auto a = Tokenizer::train(docs, 400);
  auto b = Tokenizer::train(docs, 400);
  EXPECT_EQ(a.serialize(), b.serialize());
  auto c = Tokenizer::deserialize(a.serialize());
  EXPECT_EQ(c.serialize(), a.serialize());
  const std::string s = mixed_sample(2000);
  EXPECT_EQ(c.encode(s), a.encode(s));
}

TEST(TokenizerTest, CorruptSerializationIsRejected) {
  auto docs = synthetic::english_like(50, 10);
  auto text = Tokenizer::train(docs, 300).serialize();
  auto pos = text.find("tokens ");
  ASSERT_NE(pos, std::string::npos);
  text[text.size() - 3] = text[text.size() - 3] == 'A' ? 'B' : 'A';
  EXPECT_THROW(Tokenizer::deserialize(text), IoError);
}

TEST(ChunkTest, ChunksConcatenateToInput) {
  const std::string s = mixed_sample(3000);
  std::string joined;
  for (auto c : split_chunks(s)) joined += c;
  EXPECT_EQ(joined, s);
}

TEST(Base64Test, KnownVectors) {
  EXPECT_EQ(base64_encode(""), "");
  EXPECT_EQ(base64_encode("f"), "Zg==");
  EXPECT_EQ(base64_encode("fo"), "Zm8=");
  EXPECT_EQ(base64_encode("foo"), "Zm9v");
  EXPECT_EQ(base64_decode("Zm9vYg=="), "foob");
}

// ---------------------------------------------------------------------------

SourceDocuments numbered_source(const std::string& name, std::size_t n_docs, std::size_t len,
                                TokenId base) {
  SourceDocuments s;
  s.name = name;
  for (std::size_t d = 0; d < n_docs; ++d) {
    std::vector<TokenId> doc(len);
    for (std::size_t i = 0; i < len; ++i) doc[i] = base + static_cast<TokenId>((d * 7 + i) % 50);
    s.train.push_back(doc);
    s.validation.push_back(doc);
  }
  return s;
}

TEST(BlockStreamTest, SingleSourceOnlyYieldsThatSource) {
  auto corpus = TokenizedCorpus::from_documents({numbered_source("only", 5, 40, 0)}, {}, 1);
  auto stream = build_stream(corpus, 16, 7, 999);
  for (const auto& b : stream.take(100)) {
    EXPECT_EQ(b.source, 0u);
    for (TokenId t : b.tokens) EXPECT_TRUE(t < 50 || t == 999);
  }
}

TEST(BlockStreamTest, BalancedMixConvergesToParity) {
  auto corpus = TokenizedCorpus::from_documents(
      {numbered_source("a", 7, 33, 0), numbered_source("b", 3, 91, 100)}, {}, 1);
  auto stream = build_stream(corpus, 25, 11, 999);
  std::size_t from_a = 0, total = 0;
  while (total < 100000) {
    auto b = stream.next();
    if (b.source == 0) from_a += b.tokens.size();
    total += b.tokens.size();
    // the tag agrees with the token content
    for (TokenId t : b.tokens) {
      if (t != 999) ASSERT_EQ(t < 100, b.source == 0);
    }
    const auto& drawn = stream.tokens_drawn();
    const auto diff = drawn[0] > drawn[1] ? drawn[0] - drawn[1] : drawn[1] - drawn[0];
    ASSERT_LE(diff, stream.block_len());
  }
  const double share = static_cast<double>(from_a) / static_cast<double>(total);
  EXPECT_NEAR(share, 0.5, 0.01);
}

TEST(BlockStreamTest, SameSeedSameBlocks) {
  auto corpus = TokenizedCorpus::from_documents(
      {numbered_source("a", 7, 33, 0), numbered_source("b", 3, 91, 100)}, {}, 1);
  auto s1 = build_stream(corpus, 25, 42, 999);
  auto s2 = build_stream(corpus, 25, 42, 999);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(s1.next().tokens, s2.next().tokens);
}

TEST(DatasetMixTest, ValidationDocumentsNeverTrain) {
  featflow::testing::TempDir dir("mix");
  std::vector<std::string> docs;
  for (int i = 0; i < 60; ++i) docs.push_back("document number " + std::to_string(i) + " ends here");
  synthetic::write_plain_text(dir / "a.txt", docs);
  DatasetMix mix;
  mix.sources.push_back({"a", dir / "a.txt", SourceFormat::kPlainText, "english", 1.0});
  mix.validation_fraction = 0.2;
  mix.seed = 5;
  Tokenizer tok;
  auto corpus = TokenizedCorpus::build(mix, tok);
  const auto& s = corpus.sources[0];
  EXPECT_EQ(s.validation.size(), 12u);
  EXPECT_EQ(s.train.size(), 48u);
  std::set<std::vector<TokenId>> train(s.train.begin(), s.train.end());
  for (const auto& v : s.validation) EXPECT_FALSE(train.count(v));
}

TEST(DatasetMixTest, ReadsBothFormatsAndSubsamples) {
  featflow::testing::TempDir dir("fmt");
  {
    std::ofstream out(dir / "lines.txt");
    out << "first\\tdoc\\nline two\n\nsecond doc\n";
  }
  CorpusSource lines{"l", dir / "lines.txt", SourceFormat::kLines, "code", 1.0};
  auto docs = read_documents(lines);
  ASSERT_EQ(docs.size(), 2u);
  EXPECT_EQ(docs[0], "first\tdoc\nline two");
  EXPECT_EQ(escape_line_document(docs[0]), "first\\tdoc\\nline two");

  auto code = synthetic::code_like(40, 1);
  synthetic::write_plain_text(dir / "code.txt", code);
  CorpusSource plain{"c", dir / "code.txt", SourceFormat::kPlainText, "code", 0.5};
  EXPECT_EQ(read_documents(plain), code);

  DatasetMix mix;
  mix.sources.push_back(plain);
  mix.validation_fraction = 0.0;
  auto corpus = TokenizedCorpus::build(mix, Tokenizer());
  EXPECT_EQ(corpus.sources[0].train.size(), 20u);
}

TEST(DatasetMixTest, MissingFileNamesTheSource) {
  DatasetMix mix;
  mix.sources.push_back({"lua", "/nonexistent/lua.txt", SourceFormat::kPlainText, "code", 1.0});
  try {
    mix.validate();
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("lua"), std::string::npos);
  }
  mix.sources.push_back(mix.sources[0]);
  EXPECT_THROW(mix.validate(), ConfigError);
}

TEST(SampleBlocksTest, BlockCountAndEdgeCases) {
  auto corpus = TokenizedCorpus::from_documents({numbered_source("a", 4, 60, 0)}, {}, 1);
  EXPECT_EQ(sample_blocks(corpus, Split::kTrain, 24, 48, 1).size(), 2u);
  EXPECT_EQ(sample_blocks(corpus, Split::kTrain, 24, 49, 1).size(), 3u);
  EXPECT_TRUE(sample_blocks(corpus, Split::kTrain, 24, 0, 1).empty());
  EXPECT_THROW(sample_blocks(corpus, Split::kTrain, 1, 10, 1), ContractViolation);
  for (const auto& b : sample_blocks(corpus, Split::kTrain, 24, 2400, 3)) {
    ASSERT_EQ(b.tokens.size(), 24u);
    const auto& doc = corpus.sources[0].train[b.document];
    EXPECT_TRUE(std::equal(b.tokens.begin(), b.tokens.end(), doc.begin() + b.offset));
  }
}

TEST(SampleBlocksTest, ShortDocumentsAreSkipped) {
  auto src = numbered_source("a", 3, 10, 0);
  src.train.push_back(std::vector<TokenId>(30, 7));
  auto corpus = TokenizedCorpus::from_documents({src}, {}, 1);
  for (const auto& b : sample_blocks(corpus, Split::kTrain, 24, 240, 2)) EXPECT_EQ(b.document, 3u);
}

TEST(SampleBlocksTest, StartPositionsAreUniform) {
  SourceDocuments src;
  src.name = "ten";
  const std::size_t block_len = 4;
  std::size_t n_positions = 0;
  for (std::size_t d = 0; d < 10; ++d) {
    const std::size_t len = 5 + d * 2;
    src.train.push_back(std::vector<TokenId>(len, 1));
    n_positions += len - block_len + 1;
  }
  auto corpus = TokenizedCorpus::from_documents({src}, {}, 1);
  const std::size_t draws = 10000;
  auto blocks = sample_blocks(corpus, Split::kTrain, block_len, draws * block_len, 17);
  ASSERT_EQ(blocks.size(), draws);
  std::map<std::pair<std::size_t, std::size_t>, double> counts;
  for (const auto& b : blocks) counts[{b.document, b.offset}] += 1;
  const double expected = static_cast<double>(draws) / static_cast<double>(n_positions);
  double chi2 = 0.0;
  for (std::size_t d = 0; d < 10; ++d) {
    for (std::size_t s = 0; s + block_len <= src.train[d].size(); ++s) {
      const double o = counts[{d, s}];
      chi2 += (o - expected) * (o - expected) / expected;
    }
  }
  // p > 0.01  <=>  statistic below the 99th percentile
  EXPECT_LT(chi2, featflow::testing::chi_square_critical(static_cast<double>(n_positions - 1), 2.3263));
}

TEST(StreamDigestTest, SensitiveToOrderAndContent) {
  std::vector<TokenBlock> a{{{1, 2, 3}}, {{4, 5, 6}}};
  auto b = a;
  std::swap(b[0], b[1]);
  EXPECT_NE(stream_digest(a), stream_digest(b));
  auto c = a;
  c[1].tokens[2] = 7;
  EXPECT_NE(stream_digest(a), stream_digest(c));
  EXPECT_EQ(stream_digest(a), stream_digest(a));
}

}  // namespace
}  // namespace featflow
