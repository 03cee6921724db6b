#include <gtest/gtest.h>

#include <cmath>

#include "membank/retrieval.hpp"
#include "oracle.hpp"
#include "test_util.hpp"

using namespace membank;
using membank::testing::random_bank;
using membank::testing::random_tensor;

namespace {

const std::string kBankVersion = "toy-text-v1/seed=0/precomputed";
const std::string kQueryVersion = "toy-text-v1/seed=0";

// A caption whose sentence feature and single word row are both `vec`.
Caption caption_from(std::vector<double> vec) {
  const std::size_t d = vec.size();
  Caption c;
  c.text = "hand built";
  c.s.s = Tensor({d}, vec);
  c.w.w = Tensor({1, d}, vec);
  c.w.pad_mask = {true};
  return c;
}

MemoryEntry entry_from(std::size_t id, const Tensor& v, std::vector<Caption> caps) {
  return MemoryEntry{id, ImageFeatureMap{v}, GlobalImageFeature{spatial_mean(v)}, std::move(caps)};
}

QueryFeatures query_from(std::vector<double> vec) {
  const auto c = caption_from(std::move(vec));
  return QueryFeatures{c.s, c.w, kQueryVersion};
}

std::vector<std::size_t> ids(const RetrievalResult& r) {
  std::vector<std::size_t> out;
  for (const auto& h : r.hits) out.push_back(h.id);
  return out;
}

void expect_sorted(const RetrievalResult& r) {
  for (std::size_t i = 1; i < r.hits.size(); ++i) {
    EXPECT_TRUE(r.hits[i - 1].score > r.hits[i].score ||
                (r.hits[i - 1].score == r.hits[i].score && r.hits[i - 1].id < r.hits[i].id));
  }
}

}  // namespace

TEST(Tags, RoundTripAndUnknown) {
  for (const auto& [alg, tag] : kAlgorithmTags) EXPECT_EQ(parse_algorithm(tag), alg);
  EXPECT_THROW(parse_algorithm("cosine"), ArgumentError);
  EXPECT_EQ(algorithm_tag(kDefaultAlgorithm), "wi-rw");
}

TEST(SentenceSentence, HandBuiltRanking) {
  std::vector<MemoryEntry> entries;
  const std::vector<std::vector<double>> keys = {{1, 0}, {0, 1}, {0.6, 0.8}};
  for (std::size_t i = 0; i < 3; ++i) entries.push_back(entry_from(i, Tensor({2, 1, 1}, 1.0), {caption_from(keys[i])}));
  const auto bank = MemoryBank::create({2, 1, 1, 1}, kBankVersion, entries);
  const auto r = match_sentence_sentence(query_from({0, 1}), bank, 3);
  EXPECT_EQ(ids(r), (std::vector<std::size_t>{1, 2, 0}));
  EXPECT_NEAR(r.hits[0].score, 1.0, 1e-15);
  EXPECT_NEAR(r.hits[1].score, 0.8, 1e-15);
  EXPECT_NEAR(r.hits[2].score, 0.0, 1e-15);
  EXPECT_EQ(r.hits[0].caption, 0u);
}

TEST(SentenceSentence, StoredCaptionRanksFirst) {
  const auto bank = random_bank(12, {16, 6, 2, 2}, 4, 3);
  for (std::size_t id = 0; id < bank.size(); ++id) {
    const auto& cap = bank.entry(id).captions[2];
    const auto r = retrieve(cap.text, bank, Algorithm::sentence_sentence, 1);
    ASSERT_EQ(r.hits.size(), 1u);
    EXPECT_NEAR(r.hits[0].score, 1.0, 1e-9);
    // An identical caption text elsewhere would tie; the lowest id wins.
    EXPECT_LE(r.hits[0].id, id);
  }
}

TEST(SentenceSentence, KLargerThanBankAndInvalidK) {
  const auto bank = random_bank(3, {8, 4, 2, 2}, 1);
  const auto q = encode_query("red bird", bank);
  EXPECT_EQ(match_sentence_sentence(q, bank, 10).hits.size(), 3u);
  EXPECT_THROW(match_sentence_sentence(q, bank, 0), ArgumentError);
}

TEST(SentenceImage, HandBuiltScores) {
  const Tensor v0({2, 1, 1}, std::vector<double>{1, 0});
  const Tensor v1({2, 1, 1}, std::vector<double>{1, 1});
  const auto bank = MemoryBank::create({2, 1, 1, 1}, kBankVersion,
                                       {entry_from(0, v0, {caption_from({1, 0})}), entry_from(1, v1, {caption_from({1, 0})})});
  const auto r = match_sentence_image(query_from({1, 0}), bank, 2);
  EXPECT_EQ(ids(r), (std::vector<std::size_t>{0, 1}));
  EXPECT_NEAR(r.hits[0].score, 1.0, 1e-15);
  EXPECT_NEAR(r.hits[1].score, 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_FALSE(r.hits[0].caption.has_value());
}

TEST(SentenceImage, AlignedConstantMapScoresOne) {
  const std::vector<double> dir = {0.3, -0.4, 1.2};
  Tensor v({3, 2, 2});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < 4; ++p) v[c * 4 + p] = 2.0 * dir[c];
  const auto bank = MemoryBank::create({3, 1, 2, 2}, kBankVersion, {entry_from(0, v, {caption_from(dir)})});
  EXPECT_NEAR(match_sentence_image(query_from(dir), bank, 1).hits[0].score, 1.0, 1e-12);
}

TEST(SentenceImage, ZeroGlobalFeatureRanksLast) {
  const auto bank = MemoryBank::create(
      {2, 1, 1, 1}, kBankVersion,
      {entry_from(0, Tensor({2, 1, 1}), {caption_from({1, 0})}),
       entry_from(1, Tensor({2, 1, 1}, std::vector<double>{1, 0.2}), {caption_from({1, 0})}),
       entry_from(2, Tensor({2, 1, 1}, std::vector<double>{0.5, 0.5}), {caption_from({1, 0})})});
  const auto r = match_sentence_image(query_from({1, 0}), bank, 3);
  EXPECT_EQ(ids(r), (std::vector<std::size_t>{1, 2, 0}));
  EXPECT_EQ(r.hits[2].score, 0.0);
}

TEST(ImportanceReweight, SingleWordIsIdentity) {
  WordEmbeddings w{Tensor::matrix(1, 3, {0.2, -1.5, 4.0}), {true}};
  EXPECT_EQ(importance_reweight(w), w.w);
}

TEST(ImportanceReweight, IdenticalRowsGiveMean) {
  WordEmbeddings w{Tensor::matrix(2, 2, {0.5, 1.5, 0.5, 1.5}), {true, true}};
  const Tensor out = importance_reweight(w);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out[i], w.w[i], 1e-15);
}

TEST(ImportanceReweight, TwoWordOracle) {
  WordEmbeddings w{Tensor::matrix(2, 2, {1, 0, 0, 2}), {true, true}};
  const Tensor out = importance_reweight(w);
  const double e = std::exp(1.0), e4 = std::exp(4.0);
  // Gram rows [1, 0] and [0, 4]; lambda rows are their softmaxes.
  const double l00 = e / (e + 1), l01 = 1 / (e + 1), l10 = 1 / (1 + e4), l11 = e4 / (1 + e4);
  const double want[4] = {l00 * 1 + l01 * 0, l00 * 0 + l01 * 2, l10 * 1 + l11 * 0, l10 * 0 + l11 * 2};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out[i], want[i], 1e-15);
}

TEST(ImportanceReweight, PaddingMaskedAndAllPaddedRejected) {
  WordEmbeddings w{Tensor::matrix(3, 2, {1, 0, 0, 2, 0, 0}), {true, true, false}};
  const Tensor out = importance_reweight(w);
  WordEmbeddings trimmed{Tensor::matrix(2, 2, {1, 0, 0, 2}), {true, true}};
  const Tensor ref = importance_reweight(trimmed);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(out[i], ref[i]);
  EXPECT_EQ(out[4], 0.0);
  EXPECT_EQ(out[5], 0.0);
  WordEmbeddings none{Tensor({2, 2}), {false, false}};
  EXPECT_THROW(importance_reweight(none), ArgumentError);
}

TEST(WordsWords, IdentityAndN1Reduction) {
  const auto bank = random_bank(10, {8, 1, 2, 2}, 6);
  const auto& cap = bank.entry(4).captions[0];
  const QueryFeatures q{cap.s, cap.w, "toy-text-v1/seed=6"};
  const auto plain = match_words_words(q, bank, 10, false);
  // Single-word captions repeat across entries; the owner scores 1 and only a
  // lower id with the same word can precede it.
  EXPECT_NEAR(plain.hits[0].score, 1.0, 1e-9);
  EXPECT_LE(plain.hits[0].id, 4u);
  const auto owner = std::find_if(plain.hits.begin(), plain.hits.end(), [](const Hit& h) { return h.id == 4; });
  ASSERT_NE(owner, plain.hits.end());
  EXPECT_NEAR(owner->score, 1.0, 1e-9);
  const auto rw = match_words_words(q, bank, 10, true);
  ASSERT_EQ(plain.hits.size(), rw.hits.size());
  for (std::size_t i = 0; i < plain.hits.size(); ++i) {
    EXPECT_EQ(plain.hits[i].id, rw.hits[i].id);
    EXPECT_NEAR(plain.hits[i].score, rw.hits[i].score, 1e-9);
  }
}

TEST(WordsImage, SinglePositionCopiesSpatialVector) {
  // H = W = 1: c is all ones, every real row of w~ equals v's vector, so
  // gamma is the cosine of w against that vector repeated per real row.
  const Tensor v({3, 1, 1}, std::vector<double>{0.5, -1, 2});
  const Tensor words = Tensor::matrix(2, 3, {1, 2, 3, -1, 0, 1});
  const double got = words_image_score(words, {true, true}, v.reshaped({3, 1}));
  const Tensor tiled = Tensor::matrix(2, 3, {0.5, -1, 2, 0.5, -1, 2});
  EXPECT_NEAR(got, cosine(words.data(), tiled.data()).value, 1e-15);
}

TEST(WordsImage, SpatiallyConstantMapGivesUniformCorrelation) {
  Tensor cols({2, 4});
  for (std::size_t p = 0; p < 4; ++p) {
    cols.at(0, p) = 0.7;
    cols.at(1, p) = -0.2;
  }
  const Tensor words = Tensor::matrix(2, 2, {1, 1, 0.5, -3});
  const Tensor c = masked_row_softmax(matmul(words, cols), {}, {true, true});
  for (double x : c.values()) EXPECT_NEAR(x, 0.25, 1e-15);
  const Tensor tiled = Tensor::matrix(2, 2, {0.7, -0.2, 0.7, -0.2});
  EXPECT_NEAR(words_image_score(words, {true, true}, cols), cosine(words.data(), tiled.data()).value, 1e-15);
}

class OracleEquivalence : public ::testing::TestWithParam<std::string> {};

TEST_P(OracleEquivalence, MatchesBruteForce) {
  const std::string tag = GetParam();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto bank = random_bank(10, {12, 5, 2, 3}, seed, 0);
    for (const char* text : {"red bird", "a small blue circle on the left with wings", "bus"}) {
      const auto q = encode_query(text, bank);
      const auto got = retrieve(text, bank, tag, 10);
      expect_sorted(got);
      const auto want = oracle::rank(tag, q.s.s.values(), q.w.w, q.w.pad_mask, bank, 10);
      ASSERT_EQ(got.hits.size(), want.size());
      for (std::size_t i = 0; i < want.size(); ++i) {
        EXPECT_EQ(got.hits[i].id, want[i].id) << tag << " seed " << seed << " rank " << i;
        EXPECT_NEAR(got.hits[i].score, want[i].score, 1e-9);
        EXPECT_LE(std::abs(got.hits[i].score), 1.0 + 1e-12);
      }
    }
  }
}

INSTANTIATE_TEST_SUITE_P(AllTags, OracleEquivalence, ::testing::Values("ss", "si", "ww", "ww-rw", "wi", "wi-rw"),
                         [](const auto& info) {
                           std::string n = info.param;
                           std::replace(n.begin(), n.end(), '-', '_');
                           return n;
                         });

TEST(Retrieve, AllTagsWellFormedAndDeterministic) {
  const auto bank = random_bank(7, {8, 4, 2, 2}, 2);
  for (const auto& [alg, tag] : kAlgorithmTags) {
    const auto a = retrieve("a green square", bank, tag, 4);
    EXPECT_EQ(a.algorithm, alg);
    EXPECT_EQ(a.hits.size(), 4u);
    expect_sorted(a);
    EXPECT_EQ(a, retrieve("a green square", bank, tag, 4));
  }
  EXPECT_THROW(retrieve("x", bank, "nope", 1), ArgumentError);
}

TEST(Retrieve, DefaultIsWordsImageReweighted) {
  const auto bank = random_bank(4, {8, 4, 2, 2}, 3);
  EXPECT_EQ(retrieve("a red square", bank).algorithm, Algorithm::words_image_reweighted);
  EXPECT_EQ(retrieve("a red square", bank).hits.size(), 1u);
}

TEST(Retrieve, EncoderMismatchRejected) {
  const auto bank = random_bank(3, {8, 4, 2, 2}, 3);
  auto q = encode_query("red", bank);
  q.encoder_version = "toy-text-v1/seed=99";
  EXPECT_THROW(match(q, bank, Algorithm::sentence_sentence, 1), VersionMismatch);
  const auto other = MemoryBank::create(bank.dims(), "mystery-encoder", bank.entries());
  EXPECT_THROW(retrieve("red", other, Algorithm::sentence_sentence, 1), VersionMismatch);
}

TEST(Retrieve, ShapeMismatchRejected) {
  const auto bank = random_bank(3, {8, 4, 2, 2}, 3);
  const auto small = random_bank(3, {6, 4, 2, 2}, 3);
  const auto q = encode_query("red", small);
  EXPECT_THROW(match(q, bank, Algorithm::sentence_image, 1), ShapeError);
}

TEST(Retrieve, RankingInvariantUnderPositiveQueryScaling) {
  // Holds for the pure-cosine algorithms. The softmax-based ones (ww-rw, wi,
  // wi-rw) see the scale inside their logits, so they are not covered here.
  const auto bank = random_bank(20, {10, 6, 2, 2}, 8, 0);
  const auto q = encode_query("large yellow bus on the right", bank);
  for (const Algorithm alg : {Algorithm::sentence_sentence, Algorithm::sentence_image, Algorithm::words_words}) {
    const auto base = match(q, bank, alg, 20);
    for (double k : {0.01, 3.5, 1e4}) {
      QueryFeatures scaled = q;
      for (auto& v : scaled.s.s.values()) v *= k;
      for (auto& v : scaled.w.w.values()) v *= k;
      EXPECT_EQ(ids(match(scaled, bank, alg, 20)), ids(base)) << algorithm_tag(alg) << " k=" << k;
    }
  }
}

TEST(Retrieve, TiesOrderByAscendingId) {
  std::vector<MemoryEntry> entries;
  for (std::size_t i = 0; i < 5; ++i) entries.push_back(entry_from(i, Tensor({2, 1, 1}, 1.0), {caption_from({1, 1})}));
  const auto bank = MemoryBank::create({2, 1, 1, 1}, kBankVersion, entries);
  for (const auto& [alg, tag] : kAlgorithmTags) {
    EXPECT_EQ(ids(match(query_from({1, 2}), bank, alg, 5)), (std::vector<std::size_t>{0, 1, 2, 3, 4})) << tag;
  }
}

TEST(Retrieve, CaptionTieTakesEarliestCaption) {
  const auto bank = MemoryBank::create({2, 1, 1, 1}, kBankVersion,
                                       {entry_from(0, Tensor({2, 1, 1}, 1.0), {caption_from({0, 1}), caption_from({1, 0}),
                                                                               caption_from({2, 0})})});
  const auto r = match_sentence_sentence(query_from({1, 0}), bank, 1);
  EXPECT_EQ(r.hits[0].caption, 1u);
}
