#include <gtest/gtest.h>

#include <cmath>

#include "membank/features.hpp"
#include "test_util.hpp"

using namespace membank;

TEST(Rng, FrozenSplitMixValues) {
  // Reference outputs of SplitMix64 seeded with 0 (first two draws).
  EXPECT_EQ(mix64(0), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(mix64(kGolden), 0x6E789E6AA1B965F4ULL);
  EXPECT_EQ(fnv1a64(""), 0xCBF29CE484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xAF63DC4C8601EC8CULL);
}

TEST(Rng, UnitAndSymmetricRanges) {
  const auto s = CounterStream::keyed(5, "range");
  for (std::uint64_t i = 0; i < 1000; ++i) {
    EXPECT_GE(s.unit(i), 0.0);
    EXPECT_LT(s.unit(i), 1.0);
    EXPECT_GE(s.symmetric(i), -1.0);
    EXPECT_LT(s.symmetric(i), 1.0);
  }
}

TEST(EncoderVersion, RoundTripAndRejects) {
  const EncoderVersion ev{42, ImageSource::precomputed};
  EXPECT_EQ(ev.str(), "toy-text-v1/seed=42/precomputed");
  EXPECT_EQ(EncoderVersion::parse(ev.str()), ev);
  EXPECT_FALSE(EncoderVersion::parse("toy-text-v0/seed=42/precomputed"));
  EXPECT_FALSE(EncoderVersion::parse("toy-text-v1/seed=x/toy-image-v1"));
  EXPECT_FALSE(EncoderVersion::parse("toy-text-v1/seed=1/other"));
}

TEST(Tokenize, LowercaseWhitespaceSplit) {
  EXPECT_EQ(tokenize("  A Red\tsquare\n"), (std::vector<std::string>{"a", "red", "square"}));
  EXPECT_TRUE(tokenize(" \t ").empty());
}

TEST(TextEncoder, Deterministic) {
  const auto a = toy_text_encoder("a small bird with red wings", 16, 8, 11);
  const auto b = toy_text_encoder("a small bird with red wings", 16, 8, 11);
  EXPECT_EQ(a.s, b.s);
  EXPECT_EQ(a.w, b.w);
  const auto c = toy_text_encoder("a small bird with red wings", 16, 8, 12);
  EXPECT_NE(a.s, c.s);
}

TEST(TextEncoder, SingleTokenIsNormalizedTokenVector) {
  const auto enc = toy_text_encoder("zebra", 12, 4, 3);
  const auto vec = token_vector("zebra", 12, 3);
  double norm = 0.0;
  for (double v : vec) norm += v * v;
  norm = std::sqrt(norm);
  for (std::size_t d = 0; d < 12; ++d) {
    EXPECT_EQ(enc.s.s[d], vec[d] / norm);
    EXPECT_EQ(enc.w.w.at(0, d), vec[d]);
  }
  EXPECT_NEAR(std::sqrt(squared_norm(enc.s.s.data())), 1.0, 1e-12);
  EXPECT_EQ(enc.w.pad_mask, (std::vector<bool>{true, false, false, false}));
}

TEST(TextEncoder, OrderInvariantSentenceOrderSensitiveWords) {
  const auto ab = toy_text_encoder("a b", 8, 4, 1);
  const auto ba = toy_text_encoder("b a", 8, 4, 1);
  // Built directly: s is the normalized sum of the two token vectors.
  const auto va = token_vector("a", 8, 1), vb = token_vector("b", 8, 1);
  std::vector<double> sum(8);
  for (std::size_t d = 0; d < 8; ++d) sum[d] = va[d] + vb[d];
  const double norm = std::sqrt(squared_norm(sum));
  for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(ab.s.s[d], sum[d] / norm, 1e-15);
  EXPECT_EQ(ab.s, ba.s);
  EXPECT_NE(ab.w, ba.w);
  for (std::size_t d = 0; d < 8; ++d) {
    EXPECT_EQ(ab.w.w.at(0, d), ba.w.w.at(1, d));
    EXPECT_EQ(ab.w.w.at(1, d), ba.w.w.at(0, d));
  }
}

TEST(TextEncoder, PadDisciplineAndTruncation) {
  const auto enc = toy_text_encoder("one two three four five six", 6, 4, 9);
  EXPECT_EQ(enc.w.real_count(), 4u);
  const auto shorter = toy_text_encoder("one two three four", 6, 4, 9);
  EXPECT_EQ(enc.w, shorter.w);
  EXPECT_EQ(enc.s, shorter.s);

  const auto padded = toy_text_encoder("one two", 6, 5, 9);
  for (std::size_t i = 2; i < 5; ++i) {
    EXPECT_FALSE(padded.w.pad_mask[i]);
    for (std::size_t d = 0; d < 6; ++d) EXPECT_EQ(padded.w.w.at(i, d), 0.0);
  }
}

TEST(TextEncoder, UnitNormProperty) {
  const char* texts[] = {"x", "a red square on the left", "THE Quick brown fox", "many many many words here"};
  for (const char* t : texts) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto enc = toy_text_encoder(t, 32, 16, seed);
      EXPECT_NEAR(std::sqrt(squared_norm(enc.s.s.data())), 1.0, 1e-12);
    }
  }
}

TEST(TextEncoder, EmptyTextRejected) {
  EXPECT_THROW(toy_text_encoder("", 4, 4, 0), EncodingError);
  EXPECT_THROW(toy_text_encoder("   \t\n", 4, 4, 0), EncodingError);
  EXPECT_THROW(toy_text_encoder("ok", 0, 4, 0), ArgumentError);
}

TEST(ImageEncoder, ConstantImageGivesSpatiallyConstantFeatures) {
  const Tensor gray({3, 8, 8}, 0.5);
  const auto v = toy_image_encoder(gray, 10, 4, 4);
  for (std::size_t d = 0; d < 10; ++d)
    for (std::size_t p = 1; p < 16; ++p) EXPECT_NEAR(v.v[d * 16 + p], v.v[d * 16], 1e-12);
}

TEST(ImageEncoder, Deterministic) {
  const Tensor img = membank::testing::random_tensor({3, 8, 8}, 4);
  EXPECT_EQ(toy_image_encoder(img, 6, 2, 2), toy_image_encoder(img, 6, 2, 2));
}

TEST(ImageEncoder, CellMeansThenProjection) {
  Tensor img({3, 4, 4});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>((i * 7) % 11) / 10.0;
  const std::size_t dim = 5;
  const auto v = toy_image_encoder(img, dim, 2, 2);

  const auto stream = CounterStream::keyed(0, "toy-image-v1");
  for (std::size_t cy = 0; cy < 2; ++cy) {
    for (std::size_t cx = 0; cx < 2; ++cx) {
      double means[3] = {0, 0, 0};
      for (std::size_t c = 0; c < 3; ++c) {
        means[c] = (img.at(c, 2 * cy, 2 * cx) + img.at(c, 2 * cy, 2 * cx + 1) + img.at(c, 2 * cy + 1, 2 * cx) +
                    img.at(c, 2 * cy + 1, 2 * cx + 1)) /
                   4.0;
      }
      for (std::size_t d = 0; d < dim; ++d) {
        double want = 0.0;
        for (std::size_t c = 0; c < 3; ++c) want += stream.symmetric(d * 3 + c) * means[c];
        EXPECT_NEAR(v.v.at(d, cy, cx), want, 1e-12);
      }
    }
  }
}

TEST(ImageEncoder, NonDivisibleRejected) {
  EXPECT_THROW(toy_image_encoder(Tensor({3, 5, 4}), 4, 2, 2), ShapeError);
  EXPECT_THROW(toy_image_encoder(Tensor({1, 4, 4}), 4, 2, 2), ShapeError);
}
