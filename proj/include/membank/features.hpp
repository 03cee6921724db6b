#pragma once

#include <cctype>
#include <charconv>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "membank/error.hpp"
#include "membank/rng.hpp"
#include "membank/tensor.hpp"

namespace membank {

// Sentence feature s, shape [D].
struct SentenceFeature {
  Tensor s;

  std::size_t dim() const { return s.size(); }
  friend bool operator==(const SentenceFeature&, const SentenceFeature&) = default;
};

// Word embeddings w, shape [N, D]. Rows with pad_mask == false are padding and
// are exactly zero.
struct WordEmbeddings {
  Tensor w;
  std::vector<bool> pad_mask;

  std::size_t words() const { return w.dim(0); }
  std::size_t dim() const { return w.dim(1); }
  std::size_t real_count() const {
    std::size_t n = 0;
    for (bool b : pad_mask) n += b ? 1 : 0;
    return n;
  }
  friend bool operator==(const WordEmbeddings&, const WordEmbeddings&) = default;
};

// Image feature map v, shape [D, H, W].
struct ImageFeatureMap {
  Tensor v;

  std::size_t channels() const { return v.dim(0); }
  std::size_t height() const { return v.dim(1); }
  std::size_t width() const { return v.dim(2); }
  friend bool operator==(const ImageFeatureMap&, const ImageFeatureMap&) = default;
};

struct GlobalImageFeature {
  Tensor v_g;
  friend bool operator==(const GlobalImageFeature&, const GlobalImageFeature&) = default;
};

struct Caption {
  std::string text;
  SentenceFeature s;
  WordEmbeddings w;
  friend bool operator==(const Caption&, const Caption&) = default;
};

inline void validate_word_embeddings(const WordEmbeddings& w) {
  if (w.w.rank() != 2) throw ShapeError("word embeddings must be [N, D], got " + shape_str(w.w.shape()));
  if (w.pad_mask.size() != w.words()) throw ShapeError("pad mask length differs from word count");
  if (w.real_count() == 0) throw ArgumentError("word embeddings have no real positions");
  for (std::size_t i = 0; i < w.words(); ++i) {
    if (w.pad_mask[i]) continue;
    for (std::size_t d = 0; d < w.dim(); ++d) {
      if (w.w.at(i, d) != 0.0) throw ArgumentError("padded word row " + std::to_string(i) + " is not zero");
    }
  }
}

// ---------------------------------------------------------------------------
// Encoder versioning. A bank's encoder string has the form
//   toy-text-v1/seed=<u64>/<image source>
// where the image source is "toy-image-v1" or "precomputed".

inline constexpr std::string_view kTextEncoderName = "toy-text-v1";
inline constexpr std::string_view kImageEncoderName = "toy-image-v1";
inline constexpr std::string_view kPrecomputedImages = "precomputed";

enum class ImageSource { toy_encoder, precomputed };

struct EncoderVersion {
  std::uint64_t text_seed = 0;
  ImageSource image = ImageSource::toy_encoder;

  std::string text_part() const { return std::string(kTextEncoderName) + "/seed=" + std::to_string(text_seed); }

  std::string str() const {
    return text_part() + "/" +
           std::string(image == ImageSource::toy_encoder ? kImageEncoderName : kPrecomputedImages);
  }

  static std::optional<EncoderVersion> parse(std::string_view s) {
    const std::string prefix = std::string(kTextEncoderName) + "/seed=";
    if (s.substr(0, prefix.size()) != prefix) return std::nullopt;
    s.remove_prefix(prefix.size());
    const auto slash = s.find('/');
    if (slash == std::string_view::npos) return std::nullopt;
    EncoderVersion ev;
    const auto digits = s.substr(0, slash);
    const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), ev.text_seed);
    if (ec != std::errc{} || ptr != digits.data() + digits.size() || digits.empty()) return std::nullopt;
    const auto image = s.substr(slash + 1);
    if (image == kImageEncoderName) {
      ev.image = ImageSource::toy_encoder;
    } else if (image == kPrecomputedImages) {
      ev.image = ImageSource::precomputed;
    } else {
      return std::nullopt;
    }
    return ev;
  }

  friend bool operator==(const EncoderVersion&, const EncoderVersion&) = default;
};

// ---------------------------------------------------------------------------
// Toy text encoder.

inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) tokens.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

// D values in [-1, 1) keyed by (seed, token bytes).
inline std::vector<double> token_vector(std::string_view token, std::size_t dim, std::uint64_t seed) {
  const auto stream = CounterStream::keyed(seed, token);
  std::vector<double> out(dim);
  for (std::size_t d = 0; d < dim; ++d) out[d] = stream.symmetric(d);
  return out;
}

struct EncodedText {
  SentenceFeature s;
  WordEmbeddings w;
};

inline EncodedText toy_text_encoder(std::string_view text, std::size_t dim, std::size_t max_words,
                                    std::uint64_t seed) {
  if (dim == 0 || max_words == 0) throw ArgumentError("text encoder needs D >= 1 and N >= 1");
  auto tokens = tokenize(text);
  if (tokens.empty()) throw EncodingError("caption is empty after tokenization");
  if (tokens.size() > max_words) tokens.resize(max_words);

  EncodedText out;
  out.w.w = Tensor({max_words, dim});
  out.w.pad_mask.assign(max_words, false);
  std::vector<double> sum(dim, 0.0);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto vec = token_vector(tokens[i], dim, seed);
    for (std::size_t d = 0; d < dim; ++d) {
      out.w.w.at(i, d) = vec[d];
      sum[d] += vec[d];
    }
    out.w.pad_mask[i] = true;
  }
  const double norm = std::sqrt(squared_norm(sum));
  if (norm < kCosineEps) throw EncodingError("sentence feature has zero norm");
  for (double& v : sum) v /= norm;
  out.s.s = Tensor({dim}, std::move(sum));
  return out;
}

// ---------------------------------------------------------------------------
// Toy image encoder. Pixels are a [3, H_img, W_img] array; each of the H x W
// cells is reduced to its three channel means, then lifted to D channels by a
// fixed [D, 3] projection drawn from the toy-image-v1 stream.

inline Tensor image_projection(std::size_t dim) {
  const auto stream = CounterStream::keyed(0, kImageEncoderName);
  Tensor p({dim, 3});
  for (std::size_t i = 0; i < dim * 3; ++i) p[i] = stream.symmetric(i);
  return p;
}

inline ImageFeatureMap toy_image_encoder(const Tensor& image, std::size_t dim, std::size_t h, std::size_t w) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("image must be [3, H, W], got " + shape_str(image.shape()));
  }
  if (dim == 0 || h == 0 || w == 0) throw ArgumentError("image encoder needs D, H, W >= 1");
  const std::size_t ih = image.dim(1), iw = image.dim(2);
  if (ih % h != 0 || iw % w != 0) {
    throw ShapeError("image " + shape_str(image.shape()) + " not divisible into " + std::to_string(h) + "x" +
                     std::to_string(w) + " cells");
  }
  const std::size_t ch = ih / h, cw = iw / w;
  const double inv = 1.0 / static_cast<double>(ch * cw);
  const Tensor proj = image_projection(dim);

  ImageFeatureMap out{Tensor({dim, h, w})};
  for (std::size_t cy = 0; cy < h; ++cy) {
    for (std::size_t cx = 0; cx < w; ++cx) {
      double means[3];
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (std::size_t y = cy * ch; y < (cy + 1) * ch; ++y)
          for (std::size_t x = cx * cw; x < (cx + 1) * cw; ++x) acc += image.at(c, y, x);
        means[c] = acc * inv;
      }
      for (std::size_t d = 0; d < dim; ++d) {
        out.v.at(d, cy, cx) = proj.at(d, 0) * means[0] + proj.at(d, 1) * means[1] + proj.at(d, 2) * means[2];
      }
    }
  }
  return out;
}

}  // namespace membank
