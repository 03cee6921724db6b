#pragma once

#include <algorithm>
#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "membank/bank.hpp"
#include "membank/error.hpp"
#include "membank/features.hpp"
#include "membank/tensor.hpp"

namespace membank {

enum class Algorithm {
  sentence_sentence,        // ss
  sentence_image,           // si
  words_words,              // ww
  words_words_reweighted,   // ww-rw
  words_image,              // wi
  words_image_reweighted,   // wi-rw
};

inline constexpr Algorithm kDefaultAlgorithm = Algorithm::words_image_reweighted;

inline constexpr std::array<std::pair<Algorithm, std::string_view>, 6> kAlgorithmTags{{
    {Algorithm::sentence_sentence, "ss"},
    {Algorithm::sentence_image, "si"},
    {Algorithm::words_words, "ww"},
    {Algorithm::words_words_reweighted, "ww-rw"},
    {Algorithm::words_image, "wi"},
    {Algorithm::words_image_reweighted, "wi-rw"},
}};

inline std::string_view algorithm_tag(Algorithm a) {
  for (const auto& [alg, tag] : kAlgorithmTags) {
    if (alg == a) return tag;
  }
  return "?";
}

inline Algorithm parse_algorithm(std::string_view tag) {
  for (const auto& [alg, t] : kAlgorithmTags) {
    if (t == tag) return alg;
  }
  throw ArgumentError("unknown algorithm tag '" + std::string(tag) + "' (expected ss, si, ww, ww-rw, wi, wi-rw)");
}

struct QueryFeatures {
  SentenceFeature s;
  WordEmbeddings w;
  std::string encoder_version;  // text part only, e.g. "toy-text-v1/seed=7"
};

struct Hit {
  std::size_t id = 0;
  double score = 0.0;
  std::optional<std::size_t> caption;  // best-matching caption for caption-keyed algorithms

  friend bool operator==(const Hit&, const Hit&) = default;
};

struct RetrievalResult {
  Algorithm algorithm = kDefaultAlgorithm;
  std::vector<Hit> hits;

  friend bool operator==(const RetrievalResult&, const RetrievalResult&) = default;
};

inline EncoderVersion bank_encoder(const MemoryBank& bank) {
  auto ev = EncoderVersion::parse(bank.encoder_version());
  if (!ev) throw VersionMismatch("unsupported bank encoder version '" + bank.encoder_version() + "'");
  return *ev;
}

inline QueryFeatures encode_query(std::string_view text, const MemoryBank& bank) {
  const auto ev = bank_encoder(bank);
  auto enc = toy_text_encoder(text, bank.dims().d, bank.dims().n, ev.text_seed);
  return QueryFeatures{std::move(enc.s), std::move(enc.w), ev.text_part()};
}

namespace detail {

inline void check_query(const QueryFeatures& q, const MemoryBank& bank, std::size_t k) {
  if (k < 1) throw ArgumentError("k must be >= 1");
  const auto ev = bank_encoder(bank);
  if (q.encoder_version != ev.text_part()) {
    throw VersionMismatch("query encoded with '" + q.encoder_version + "' but bank uses '" + ev.text_part() + "'");
  }
  const auto& d = bank.dims();
  if (q.s.s.shape() != Shape{d.d}) throw ShapeError("query sentence feature " + shape_str(q.s.s.shape()) +
                                                    " does not match bank D=" + std::to_string(d.d));
  if (q.w.w.shape() != Shape{d.n, d.d}) {
    throw ShapeError("query word embeddings " + shape_str(q.w.w.shape()) + " do not match bank " +
                     shape_str({d.n, d.d}));
  }
  validate_word_embeddings(q.w);
}

inline RetrievalResult top_k(Algorithm alg, std::vector<Hit> all, std::size_t k) {
  std::sort(all.begin(), all.end(), [](const Hit& a, const Hit& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.id != b.id) return a.id < b.id;
    return a.caption.value_or(0) < b.caption.value_or(0);
  });
  all.resize(std::min(k, all.size()));
  return RetrievalResult{alg, std::move(all)};
}

// Max over captions; the earliest caption wins ties.
template <typename ScoreFn>
std::vector<Hit> best_caption_scores(const MemoryBank& bank, ScoreFn&& score) {
  std::vector<Hit> out;
  out.reserve(bank.size());
  for (const auto& e : bank.entries()) {
    Hit h{e.id, 0.0, 0};
    for (std::size_t c = 0; c < e.captions.size(); ++c) {
      const double sc = score(e.captions[c]);
      if (c == 0 || sc > h.score) {
        h.score = sc;
        h.caption = c;
      }
    }
    out.push_back(h);
  }
  return out;
}

// v as [D, H*W].
inline Tensor spatial_columns(const ImageFeatureMap& v) { return v.v.reshaped({v.channels(), v.height() * v.width()}); }

}  // namespace detail

// lambda = Softmax(w w^T) restricted to real words, returned as lambda * w.
// Padded rows stay zero.
inline Tensor importance_reweight(const WordEmbeddings& w) {
  validate_word_embeddings(w);
  const Tensor lambda = masked_row_softmax(matmul(w.w, transpose(w.w)), w.pad_mask, w.pad_mask);
  return matmul(lambda, w.w);
}

// Spatial analogue of importance_reweight on a [D, P] column matrix:
// mu = Softmax(v^T v), result v mu^T (column j is the mu-weighted mix of columns).
inline Tensor spatial_reweight(const Tensor& columns) {
  const Tensor mu = row_softmax(matmul(transpose(columns), columns));
  return matmul(columns, transpose(mu));
}

// gamma = cos(flatten(words), flatten(c v^T)), c = Softmax(words v) over
// spatial positions for real word rows.
inline double words_image_score(const Tensor& words, const std::vector<bool>& mask, const Tensor& columns) {
  const Tensor c = masked_row_softmax(matmul(words, columns), {}, mask);
  const Tensor w_tilde = matmul(c, transpose(columns));
  return cosine(words.data(), w_tilde.data()).value;
}

inline RetrievalResult match_sentence_sentence(const QueryFeatures& q, const MemoryBank& bank, std::size_t k = 1) {
  detail::check_query(q, bank, k);
  auto all = detail::best_caption_scores(bank, [&](const Caption& c) { return cosine(q.s.s.data(), c.s.s.data()).value; });
  return detail::top_k(Algorithm::sentence_sentence, std::move(all), k);
}

inline RetrievalResult match_sentence_image(const QueryFeatures& q, const MemoryBank& bank, std::size_t k = 1) {
  detail::check_query(q, bank, k);
  std::vector<Hit> all;
  for (const auto& e : bank.entries()) all.push_back({e.id, cosine(q.s.s.data(), e.v_g.v_g.data()).value, std::nullopt});
  return detail::top_k(Algorithm::sentence_image, std::move(all), k);
}

inline RetrievalResult match_words_words(const QueryFeatures& q, const MemoryBank& bank, std::size_t k, bool reweight) {
  detail::check_query(q, bank, k);
  const Tensor query = reweight ? importance_reweight(q.w) : q.w.w;
  auto all = detail::best_caption_scores(bank, [&](const Caption& c) {
    if (!reweight) return cosine(query.data(), c.w.w.data()).value;
    const Tensor key = importance_reweight(c.w);
    return cosine(query.data(), key.data()).value;
  });
  return detail::top_k(reweight ? Algorithm::words_words_reweighted : Algorithm::words_words, std::move(all), k);
}

inline RetrievalResult match_words_image(const QueryFeatures& q, const MemoryBank& bank, std::size_t k, bool reweight) {
  detail::check_query(q, bank, k);
  const Tensor words = reweight ? importance_reweight(q.w) : q.w.w;
  std::vector<Hit> all;
  for (const auto& e : bank.entries()) {
    Tensor cols = detail::spatial_columns(e.v);
    if (reweight) cols = spatial_reweight(cols);
    all.push_back({e.id, words_image_score(words, q.w.pad_mask, cols), std::nullopt});
  }
  return detail::top_k(reweight ? Algorithm::words_image_reweighted : Algorithm::words_image, std::move(all), k);
}

inline RetrievalResult match(const QueryFeatures& q, const MemoryBank& bank, Algorithm alg, std::size_t k = 1) {
  switch (alg) {
    case Algorithm::sentence_sentence: return match_sentence_sentence(q, bank, k);
    case Algorithm::sentence_image: return match_sentence_image(q, bank, k);
    case Algorithm::words_words: return match_words_words(q, bank, k, false);
    case Algorithm::words_words_reweighted: return match_words_words(q, bank, k, true);
    case Algorithm::words_image: return match_words_image(q, bank, k, false);
    case Algorithm::words_image_reweighted: return match_words_image(q, bank, k, true);
  }
  throw ArgumentError("unknown algorithm");
}

inline RetrievalResult retrieve(std::string_view text, const MemoryBank& bank, Algorithm alg = kDefaultAlgorithm,
                                std::size_t k = 1) {
  return match(encode_query(text, bank), bank, alg, k);
}

inline RetrievalResult retrieve(std::string_view text, const MemoryBank& bank, std::string_view tag, std::size_t k = 1) {
  return retrieve(text, bank, parse_algorithm(tag), k);
}

}  // namespace membank
