#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "membank/error.hpp"

namespace membank {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

// Dense row-major array of doubles. Feature maps are laid out [C, H, W].
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    for (std::size_t d : shape_) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
    }
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (std::size_t d : shape_) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
    }
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("shape " + shape_str(shape_) + " needs " + std::to_string(shape_numel(shape_)) +
                       " values, got " + std::to_string(data_.size()));
    }
  }

  // Construction path for data coming from outside the process; rejects NaN/Inf.
  static Tensor from_external(Shape shape, std::vector<double> data) {
    Tensor t(std::move(shape), std::move(data));
    for (std::size_t i = 0; i < t.data_.size(); ++i) {
      if (!std::isfinite(t.data_[i])) {
        throw ShapeError("non-finite value at flat index " + std::to_string(i));
      }
    }
    return t;
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
    return Tensor({rows, cols}, std::vector<double>(values));
  }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

}  // namespace detail

// Row-major product with left-to-right accumulation over the inner dimension.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      out[i * n + j] = acc;
    }
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return out;
}

// Softmax along the last axis of each row. Columns with keep[c] == false get
// a -inf logit (zero probability); rows with keep_rows[r] == false come out
// as all zeros. Empty masks mean "keep everything".
inline Tensor masked_row_softmax(const Tensor& a, const std::vector<bool>& keep_cols,
                                 const std::vector<bool>& keep_rows) {
  detail::require_rank(a, 2, "row_softmax");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (!keep_cols.empty() && keep_cols.size() != n) throw ShapeError("row_softmax column mask length mismatch");
  if (!keep_rows.empty() && keep_rows.size() != m) throw ShapeError("row_softmax row mask length mismatch");
  const bool any_col = keep_cols.empty() || std::find(keep_cols.begin(), keep_cols.end(), true) != keep_cols.end();
  if (!any_col) throw ArgumentError("row_softmax: every column is masked");

  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    if (!keep_rows.empty() && !keep_rows[i]) continue;
    const double* row = a.data().data() + i * n;
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (keep_cols.empty() || keep_cols[j]) hi = std::max(hi, row[j]);
    }
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (keep_cols.empty() || keep_cols[j]) {
        const double e = std::exp(row[j] - hi);
        out[i * n + j] = e;
        total += e;
      }
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= total;
  }
  return out;
}

inline Tensor row_softmax(const Tensor& a) { return masked_row_softmax(a, {}, {}); }

struct Cosine {
  double value = 0.0;
  bool degenerate = false;
};

inline constexpr double kCosineEps = 1e-12;

// Cosine similarity; an operand with norm below kCosineEps yields 0 and sets
// the degenerate flag.
inline Cosine cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine operands differ in length: " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double norm_a = std::sqrt(na), norm_b = std::sqrt(nb);
  if (norm_a < kCosineEps || norm_b < kCosineEps) return {0.0, true};
  const double c = dot / (norm_a * norm_b);
  return {std::clamp(c, -1.0, 1.0), false};
}

// Per-channel mean over all H*W positions of a [D, H, W] map. Values are
// summed in ascending order, so any spatial permutation gives the same bits.
inline Tensor spatial_mean(const Tensor& v) {
  detail::require_rank(v, 3, "spatial_mean");
  const std::size_t d = v.dim(0), hw = v.dim(1) * v.dim(2);
  Tensor out({d});
  std::vector<double> buf(hw);
  for (std::size_t c = 0; c < d; ++c) {
    std::copy_n(v.values().begin() + static_cast<std::ptrdiff_t>(c * hw), hw, buf.begin());
    std::sort(buf.begin(), buf.end());
    double acc = 0.0;
    for (double x : buf) acc += x;
    out[c] = acc / static_cast<double>(hw);
  }
  return out;
}

enum class PoolKind { average, max };

inline std::size_t pooled_extent(std::size_t in, std::size_t kernel, std::size_t stride) {
  return (in - kernel) / stride + 1;
}

// Unpadded pooling of a [C, H, W] map.
inline Tensor pool2d(const Tensor& x, PoolKind kind, std::size_t kernel, std::size_t stride) {
  detail::require_rank(x, 3, "pool2d");
  if (kernel == 0 || stride == 0) throw ArgumentError("pool2d kernel and stride must be >= 1");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h < kernel || w < kernel) {
    throw ShapeError("pool2d kernel " + std::to_string(kernel) + " larger than input " + shape_str(x.shape()));
  }
  const std::size_t oh = pooled_extent(h, kernel, stride), ow = pooled_extent(w, kernel, stride);
  const double inv = 1.0 / static_cast<double>(kernel * kernel);
  Tensor out({c, oh, ow});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = kind == PoolKind::max ? -std::numeric_limits<double>::infinity() : 0.0;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const double val = x.at(ch, oy * stride + ky, ox * stride + kx);
            acc = kind == PoolKind::max ? std::max(acc, val) : acc + val;
          }
        }
        out.at(ch, oy, ox) = kind == PoolKind::max ? acc : acc * inv;
      }
    }
  }
  return out;
}

// Row-major flattening of an [N, D] word matrix into an N*D vector.
inline Tensor flatten_concat_words(const Tensor& w) {
  detail::require_rank(w, 2, "flatten_concat_words");
  return Tensor({w.size()}, w.values());
}

inline double mean(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.values()) acc += v;
  return acc / static_cast<double>(t.size());
}

inline double squared_norm(std::span<const double> a) {
  double acc = 0.0;
  for (double v : a) acc += v * v;
  return acc;
}

}  // namespace membank
