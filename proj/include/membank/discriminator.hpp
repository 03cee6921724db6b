#pragma once

#include <algorithm>
#include <bit>
#include <concepts>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "membank/error.hpp"
#include "membank/features.hpp"
#include "membank/layers.hpp"
#include "membank/rng.hpp"
#include "membank/tensor.hpp"

namespace membank {

// Content pyramid over a [C, R, R] map: `source` is the map itself (a_R) and
// `levels` are the pooled maps a_{R/2}, a_{R/4}, ..., a_4, fine to coarse.
struct ContentPyramid {
  Tensor source;
  std::vector<Tensor> levels;

  std::size_t scales() const { return levels.size() + 1; }
};

inline bool is_pow2(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

inline std::size_t pyramid_level_count(std::size_t resolution) {
  return static_cast<std::size_t>(std::bit_width(resolution)) - 3;  // log2(R) - 2
}

inline ContentPyramid content_pyramid(const Tensor& x, PoolKind kind = PoolKind::average) {
  if (x.rank() != 3 || x.dim(1) != x.dim(2)) throw ShapeError("content pyramid needs a square [C, R, R] map");
  const std::size_t r = x.dim(1);
  if (!is_pow2(r) || r < 8) {
    throw ShapeError("content pyramid resolution must be a power of two >= 8, got " + std::to_string(r));
  }
  ContentPyramid pyr{x, {}};
  const Tensor* cur = &x;
  while (cur->dim(1) > 4) {
    pyr.levels.push_back(pool2d(*cur, kind, 2, 2));
    cur = &pyr.levels.back();
  }
  return pyr;
}

// ---------------------------------------------------------------------------
// Toy discriminator. stem: pointwise 3 -> C + leaky ReLU, the pyramid source.
// One block per pyramid level: avg-pool the hidden map, concatenate the
// matching pyramid level, pointwise 2C -> C + leaky ReLU. At 4x4 the sentence
// feature is broadcast and concatenated, pointwise (C + D) -> C + leaky ReLU,
// then a linear head over the flattened map.

struct DiscriminatorConfig {
  std::size_t resolution = 32;
  std::size_t channels = 8;
  std::size_t feature_dim = 16;
};

struct DiscriminatorParams {
  DiscriminatorConfig config;
  Tensor stem_w;                 // [C, 3]
  Tensor stem_b;                 // [C]
  std::vector<Tensor> level_w;   // [C, 2C]
  std::vector<Tensor> level_b;   // [C]
  Tensor final_w;                // [C, C + D]
  Tensor final_b;                // [C]
  Tensor head_w;                 // [C * 16]
  Tensor head_b;                 // [1]
};

template <typename P, typename F>
  requires std::is_same_v<std::remove_const_t<P>, DiscriminatorParams>
void for_each_param(P& p, F&& f) {
  f(std::string("stem.w"), p.stem_w);
  f(std::string("stem.b"), p.stem_b);
  for (std::size_t l = 0; l < p.level_w.size(); ++l) {
    f("level" + std::to_string(l) + ".w", p.level_w[l]);
    f("level" + std::to_string(l) + ".b", p.level_b[l]);
  }
  f(std::string("final.w"), p.final_w);
  f(std::string("final.b"), p.final_b);
  f(std::string("head.w"), p.head_w);
  f(std::string("head.b"), p.head_b);
}

inline DiscriminatorParams init_discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed) {
  if (!is_pow2(cfg.resolution) || cfg.resolution < 8) throw ArgumentError("discriminator resolution must be 2^k >= 8");
  SeqRng rng(seed, "discriminator-init");
  const std::size_t c = cfg.channels;
  DiscriminatorParams p;
  p.config = cfg;
  p.stem_w = nn::init_weight(c, 3, rng);
  p.stem_b = Tensor({c});
  for (std::size_t l = 0; l < pyramid_level_count(cfg.resolution); ++l) {
    p.level_w.push_back(nn::init_weight(c, 2 * c, rng));
    p.level_b.push_back(Tensor({c}));
  }
  p.final_w = nn::init_weight(c, c + cfg.feature_dim, rng);
  p.final_b = Tensor({c});
  p.head_w = nn::init_weight(1, c * 16, rng).reshaped({c * 16});
  p.head_b = Tensor({1});
  return p;
}

inline DiscriminatorParams zeros_like(const DiscriminatorParams& p) {
  DiscriminatorParams z = p;
  for_each_param(z, [](const std::string&, Tensor& t) { t = nn::zeros_like(t); });
  return z;
}

struct DiscriminatorTrace {
  Tensor image;
  Tensor stem_pre;
  ContentPyramid pyramid;  // source is the stem activation
  std::vector<Tensor> level_in;
  std::vector<Tensor> level_pre;
  std::vector<Tensor> level_out;
  Tensor final_in;
  Tensor final_pre;
  Tensor final_out;
  double logit = 0.0;
};

inline DiscriminatorTrace discriminator_forward_traced(const Tensor& image, const SentenceFeature& s,
                                                       const DiscriminatorParams& p) {
  const auto& cfg = p.config;
  const Shape want{3, cfg.resolution, cfg.resolution};
  if (image.shape() != want) {
    throw ShapeError("discriminator expects image " + shape_str(want) + ", got " + shape_str(image.shape()));
  }
  if (s.dim() != cfg.feature_dim) throw ShapeError("discriminator expects D=" + std::to_string(cfg.feature_dim));
  DiscriminatorTrace t;
  t.image = image;
  t.stem_pre = nn::pointwise(image, p.stem_w, p.stem_b);
  t.pyramid = content_pyramid(nn::leaky_relu(t.stem_pre));
  const Tensor* h = &t.pyramid.source;
  for (std::size_t l = 0; l < t.pyramid.levels.size(); ++l) {
    t.level_in.push_back(nn::concat_channels(nn::avgpool2(*h), t.pyramid.levels[l]));
    t.level_pre.push_back(nn::pointwise(t.level_in.back(), p.level_w[l], p.level_b[l]));
    t.level_out.push_back(nn::leaky_relu(t.level_pre.back()));
    h = &t.level_out.back();
  }
  t.final_in = nn::concat_channels(*h, nn::broadcast_spatial(s.s, 4, 4));
  t.final_pre = nn::pointwise(t.final_in, p.final_w, p.final_b);
  t.final_out = nn::leaky_relu(t.final_pre);
  double logit = p.head_b[0];
  for (std::size_t i = 0; i < t.final_out.size(); ++i) logit += p.head_w[i] * t.final_out[i];
  t.logit = logit;
  return t;
}

inline double discriminator_forward(const Tensor& image, const SentenceFeature& s, const DiscriminatorParams& p) {
  return discriminator_forward_traced(image, s, p).logit;
}

// Adjoints of every pre-activation for a given d(loss)/d(logit), plus the
// input gradient.
struct DiscriminatorAdjoints {
  Tensor d_stem_pre;
  std::vector<Tensor> d_level_pre;
  Tensor d_final_pre;
  Tensor d_image;
};

inline DiscriminatorAdjoints discriminator_backward(const DiscriminatorTrace& t, const DiscriminatorParams& p,
                                                    double d_logit, DiscriminatorParams* grads) {
  const std::size_t c = p.config.channels;
  const std::size_t levels = t.level_pre.size();
  DiscriminatorAdjoints adj;
  adj.d_level_pre.resize(levels);

  Tensor d_out(t.final_out.shape());
  for (std::size_t i = 0; i < d_out.size(); ++i) d_out[i] = d_logit * p.head_w[i];
  if (grads) {
    for (std::size_t i = 0; i < d_out.size(); ++i) grads->head_w[i] += d_logit * t.final_out[i];
    grads->head_b[0] += d_logit;
  }
  adj.d_final_pre = nn::leaky_relu_backward(t.final_pre, d_out);
  Tensor scratch_w(p.final_w.shape());
  Tensor d_final_in = grads ? nn::pointwise_backward(t.final_in, p.final_w, adj.d_final_pre, grads->final_w, &grads->final_b)
                            : nn::pointwise_backward(t.final_in, p.final_w, adj.d_final_pre, scratch_w, nullptr);
  Tensor d_h = nn::leading_channels(d_final_in, c);

  std::vector<Tensor> d_levels(levels);
  for (std::size_t l = levels; l-- > 0;) {
    adj.d_level_pre[l] = nn::leaky_relu_backward(t.level_pre[l], d_h);
    Tensor lw(p.level_w[l].shape());
    Tensor d_in = grads ? nn::pointwise_backward(t.level_in[l], p.level_w[l], adj.d_level_pre[l], grads->level_w[l],
                                                 &grads->level_b[l])
                        : nn::pointwise_backward(t.level_in[l], p.level_w[l], adj.d_level_pre[l], lw, nullptr);
    d_levels[l] = nn::trailing_channels(d_in, c);
    d_h = nn::avgpool2_backward(nn::leading_channels(d_in, c));
  }
  // Pyramid chain: level l is pool(level l-1), level -1 being the source.
  if (levels > 0) {
    Tensor acc = std::move(d_levels[levels - 1]);
    for (std::size_t l = levels - 1; l-- > 0;) {
      Tensor up = nn::avgpool2_backward(acc);
      nn::add_into(up, d_levels[l]);
      acc = std::move(up);
    }
    nn::add_into(d_h, nn::avgpool2_backward(acc));
  }
  adj.d_stem_pre = nn::leaky_relu_backward(t.stem_pre, d_h);
  Tensor sw(p.stem_w.shape());
  adj.d_image = grads ? nn::pointwise_backward(t.image, p.stem_w, adj.d_stem_pre, grads->stem_w, &grads->stem_b)
                      : nn::pointwise_backward(t.image, p.stem_w, adj.d_stem_pre, sw, nullptr);
  return adj;
}

// ---------------------------------------------------------------------------
// R1 = (gamma / 2) E ||grad_x D(x)||^2 on real samples.

struct ConditionalSample {
  Tensor image;
  SentenceFeature s;
};

// Adapter giving the toy network the logit / input_gradient interface that
// r1_penalty expects.
struct ToyDiscriminator {
  const DiscriminatorParams* params = nullptr;

  double logit(const ConditionalSample& x) const { return discriminator_forward(x.image, x.s, *params); }

  Tensor input_gradient(const ConditionalSample& x) const {
    const auto t = discriminator_forward_traced(x.image, x.s, *params);
    return discriminator_backward(t, *params, 1.0, nullptr).d_image;
  }
};

template <typename D, typename Sample>
concept InputDifferentiable = requires(const D& d, const Sample& x) {
  { d.logit(x) } -> std::convertible_to<double>;
  { d.input_gradient(x) } -> std::convertible_to<Tensor>;
};

template <typename D, typename Sample>
  requires InputDifferentiable<D, Sample>
double r1_penalty(const D& d, std::span<const Sample> batch, double gamma_r1) {
  if (gamma_r1 < 0.0) throw ArgumentError("gamma_r1 must be >= 0");
  if (batch.empty()) throw ArgumentError("R1 penalty needs a non-empty batch");
  double acc = 0.0;
  for (const auto& x : batch) {
    const Tensor g = d.input_gradient(x);
    if (!g.all_finite()) throw NumericError("non-finite discriminator input gradient");
    acc += squared_norm(g.data());
  }
  const double r1 = 0.5 * gamma_r1 * acc / static_cast<double>(batch.size());
  if (!std::isfinite(r1)) throw NumericError("non-finite R1 penalty");
  return r1;
}

// Parameter gradient of coeff * ||g||^2 / 2 with g = grad_x D for one sample.
// The trunk is piecewise linear, so g = J^T 1 with J fixed by the activation
// pattern. Differentiating through the fixed masks gives dW_l += dz_l (x) t_l,
// t_l being the forward tangent of e = coeff * g at layer l's input. Biases
// get nothing.
inline void r1_param_gradient(const DiscriminatorTrace& t, const DiscriminatorAdjoints& adj,
                              const DiscriminatorParams& p, double coeff, DiscriminatorParams& grads) {
  Tensor e = adj.d_image;
  for (auto& v : e.values()) v *= coeff;
  nn::accumulate_outer(adj.d_stem_pre, e, grads.stem_w);
  const Tensor empty;
  Tensor t_h = nn::leaky_relu_backward(t.stem_pre, nn::pointwise(e, p.stem_w, empty));
  Tensor t_a = t_h;
  for (std::size_t l = 0; l < t.level_pre.size(); ++l) {
    t_a = nn::avgpool2(t_a);
    const Tensor t_in = nn::concat_channels(nn::avgpool2(t_h), t_a);
    nn::accumulate_outer(adj.d_level_pre[l], t_in, grads.level_w[l]);
    t_h = nn::leaky_relu_backward(t.level_pre[l], nn::pointwise(t_in, p.level_w[l], empty));
  }
  const Tensor t_fin = nn::concat_channels(t_h, Tensor({p.config.feature_dim, 4, 4}));
  nn::accumulate_outer(adj.d_final_pre, t_fin, grads.final_w);
  const Tensor t_g = nn::leaky_relu_backward(t.final_pre, nn::pointwise(t_fin, p.final_w, empty));
  for (std::size_t i = 0; i < t_g.size(); ++i) grads.head_w[i] += t_g[i];
}

// R1 over a batch; accumulates its parameter gradient into grads when given.
inline double r1_with_gradient(const DiscriminatorParams& p, std::span<const ConditionalSample> batch, double gamma_r1,
                               DiscriminatorParams* grads) {
  if (gamma_r1 < 0.0) throw ArgumentError("gamma_r1 must be >= 0");
  if (batch.empty()) throw ArgumentError("R1 penalty needs a non-empty batch");
  const double coeff = gamma_r1 / static_cast<double>(batch.size());
  double acc = 0.0;
  for (const auto& x : batch) {
    const auto t = discriminator_forward_traced(x.image, x.s, p);
    const auto adj = discriminator_backward(t, p, 1.0, nullptr);
    if (!adj.d_image.all_finite()) throw NumericError("non-finite discriminator input gradient");
    acc += squared_norm(adj.d_image.data());
    if (grads && coeff != 0.0) r1_param_gradient(t, adj, p, coeff, *grads);
  }
  const double r1 = 0.5 * gamma_r1 * acc / static_cast<double>(batch.size());
  if (!std::isfinite(r1)) throw NumericError("non-finite R1 penalty");
  return r1;
}

// Central differences. Returns max |ga - gfd| / max(1, |ga|, |gfd|).
inline double gradient_check(const std::function<double(const Tensor&)>& f, const Tensor& x, const Tensor& analytic,
                             double h = 1e-5) {
  if (analytic.shape() != x.shape()) throw ShapeError("analytic gradient shape does not match x");
  if (!(h > 0.0)) throw ArgumentError("finite-difference step must be positive");
  Tensor probe = x;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("non-finite objective during gradient check at index " + std::to_string(i));
    }
    const double fd = (up - down) / (2.0 * h);
    const double ga = analytic[i];
    worst = std::max(worst, std::abs(ga - fd) / std::max({1.0, std::abs(ga), std::abs(fd)}));
  }
  return worst;
}

}  // namespace membank
