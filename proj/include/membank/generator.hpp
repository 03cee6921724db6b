#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "membank/error.hpp"
#include "membank/features.hpp"
#include "membank/layers.hpp"
#include "membank/rng.hpp"
#include "membank/tensor.hpp"

namespace membank {

// Per-location MLP turning v into v_D: leaky ReLU after every layer except
// the last, which is linear.
struct DisentanglerParams {
  std::vector<Tensor> weights;  // [D, D] each
  std::vector<Tensor> biases;   // [D] each
};

// h' = h * (scale_w v + scale_b) + (shift_w v + shift_b), per location.
struct AcmParams {
  Tensor scale_w;  // [C_h, D]
  Tensor scale_b;  // [C_h]
  Tensor shift_w;  // [C_h, D]
  Tensor shift_b;  // [C_h]
};

struct StageParams {
  Tensor hidden_w;  // [C_h, C_h]
  Tensor hidden_b;  // [C_h]
  AcmParams acm;
  Tensor rgb_w;  // [3, C_h]
  Tensor rgb_b;  // [3]
};

struct GeneratorConfig {
  std::size_t stages = 3;
  std::size_t noise_dim = 16;
  std::size_t feature_dim = 16;
  std::size_t hidden = 8;
  std::size_t disentangle_layers = 3;

  static constexpr std::size_t kBaseResolution = 4;

  std::size_t resolution(std::size_t stage) const { return kBaseResolution << (stage + 1); }
  std::size_t output_resolution() const { return resolution(stages - 1); }
};

struct GeneratorParams {
  GeneratorConfig config;
  Tensor input_w;  // [C_h * 16, Z + 2D]
  Tensor input_b;  // [C_h * 16]
  DisentanglerParams disentangler;
  std::vector<StageParams> stages;
};

// Visits every parameter tensor in a fixed order as f(name, tensor).
template <typename P, typename F>
  requires std::is_same_v<std::remove_const_t<P>, DisentanglerParams>
void for_each_param(P& p, F&& f) {
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    f("disentangle." + std::to_string(l) + ".w", p.weights[l]);
    f("disentangle." + std::to_string(l) + ".b", p.biases[l]);
  }
}

template <typename P, typename F>
  requires std::is_same_v<std::remove_const_t<P>, GeneratorParams>
void for_each_param(P& p, F&& f) {
  f(std::string("input.w"), p.input_w);
  f(std::string("input.b"), p.input_b);
  for_each_param(p.disentangler, f);
  for (std::size_t k = 0; k < p.stages.size(); ++k) {
    auto& st = p.stages[k];
    const std::string pre = "stage" + std::to_string(k) + ".";
    f(pre + "hidden.w", st.hidden_w);
    f(pre + "hidden.b", st.hidden_b);
    f(pre + "acm.scale.w", st.acm.scale_w);
    f(pre + "acm.scale.b", st.acm.scale_b);
    f(pre + "acm.shift.w", st.acm.shift_w);
    f(pre + "acm.shift.b", st.acm.shift_b);
    f(pre + "rgb.w", st.rgb_w);
    f(pre + "rgb.b", st.rgb_b);
  }
}

inline GeneratorParams init_generator(const GeneratorConfig& cfg, std::uint64_t seed) {
  if (cfg.stages < 1 || cfg.disentangle_layers < 1) throw ArgumentError("generator needs >= 1 stage and layer");
  SeqRng rng(seed, "generator-init");
  const std::size_t d = cfg.feature_dim, ch = cfg.hidden;
  GeneratorParams p;
  p.config = cfg;
  p.input_w = nn::init_weight(ch * 16, cfg.noise_dim + 2 * d, rng);
  p.input_b = Tensor({ch * 16});
  for (std::size_t l = 0; l < cfg.disentangle_layers; ++l) {
    p.disentangler.weights.push_back(nn::init_weight(d, d, rng));
    p.disentangler.biases.push_back(Tensor({d}));
  }
  for (std::size_t k = 0; k < cfg.stages; ++k) {
    StageParams st;
    st.hidden_w = nn::init_weight(ch, ch, rng);
    st.hidden_b = Tensor({ch});
    st.acm.scale_w = nn::init_weight(ch, d, rng, 0.1);
    st.acm.scale_b = Tensor({ch}, 1.0);
    st.acm.shift_w = nn::init_weight(ch, d, rng, 0.1);
    st.acm.shift_b = Tensor({ch});
    st.rgb_w = nn::init_weight(3, ch, rng);
    st.rgb_b = Tensor({3});
    p.stages.push_back(std::move(st));
  }
  return p;
}

inline GeneratorParams zeros_like(const GeneratorParams& p) {
  GeneratorParams z = p;
  for_each_param(z, [](const std::string&, Tensor& t) { t = nn::zeros_like(t); });
  return z;
}

// ---------------------------------------------------------------------------

// Channel mean over all positions; removes every bit of spatial structure.
inline GlobalImageFeature global_feature(const ImageFeatureMap& v) { return GlobalImageFeature{spatial_mean(v.v)}; }

struct DisentangleTrace {
  std::vector<Tensor> inputs;  // input to each layer
  std::vector<Tensor> pre;     // pre-activation of each layer
  Tensor output;
};

inline DisentangleTrace disentangle_traced(const Tensor& v, const DisentanglerParams& p) {
  if (p.weights.empty() || p.weights.size() != p.biases.size()) throw ShapeError("disentangler needs >= 1 layer");
  DisentangleTrace t;
  Tensor x = v;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    t.inputs.push_back(x);
    Tensor z = nn::pointwise(x, p.weights[l], p.biases[l]);
    t.pre.push_back(z);
    x = l + 1 < p.weights.size() ? nn::leaky_relu(z) : std::move(z);
  }
  t.output = std::move(x);
  return t;
}

inline ImageFeatureMap disentangle(const ImageFeatureMap& v, const DisentanglerParams& p) {
  if (!p.weights.empty() && p.weights.front().dim(1) != v.channels()) {
    throw ShapeError("disentangler expects " + std::to_string(p.weights.front().dim(1)) + " channels, got " +
                     std::to_string(v.channels()));
  }
  return ImageFeatureMap{disentangle_traced(v.v, p).output};
}

// Returns d(v) and accumulates parameter gradients.
inline Tensor disentangle_backward(const DisentangleTrace& t, const DisentanglerParams& p, Tensor dout,
                                   DisentanglerParams& grads) {
  for (std::size_t l = p.weights.size(); l-- > 0;) {
    if (l + 1 < p.weights.size()) dout = nn::leaky_relu_backward(t.pre[l], dout);
    dout = nn::pointwise_backward(t.inputs[l], p.weights[l], dout, grads.weights[l], &grads.biases[l]);
  }
  return dout;
}

struct AcmTrace {
  Tensor v_res;  // v_D resampled to h's grid
  Tensor scale;
  Tensor shift;
};

inline Tensor acm_fuse_traced(const Tensor& h, const Tensor& v_d, const AcmParams& p, AcmTrace* trace) {
  const std::size_t ch = h.dim(0), d = v_d.dim(0);
  for (const Tensor* w : {&p.scale_w, &p.shift_w}) {
    if (w->rank() != 2 || w->dim(0) != ch || w->dim(1) != d) {
      throw ShapeError("ACM weight " + shape_str(w->shape()) + " incompatible with h " + shape_str(h.shape()) +
                       " and v_D " + shape_str(v_d.shape()));
    }
  }
  Tensor v_res = nn::resample_nearest(v_d, h.dim(1), h.dim(2));
  Tensor scale = nn::pointwise(v_res, p.scale_w, p.scale_b);
  Tensor shift = nn::pointwise(v_res, p.shift_w, p.shift_b);
  Tensor out = h;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = h[i] * scale[i] + shift[i];
  if (trace) *trace = AcmTrace{std::move(v_res), std::move(scale), std::move(shift)};
  return out;
}

// Fuses image information into hidden features h ([C_h, H', W']). v_D is
// resampled nearest-neighbour to H' x W' first.
inline Tensor acm_fuse(const Tensor& h, const ImageFeatureMap& v_d, const AcmParams& p) {
  return acm_fuse_traced(h, v_d.v, p, nullptr);
}

// ---------------------------------------------------------------------------

struct StageTrace {
  Tensor up;      // upsampled previous hidden map
  Tensor pre;     // hidden pre-activation
  Tensor act;     // leaky ReLU output
  AcmTrace acm;
  Tensor fused;   // ACM output, carried to the next stage
  Tensor image;   // tanh(rgb)
};

struct GeneratorTrace {
  Tensor input;   // concat(z, s, v_G)
  Tensor input_pre;
  Tensor base;    // [C_h, 4, 4]
  DisentangleTrace dis;
  std::vector<StageTrace> stages;

  const Tensor& image() const { return stages.back().image; }
};

inline GeneratorTrace generator_forward_traced(const Tensor& z, const SentenceFeature& s, const ImageFeatureMap& v,
                                               const GeneratorParams& p) {
  const auto& cfg = p.config;
  if (z.size() != cfg.noise_dim) throw ShapeError("noise has " + std::to_string(z.size()) + " entries, expected " +
                                                  std::to_string(cfg.noise_dim));
  if (s.dim() != cfg.feature_dim || v.channels() != cfg.feature_dim) {
    throw ShapeError("sentence/image features must have D=" + std::to_string(cfg.feature_dim));
  }
  GeneratorTrace t;
  const Tensor v_g = global_feature(v).v_g;
  std::vector<double> in;
  in.insert(in.end(), z.values().begin(), z.values().end());
  in.insert(in.end(), s.s.values().begin(), s.s.values().end());
  in.insert(in.end(), v_g.values().begin(), v_g.values().end());
  const std::size_t n_in = in.size();
  t.input = Tensor({n_in, 1, 1}, std::move(in));
  t.input_pre = nn::pointwise(t.input, p.input_w, p.input_b);
  t.base = nn::leaky_relu(t.input_pre).reshaped({cfg.hidden, 4, 4});
  t.dis = disentangle_traced(v.v, p.disentangler);

  const Tensor* h = &t.base;
  for (std::size_t k = 0; k < cfg.stages; ++k) {
    const auto& sp = p.stages[k];
    StageTrace st;
    st.up = nn::upsample2(*h);
    st.pre = nn::pointwise(st.up, sp.hidden_w, sp.hidden_b);
    st.act = nn::leaky_relu(st.pre);
    st.fused = acm_fuse_traced(st.act, t.dis.output, sp.acm, &st.acm);
    st.image = nn::pointwise(st.fused, sp.rgb_w, sp.rgb_b);
    for (auto& x : st.image.values()) x = std::tanh(x);
    t.stages.push_back(std::move(st));
    h = &t.stages.back().fused;
  }
  return t;
}

// Produces a [3, R, R] image in [-1, 1], R = 8 * 2^(stages - 1).
inline Tensor generator_forward(const Tensor& z, const SentenceFeature& s, const ImageFeatureMap& v,
                                const GeneratorParams& p) {
  return generator_forward_traced(z, s, v, p).image();
}

// Gradients of a loss given d(loss)/d(image) for every stage output. Entries
// of stage_grads may be empty tensors for stages with no loss.
inline void generator_backward(const GeneratorTrace& t, const GeneratorParams& p, const std::vector<Tensor>& stage_grads,
                               GeneratorParams& grads) {
  const auto& cfg = p.config;
  Tensor d_vd(t.dis.output.shape());
  Tensor carry;  // gradient flowing into stage k's fused output from stage k+1
  for (std::size_t k = cfg.stages; k-- > 0;) {
    const auto& st = t.stages[k];
    const auto& sp = p.stages[k];
    auto& gp = grads.stages[k];
    Tensor d_fused = carry.empty() ? Tensor(st.fused.shape()) : std::move(carry);
    if (k < stage_grads.size() && !stage_grads[k].empty()) {
      Tensor d_rgb = stage_grads[k];
      for (std::size_t i = 0; i < d_rgb.size(); ++i) d_rgb[i] *= 1.0 - st.image[i] * st.image[i];
      nn::add_into(d_fused, nn::pointwise_backward(st.fused, sp.rgb_w, d_rgb, gp.rgb_w, &gp.rgb_b));
    }
    Tensor d_act(st.act.shape()), d_scale(st.act.shape());
    for (std::size_t i = 0; i < d_act.size(); ++i) {
      d_act[i] = d_fused[i] * st.acm.scale[i];
      d_scale[i] = d_fused[i] * st.act[i];
    }
    Tensor d_vres = nn::pointwise_backward(st.acm.v_res, sp.acm.scale_w, d_scale, gp.acm.scale_w, &gp.acm.scale_b);
    nn::add_into(d_vres, nn::pointwise_backward(st.acm.v_res, sp.acm.shift_w, d_fused, gp.acm.shift_w, &gp.acm.shift_b));
    nn::add_into(d_vd, nn::resample_nearest_backward(d_vres, d_vd.dim(1), d_vd.dim(2)));

    const Tensor d_pre = nn::leaky_relu_backward(st.pre, d_act);
    const Tensor d_up = nn::pointwise_backward(st.up, sp.hidden_w, d_pre, gp.hidden_w, &gp.hidden_b);
    carry = nn::upsample2_backward(d_up);
  }
  const Tensor d_input_pre = nn::leaky_relu_backward(t.input_pre, carry.reshaped(t.input_pre.shape()));
  nn::pointwise_backward(t.input, p.input_w, d_input_pre, grads.input_w, &grads.input_b);
  disentangle_backward(t.dis, p.disentangler, std::move(d_vd), grads.disentangler);
}

}  // namespace membank
