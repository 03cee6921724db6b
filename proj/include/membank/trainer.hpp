#pragma once

// Desk-scale adversarial training: a three-stage toy generator against one toy
// discriminator per stage, alternating minmax updates with R1 on real images.
// Training feeds the paired ground-truth image features v; retrieval is an
// inference-time concern and is deliberately not reachable from here.

#include <array>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "membank/discriminator.hpp"
#include "membank/error.hpp"
#include "membank/features.hpp"
#include "membank/generator.hpp"
#include "membank/ppm.hpp"
#include "membank/rng.hpp"
#include "membank/tensor.hpp"

namespace membank {

// ---------------------------------------------------------------------------
// Losses

// log(1 + e^x) without overflow.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct MinmaxLosses {
  double discriminator = 0.0;  // L_D
  double generator = 0.0;      // L_G, non-saturating
};

// L_D = -mean log s(real) - mean log(1 - s(fake)),  L_G = -mean log s(fake).
inline MinmaxLosses minmax_losses(std::span<const double> real_logits, std::span<const double> fake_logits) {
  if (real_logits.empty() || fake_logits.empty()) throw ArgumentError("minmax losses need non-empty logit batches");
  double real = 0.0, fake = 0.0, gen = 0.0;
  for (double r : real_logits) real += softplus(-r);
  for (double f : fake_logits) {
    fake += softplus(f);
    gen += softplus(-f);
  }
  const double nr = static_cast<double>(real_logits.size()), nf = static_cast<double>(fake_logits.size());
  return {real / nr + fake / nf, gen / nf};
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 0.0002;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const noexcept { return cfg_; }
  std::size_t steps() const noexcept { return t_; }

  // Standard bias-corrected update over every tensor of a parameter record.
  template <typename P>
  void step(P& params, const P& grads) {
    std::vector<const Tensor*> g;
    for_each_param(grads, [&](const std::string&, const Tensor& t) { g.push_back(&t); });
    if (m_.empty()) {
      for (const Tensor* t : g) {
        m_.emplace_back(t->shape());
        v_.emplace_back(t->shape());
      }
    }
    if (m_.size() != g.size()) throw ShapeError("Adam state does not match parameter record");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::size_t k = 0;
    for_each_param(params, [&](const std::string&, Tensor& p) {
      Tensor& m = m_[k];
      Tensor& v = v_[k];
      const Tensor& gk = *g[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gk[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gk[i] * gk[i];
        p[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      }
      ++k;
    });
  }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

template <typename P>
double grad_sq_norm(const P& grads) {
  double acc = 0.0;
  for_each_param(grads, [&](const std::string&, const Tensor& t) { acc += squared_norm(t.data()); });
  return acc;
}

template <typename P>
bool all_finite(const P& params) {
  bool ok = true;
  for_each_param(params, [&](const std::string&, const Tensor& t) { ok = ok && t.all_finite(); });
  return ok;
}

// FNV-1a over the raw bytes of every parameter, for alternation checks.
template <typename P>
std::uint64_t param_hash(const P& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for_each_param(params, [&](const std::string&, const Tensor& t) {
    for (double v : t.values()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xffU;
        h *= 0x100000001b3ULL;
      }
    }
  });
  return h;
}

// ---------------------------------------------------------------------------
// Synthetic shapes-and-captions dataset

inline constexpr std::array<std::string_view, 3> kShapeNames{"square", "circle", "triangle"};
inline constexpr std::array<std::string_view, 6> kColorNames{"red", "green", "blue", "yellow", "white", "purple"};
inline constexpr std::array<std::array<double, 3>, 6> kColorValues{{
    {0.9, -0.8, -0.8}, {-0.8, 0.8, -0.8}, {-0.8, -0.7, 0.9}, {0.9, 0.85, -0.8}, {0.95, 0.95, 0.95}, {0.5, -0.8, 0.7},
}};
inline constexpr std::array<std::string_view, 5> kPlaceNames{"left", "right", "top", "bottom", "center"};
inline constexpr std::array<std::string_view, 2> kSizeNames{"small", "large"};

struct ShapeSpec {
  std::size_t shape = 0, color = 0, place = 0, size = 0;
};

struct SyntheticItem {
  ShapeSpec spec;
  Tensor image;                       // [3, 32, 32] in [-1, 1]
  std::array<std::string, 2> captions;
  std::array<EncodedText, 2> text;
  ImageFeatureMap v;                  // paired ground-truth features
};

struct DatasetConfig {
  std::size_t size = 512;
  std::size_t resolution = 32;
  std::size_t feature_dim = 16;
  std::size_t max_words = 8;
  std::size_t feature_grid = 4;
  std::uint64_t seed = 7;
};

struct SyntheticDataset {
  DatasetConfig config;
  std::vector<SyntheticItem> items;

  std::size_t size() const { return items.size(); }
};

inline Tensor render_shape(const ShapeSpec& spec, std::size_t r) {
  const double res = static_cast<double>(r);
  const std::array<std::array<double, 2>, 5> centers{{{0.25, 0.5}, {0.75, 0.5}, {0.5, 0.25}, {0.5, 0.75}, {0.5, 0.5}}};
  const double cx = centers[spec.place][0] * res, cy = centers[spec.place][1] * res;
  const double radius = (spec.size == 0 ? 0.14 : 0.22) * res;
  const auto& rgb = kColorValues[spec.color];
  Tensor img({3, r, r}, -0.8);
  for (std::size_t y = 0; y < r; ++y) {
    for (std::size_t x = 0; x < r; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
      bool inside = false;
      switch (spec.shape) {
        case 0: inside = std::abs(dx) <= radius && std::abs(dy) <= radius; break;
        case 1: inside = dx * dx + dy * dy <= radius * radius; break;
        default: inside = dy <= radius && dy >= -radius && std::abs(dx) <= (dy + radius) / 2.0; break;
      }
      if (inside)
        for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = rgb[c];
    }
  }
  return img;
}

inline std::array<std::string, 2> describe(const ShapeSpec& spec) {
  const std::string shape(kShapeNames[spec.shape]), color(kColorNames[spec.color]);
  const std::string size(kSizeNames[spec.size]);
  const std::string where = spec.place == 4 ? "in the center" : "on the " + std::string(kPlaceNames[spec.place]);
  const std::string at = spec.place == 4 ? "at the center" : "at the " + std::string(kPlaceNames[spec.place]);
  return {"a " + color + " " + shape + " " + where, "a " + size + " " + color + " " + shape + " " + at};
}

inline SyntheticDataset make_dataset(const DatasetConfig& cfg) {
  if (cfg.size == 0) throw ArgumentError("dataset size must be >= 1");
  SyntheticDataset ds{cfg, {}};
  ds.items.reserve(cfg.size);
  const auto stream = CounterStream::keyed(cfg.seed, "synthetic-dataset");
  for (std::size_t i = 0; i < cfg.size; ++i) {
    SeqRng rng(stream.child(i));
    SyntheticItem item;
    item.spec = ShapeSpec{rng.below(kShapeNames.size()), rng.below(kColorNames.size()), rng.below(kPlaceNames.size()),
                          rng.below(kSizeNames.size())};
    item.image = render_shape(item.spec, cfg.resolution);
    item.captions = describe(item.spec);
    for (std::size_t c = 0; c < 2; ++c) {
      item.text[c] = toy_text_encoder(item.captions[c], cfg.feature_dim, cfg.max_words, cfg.seed);
    }
    item.v = toy_image_encoder(item.image, cfg.feature_dim, cfg.feature_grid, cfg.feature_grid);
    ds.items.push_back(std::move(item));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Configuration and state

struct TrainerConfig {
  std::size_t stages = 3;
  double learning_rate = 0.0002;
  double lambda_loss = 5.0;          // weight of the text-image matching term
  bool matching_term = false;        // that term is not implemented; see README
  double gamma_r1 = 1.0;
  std::size_t steps = 500;
  std::size_t batch_size = 16;
  std::uint64_t seed = 7;
  double beta1 = 0.5;
  double beta2 = 0.999;
  std::size_t feature_dim = 16;
  std::size_t max_words = 8;
  std::size_t noise_dim = 16;
  std::size_t generator_hidden = 8;
  std::size_t discriminator_channels = 8;
  std::size_t dataset_size = 512;

  std::size_t resolution() const { return GeneratorConfig::kBaseResolution << stages; }

  void validate() const {
    if (stages < 1) throw ArgumentError("stages must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ArgumentError("learning rate must be >= 0");
    if (!(gamma_r1 >= 0.0) || !std::isfinite(gamma_r1)) throw ArgumentError("gamma_r1 must be >= 0");
    if (!(lambda_loss >= 0.0)) throw ArgumentError("lambda_loss must be >= 0");
    if (matching_term) throw ArgumentError("the text-image matching term is not implemented");
    if (steps < 1 || batch_size < 1 || dataset_size < 1) throw ArgumentError("steps, batch and dataset size must be >= 1");
    if (feature_dim < 1 || max_words < 1 || noise_dim < 1 || generator_hidden < 1 || discriminator_channels < 1) {
      throw ArgumentError("model widths must be >= 1");
    }
  }

  GeneratorConfig generator() const {
    return GeneratorConfig{stages, noise_dim, feature_dim, generator_hidden, 3};
  }

  DiscriminatorConfig discriminator(std::size_t stage) const {
    return DiscriminatorConfig{GeneratorConfig::kBaseResolution << (stage + 1), discriminator_channels, feature_dim};
  }

  DatasetConfig dataset() const {
    return DatasetConfig{dataset_size, resolution(), feature_dim, max_words, 4, seed};
  }

  AdamConfig adam() const { return AdamConfig{learning_rate, beta1, beta2, 1e-8}; }
};

struct TrainerState {
  TrainerConfig config;
  GeneratorParams generator;
  std::vector<DiscriminatorParams> discriminators;  // one per stage, 8 / 16 / 32
  Adam generator_opt;
  std::vector<Adam> discriminator_opt;
  std::size_t step = 0;  // completed steps
};

inline TrainerState init_trainer(const TrainerConfig& cfg) {
  cfg.validate();
  TrainerState st;
  st.config = cfg;
  st.generator = init_generator(cfg.generator(), cfg.seed);
  st.generator_opt = Adam(cfg.adam());
  for (std::size_t k = 0; k < cfg.stages; ++k) {
    st.discriminators.push_back(init_discriminator(cfg.discriminator(k), mix64(cfg.seed + 1 + k)));
    st.discriminator_opt.emplace_back(cfg.adam());
  }
  return st;
}

// ---------------------------------------------------------------------------
// Batches

struct TrainBatch {
  std::size_t step = 0;              // 0-based step the batch belongs to
  std::vector<std::size_t> items;
  std::vector<std::size_t> captions;
  std::vector<Tensor> z;
  std::vector<std::vector<ConditionalSample>> real;  // [stage][i], pooled to the stage resolution
  std::vector<const ImageFeatureMap*> v;             // paired ground truth, never retrieved
};

inline const SentenceFeature& batch_sentence(const SyntheticDataset& ds, const TrainBatch& b, std::size_t i) {
  return ds.items[b.items[i]].text[b.captions[i]].s;
}

inline TrainBatch make_batch(const SyntheticDataset& ds, const TrainerConfig& cfg, std::size_t step) {
  TrainBatch b;
  b.step = step;
  SeqRng pick(CounterStream::keyed(cfg.seed, "batch").child(step));
  const auto noise = CounterStream::keyed(cfg.seed, "noise").child(step);
  b.real.resize(cfg.stages);
  for (std::size_t i = 0; i < cfg.batch_size; ++i) {
    const std::size_t item = pick.below(ds.size());
    const std::size_t cap = pick.below(2);
    b.items.push_back(item);
    b.captions.push_back(cap);
    Tensor z({cfg.noise_dim});
    for (std::size_t j = 0; j < cfg.noise_dim; ++j) z[j] = noise.normal(i * cfg.noise_dim + j);
    b.z.push_back(std::move(z));
    b.v.push_back(&ds.items[item].v);
    Tensor img = ds.items[item].image;
    for (std::size_t k = cfg.stages; k-- > 0;) {
      b.real[k].push_back(ConditionalSample{img, ds.items[item].text[cap].s});
      if (k > 0) img = nn::avgpool2(img);
    }
  }
  return b;
}

inline std::vector<GeneratorTrace> generate_fakes(const TrainerState& st, const SyntheticDataset& ds, const TrainBatch& b) {
  std::vector<GeneratorTrace> out;
  out.reserve(b.items.size());
  for (std::size_t i = 0; i < b.items.size(); ++i) {
    out.push_back(generator_forward_traced(b.z[i], batch_sentence(ds, b, i), *b.v[i], st.generator));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Objectives with analytic gradients

struct DiscriminatorObjective {
  double loss = 0.0;  // L_D
  double r1 = 0.0;
};

// L_D + R1 for one stage's discriminator; gradients accumulate into grads.
inline DiscriminatorObjective discriminator_objective(const DiscriminatorParams& p,
                                                      std::span<const ConditionalSample> real,
                                                      std::span<const ConditionalSample> fake, double gamma_r1,
                                                      DiscriminatorParams* grads) {
  std::vector<DiscriminatorTrace> rt, ft;
  std::vector<double> rl, fl;
  for (const auto& x : real) {
    rt.push_back(discriminator_forward_traced(x.image, x.s, p));
    rl.push_back(rt.back().logit);
  }
  for (const auto& x : fake) {
    ft.push_back(discriminator_forward_traced(x.image, x.s, p));
    fl.push_back(ft.back().logit);
  }
  DiscriminatorObjective out;
  out.loss = minmax_losses(rl, fl).discriminator;
  if (grads) {
    const double nr = static_cast<double>(real.size()), nf = static_cast<double>(fake.size());
    for (std::size_t i = 0; i < rt.size(); ++i) discriminator_backward(rt[i], p, -sigmoid(-rl[i]) / nr, grads);
    for (std::size_t i = 0; i < ft.size(); ++i) discriminator_backward(ft[i], p, sigmoid(fl[i]) / nf, grads);
  }
  out.r1 = r1_with_gradient(p, real, gamma_r1, grads);
  return out;
}

struct GeneratorInput {
  const Tensor* z;
  const SentenceFeature* s;
  const ImageFeatureMap* v;
};

// Non-saturating L_G summed over stages, each stage scored by its own
// discriminator. traces may be supplied to skip the generator forward.
inline double generator_objective(const GeneratorParams& g, const std::vector<DiscriminatorParams>& discs,
                                  std::span<const GeneratorInput> inputs, GeneratorParams* grads,
                                  const std::vector<GeneratorTrace>* traces = nullptr) {
  const std::size_t n = inputs.size(), stages = g.config.stages;
  std::vector<GeneratorTrace> own;
  if (!traces) {
    for (const auto& in : inputs) own.push_back(generator_forward_traced(*in.z, *in.s, *in.v, g));
    traces = &own;
  }
  double total = 0.0;
  std::vector<std::vector<Tensor>> image_grads(n, std::vector<Tensor>(stages));
  for (std::size_t k = 0; k < stages; ++k) {
    std::vector<DiscriminatorTrace> ft;
    std::vector<double> fl;
    for (std::size_t i = 0; i < n; ++i) {
      ft.push_back(discriminator_forward_traced((*traces)[i].stages[k].image, *inputs[i].s, discs[k]));
      fl.push_back(ft.back().logit);
    }
    total += minmax_losses(fl, fl).generator;
    if (grads) {
      for (std::size_t i = 0; i < n; ++i) {
        image_grads[i][k] = discriminator_backward(ft[i], discs[k], -sigmoid(-fl[i]) / static_cast<double>(n), nullptr).d_image;
      }
    }
  }
  if (grads)
    for (std::size_t i = 0; i < n; ++i) generator_backward((*traces)[i], g, image_grads[i], *grads);
  return total;
}

inline std::vector<GeneratorInput> generator_inputs(const SyntheticDataset& ds, const TrainBatch& b) {
  std::vector<GeneratorInput> in;
  for (std::size_t i = 0; i < b.items.size(); ++i) in.push_back({&b.z[i], &batch_sentence(ds, b, i), b.v[i]});
  return in;
}

// ---------------------------------------------------------------------------
// Steps

struct StepMetrics {
  std::size_t step = 0;  // 1-based
  double loss_d = 0.0;
  double loss_g = 0.0;
  double r1 = 0.0;
  double grad_norm_d = 0.0;
  double grad_norm_g = 0.0;

  friend bool operator==(const StepMetrics&, const StepMetrics&) = default;
};

inline std::string format_metrics(const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "step=%zu loss_d=%.17g loss_g=%.17g r1=%.17g grad_norm_d=%.17g grad_norm_g=%.17g",
                m.step, m.loss_d, m.loss_g, m.r1, m.grad_norm_d, m.grad_norm_g);
  return buf;
}

struct DiscriminatorHalf {
  double loss = 0.0;
  double r1 = 0.0;
  double grad_norm = 0.0;
};

// Updates every stage discriminator once; the generator is not touched.
inline DiscriminatorHalf discriminator_half_step(TrainerState& st, const SyntheticDataset& ds, const TrainBatch& b,
                                                 const std::vector<GeneratorTrace>& fakes) {
  DiscriminatorHalf out;
  double sq = 0.0;
  for (std::size_t k = 0; k < st.config.stages; ++k) {
    std::vector<ConditionalSample> fake;
    for (std::size_t i = 0; i < fakes.size(); ++i) fake.push_back({fakes[i].stages[k].image, batch_sentence(ds, b, i)});
    DiscriminatorParams grads = zeros_like(st.discriminators[k]);
    const auto obj = discriminator_objective(st.discriminators[k], b.real[k], fake, st.config.gamma_r1, &grads);
    out.loss += obj.loss;
    out.r1 += obj.r1;
    sq += grad_sq_norm(grads);
    if (!all_finite(grads)) throw DivergenceError(b.step + 1, "non-finite discriminator gradient");
    st.discriminator_opt[k].step(st.discriminators[k], grads);
  }
  out.grad_norm = std::sqrt(sq);
  return out;
}

struct GeneratorHalf {
  double loss = 0.0;
  double grad_norm = 0.0;
};

// Updates the generator once against the current discriminators, which are
// not touched.
inline GeneratorHalf generator_half_step(TrainerState& st, const SyntheticDataset& ds, const TrainBatch& b,
                                         const std::vector<GeneratorTrace>& fakes) {
  const auto inputs = generator_inputs(ds, b);
  GeneratorParams grads = zeros_like(st.generator);
  GeneratorHalf out;
  out.loss = generator_objective(st.generator, st.discriminators, inputs, &grads, &fakes);
  out.grad_norm = std::sqrt(grad_sq_norm(grads));
  if (!all_finite(grads)) throw DivergenceError(b.step + 1, "non-finite generator gradient");
  st.generator_opt.step(st.generator, grads);
  return out;
}

inline StepMetrics train_step(TrainerState& st, const SyntheticDataset& ds, const TrainBatch& b) {
  // The generator is unchanged by the discriminator update, so one forward
  // serves both halves.
  const auto fakes = generate_fakes(st, ds, b);
  const auto d = discriminator_half_step(st, ds, b, fakes);
  const auto g = generator_half_step(st, ds, b, fakes);
  ++st.step;
  const StepMetrics m{st.step, d.loss, g.loss, d.r1, d.grad_norm, g.grad_norm};
  for (double x : {m.loss_d, m.loss_g, m.r1, m.grad_norm_d, m.grad_norm_g}) {
    if (!std::isfinite(x)) throw DivergenceError(st.step, format_metrics(m));
  }
  return m;
}

inline StepMetrics train_step(TrainerState& st, const SyntheticDataset& ds) {
  return train_step(st, ds, make_batch(ds, st.config, st.step));
}

// ---------------------------------------------------------------------------
// Output files

inline void write_params(std::ostream& os, const TrainerState& st) {
  char buf[64];
  auto dump = [&](const std::string& prefix, const auto& params) {
    for_each_param(params, [&](const std::string& name, const Tensor& t) {
      os << prefix << name << ' ' << shape_str(t.shape());
      for (double v : t.values()) {
        std::snprintf(buf, sizeof buf, " %.17g", v);
        os << buf;
      }
      os << '\n';
    });
  };
  dump("g.", st.generator);
  for (std::size_t k = 0; k < st.discriminators.size(); ++k) dump("d" + std::to_string(k) + ".", st.discriminators[k]);
}

inline void write_config(std::ostream& os, const TrainerConfig& c) {
  os << "stages=" << c.stages << "\nlearning_rate=" << c.learning_rate << "\nlambda_loss=" << c.lambda_loss
     << "\nmatching_term=" << (c.matching_term ? "on" : "off") << "\ngamma_r1=" << c.gamma_r1 << "\nsteps=" << c.steps
     << "\nbatch_size=" << c.batch_size << "\nseed=" << c.seed << "\nbeta1=" << c.beta1 << "\nbeta2=" << c.beta2
     << "\nfeature_dim=" << c.feature_dim << "\nmax_words=" << c.max_words << "\nnoise_dim=" << c.noise_dim
     << "\ngenerator_hidden=" << c.generator_hidden << "\ndiscriminator_channels=" << c.discriminator_channels
     << "\ndataset_size=" << c.dataset_size << '\n';
}

// 4 x 4 grid of final-stage samples for the first 16 dataset items.
inline Tensor sample_grid(const TrainerState& st, const SyntheticDataset& ds, std::size_t cols = 4) {
  const std::size_t r = st.config.resolution(), n = std::min<std::size_t>(cols * cols, ds.size());
  const std::size_t rows = (n + cols - 1) / cols;
  const auto noise = CounterStream::keyed(st.config.seed, "samples");
  Tensor grid({3, rows * r, cols * r}, -1.0);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor z({st.config.noise_dim});
    for (std::size_t j = 0; j < z.size(); ++j) z[j] = noise.normal(i * z.size() + j);
    const Tensor img = generator_forward(z, ds.items[i].text[0].s, ds.items[i].v, st.generator);
    const std::size_t oy = (i / cols) * r, ox = (i % cols) * r;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < r; ++y)
        for (std::size_t x = 0; x < r; ++x) grid.at(c, oy + y, ox + x) = img.at(c, y, x);
  }
  return grid;
}

struct TrainResult {
  TrainerState state;
  std::vector<StepMetrics> metrics;
  std::string log;  // one format_metrics line per step
};

// Runs cfg.steps steps. With a non-empty out_dir, writes metrics.log (flushed
// per step), config.txt, params.txt and samples.ppm; on divergence writes
// divergence.txt with the failing step and rethrows.
inline TrainResult train_toy(const TrainerConfig& cfg, const std::filesystem::path& out_dir = {}) {
  cfg.validate();
  const auto ds = make_dataset(cfg.dataset());
  TrainResult res{init_trainer(cfg), {}, {}};
  std::ofstream log;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream conf(out_dir / "config.txt");
    write_config(conf, cfg);
    log.open(out_dir / "metrics.log", std::ios::binary);
    if (!log) throw Error("cannot write " + (out_dir / "metrics.log").string());
  }
  try {
    for (std::size_t s = 0; s < cfg.steps; ++s) {
      const auto m = train_step(res.state, ds);
      const std::string line = format_metrics(m) + "\n";
      res.log += line;
      res.metrics.push_back(m);
      if (log) log << line << std::flush;
    }
  } catch (const DivergenceError& e) {
    if (!out_dir.empty()) {
      std::ofstream snap(out_dir / "divergence.txt");
      snap << "step=" << e.step() << "\nerror=" << e.what() << '\n';
      if (!res.metrics.empty()) snap << "last_good=" << format_metrics(res.metrics.back()) << '\n';
    }
    throw;
  }
  if (!out_dir.empty()) {
    std::ofstream params(out_dir / "params.txt");
    write_params(params, res.state);
    write_ppm(out_dir / "samples.ppm", sample_grid(res.state, ds), -1.0, 1.0);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Gradient suite: every analytic gradient the trainer uses, against central
// differences, on a small network at `points` seeded random points.

struct GradientGroupResult {
  std::string group;
  double max_rel_err = 0.0;
};

inline constexpr double kGradientTolerance = 1e-4;

inline std::vector<GradientGroupResult> gradient_suite(std::uint64_t seed, std::size_t points = 20) {
  TrainerConfig cfg;
  cfg.stages = 2;
  cfg.feature_dim = 3;
  cfg.noise_dim = 3;
  cfg.generator_hidden = 2;
  cfg.discriminator_channels = 3;
  const std::size_t batch = 2;
  const double gamma = 1.3;

  std::vector<GradientGroupResult> results;
  auto record = [&](const std::string& group, double err) {
    for (auto& r : results) {
      if (r.group == group) {
        r.max_rel_err = std::max(r.max_rel_err, err);
        return;
      }
    }
    results.push_back({group, err});
  };
  // Replace the parameter called `name` in a copy of p with t.
  auto substituted = [](auto p, const std::string& name, const Tensor& t) {
    for_each_param(p, [&](const std::string& n, Tensor& u) {
      if (n == name) u = t;
    });
    return p;
  };
  auto randomize_biases = [](auto& p, std::uint64_t s) {
    SeqRng rng(s, "suite-bias");
    for_each_param(p, [&](const std::string& n, Tensor& t) {
      if (n.ends_with(".b") || n.ends_with("_b"))
        for (auto& v : t.values()) v += 0.2 * rng.symmetric();
    });
  };

  for (std::size_t pt = 0; pt < points; ++pt) {
    const std::uint64_t ps = mix64(seed ^ mix64(pt + 1));
    SeqRng rng(ps, "suite-point");
    auto rand_tensor = [&](Shape shape) {
      Tensor t(std::move(shape));
      for (auto& v : t.values()) v = rng.symmetric();
      return t;
    };
    GeneratorParams g = init_generator(cfg.generator(), ps);
    randomize_biases(g, ps + 1);
    std::vector<DiscriminatorParams> discs;
    for (std::size_t k = 0; k < cfg.stages; ++k) {
      discs.push_back(init_discriminator(cfg.discriminator(k), ps + 10 + k));
      randomize_biases(discs.back(), ps + 20 + k);
    }
    std::vector<Tensor> zs, vs;
    std::vector<SentenceFeature> ss;
    for (std::size_t i = 0; i < batch; ++i) {
      zs.push_back(rand_tensor({cfg.noise_dim}));
      ss.push_back(SentenceFeature{rand_tensor({cfg.feature_dim})});
      vs.push_back(rand_tensor({cfg.feature_dim, 4, 4}));
    }
    std::vector<ImageFeatureMap> vmaps;
    for (auto& v : vs) vmaps.push_back(ImageFeatureMap{v});
    std::vector<GeneratorInput> inputs;
    for (std::size_t i = 0; i < batch; ++i) inputs.push_back({&zs[i], &ss[i], &vmaps[i]});

    for (std::size_t k = 0; k < cfg.stages; ++k) {
      const std::size_t r = cfg.discriminator(k).resolution;
      const std::string dk = "d" + std::to_string(k) + ".";
      std::vector<ConditionalSample> real, fake;
      for (std::size_t i = 0; i < batch; ++i) {
        real.push_back({rand_tensor({3, r, r}), ss[i]});
        fake.push_back({rand_tensor({3, r, r}), ss[i]});
      }

      // Logit with respect to the input image.
      const Tensor gx = ToyDiscriminator{&discs[k]}.input_gradient(real[0]);
      record(dk + "input", gradient_check([&](const Tensor& x) { return discriminator_forward(x, real[0].s, discs[k]); },
                                          real[0].image, gx, 1e-6));

      // L_D + R1 with respect to every discriminator group. R1 jumps at
      // activation kinks, so the step stays small.
      DiscriminatorParams dg = zeros_like(discs[k]);
      discriminator_objective(discs[k], real, fake, gamma, &dg);
      std::vector<Tensor> analytic;
      for_each_param(dg, [&](const std::string&, const Tensor& t) { analytic.push_back(t); });
      std::size_t idx = 0;
      for_each_param(discs[k], [&](const std::string& name, const Tensor& value) {
        auto f = [&](const Tensor& t) {
          const auto o = discriminator_objective(substituted(discs[k], name, t), real, fake, gamma, nullptr);
          return o.loss + o.r1;
        };
        record(dk + name, gradient_check(f, value, analytic[idx++], 1e-7));
      });
    }

    // L_G with respect to every generator group.
    GeneratorParams gg = zeros_like(g);
    generator_objective(g, discs, inputs, &gg);
    std::vector<Tensor> analytic;
    for_each_param(gg, [&](const std::string&, const Tensor& t) { analytic.push_back(t); });
    std::size_t idx = 0;
    for_each_param(g, [&](const std::string& name, const Tensor& value) {
      auto f = [&](const Tensor& t) { return generator_objective(substituted(g, name, t), discs, inputs, nullptr); };
      record("g." + name, gradient_check(f, value, analytic[idx++], 1e-6));
    });
  }
  return results;
}

}  // namespace membank
