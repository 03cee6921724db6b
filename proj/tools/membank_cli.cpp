// membank: build, query and verify memory banks; check gradients; train the
// toy GAN.
//
// Exit codes: 0 success, 1 usage, 2 data/validation, 3 numeric failure.
// Every failure prints exactly one line to stderr: "error[<kind>]: <message>".

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "membank/bank.hpp"
#include "membank/retrieval.hpp"
#include "membank/trainer.hpp"

namespace fs = std::filesystem;
using namespace membank;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

int fail(const char* kind, const std::string& msg, int code) {
  std::string line = msg;
  for (auto& c : line)
    if (c == '\n') c = ' ';
  std::cerr << "error[" << kind << "]: " << line << '\n';
  return code;
}

BankDims parse_dims(const std::string& text) {
  std::vector<std::size_t> v;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      const long long x = std::stoll(part, &used);
      if (used != part.size() || x < 1) throw std::invalid_argument(part);
      v.push_back(static_cast<std::size_t>(x));
    } catch (const std::exception&) {
      throw ArgumentError("--dims expects four positive integers D,N,H,W, got '" + text + "'");
    }
  }
  if (v.size() != 4) throw ArgumentError("--dims expects four positive integers D,N,H,W, got '" + text + "'");
  return BankDims{v[0], v[1], v[2], v[3]};
}

std::string hex32(std::uint32_t x) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08x", x);
  return buf;
}

std::string fixed9(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9f", x);
  return buf;
}

// ---------------------------------------------------------------------------

struct BuildArgs {
  std::string manifest, out, dims = "32,16,4,4";
  std::uint64_t seed = 7;
};

int cmd_build(const BuildArgs& a) {
  if (!fs::exists(a.manifest)) return fail("usage", "manifest not found: " + a.manifest, kUsage);
  const BuildConfig cfg{parse_dims(a.dims), a.seed};
  const auto bank = build_bank_from_manifest(a.manifest, cfg);
  save_bank(bank, a.out);
  std::cout << "entries=" << bank.size() << " crc32=" << hex32(bank_checksum(bank)) << '\n';
  return kOk;
}

struct QueryArgs {
  std::string bank, text, algo = std::string(algorithm_tag(kDefaultAlgorithm));
  std::size_t topk = 1;
  bool json = false;
};

int cmd_query(const QueryArgs& a) {
  const Algorithm alg = parse_algorithm(a.algo);
  const auto bank = load_bank(a.bank);
  const auto result = retrieve(a.text, bank, alg, a.topk);
  auto caption_of = [&](const Hit& h) -> const std::string& {
    return bank.entry(h.id).captions[h.caption.value_or(0)].text;
  };
  if (a.json) {
    nlohmann::json j;
    j["algorithm"] = a.algo;
    j["query"] = a.text;
    j["encoder_version"] = bank.encoder_version();
    j["results"] = nlohmann::json::array();
    for (std::size_t r = 0; r < result.hits.size(); ++r) {
      const auto& h = result.hits[r];
      j["results"].push_back({{"rank", r + 1},
                              {"id", h.id},
                              {"score", h.score},
                              {"caption_index", h.caption.value_or(0)},
                              {"caption", caption_of(h)}});
    }
    std::cout << j.dump(2) << '\n';
    return kOk;
  }
  for (std::size_t r = 0; r < result.hits.size(); ++r) {
    const auto& h = result.hits[r];
    std::cout << r + 1 << '\t' << h.id << '\t' << fixed9(h.score) << '\t' << caption_of(h) << '\n';
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct Check {
  std::string name;
  bool ok = true;
  std::string detail;
};

std::vector<Check> verify_bank(const MemoryBank& bank) {
  std::vector<Check> checks;
  checks.push_back({"checksum", true, hex32(bank_checksum(bank))});
  const auto& d = bank.dims();
  const auto ev = EncoderVersion::parse(bank.encoder_version());
  checks.push_back({"encoder-version", ev.has_value(), bank.encoder_version()});

  Check ids{"entry-ids", true, ""}, shapes{"shapes", true, ""}, finite{"finite", true, ""};
  Check global{"global-feature", true, ""}, padding{"word-padding", true, ""}, text{"text-features", true, ""};
  auto mark = [](Check& c, const std::string& why) {
    if (c.ok) c.detail = why;
    c.ok = false;
  };
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const auto& e = bank.entry(i);
    const std::string at = "entry " + std::to_string(i);
    if (e.id != i) mark(ids, at + " has id " + std::to_string(e.id));
    if (e.v.v.shape() != Shape{d.d, d.h, d.w} || e.v_g.v_g.shape() != Shape{d.d}) mark(shapes, at);
    if (!e.v.v.all_finite() || !e.v_g.v_g.all_finite()) mark(finite, at);
    if (e.v_g.v_g != spatial_mean(e.v.v)) mark(global, at + " v_G differs from the spatial mean of v");
    for (std::size_t c = 0; c < e.captions.size(); ++c) {
      const auto& cap = e.captions[c];
      const std::string where = at + " caption " + std::to_string(c);
      if (cap.s.s.shape() != Shape{d.d} || cap.w.w.shape() != Shape{d.n, d.d}) mark(shapes, where);
      if (!cap.s.s.all_finite() || !cap.w.w.all_finite()) mark(finite, where);
      try {
        validate_word_embeddings(cap.w);
      } catch (const Error& ex) {
        mark(padding, where + ": " + ex.what());
      }
      if (ev) {
        const auto enc = toy_text_encoder(cap.text, d.d, d.n, ev->text_seed);
        if (enc.s != cap.s || enc.w.w != cap.w.w || enc.w.pad_mask != cap.w.pad_mask) {
          mark(text, where + " does not re-encode to its stored features");
        }
      }
    }
  }
  for (auto* c : {&ids, &shapes, &finite, &global, &padding, &text}) checks.push_back(*c);

  // Oracle spot checks: every entry's first caption retrieves a score-1 hit
  // under ss, and each algorithm's ranking is ordered and bounded.
  Check self{"oracle-self-retrieval", true, ""}, ranking{"oracle-ranking", true, ""};
  if (ev) {
    const std::size_t probes = std::min<std::size_t>(bank.size(), 8);
    for (std::size_t i = 0; i < probes; ++i) {
      const auto& cap = bank.entry(i).captions[0];
      const QueryFeatures q{cap.s, cap.w, ev->text_part()};
      const auto top = match(q, bank, Algorithm::sentence_sentence, 1).hits.at(0);
      if (top.score < 1.0 - 1e-9) mark(self, "entry " + std::to_string(i) + " top score " + fixed9(top.score));
      for (const auto& [alg, tag] : kAlgorithmTags) {
        const auto hits = match(q, bank, alg, bank.size()).hits;
        if (hits.size() != bank.size()) mark(ranking, std::string(tag) + " returned a short ranking");
        for (std::size_t r = 0; r < hits.size(); ++r) {
          if (hits[r].score > 1.0 + 1e-12 || hits[r].score < -1.0 - 1e-12) mark(ranking, std::string(tag) + " score out of range");
          if (r > 0 && hits[r].score > hits[r - 1].score) mark(ranking, std::string(tag) + " ranking not descending");
        }
      }
    }
  } else {
    mark(self, "unknown encoder");
    mark(ranking, "unknown encoder");
  }
  checks.push_back(self);
  checks.push_back(ranking);
  return checks;
}

int cmd_verify(const std::string& path) {
  const auto bank = load_bank(path);
  bool all = true;
  for (const auto& c : verify_bank(bank)) {
    all = all && c.ok;
    std::cout << (c.ok ? "PASS " : "FAIL ") << c.name;
    if (!c.detail.empty()) std::cout << " (" << c.detail << ')';
    std::cout << '\n';
  }
  std::cout << "entries=" << bank.size() << " status=" << (all ? "ok" : "failed") << '\n';
  return all ? kOk : fail("data", "bank verification failed", kData);
}

int cmd_gradcheck(std::uint64_t seed, std::size_t points) {
  if (points < 1) throw ArgumentError("--points must be >= 1");
  double worst = 0.0;
  for (const auto& r : gradient_suite(seed, points)) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-24s max_rel_err=%.3e", r.group.c_str(), r.max_rel_err);
    std::cout << buf << '\n';
    worst = std::max(worst, r.max_rel_err);
  }
  char buf[128];
  std::snprintf(buf, sizeof buf, "worst=%.3e tolerance=%.0e", worst, kGradientTolerance);
  std::cout << buf << '\n';
  if (!(worst < kGradientTolerance)) return fail("numeric", "gradient check exceeded tolerance", kNumeric);
  return kOk;
}

int cmd_train(const TrainerConfig& cfg, const std::string& out) {
  const auto res = train_toy(cfg, out);
  std::cout << format_metrics(res.metrics.back()) << '\n';
  std::cout << "wrote " << (fs::path(out) / "metrics.log").string() << " (" << res.metrics.size() << " records)\n";
  return kOk;
}

// Small image manifest for trying the tool without any data.
int cmd_make_demo(const std::string& out, std::size_t count, std::uint64_t seed) {
  if (count < 1) throw ArgumentError("--count must be >= 1");
  fs::create_directories(out);
  DatasetConfig dc;
  dc.size = count;
  dc.seed = seed;
  dc.feature_dim = 1;  // features are recomputed by `build`
  dc.max_words = 1;
  const auto ds = make_dataset(dc);
  std::ofstream manifest(fs::path(out) / "manifest.txt");
  manifest << "# kind path | caption | caption ...\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::string name = "shape_" + std::to_string(i) + ".ppm";
    write_ppm(fs::path(out) / name, ds.items[i].image, -1.0, 1.0);
    manifest << "image " << name << " | " << ds.items[i].captions[0] << " | " << ds.items[i].captions[1] << '\n';
  }
  std::cout << "wrote " << (fs::path(out) / "manifest.txt").string() << " (" << ds.size() << " records)\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Memory-bank retrieval engine and toy text-to-image GAN"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "membank 1.0 (bank format 1)");

  BuildArgs build;
  auto* b = app.add_subcommand("build", "Build an MBNK bank file from a manifest");
  b->add_option("--manifest", build.manifest, "Manifest listing feature blobs or PPM images with captions")->required();
  b->add_option("--out", build.out, "Output bank path")->required();
  b->add_option("--dims", build.dims, "D,N,H,W: feature dim, max words, feature-map height and width")
      ->capture_default_str();
  b->add_option("--seed", build.seed, "Text-encoder seed recorded in the bank")->capture_default_str();

  QueryArgs query;
  auto* q = app.add_subcommand("query", "Retrieve the best-matching entries for a text");
  q->add_option("--bank", query.bank, "Bank file")->required();
  q->add_option("--text", query.text, "Query sentence")->required();
  q->add_option("--algo", query.algo, "Matching algorithm: ss, si, ww, ww-rw, wi, wi-rw")->capture_default_str();
  q->add_option("--topk", query.topk, "Number of results")->capture_default_str()->check(CLI::PositiveNumber);
  q->add_flag("--json", query.json, "Print a JSON record instead of tab-separated lines");

  std::string verify_path;
  auto* v = app.add_subcommand("verify", "Check bank invariants and run oracle spot checks");
  v->add_option("--bank", verify_path, "Bank file")->required();

  std::uint64_t grad_seed = 7;
  std::size_t grad_points = 20;
  auto* g = app.add_subcommand("gradcheck", "Compare every training gradient with central differences");
  g->add_option("--seed", grad_seed, "Seed for random parameters and inputs")->capture_default_str();
  g->add_option("--points", grad_points, "Random points per parameter group")->capture_default_str();

  TrainerConfig tc;
  std::string train_out;
  auto* t = app.add_subcommand("train-toy", "Train the toy GAN on synthetic shapes");
  t->add_option("--out", train_out, "Output directory")->required();
  t->add_option("--steps", tc.steps, "Training steps")->capture_default_str();
  t->add_option("--batch", tc.batch_size, "Batch size")->capture_default_str();
  t->add_option("--seed", tc.seed, "Master seed")->capture_default_str();
  t->add_option("--stages", tc.stages, "Generator stages (output 8 * 2^(stages-1) pixels)")->capture_default_str();
  t->add_option("--lr", tc.learning_rate, "Adam learning rate")->capture_default_str();
  t->add_option("--gamma-r1", tc.gamma_r1, "R1 penalty coefficient")->capture_default_str();
  t->add_option("--lambda-loss", tc.lambda_loss, "Weight of the text-image matching term (term is off)")
      ->capture_default_str();
  t->add_option("--dataset-size", tc.dataset_size, "Synthetic images")->capture_default_str();

  std::string demo_out;
  std::size_t demo_count = 6;
  std::uint64_t demo_seed = 7;
  auto* m = app.add_subcommand("make-demo", "Write a small image manifest for trying build and query");
  m->add_option("--out", demo_out, "Output directory")->required();
  m->add_option("--count", demo_count, "Number of images")->capture_default_str();
  m->add_option("--seed", demo_seed, "Seed for the synthetic shapes")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("usage", e.what(), kUsage);
  }

  try {
    if (b->parsed()) return cmd_build(build);
    if (q->parsed()) return cmd_query(query);
    if (v->parsed()) return cmd_verify(verify_path);
    if (g->parsed()) return cmd_gradcheck(grad_seed, grad_points);
    if (t->parsed()) return cmd_train(tc, train_out);
    if (m->parsed()) return cmd_make_demo(demo_out, demo_count, demo_seed);
  } catch (const ArgumentError& e) {
    return fail("usage", e.what(), kUsage);
  } catch (const NumericError& e) {
    return fail("numeric", e.what(), kNumeric);
  } catch (const Error& e) {
    return fail("data", e.what(), kData);
  } catch (const std::exception& e) {
    return fail("data", e.what(), kData);
  }
  return kUsage;
}
