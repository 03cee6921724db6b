#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "membank/error.hpp"
#include "membank/features.hpp"
#include "membank/ppm.hpp"
#include "membank/tensor.hpp"

namespace membank {

struct BankDims {
  std::size_t d = 32;
  std::size_t n = 16;
  std::size_t h = 4;
  std::size_t w = 4;

  friend bool operator==(const BankDims&, const BankDims&) = default;
};

struct BankMetadata {
  BankDims dims;
  std::string encoder_version;
  std::size_t entry_count = 0;

  friend bool operator==(const BankMetadata&, const BankMetadata&) = default;
};

struct MemoryEntry {
  std::size_t id = 0;
  ImageFeatureMap v;
  GlobalImageFeature v_g;
  std::vector<Caption> captions;

  friend bool operator==(const MemoryEntry&, const MemoryEntry&) = default;
};

inline constexpr double kGlobalFeatureTolerance = 1e-12;

// Immutable after construction. Every entry shares the metadata dimensions,
// ids run 0..count-1 and v_G is the spatial mean of v.
class MemoryBank {
 public:
  static MemoryBank create(BankDims dims, std::string encoder_version, std::vector<MemoryEntry> entries) {
    if (entries.empty()) throw BuildError(0, "bank needs at least one entry");
    for (std::size_t i = 0; i < entries.size(); ++i) validate_entry(dims, i, entries[i]);
    MemoryBank bank;
    bank.meta_ = {dims, std::move(encoder_version), entries.size()};
    bank.entries_ = std::move(entries);
    return bank;
  }

  const BankMetadata& metadata() const noexcept { return meta_; }
  const BankDims& dims() const noexcept { return meta_.dims; }
  const std::string& encoder_version() const noexcept { return meta_.encoder_version; }
  std::size_t size() const noexcept { return entries_.size(); }
  const std::vector<MemoryEntry>& entries() const noexcept { return entries_; }
  const MemoryEntry& entry(std::size_t id) const { return entries_.at(id); }

  friend bool operator==(const MemoryBank&, const MemoryBank&) = default;

 private:
  MemoryBank() = default;

  static void validate_entry(const BankDims& dims, std::size_t i, const MemoryEntry& e) {
    if (e.id != i) throw BuildError(i, "entry id " + std::to_string(e.id) + " out of order");
    const Shape want{dims.d, dims.h, dims.w};
    if (e.v.v.shape() != want) {
      throw BuildError(i, "feature map shape " + shape_str(e.v.v.shape()) + ", expected " + shape_str(want));
    }
    if (!e.v.v.all_finite()) throw BuildError(i, "feature map has non-finite values");
    if (e.v_g.v_g.shape() != Shape{dims.d}) throw BuildError(i, "global feature has wrong shape");
    const Tensor mean = spatial_mean(e.v.v);
    for (std::size_t c = 0; c < dims.d; ++c) {
      if (std::abs(mean[c] - e.v_g.v_g[c]) > kGlobalFeatureTolerance) {
        throw BuildError(i, "global feature differs from spatial mean at channel " + std::to_string(c));
      }
    }
    if (e.captions.empty()) throw BuildError(i, "entry has no captions");
    for (std::size_t c = 0; c < e.captions.size(); ++c) {
      const Caption& cap = e.captions[c];
      const std::string where = "caption " + std::to_string(c) + ": ";
      if (cap.s.s.shape() != Shape{dims.d}) throw BuildError(i, where + "sentence feature has wrong shape");
      if (cap.w.w.shape() != Shape{dims.n, dims.d}) {
        throw BuildError(i, where + "word embeddings " + shape_str(cap.w.w.shape()) + ", expected " +
                                shape_str({dims.n, dims.d}));
      }
      if (!cap.s.s.all_finite() || !cap.w.w.all_finite()) throw BuildError(i, where + "non-finite values");
      try {
        validate_word_embeddings(cap.w);
      } catch (const Error& ex) {
        throw BuildError(i, where + ex.what());
      }
    }
  }

  BankMetadata meta_;
  std::vector<MemoryEntry> entries_;
};

// ---------------------------------------------------------------------------
// Building from ingested records.

struct PrecomputedFeatures {
  Tensor v;  // [D, H, W]
};

struct SourceImage {
  Tensor pixels;  // [3, H_img, W_img]
};

struct IngestRecord {
  std::variant<PrecomputedFeatures, SourceImage> source;
  std::vector<std::string> captions;
};

struct BuildConfig {
  BankDims dims;
  std::uint64_t seed = 7;
};

inline MemoryBank build_bank(std::span<const IngestRecord> records, const BuildConfig& cfg) {
  if (records.empty()) throw BuildError(0, "manifest has no records");
  const bool first_precomputed = std::holds_alternative<PrecomputedFeatures>(records.front().source);
  EncoderVersion version{cfg.seed, first_precomputed ? ImageSource::precomputed : ImageSource::toy_encoder};
  const auto& d = cfg.dims;

  std::vector<MemoryEntry> entries;
  entries.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    const bool precomputed = std::holds_alternative<PrecomputedFeatures>(rec.source);
    if (precomputed != first_precomputed) {
      throw BuildError(i, "encoder-version mix: record uses " +
                              std::string(precomputed ? kPrecomputedImages : kImageEncoderName) + " but bank uses " +
                              std::string(first_precomputed ? kPrecomputedImages : kImageEncoderName));
    }
    if (rec.captions.empty()) throw BuildError(i, "empty caption list");

    MemoryEntry e;
    e.id = i;
    try {
      if (precomputed) {
        const Tensor& v = std::get<PrecomputedFeatures>(rec.source).v;
        const Shape want{d.d, d.h, d.w};
        if (v.shape() != want) {
          throw ShapeError("feature map shape " + shape_str(v.shape()) + ", expected " + shape_str(want));
        }
        if (!v.all_finite()) throw ShapeError("feature map has non-finite values");
        e.v = ImageFeatureMap{v};
      } else {
        const Tensor& px = std::get<SourceImage>(rec.source).pixels;
        if (!px.all_finite()) throw ShapeError("image has non-finite values");
        e.v = toy_image_encoder(px, d.d, d.h, d.w);
      }
      e.v_g = GlobalImageFeature{spatial_mean(e.v.v)};
      for (std::size_t c = 0; c < rec.captions.size(); ++c) {
        auto enc = toy_text_encoder(rec.captions[c], d.d, d.n, cfg.seed);
        e.captions.push_back(Caption{rec.captions[c], std::move(enc.s), std::move(enc.w)});
      }
    } catch (const BuildError&) {
      throw;
    } catch (const Error& ex) {
      throw BuildError(i, ex.what());
    }
    entries.push_back(std::move(e));
  }
  return MemoryBank::create(d, version.str(), std::move(entries));
}

// ---------------------------------------------------------------------------
// Manifest: one record per line,
//
//   feature <blob path> | caption | caption ...
//   image <ppm path> | caption | caption ...
//
// Blank lines and lines starting with '#' are skipped. Paths are relative to
// the manifest's directory. A feature blob is D*H*W little-endian float64
// values in [D, H, W] order.

struct ManifestRecord {
  enum class Kind { feature, image };
  Kind kind = Kind::feature;
  std::filesystem::path path;
  std::vector<std::string> captions;
  std::size_t line = 0;
};

class ManifestError : public Error {
 public:
  ManifestError(std::size_t line, const std::string& what)
      : Error("manifest line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace detail

inline std::vector<ManifestRecord> parse_manifest(std::istream& is, const std::filesystem::path& base_dir) {
  std::vector<ManifestRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto body = detail::trim(line);
    if (body.empty() || body.front() == '#') continue;

    std::vector<std::string_view> fields;
    std::string_view rest = body;
    for (;;) {
      const auto bar = rest.find('|');
      fields.push_back(detail::trim(rest.substr(0, bar)));
      if (bar == std::string_view::npos) break;
      rest.remove_prefix(bar + 1);
    }
    const auto head = fields.front();
    const auto space = head.find_first_of(" \t");
    if (space == std::string_view::npos) throw ManifestError(lineno, "expected '<kind> <path>' before first '|'");
    ManifestRecord rec;
    rec.line = lineno;
    const auto kind = head.substr(0, space);
    if (kind == "feature") {
      rec.kind = ManifestRecord::Kind::feature;
    } else if (kind == "image") {
      rec.kind = ManifestRecord::Kind::image;
    } else {
      throw ManifestError(lineno, "unknown record kind '" + std::string(kind) + "'");
    }
    const auto path = detail::trim(head.substr(space));
    if (path.empty()) throw ManifestError(lineno, "missing path");
    rec.path = base_dir / std::filesystem::path(std::string(path));
    for (std::size_t f = 1; f < fields.size(); ++f) {
      if (fields[f].empty()) throw ManifestError(lineno, "empty caption " + std::to_string(f - 1));
      rec.captions.emplace_back(fields[f]);
    }
    if (rec.captions.empty()) throw ManifestError(lineno, "record has no captions");
    out.push_back(std::move(rec));
  }
  return out;
}

inline Tensor read_feature_blob(const std::filesystem::path& path, const BankDims& dims) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ShapeError("cannot open feature blob " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::size_t want = dims.d * dims.h * dims.w;
  if (bytes.size() != want * 8) {
    throw ShapeError("feature blob " + path.filename().string() + " has " + std::to_string(bytes.size()) +
                     " bytes, expected " + std::to_string(want * 8) + " for " + shape_str({dims.d, dims.h, dims.w}));
  }
  std::vector<double> vals(want);
  for (std::size_t i = 0; i < want; ++i) {
    std::uint64_t u = 0;
    for (int b = 7; b >= 0; --b) u = (u << 8) | bytes[i * 8 + static_cast<std::size_t>(b)];
    vals[i] = std::bit_cast<double>(u);
  }
  return Tensor::from_external({dims.d, dims.h, dims.w}, std::move(vals));
}

inline void write_feature_blob(const std::filesystem::path& path, const Tensor& v) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  for (double x : v.values()) {
    std::uint64_t u = std::bit_cast<std::uint64_t>(x);
    for (int b = 0; b < 8; ++b) os.put(static_cast<char>((u >> (8 * b)) & 0xFF));
  }
}

// Loads every file named by the manifest and builds the bank. Failures are
// reported as BuildError with the record index; the message includes the
// manifest line.
inline MemoryBank build_bank_from_manifest(const std::filesystem::path& manifest, const BuildConfig& cfg) {
  std::ifstream is(manifest);
  if (!is) throw ArgumentError("cannot open manifest " + manifest.string());
  const auto records = parse_manifest(is, manifest.parent_path());
  std::vector<IngestRecord> ingest;
  ingest.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    try {
      IngestRecord rec;
      if (r.kind == ManifestRecord::Kind::feature) {
        rec.source = PrecomputedFeatures{read_feature_blob(r.path, cfg.dims)};
      } else {
        rec.source = SourceImage{read_ppm(r.path)};
      }
      rec.captions = r.captions;
      ingest.push_back(std::move(rec));
    } catch (const Error& ex) {
      throw BuildError(i, "manifest line " + std::to_string(r.line) + ": " + ex.what());
    }
  }
  return build_bank(ingest, cfg);
}

// ---------------------------------------------------------------------------
// MBNK container (little-endian):
//
//   "MBNK"  u32 format version (1)
//   u32 D, u32 N, u32 H, u32 W, u32 entry count
//   u32 length + encoder-version bytes
//   per entry:
//     f64[D*H*W] v, f64[D] v_G, u32 caption count
//     per caption: u32 length + UTF-8 text, f64[D] s, f64[N*D] w, u8[N] pad mask
//   u32 CRC-32 (zlib polynomial) of every preceding byte

inline constexpr char kBankMagic[4] = {'M', 'B', 'N', 'K'};
inline constexpr std::uint32_t kBankFormatVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int b = 0; b < 4; ++b) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  }
  void u64(std::uint64_t v) {
    for (int b = 0; b < 8; ++b) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void f64s(std::span<const double> vs) {
    for (double v : vs) f64(v);
  }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  std::size_t offset() const noexcept { return pos_; }

  void need(std::size_t n, const char* what) const {
    if (end_ - pos_ < n) throw LoadError(pos_, std::string("truncated ") + what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int b = 3; b >= 0; --b) v = (v << 8) | bytes_[pos_ + static_cast<std::size_t>(b)];
    pos_ += 4;
    return v;
  }
  double f64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int b = 7; b >= 0; --b) v = (v << 8) | bytes_[pos_ + static_cast<std::size_t>(b)];
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  std::vector<double> f64s(std::size_t n, const char* what) {
    if (n > (end_ - pos_) / 8) throw LoadError(pos_, std::string("truncated ") + what);
    std::vector<double> out(n);
    for (auto& v : out) v = f64(what);
    return out;
  }
  std::string str(const char* what) {
    const std::uint32_t len = u32(what);
    need(len, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), len);
    pos_ += len;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, std::numeric_limits<uInt>::max());
    crc = ::crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_bank(const MemoryBank& bank) {
  detail::ByteWriter w;
  w.raw(kBankMagic, 4);
  w.u32(kBankFormatVersion);
  const auto& d = bank.dims();
  w.u32(static_cast<std::uint32_t>(d.d));
  w.u32(static_cast<std::uint32_t>(d.n));
  w.u32(static_cast<std::uint32_t>(d.h));
  w.u32(static_cast<std::uint32_t>(d.w));
  w.u32(static_cast<std::uint32_t>(bank.size()));
  w.str(bank.encoder_version());
  for (const auto& e : bank.entries()) {
    w.f64s(e.v.v.data());
    w.f64s(e.v_g.v_g.data());
    w.u32(static_cast<std::uint32_t>(e.captions.size()));
    for (const auto& c : e.captions) {
      w.str(c.text);
      w.f64s(c.s.s.data());
      w.f64s(c.w.w.data());
      for (bool m : c.w.pad_mask) w.u8(m ? 1 : 0);
    }
  }
  const std::uint32_t crc = detail::crc32_of(w.bytes());
  w.u32(crc);
  return std::move(w.bytes());
}

inline MemoryBank deserialize_bank(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t kPreamble = 8;
  if (bytes.size() < kPreamble) throw LoadError(bytes.size(), "truncated header");
  if (std::memcmp(bytes.data(), kBankMagic, 4) != 0) throw LoadError(0, "bad magic (expected MBNK)");
  detail::ByteReader pre(bytes, bytes.size());
  pre.u32("magic");
  const std::uint32_t version = pre.u32("format version");
  if (version != kBankFormatVersion) {
    throw LoadError(4, "unsupported format version " + std::to_string(version));
  }
  constexpr std::size_t kMinSize = kPreamble + 5 * 4 + 4 + 4;
  if (bytes.size() < kMinSize) throw LoadError(bytes.size(), "truncated header");
  const std::size_t body_end = bytes.size() - 4;
  detail::ByteReader crc_reader(bytes.subspan(body_end), 4);
  const std::uint32_t stored = crc_reader.u32("checksum");
  const std::uint32_t actual = detail::crc32_of(bytes.first(body_end));
  if (stored != actual) throw LoadError(body_end, "checksum mismatch");

  detail::ByteReader r(bytes, body_end);
  r.u32("magic");
  r.u32("format version");
  BankDims dims;
  dims.d = r.u32("metadata");
  dims.n = r.u32("metadata");
  dims.h = r.u32("metadata");
  dims.w = r.u32("metadata");
  const std::size_t count = r.u32("metadata");
  if (dims.d == 0 || dims.n == 0 || dims.h == 0 || dims.w == 0) throw LoadError(8, "zero dimension in metadata");
  if (count == 0) throw LoadError(24, "bank has no entries");
  std::string encoder = r.str("encoder version");

  std::vector<MemoryEntry> entries;
  for (std::size_t i = 0; i < count; ++i) {
    MemoryEntry e;
    e.id = i;
    e.v.v = Tensor({dims.d, dims.h, dims.w}, r.f64s(dims.d * dims.h * dims.w, "feature map"));
    e.v_g.v_g = Tensor({dims.d}, r.f64s(dims.d, "global feature"));
    const std::size_t ncap = r.u32("caption count");
    if (ncap == 0) throw LoadError(r.offset() - 4, "entry " + std::to_string(i) + " has no captions");
    for (std::size_t c = 0; c < ncap; ++c) {
      Caption cap;
      cap.text = r.str("caption text");
      cap.s.s = Tensor({dims.d}, r.f64s(dims.d, "sentence feature"));
      cap.w.w = Tensor({dims.n, dims.d}, r.f64s(dims.n * dims.d, "word embeddings"));
      cap.w.pad_mask.resize(dims.n);
      for (std::size_t k = 0; k < dims.n; ++k) {
        const auto off = r.offset();
        const std::uint8_t m = r.u8("pad mask");
        if (m > 1) throw LoadError(off, "pad mask byte must be 0 or 1");
        cap.w.pad_mask[k] = m == 1;
      }
      e.captions.push_back(std::move(cap));
    }
    entries.push_back(std::move(e));
  }
  if (r.offset() != body_end) throw LoadError(r.offset(), "trailing bytes after last entry");
  try {
    return MemoryBank::create(dims, std::move(encoder), std::move(entries));
  } catch (const BuildError& ex) {
    throw LoadError(0, std::string("invalid bank contents: ") + ex.what());
  }
}

inline void save_bank(const MemoryBank& bank, const std::filesystem::path& path) {
  const auto bytes = serialize_bank(bank);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("write failed for " + path.string());
}

inline MemoryBank load_bank(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError(0, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_bank(bytes);
}

inline std::uint32_t bank_checksum(const MemoryBank& bank) {
  const auto bytes = serialize_bank(bank);
  detail::ByteReader r(std::span<const std::uint8_t>(bytes).subspan(bytes.size() - 4), 4);
  return r.u32("checksum");
}

// ---------------------------------------------------------------------------

struct BankStats {
  std::size_t entries = 0;
  std::size_t captions = 0;
  BankDims dims;
  std::string encoder_version;
  std::vector<double> channel_min;
  std::vector<double> channel_max;

  friend bool operator==(const BankStats&, const BankStats&) = default;
};

inline BankStats bank_stats(const MemoryBank& bank) {
  BankStats st;
  st.entries = bank.size();
  st.dims = bank.dims();
  st.encoder_version = bank.encoder_version();
  const auto& d = bank.dims();
  st.channel_min.assign(d.d, std::numeric_limits<double>::infinity());
  st.channel_max.assign(d.d, -std::numeric_limits<double>::infinity());
  const std::size_t hw = d.h * d.w;
  for (const auto& e : bank.entries()) {
    st.captions += e.captions.size();
    for (std::size_t c = 0; c < d.d; ++c) {
      for (std::size_t p = 0; p < hw; ++p) {
        const double v = e.v.v[c * hw + p];
        st.channel_min[c] = std::min(st.channel_min[c], v);
        st.channel_max[c] = std::max(st.channel_max[c], v);
      }
    }
  }
  return st;
}

}  // namespace membank
