#pragma once

#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "membank/error.hpp"
#include "membank/tensor.hpp"

namespace membank {

// Binary P6 pixel maps. In memory an image is a [3, H, W] tensor; byte values
// map to [0, 1] on read. On write, values are taken from [lo, hi].

inline void write_ppm(std::ostream& os, const Tensor& image, double lo = 0.0, double hi = 1.0) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("PPM image must be [3, H, W]");
  const std::size_t h = image.dim(1), w = image.dim(2);
  os << "P6\n" << w << ' ' << h << "\n255\n";
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double t = std::clamp((image.at(c, y, x) - lo) / (hi - lo), 0.0, 1.0);
        os.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(t * 255.0))));
      }
    }
  }
}

inline void write_ppm(const std::filesystem::path& path, const Tensor& image, double lo = 0.0, double hi = 1.0) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write_ppm(os, image, lo, hi);
}

namespace detail {

inline std::size_t ppm_header_int(std::istream& is) {
  int c = is.peek();
  while (c != EOF) {
    if (c == '#') {
      std::string skip;
      std::getline(is, skip);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      break;
    }
    c = is.peek();
  }
  std::size_t v = 0;
  if (!(is >> v)) throw ShapeError("malformed PPM header");
  return v;
}

}  // namespace detail

inline Tensor read_ppm(std::istream& is) {
  std::string magic(2, '\0');
  is.read(magic.data(), 2);
  if (!is || magic != "P6") throw ShapeError("not a binary PPM (P6) file");
  const std::size_t w = detail::ppm_header_int(is);
  const std::size_t h = detail::ppm_header_int(is);
  const std::size_t maxval = detail::ppm_header_int(is);
  if (w == 0 || h == 0 || maxval != 255) throw ShapeError("unsupported PPM geometry or maxval");
  is.get();  // single whitespace after maxval
  Tensor image({3, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const int b = is.get();
        if (b == EOF) throw ShapeError("truncated PPM pixel data");
        image.at(c, y, x) = static_cast<double>(b) / 255.0;
      }
    }
  }
  return image;
}

inline Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ShapeError("cannot open image " + path.string());
  return read_ppm(is);
}

}  // namespace membank
