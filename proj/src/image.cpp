#include "glyphdiff/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace glyphdiff {

std::vector<std::uint8_t> quantize_u8(const GrayImage& img) {
  std::vector<std::uint8_t> bytes(img.pix.size());
  for (std::size_t i = 0; i < img.pix.size(); ++i) {
    double v = std::clamp(img.pix[i], 0.0, 1.0);
    bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return bytes;
}

void write_pgm(const std::string& path, const GrayImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("pgm: cannot open for write: " + path);
  os << "P5\n" << img.w << " " << img.h << "\n255\n";
  auto bytes = quantize_u8(img);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("pgm: write failed: " + path);
}

GrayImage read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("pgm: cannot open: " + path);
  std::string magic;
  is >> magic;
  if (magic != "P5") throw std::runtime_error("pgm: expected P5 in " + path);
  auto next_int = [&is, &path]() {
    // skip whitespace and '#' comment lines
    while (true) {
      int c = is.peek();
      if (c == '#') {
        std::string line;
        std::getline(is, line);
      } else if (std::isspace(c)) {
        is.get();
      } else {
        break;
      }
    }
    long v = -1;
    is >> v;
    if (!is || v < 0) throw std::runtime_error("pgm: malformed header in " + path);
    return v;
  };
  const long w = next_int();
  const long h = next_int();
  const long maxval = next_int();
  if (maxval != 255) throw std::runtime_error("pgm: only 8-bit images supported: " + path);
  is.get();  // single whitespace after maxval
  GrayImage img(static_cast<int>(h), static_cast<int>(w));
  std::vector<std::uint8_t> bytes(img.pix.size());
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!is) throw std::runtime_error("pgm: truncated pixel data in " + path);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pix[i] = bytes[i] / 255.0;
  return img;
}

GrayImage crop(const GrayImage& img, int y0, int x0, int h, int w) {
  if (y0 < 0 || x0 < 0 || h < 1 || w < 1 || y0 + h > img.h || x0 + w > img.w)
    throw std::invalid_argument("crop: rectangle out of bounds");
  GrayImage out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(y, x) = img.at(y0 + y, x0 + x);
  return out;
}

GrayImage resize_nearest(const GrayImage& img, int h2, int w2) {
  if (h2 < 1 || w2 < 1) throw std::invalid_argument("resize_nearest: bad target size");
  GrayImage out(h2, w2);
  for (int y = 0; y < h2; ++y) {
    int sy = std::min(img.h - 1, static_cast<int>((y + 0.5) * img.h / h2));
    for (int x = 0; x < w2; ++x) {
      int sx = std::min(img.w - 1, static_cast<int>((x + 0.5) * img.w / w2));
      out.at(y, x) = img.at(sy, sx);
    }
  }
  return out;
}

GrayImage normalize_range(const GrayImage& img) {
  double lo = 1e300, hi = -1e300;
  for (double v : img.pix) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  GrayImage out = img;
  if (hi - lo < 1e-9) {
    std::fill(out.pix.begin(), out.pix.end(), 0.0);
    return out;
  }
  const double inv = 1.0 / (hi - lo);
  for (auto& v : out.pix) v = (v - lo) * inv;
  return out;
}

}  // namespace glyphdiff
