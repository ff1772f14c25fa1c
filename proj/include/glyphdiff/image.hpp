#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace glyphdiff {

// Grayscale raster with values in [0,1]; the pixel unit shared by rendering,
// dataset synthesis, and diffusion I/O.
struct GrayImage {
  int h = 0;
  int w = 0;
  std::vector<double> pix;

  GrayImage() = default;
  GrayImage(int h_, int w_, double fill = 0.0)
      : h(h_), w(w_), pix(static_cast<std::size_t>(h_) * static_cast<std::size_t>(w_), fill) {}

  double& at(int y, int x) { return pix[static_cast<std::size_t>(y) * w + x]; }
  double at(int y, int x) const { return pix[static_cast<std::size_t>(y) * w + x]; }
  bool inside(int y, int x) const { return y >= 0 && y < h && x >= 0 && x < w; }
};

// 8-bit binary PGM (P5). Values are quantized with round(p * 255) on write
// and mapped back as v / 255 on read.
void write_pgm(const std::string& path, const GrayImage& img);
GrayImage read_pgm(const std::string& path);

std::vector<std::uint8_t> quantize_u8(const GrayImage& img);

// axis-aligned crop; the rectangle must lie inside the image
GrayImage crop(const GrayImage& img, int y0, int x0, int h, int w);

// nearest-neighbor resample to h2 x w2 (pixel-center convention)
GrayImage resize_nearest(const GrayImage& img, int h2, int w2);

// min-max normalize to [0,1]; flat images map to all zeros
GrayImage normalize_range(const GrayImage& img);

}  // namespace glyphdiff
