#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "glyphdiff/image.hpp"

namespace glyphdiff {

// Rendering geometry. Fixed-width character slots: the line image width is
// always max_chars * local_w, so slot i of the line is exactly the i-th
// single-character render.
struct RenderSpec {
  int local_h = 16;
  int local_w = 16;
  int line_h = 16;
  int max_chars = 8;
  double ink = 1.0;
  double background = 0.0;

  int line_w() const { return max_chars * local_w; }
};

// Embedded 8x8 bitmap atlas over A-Z, 0-9 and space (37 cells). No external
// font files; the cells are compiled in.
class FontAtlas {
 public:
  static const FontAtlas& builtin();

  const std::string& alphabet() const { return alphabet_; }
  bool contains(char c) const;
  int index_of(char c) const;  // -1 when unsupported
  // row bitmasks, bit (0x80 >> col) set means ink
  const std::array<std::uint8_t, 8>& cell(char c) const;
  int cell_ink_count(char c) const;

 private:
  FontAtlas();
  std::string alphabet_;
  std::vector<std::array<std::uint8_t, 8>> cells_;
  std::array<int, 256> index_{};
};

struct GlyphImages {
  std::vector<GrayImage> local;  // one per kept character
  GrayImage line;                // line_h x line_w
  std::string text;              // kept characters after filtering/truncation
  bool truncated = false;
  std::vector<bool> slot_mask;   // max_chars entries, true where a glyph sits
};

// Map to the atlas alphabet: ASCII lowercase folds to uppercase, everything
// outside the alphabet is dropped.
std::string filter_to_alphabet(const std::string& text, const FontAtlas& atlas = FontAtlas::builtin());

// 8x8 cell nearest-neighbor scaled by an integer factor and centered.
// Throws on characters outside the atlas.
GrayImage render_char(char c, const RenderSpec& spec, const FontAtlas& atlas = FontAtlas::builtin());

// Per-character renders plus the unified fixed-slot line image. Text longer
// than max_chars is truncated with the flag set; text that filters to empty
// is rejected.
GlyphImages render_line(const std::string& text, const RenderSpec& spec,
                        const FontAtlas& atlas = FontAtlas::builtin());

}  // namespace glyphdiff
