#include "glyphdiff/font.hpp"

#include <cctype>
#include <stdexcept>

namespace glyphdiff {

namespace {

// 5x7 glyphs in an 8x8 cell (column 0 and row 7 left blank, glyph occupies
// columns 1..5, rows 0..6). '#' is ink.
struct GlyphDef {
  char ch;
  const char* rows[7];
};

constexpr GlyphDef kGlyphs[] = {
    {'A', {" ### ", "#   #", "#   #", "#####", "#   #", "#   #", "#   #"}},
    {'B', {"#### ", "#   #", "#   #", "#### ", "#   #", "#   #", "#### "}},
    {'C', {" ### ", "#   #", "#    ", "#    ", "#    ", "#   #", " ### "}},
    {'D', {"#### ", "#   #", "#   #", "#   #", "#   #", "#   #", "#### "}},
    {'E', {"#####", "#    ", "#    ", "#### ", "#    ", "#    ", "#####"}},
    {'F', {"#####", "#    ", "#    ", "#### ", "#    ", "#    ", "#    "}},
    {'G', {" ### ", "#   #", "#    ", "# ###", "#   #", "#   #", " ### "}},
    {'H', {"#   #", "#   #", "#   #", "#####", "#   #", "#   #", "#   #"}},
    {'I', {" ### ", "  #  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "}},
    {'J', {"  ###", "   # ", "   # ", "   # ", "   # ", "#  # ", " ##  "}},
    {'K', {"#   #", "#  # ", "# #  ", "##   ", "# #  ", "#  # ", "#   #"}},
    {'L', {"#    ", "#    ", "#    ", "#    ", "#    ", "#    ", "#####"}},
    {'M', {"#   #", "## ##", "# # #", "# # #", "#   #", "#   #", "#   #"}},
    {'N', {"#   #", "##  #", "# # #", "#  ##", "#   #", "#   #", "#   #"}},
    {'O', {" ### ", "#   #", "#   #", "#   #", "#   #", "#   #", " ### "}},
    {'P', {"#### ", "#   #", "#   #", "#### ", "#    ", "#    ", "#    "}},
    {'Q', {" ### ", "#   #", "#   #", "#   #", "# # #", "#  # ", " ## #"}},
    {'R', {"#### ", "#   #", "#   #", "#### ", "# #  ", "#  # ", "#   #"}},
    {'S', {" ####", "#    ", "#    ", " ### ", "    #", "    #", "#### "}},
    {'T', {"#####", "  #  ", "  #  ", "  #  ", "  #  ", "  #  ", "  #  "}},
    {'U', {"#   #", "#   #", "#   #", "#   #", "#   #", "#   #", " ### "}},
    {'V', {"#   #", "#   #", "#   #", "#   #", "#   #", " # # ", "  #  "}},
    {'W', {"#   #", "#   #", "#   #", "# # #", "# # #", "## ##", "#   #"}},
    {'X', {"#   #", "#   #", " # # ", "  #  ", " # # ", "#   #", "#   #"}},
    {'Y', {"#   #", "#   #", " # # ", "  #  ", "  #  ", "  #  ", "  #  "}},
    {'Z', {"#####", "    #", "   # ", "  #  ", " #   ", "#    ", "#####"}},
    {'0', {" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "}},
    {'1', {"  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "}},
    {'2', {" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"}},
    {'3', {" ### ", "#   #", "    #", "  ## ", "    #", "#   #", " ### "}},
    {'4', {"   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "}},
    {'5', {"#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "}},
    {'6', {" ### ", "#    ", "#    ", "#### ", "#   #", "#   #", " ### "}},
    {'7', {"#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "}},
    {'8', {" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "}},
    {'9', {" ### ", "#   #", "#   #", " ####", "    #", "    #", " ### "}},
    {' ', {"     ", "     ", "     ", "     ", "     ", "     ", "     "}},
};

}  // namespace

FontAtlas::FontAtlas() {
  index_.fill(-1);
  for (const auto& g : kGlyphs) {
    std::array<std::uint8_t, 8> cell{};
    for (int r = 0; r < 7; ++r) {
      std::uint8_t bits = 0;
      const char* row = g.rows[r];
      for (int c = 0; row[c] != '\0' && c < 5; ++c)
        if (row[c] == '#') bits |= static_cast<std::uint8_t>(0x80 >> (c + 1));
      cell[static_cast<std::size_t>(r)] = bits;
    }
    cell[7] = 0;
    index_[static_cast<unsigned char>(g.ch)] = static_cast<int>(cells_.size());
    cells_.push_back(cell);
    alphabet_.push_back(g.ch);
  }
}

const FontAtlas& FontAtlas::builtin() {
  static const FontAtlas atlas;
  return atlas;
}

bool FontAtlas::contains(char c) const { return index_[static_cast<unsigned char>(c)] >= 0; }

int FontAtlas::index_of(char c) const { return index_[static_cast<unsigned char>(c)]; }

const std::array<std::uint8_t, 8>& FontAtlas::cell(char c) const {
  const int i = index_of(c);
  if (i < 0)
    throw std::invalid_argument(std::string("unsupported character: '") + c + "'");
  return cells_[static_cast<std::size_t>(i)];
}

int FontAtlas::cell_ink_count(char c) const {
  int n = 0;
  for (std::uint8_t row : cell(c))
    for (int b = 0; b < 8; ++b)
      if (row & (0x80 >> b)) ++n;
  return n;
}

std::string filter_to_alphabet(const std::string& text, const FontAtlas& atlas) {
  std::string out;
  for (char c : text) {
    char u = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    if (atlas.contains(u)) out.push_back(u);
  }
  return out;
}

GrayImage render_char(char c, const RenderSpec& spec, const FontAtlas& atlas) {
  const auto& cell = atlas.cell(c);
  GrayImage img(spec.local_h, spec.local_w, spec.background);
  const int s = std::max(1, std::min(spec.local_h / 8, spec.local_w / 8));
  const int oy = (spec.local_h - 8 * s) / 2;
  const int ox = (spec.local_w - 8 * s) / 2;
  for (int y = 0; y < 8 * s; ++y) {
    const std::uint8_t row = cell[static_cast<std::size_t>(y / s)];
    for (int x = 0; x < 8 * s; ++x) {
      if (row & (0x80 >> (x / s))) img.at(oy + y, ox + x) = spec.ink;
    }
  }
  return img;
}

GlyphImages render_line(const std::string& text, const RenderSpec& spec, const FontAtlas& atlas) {
  std::string kept = filter_to_alphabet(text, atlas);
  if (kept.empty())
    throw std::invalid_argument("render_line: text is empty after filtering to the alphabet");
  if (spec.line_h != spec.local_h)
    throw std::invalid_argument("render_line: line height must equal the local glyph height");
  GlyphImages out;
  out.truncated = static_cast<int>(kept.size()) > spec.max_chars;
  if (out.truncated) kept.resize(static_cast<std::size_t>(spec.max_chars));
  out.text = kept;
  out.line = GrayImage(spec.line_h, spec.line_w(), spec.background);
  out.slot_mask.assign(static_cast<std::size_t>(spec.max_chars), false);
  for (std::size_t i = 0; i < kept.size(); ++i) {
    GrayImage g = render_char(kept[i], spec, atlas);
    for (int y = 0; y < g.h; ++y)
      for (int x = 0; x < g.w; ++x)
        out.line.at(y, static_cast<int>(i) * spec.local_w + x) = g.at(y, x);
    out.local.push_back(std::move(g));
    out.slot_mask[i] = true;
  }
  return out;
}

}  // namespace glyphdiff
