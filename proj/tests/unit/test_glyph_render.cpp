#include <stdexcept>
#include <string>

#include "doctest.h"
#include "glyphdiff/font.hpp"

using namespace glyphdiff;

TEST_CASE("render_char: space is background, ink scales as the cell bit count") {
  RenderSpec spec;
  auto blank = render_char(' ', spec);
  for (double v : blank.pix) CHECK(v == spec.background);

  auto a1 = render_char('A', spec);
  auto a2 = render_char('A', spec);
  CHECK(a1.pix == a2.pix);  // bitwise determinism

  int ink = 0;
  for (double v : a1.pix)
    if (v == spec.ink) ++ink;
  CHECK(ink == 4 * FontAtlas::builtin().cell_ink_count('A'));  // 2x nearest scale

  CHECK_THROWS_AS(render_char('?', spec), std::invalid_argument);
}

TEST_CASE("render_line slot layout") {
  RenderSpec spec;
  auto single = render_line("A", spec);
  CHECK(single.text == "A");
  CHECK(single.line.h == 16);
  CHECK(single.line.w == 128);
  auto a = render_char('A', spec);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      CHECK(single.line.at(y, x) == a.at(y, x));
      // remaining slots stay background
      CHECK(single.line.at(y, 16 + x) == spec.background);
    }

  auto ab = render_line("AB", spec);
  auto b = render_char('B', spec);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      CHECK(ab.line.at(y, x) == a.at(y, x));
      CHECK(ab.line.at(y, 16 + x) == b.at(y, x));
    }
}

TEST_CASE("render_line truncation and filtering") {
  RenderSpec spec;
  auto r = render_line("ABCDEFGHI", spec);
  CHECK(r.text.size() == 8);
  CHECK(r.truncated);

  auto folded = render_line("ab3", spec);
  CHECK(folded.text == "AB3");
  CHECK_FALSE(folded.truncated);

  CHECK_THROWS_AS(render_line("", spec), std::invalid_argument);
  CHECK_THROWS_AS(render_line("??!", spec), std::invalid_argument);
}

TEST_CASE("slot property: cropping slot i equals local image i bitwise") {
  RenderSpec spec;
  const std::string texts[] = {"HELLO", "A1B2C3D4", "Z", "OK GO"};
  for (const auto& t : texts) {
    auto r = render_line(t, spec);
    for (std::size_t i = 0; i < r.local.size(); ++i) {
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
          REQUIRE(r.line.at(y, static_cast<int>(i) * 16 + x) == r.local[i].at(y, x));
    }
  }
}

TEST_CASE("every alphabet cell is distinct and non-space cells carry ink") {
  const auto& atlas = FontAtlas::builtin();
  const auto& alpha = atlas.alphabet();
  CHECK(alpha.size() == 37);
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    if (alpha[i] != ' ') CHECK(atlas.cell_ink_count(alpha[i]) > 0);
    for (std::size_t j = i + 1; j < alpha.size(); ++j) CHECK(atlas.cell(alpha[i]) != atlas.cell(alpha[j]));
  }
}
