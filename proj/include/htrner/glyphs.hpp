#pragma once

// Procedural 8x12 glyph skeletons for lowercase latin letters. Each glyph is
// a set of polylines on an 8-wide, 12-tall grid (x right, y down); the
// baseline sits at y = 9 with descenders reaching y = 11.

#include <array>
#include <cstdlib>
#include <map>
#include <optional>
#include <utility>
#include <vector>

namespace htrner {

inline constexpr int kGlyphWidth = 8;
inline constexpr int kGlyphHeight = 12;
inline constexpr int kGlyphBaseline = 9;

using GlyphBitmap = std::array<std::array<bool, kGlyphWidth>, kGlyphHeight>;

namespace detail {

using Polyline = std::vector<std::pair<int, int>>;

inline const std::map<char, std::vector<Polyline>>& glyph_strokes() {
  static const std::map<char, std::vector<Polyline>> strokes = {
      {'a', {{{5, 4}, {5, 9}}, {{5, 5}, {4, 4}, {2, 4}, {1, 5}, {1, 8}, {2, 9}, {4, 9}, {5, 8}}}},
      {'b', {{{1, 0}, {1, 9}}, {{1, 5}, {2, 4}, {4, 4}, {5, 5}, {5, 8}, {4, 9}, {2, 9}, {1, 8}}}},
      {'c', {{{5, 5}, {4, 4}, {2, 4}, {1, 5}, {1, 8}, {2, 9}, {4, 9}, {5, 8}}}},
      {'d', {{{5, 0}, {5, 9}}, {{5, 5}, {4, 4}, {2, 4}, {1, 5}, {1, 8}, {2, 9}, {4, 9}, {5, 8}}}},
      {'e', {{{1, 6}, {5, 6}, {5, 5}, {4, 4}, {2, 4}, {1, 5}, {1, 8}, {2, 9}, {5, 9}}}},
      {'f', {{{5, 0}, {3, 0}, {2, 1}, {2, 9}}, {{0, 4}, {4, 4}}}},
      {'g', {{{5, 5}, {4, 4}, {2, 4}, {1, 5}, {1, 7}, {2, 8}, {4, 8}, {5, 7}}, {{5, 4}, {5, 10}, {4, 11}, {1, 11}}}},
      {'h', {{{1, 0}, {1, 9}}, {{1, 5}, {2, 4}, {4, 4}, {5, 5}, {5, 9}}}},
      {'i', {{{3, 4}, {3, 9}}, {{3, 2}, {3, 2}}}},
      {'j', {{{4, 4}, {4, 10}, {3, 11}, {1, 11}}, {{4, 2}, {4, 2}}}},
      {'k', {{{1, 0}, {1, 9}}, {{5, 4}, {2, 7}}, {{2, 6}, {5, 9}}}},
      {'l', {{{2, 0}, {2, 8}, {3, 9}, {4, 9}}}},
      {'m', {{{0, 4}, {0, 9}}, {{0, 5}, {1, 4}, {2, 4}, {3, 5}, {3, 9}}, {{3, 5}, {4, 4}, {5, 4}, {6, 5}, {6, 9}}}},
      {'n', {{{1, 4}, {1, 9}}, {{1, 5}, {2, 4}, {4, 4}, {5, 5}, {5, 9}}}},
      {'o', {{{2, 4}, {4, 4}, {5, 5}, {5, 8}, {4, 9}, {2, 9}, {1, 8}, {1, 5}, {2, 4}}}},
      {'p', {{{1, 4}, {1, 11}}, {{1, 5}, {2, 4}, {4, 4}, {5, 5}, {5, 7}, {4, 8}, {2, 8}, {1, 7}}}},
      {'q', {{{5, 4}, {5, 11}, {6, 11}}, {{5, 5}, {4, 4}, {2, 4}, {1, 5}, {1, 7}, {2, 8}, {4, 8}, {5, 7}}}},
      {'r', {{{1, 4}, {1, 9}}, {{1, 6}, {3, 4}, {5, 4}}}},
      {'s', {{{5, 4}, {2, 4}, {1, 5}, {2, 6}, {4, 7}, {5, 8}, {4, 9}, {1, 9}}}},
      {'t', {{{2, 1}, {2, 8}, {3, 9}, {5, 9}}, {{0, 4}, {4, 4}}}},
      {'u', {{{1, 4}, {1, 8}, {2, 9}, {4, 9}, {5, 8}}, {{5, 4}, {5, 9}}}},
      {'v', {{{0, 4}, {3, 9}, {6, 4}}}},
      {'w', {{{0, 4}, {1, 9}, {3, 6}, {5, 9}, {6, 4}}}},
      {'x', {{{1, 4}, {5, 9}}, {{5, 4}, {1, 9}}}},
      {'y', {{{1, 4}, {3, 8}}, {{5, 4}, {2, 11}}}},
      {'z', {{{1, 4}, {5, 4}, {1, 9}, {5, 9}}}},
      {' ', {}},
  };
  return strokes;
}

inline void draw_segment(GlyphBitmap& bm, int x0, int y0, int x1, int y1) {
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    bm[static_cast<std::size_t>(y0)][static_cast<std::size_t>(x0)] = true;
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

}  // namespace detail

inline bool has_glyph(char c) { return detail::glyph_strokes().count(c) > 0; }

// Rasterized one-pixel skeleton; nullopt for characters without a glyph.
inline std::optional<GlyphBitmap> glyph_bitmap(char c) {
  const auto& all = detail::glyph_strokes();
  auto it = all.find(c);
  if (it == all.end()) return std::nullopt;
  GlyphBitmap bm{};
  for (const auto& line : it->second)
    for (std::size_t i = 0; i + 1 < line.size(); ++i)
      detail::draw_segment(bm, line[i].first, line[i].second, line[i + 1].first, line[i + 1].second);
  return bm;
}

inline int glyph_ink_count(char c) {
  auto bm = glyph_bitmap(c);
  if (!bm) return 0;
  int n = 0;
  for (const auto& row : *bm)
    for (bool b : row) n += b ? 1 : 0;
  return n;
}

}  // namespace htrner
