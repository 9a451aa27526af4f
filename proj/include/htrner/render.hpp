#pragma once

#include "htrner/glyphs.hpp"
#include "htrner/record.hpp"
#include "htrner/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace htrner {

class RenderError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 8-bit grayscale raster, 0 = black ink, 255 = background.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;
  // Half-open [top, bottom) row span of every rendered line, top to bottom.
  std::vector<std::pair<int, int>> line_boxes;

  bool operator==(const GrayImage&) const = default;
  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

inline constexpr std::uint8_t kInkThreshold = 128;

struct RenderConfig {
  int margin = 6;
  int line_gap = 4;
  int char_spacing = 2;
  int max_jitter = 1;         // pixels, <= 2
  double max_slant = 0.2;     // horizontal shear per row above the baseline
  int min_thickness = 1;
  int max_thickness = 2;
  double noise_p = 0.01;      // salt-and-pepper probability, <= 0.02
  int max_ink_level = 60;     // glyph darkness drawn from [0, max_ink_level]
};

inline void validate_render(const RenderConfig& c) {
  if (c.max_jitter < 0 || c.max_jitter > 2) throw ConfigError("render max_jitter must be in [0, 2]");
  if (c.min_thickness < 1 || c.max_thickness > 2 || c.min_thickness > c.max_thickness)
    throw ConfigError("render thickness must lie in [1, 2]");
  if (c.noise_p < 0.0 || c.noise_p > 0.02) throw ConfigError("render noise_p must be in [0, 0.02]");
  if (c.max_slant < 0.0 || c.max_slant > 0.5) throw ConfigError("render max_slant must be in [0, 0.5]");
  if (c.margin < 0 || c.line_gap < 1 || c.char_spacing < 0) throw ConfigError("render spacing values are invalid");
  if (c.max_ink_level < 0 || c.max_ink_level >= kInkThreshold) throw ConfigError("render max_ink_level must be below the ink threshold");
}

// Draws each line on its own baseline. Deterministic in (rec, seed, cfg).
inline GrayImage render_record(const Record& rec, std::uint64_t seed, const RenderConfig& cfg = {}) {
  validate_render(cfg);
  for (const auto& line : rec.lines)
    for (const auto& w : line)
      for (char c : w.text)
        if (!has_glyph(c)) throw RenderError(std::string("no glyph for character '") + c + "' in record '" + rec.id + "'");

  const int jit = cfg.max_jitter;
  const int advance = kGlyphWidth + cfg.char_spacing;
  const int slant_room = static_cast<int>(std::ceil(cfg.max_slant * kGlyphHeight));
  const int pitch = kGlyphHeight + 2 * jit + cfg.line_gap;
  std::size_t max_chars = 1;
  std::vector<std::string> texts;
  for (const auto& line : rec.lines) {
    std::string t;
    for (std::size_t j = 0; j < line.size(); ++j) {
      if (j) t += ' ';
      t += line[j].text;
    }
    max_chars = std::max(max_chars, t.size());
    texts.push_back(std::move(t));
  }
  const int x_origin = cfg.margin + jit + slant_room;
  GrayImage img;
  img.width = 2 * x_origin + static_cast<int>(max_chars) * advance + 2;
  img.height = 2 * cfg.margin + static_cast<int>(texts.size()) * pitch - cfg.line_gap;
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height, 255);

  Rng rng(mix_seed(seed, 0x72656e646572ULL));
  for (std::size_t li = 0; li < texts.size(); ++li) {
    const int oy = cfg.margin + jit + static_cast<int>(li) * pitch;
    img.line_boxes.emplace_back(oy - jit, oy + kGlyphHeight + jit);
    for (std::size_t ci = 0; ci < texts[li].size(); ++ci) {
      const char c = texts[li][ci];
      const int dx = jit ? rng.uniform_int(-jit, jit) : 0;
      const int dy = jit ? rng.uniform_int(-jit, jit) : 0;
      const double slant = cfg.max_slant > 0 ? rng.uniform(-cfg.max_slant, cfg.max_slant) : 0.0;
      const int thick = rng.uniform_int(cfg.min_thickness, cfg.max_thickness);
      const auto ink = static_cast<std::uint8_t>(rng.uniform_int(0, cfg.max_ink_level));
      const auto bm = glyph_bitmap(c);
      const int gx = x_origin + static_cast<int>(ci) * advance + dx;
      const int gy = oy + dy;
      for (int y = 0; y < kGlyphHeight; ++y)
        for (int x = 0; x < kGlyphWidth; ++x) {
          if (!(*bm)[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)]) continue;
          const int sx = static_cast<int>(std::lround(slant * (kGlyphBaseline - y)));
          for (int t = 0; t < thick; ++t) {
            const int px = gx + x + sx + t, py = gy + y;
            if (px < 0 || px >= img.width || py < 0 || py >= img.height) continue;
            auto& p = img.pixels[static_cast<std::size_t>(py) * img.width + px];
            p = std::min(p, ink);
          }
        }
    }
  }
  if (cfg.noise_p > 0.0) {
    for (auto& p : img.pixels)
      if (rng.bernoulli(cfg.noise_p)) p = rng.bernoulli(0.5) ? 0 : 255;
  }
  return img;
}

// Lines [start_line, start_line + k - 1] (1-based) of a record, together with
// the horizontal image strip holding them. Strip edges fall midway between
// neighbouring line boxes, and the outermost strips extend to the image
// border, so a partition of the lines tiles the whole image.
inline std::pair<Record, GrayImage> extract_block(const Record& rec, const GrayImage& img, int start_line, int k) {
  const int lines = rec.line_count();
  if (static_cast<int>(img.line_boxes.size()) != lines)
    throw BoundsError("image has " + std::to_string(img.line_boxes.size()) + " line boxes for " + std::to_string(lines) + " lines");
  if (start_line < 1 || k < 1 || start_line + k - 1 > lines)
    throw BoundsError("block (start " + std::to_string(start_line) + ", k " + std::to_string(k) + ") outside 1.." +
                      std::to_string(lines));
  const int first = start_line - 1, last = first + k - 1;
  const auto& boxes = img.line_boxes;
  const int top = first == 0 ? 0 : (boxes[static_cast<std::size_t>(first - 1)].second + boxes[static_cast<std::size_t>(first)].first) / 2;
  const int bottom =
      last == lines - 1 ? img.height : (boxes[static_cast<std::size_t>(last)].second + boxes[static_cast<std::size_t>(last + 1)].first) / 2;

  Record sub;
  sub.id = rec.id + "_l" + std::to_string(start_line) + "k" + std::to_string(k);
  if (first == 0 && k == lines) sub.id = rec.id;
  sub.lines.assign(rec.lines.begin() + first, rec.lines.begin() + last + 1);

  GrayImage strip;
  strip.width = img.width;
  strip.height = bottom - top;
  strip.pixels.assign(img.pixels.begin() + static_cast<std::ptrdiff_t>(top) * img.width,
                      img.pixels.begin() + static_cast<std::ptrdiff_t>(bottom) * img.width);
  for (int i = first; i <= last; ++i)
    strip.line_boxes.emplace_back(boxes[static_cast<std::size_t>(i)].first - top, boxes[static_cast<std::size_t>(i)].second - top);
  return {std::move(sub), std::move(strip)};
}

inline void to_json(nlohmann::json& j, const RenderConfig& c) {
  j = nlohmann::json{{"margin", c.margin},         {"line_gap", c.line_gap},           {"char_spacing", c.char_spacing},
                     {"max_jitter", c.max_jitter}, {"max_slant", c.max_slant},         {"min_thickness", c.min_thickness},
                     {"max_thickness", c.max_thickness}, {"noise_p", c.noise_p},       {"max_ink_level", c.max_ink_level}};
}

inline void from_json(const nlohmann::json& j, RenderConfig& c) {
  c.margin = j.value("margin", c.margin);
  c.line_gap = j.value("line_gap", c.line_gap);
  c.char_spacing = j.value("char_spacing", c.char_spacing);
  c.max_jitter = j.value("max_jitter", c.max_jitter);
  c.max_slant = j.value("max_slant", c.max_slant);
  c.min_thickness = j.value("min_thickness", c.min_thickness);
  c.max_thickness = j.value("max_thickness", c.max_thickness);
  c.noise_p = j.value("noise_p", c.noise_p);
  c.max_ink_level = j.value("max_ink_level", c.max_ink_level);
}

}  // namespace htrner
