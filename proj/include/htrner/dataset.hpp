#pragma once

// Synthetic dataset builder and the JSONL manifest format:
//   {"id", "image", "lines":[{"words":[{"t","c","p"}]}], "split", "boxes"}
// `boxes` carries the rendered line spans and is optional on input.

#include "htrner/grammar.hpp"
#include "htrner/parallel.hpp"
#include "htrner/png_io.hpp"
#include "htrner/render.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace htrner {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SplitFractions {
  double train = 0.8;
  double valid = 0.1;
  double test = 0.1;
};

struct DatasetConfig {
  GrammarConfig grammar;
  RenderConfig render;
  int num_records = 200;
  SplitFractions split;
  std::uint64_t seed = 0;
  int threads = 1;
};

struct ManifestRow {
  std::string id;
  std::string image;
  std::string split;
  Record record;
  std::vector<std::pair<int, int>> boxes;
};

struct DatasetManifest {
  std::filesystem::path path;
  std::vector<ManifestRow> rows;

  std::vector<const ManifestRow*> split(const std::string& name) const {
    std::vector<const ManifestRow*> out;
    for (const auto& r : rows)
      if (name.empty() || r.split == name) out.push_back(&r);
    return out;
  }
};

inline nlohmann::ordered_json lines_to_json(const Record& rec) {
  nlohmann::ordered_json lines = nlohmann::ordered_json::array();
  for (const auto& line : rec.lines) {
    nlohmann::ordered_json words = nlohmann::ordered_json::array();
    for (const auto& w : line) {
      nlohmann::ordered_json jw;
      jw["t"] = w.text;
      jw["c"] = w.entity ? nlohmann::ordered_json(w.entity->category) : nlohmann::ordered_json(nullptr);
      jw["p"] = w.entity ? nlohmann::ordered_json(w.entity->person) : nlohmann::ordered_json(nullptr);
      words.push_back(std::move(jw));
    }
    nlohmann::ordered_json jl;
    jl["words"] = std::move(words);
    lines.push_back(std::move(jl));
  }
  return lines;
}

// Parses the "lines" array; a word's c and p must be both null or both set.
template <class Json>
std::vector<Line> lines_from_json(const Json& lines) {
  std::vector<Line> out;
  for (const auto& jl : lines) {
    Line line;
    for (const auto& jw : jl.at("words")) {
      TaggedWord w;
      w.text = jw.at("t").template get<std::string>();
      const bool has_c = jw.contains("c") && !jw.at("c").is_null();
      const bool has_p = jw.contains("p") && !jw.at("p").is_null();
      if (has_c != has_p) throw DatasetError("word '" + w.text + "' has only one of category/person");
      if (has_c) w.entity = EntityLabel{jw.at("c").template get<std::string>(), jw.at("p").template get<std::string>()};
      line.push_back(std::move(w));
    }
    out.push_back(std::move(line));
  }
  return out;
}

inline std::string manifest_line(const ManifestRow& row) {
  nlohmann::ordered_json j;
  j["id"] = row.id;
  j["image"] = row.image;
  j["lines"] = lines_to_json(row.record);
  j["split"] = row.split;
  if (!row.boxes.empty()) {
    nlohmann::ordered_json b = nlohmann::ordered_json::array();
    for (auto [t, bt] : row.boxes) b.push_back({t, bt});
    j["boxes"] = std::move(b);
  }
  return j.dump();
}

inline ManifestRow parse_manifest_line(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ManifestRow row;
  row.id = j.at("id").get<std::string>();
  row.image = j.value("image", std::string{});
  row.split = j.value("split", std::string{});
  row.record.id = row.id;
  row.record.lines = lines_from_json(j.at("lines"));
  if (j.contains("boxes"))
    for (const auto& b : j.at("boxes")) row.boxes.emplace_back(b.at(0).get<int>(), b.at(1).get<int>());
  return row;
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open manifest '" + path.string() + "'");
  DatasetManifest m;
  m.path = path;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      m.rows.push_back(parse_manifest_line(line));
    } catch (const std::exception& e) {
      throw DatasetError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return m;
}

// Per-record seed is seed + index.
inline std::pair<Record, GrayImage> synth_record(const DatasetConfig& cfg, int index) {
  const std::uint64_t s = cfg.seed + static_cast<std::uint64_t>(index);
  Record rec = generate_record(s, cfg.grammar);
  char id[32];
  std::snprintf(id, sizeof(id), "rec_%05d", index);
  rec.id = id;
  GrayImage img = render_record(rec, s, cfg.render);
  return {std::move(rec), std::move(img)};
}

// Split labels for each record index: a seeded shuffle, then train/valid/test
// blocks sized by rounding the configured fractions.
inline std::vector<std::string> assign_splits(int n, const SplitFractions& f, std::uint64_t seed) {
  if (f.train < 0 || f.valid < 0 || f.test < 0 || std::abs(f.train + f.valid + f.test - 1.0) > 1e-9)
    throw ConfigError("split fractions must be non-negative and sum to 1");
  const int n_train = static_cast<int>(std::llround(f.train * n));
  const int n_valid = std::min(n - n_train, static_cast<int>(std::llround(f.valid * n)));
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(mix_seed(seed, 0x73706c6974ULL));
  rng.shuffle(order.begin(), order.end());
  std::vector<std::string> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    out[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = i < n_train ? "train" : (i < n_train + n_valid ? "valid" : "test");
  return out;
}

// Checks that every charset symbol occurs in some training record.
inline void check_charset_coverage(const std::vector<ManifestRow>& rows, const std::string& charset) {
  std::set<char> seen;
  for (const auto& r : rows) {
    if (r.split != "train") continue;
    for (const auto& line : r.record.lines) {
      if (line.size() > 1) seen.insert(' ');
      for (const auto& w : line) seen.insert(w.text.begin(), w.text.end());
    }
  }
  for (char c : charset)
    if (!seen.count(c))
      throw DatasetError(std::string("charset symbol '") + c + "' never appears in the training split");
}

// Writes images/<id>.png and manifest.jsonl under out_dir.
inline DatasetManifest build_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir) {
  validate_grammar(cfg.grammar);
  validate_render(cfg.render);
  if (cfg.num_records < 1) throw ConfigError("num_records must be positive");
  const auto splits = assign_splits(cfg.num_records, cfg.split, cfg.seed);

  std::vector<ManifestRow> rows(static_cast<std::size_t>(cfg.num_records));
  std::vector<GrayImage> images(static_cast<std::size_t>(cfg.num_records));
  parallel_for(cfg.num_records, cfg.threads, [&](int i) {
    auto [rec, img] = synth_record(cfg, i);
    auto& row = rows[static_cast<std::size_t>(i)];
    row.id = rec.id;
    row.image = "images/" + rec.id + ".png";
    row.split = splits[static_cast<std::size_t>(i)];
    row.boxes = img.line_boxes;
    row.record = std::move(rec);
    images[static_cast<std::size_t>(i)] = std::move(img);
  });
  if (cfg.num_records >= 200) check_charset_coverage(rows, cfg.grammar.charset);

  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw DatasetError("cannot create '" + (out_dir / "images").string() + "': " + ec.message());
  for (std::size_t i = 0; i < rows.size(); ++i) write_png(out_dir / rows[i].image, images[i]);
  DatasetManifest m;
  m.path = out_dir / "manifest.jsonl";
  std::ofstream out(m.path, std::ios::binary);
  if (!out) throw DatasetError("cannot write '" + m.path.string() + "'");
  for (const auto& r : rows) out << manifest_line(r) << '\n';
  if (!out) throw DatasetError("write failed for '" + m.path.string() + "'");
  m.rows = std::move(rows);
  return m;
}

// Image plus line boxes for a manifest row, resolved relative to the manifest.
inline GrayImage load_row_image(const DatasetManifest& m, const ManifestRow& row) {
  GrayImage img = read_png(m.path.parent_path() / row.image);
  img.line_boxes = row.boxes;
  return img;
}

inline void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = nlohmann::json{{"grammar", c.grammar},
                     {"render", c.render},
                     {"num_records", c.num_records},
                     {"split", {{"train", c.split.train}, {"valid", c.split.valid}, {"test", c.split.test}}},
                     {"seed", c.seed}};
}

}  // namespace htrner
