#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace htrner {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BoundsError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// A named-entity label: semantic category plus the person it refers to.
struct EntityLabel {
  std::string category;
  std::string person;
  bool operator==(const EntityLabel&) const = default;
};

struct TaggedWord {
  std::string text;
  std::optional<EntityLabel> entity;

  bool operator==(const TaggedWord&) const = default;
  bool is_entity() const { return entity.has_value(); }
};

using Line = std::vector<TaggedWord>;

struct Record {
  std::string id;
  std::vector<Line> lines;

  bool operator==(const Record&) const = default;

  int line_count() const { return static_cast<int>(lines.size()); }
  int word_count() const {
    int n = 0;
    for (const auto& l : lines) n += static_cast<int>(l.size());
    return n;
  }
  int tag_count() const {
    int m = 0;
    for (const auto& l : lines)
      for (const auto& w : l) m += w.is_entity() ? 1 : 0;
    return m;
  }

  // Plain transcription: words joined by ' ', lines joined by '\n'.
  std::string transcription() const {
    std::string out;
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (i) out += '\n';
      for (std::size_t j = 0; j < lines[i].size(); ++j) {
        if (j) out += ' ';
        out += lines[i][j].text;
      }
    }
    return out;
  }
};

inline bool is_word_text(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s)
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '[' || c == ']' || c == '{' || c == '}') return false;
  return true;
}

// Ground-truth invariants: at least one line, no empty lines, well-formed words.
inline void validate_record(const Record& r) {
  if (r.lines.empty()) throw ConfigError("record '" + r.id + "' has no lines");
  for (std::size_t i = 0; i < r.lines.size(); ++i) {
    if (r.lines[i].empty()) throw ConfigError("record '" + r.id + "' line " + std::to_string(i + 1) + " is empty");
    for (const auto& w : r.lines[i]) {
      if (!is_word_text(w.text)) throw ConfigError("record '" + r.id + "' has malformed word '" + w.text + "'");
      if (w.entity && (w.entity->category.empty() || w.entity->person.empty()))
        throw ConfigError("record '" + r.id + "' word '" + w.text + "' has a partial entity label");
    }
  }
}

struct EntityTriple {
  std::string text;
  std::string category;
  std::string person;
  bool operator==(const EntityTriple&) const = default;
};

// Tag-bearing words in reading order.
inline std::vector<EntityTriple> parse_entities(const Record& r) {
  std::vector<EntityTriple> out;
  for (const auto& l : r.lines)
    for (const auto& w : l)
      if (w.entity) out.push_back({w.text, w.entity->category, w.entity->person});
  return out;
}

}  // namespace htrner
