#pragma once

// Output class set and the decoder target format:
//   <sop> [tags] w o r d ' ' [tags] w o r d <eol> ... <eop>
// Tag tokens precede the word they label. Joint scheme: one [category_person]
// token; separate scheme: [category] then [person].

#include "htrner/grammar.hpp"
#include "htrner/record.hpp"
#include "htrner/rng.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace htrner {

class EncodingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TagScheme { joint, separate };

inline std::string to_string(TagScheme s) { return s == TagScheme::joint ? "joint" : "separate"; }
inline TagScheme parse_tag_scheme(const std::string& s) {
  if (s == "joint") return TagScheme::joint;
  if (s == "separate") return TagScheme::separate;
  throw ConfigError("unknown tagging scheme '" + s + "' (expected joint|separate)");
}

struct TokenSequence {
  std::vector<int> tokens;
  bool truncated = false;
  std::size_t length() const { return tokens.size(); }
  bool operator==(const TokenSequence&) const = default;
};

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kSop = 1;
  static constexpr int kEol = 2;
  static constexpr int kEop = 3;

  enum class Kind { marker, character, joint_tag, category_tag, person_tag };

  Vocab() = default;

  // observed_pairs is consulted only by the joint scheme.
  static Vocab build(TagScheme scheme, const std::string& charset, const std::vector<std::string>& categories,
                     const std::vector<std::string>& persons, const std::vector<EntityLabel>& observed_pairs) {
    if (charset.empty()) throw ConfigError("vocab charset is empty");
    Vocab v;
    v.scheme_ = scheme;
    v.add("<pad>", Kind::marker, {}, {});
    v.add("<sop>", Kind::marker, {}, {});
    v.add("<eol>", Kind::marker, {}, {});
    v.add("<eop>", Kind::marker, {}, {});
    for (char c : charset) v.add(std::string(1, c), Kind::character, {}, {});
    if (scheme == TagScheme::joint) {
      for (const auto& p : observed_pairs) {
        if (std::find(categories.begin(), categories.end(), p.category) == categories.end() ||
            std::find(persons.begin(), persons.end(), p.person) == persons.end())
          throw ConfigError("observed pair (" + p.category + ", " + p.person + ") not in the declared tag sets");
        v.add("[" + p.category + "_" + p.person + "]", Kind::joint_tag, p.category, p.person);
      }
    } else {
      for (const auto& c : categories) v.add("[" + c + "]", Kind::category_tag, c, {});
      for (const auto& p : persons) v.add("[" + p + "]", Kind::person_tag, {}, p);
    }
    return v;
  }

  static Vocab from_grammar(TagScheme scheme, const GrammarConfig& g) {
    return build(scheme, g.charset, g.categories, g.persons, observed_pairs(g));
  }

  TagScheme scheme() const { return scheme_; }
  int size() const { return static_cast<int>(labels_.size()); }
  const std::string& label(int i) const { return labels_.at(static_cast<std::size_t>(i)); }
  const std::vector<std::string>& labels() const { return labels_; }
  Kind kind(int i) const { return entries_.at(static_cast<std::size_t>(i)).kind; }
  bool is_tag(int i) const { return kind(i) != Kind::marker && kind(i) != Kind::character; }
  std::optional<int> find(const std::string& label) const {
    auto it = index_.find(label);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  int char_index(char c) const {
    auto it = index_.find(std::string(1, c));
    if (it == index_.end() || kind(it->second) != Kind::character)
      throw EncodingError(std::string("character '") + c + "' is not in the vocabulary");
    return it->second;
  }
  const std::string& tag_category(int i) const { return entries_.at(static_cast<std::size_t>(i)).category; }
  const std::string& tag_person(int i) const { return entries_.at(static_cast<std::size_t>(i)).person; }

  nlohmann::json to_json() const {
    nlohmann::json entries = nlohmann::json::array();
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      const auto& e = entries_[i];
      static const char* kinds[] = {"marker", "character", "joint_tag", "category_tag", "person_tag"};
      nlohmann::json je = {{"label", labels_[i]}, {"kind", kinds[static_cast<int>(e.kind)]}};
      if (!e.category.empty()) je["category"] = e.category;
      if (!e.person.empty()) je["person"] = e.person;
      entries.push_back(std::move(je));
    }
    return {{"scheme", htrner::to_string(scheme_)}, {"labels", entries}};
  }

  static Vocab from_json(const nlohmann::json& j) {
    Vocab v;
    v.scheme_ = parse_tag_scheme(j.at("scheme").get<std::string>());
    for (const auto& je : j.at("labels")) {
      const auto k = je.at("kind").get<std::string>();
      Kind kind = k == "marker"         ? Kind::marker
                  : k == "character"    ? Kind::character
                  : k == "joint_tag"    ? Kind::joint_tag
                  : k == "category_tag" ? Kind::category_tag
                  : k == "person_tag"   ? Kind::person_tag
                                        : throw ConfigError("unknown vocab label kind '" + k + "'");
      v.add(je.at("label").get<std::string>(), kind, je.value("category", std::string{}), je.value("person", std::string{}));
    }
    if (v.size() < 4 || v.label(kPad) != "<pad>" || v.label(kSop) != "<sop>" || v.label(kEol) != "<eol>" || v.label(kEop) != "<eop>")
      throw ConfigError("vocab JSON does not start with the structural markers");
    return v;
  }

  // Stable hash of the canonical JSON form.
  std::string fingerprint() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(to_json().dump())));
    return buf;
  }

 private:
  struct Entry {
    Kind kind;
    std::string category;
    std::string person;
  };

  void add(const std::string& label, Kind kind, std::string category, std::string person) {
    if (index_.count(label)) throw ConfigError("duplicate vocabulary label '" + label + "'");
    index_[label] = static_cast<int>(labels_.size());
    labels_.push_back(label);
    entries_.push_back({kind, std::move(category), std::move(person)});
  }

  TagScheme scheme_ = TagScheme::joint;
  std::vector<std::string> labels_;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> index_;
};

inline TokenSequence encode_target(const Record& rec, const Vocab& v, bool include_tags) {
  TokenSequence seq;
  seq.tokens.push_back(Vocab::kSop);
  const int space = v.char_index(' ');
  for (std::size_t li = 0; li < rec.lines.size(); ++li) {
    if (li) seq.tokens.push_back(Vocab::kEol);
    const auto& line = rec.lines[li];
    for (std::size_t wi = 0; wi < line.size(); ++wi) {
      if (wi) seq.tokens.push_back(space);
      const auto& w = line[wi];
      if (include_tags && w.entity) {
        if (v.scheme() == TagScheme::joint) {
          auto t = v.find("[" + w.entity->category + "_" + w.entity->person + "]");
          if (!t) throw EncodingError("no joint tag for (" + w.entity->category + ", " + w.entity->person + ")");
          seq.tokens.push_back(*t);
        } else {
          auto c = v.find("[" + w.entity->category + "]");
          auto p = v.find("[" + w.entity->person + "]");
          if (!c || v.kind(*c) != Vocab::Kind::category_tag) throw EncodingError("no category tag '" + w.entity->category + "'");
          if (!p || v.kind(*p) != Vocab::Kind::person_tag) throw EncodingError("no person tag '" + w.entity->person + "'");
          seq.tokens.push_back(*c);
          seq.tokens.push_back(*p);
        }
      }
      for (char ch : w.text) seq.tokens.push_back(v.char_index(ch));
    }
  }
  seq.tokens.push_back(Vocab::kEop);
  return seq;
}

struct DecodeDiagnostics {
  int orphan_tags = 0;        // tag not followed by a word, or displaced by a tag of the same kind
  int duplicate_person = 0;   // second person tag before a word (separate scheme)
  int incomplete_entity = 0;  // word with only a category or only a person tag
  int missing_sop = 0;
  int missing_eop = 0;
  int stray_markers = 0;      // <pad> or <sop> between the boundary markers

  int total() const { return orphan_tags + duplicate_person + incomplete_entity + missing_sop + missing_eop + stray_markers; }
  bool operator==(const DecodeDiagnostics&) const = default;
  DecodeDiagnostics& operator+=(const DecodeDiagnostics& o) {
    orphan_tags += o.orphan_tags;
    duplicate_person += o.duplicate_person;
    incomplete_entity += o.incomplete_entity;
    missing_sop += o.missing_sop;
    missing_eop += o.missing_eop;
    stray_markers += o.stray_markers;
    return *this;
  }
  nlohmann::json to_json() const {
    return {{"orphan_tags", orphan_tags},   {"duplicate_person", duplicate_person}, {"incomplete_entity", incomplete_entity},
            {"missing_sop", missing_sop},   {"missing_eop", missing_eop},           {"stray_markers", stray_markers}};
  }
};

struct DecodedRecord {
  Record record;
  DecodeDiagnostics diagnostics;
};

// Inverse of encode_target that tolerates malformed model output. Tags label
// the next word; malformed tags are dropped and counted. Empty lines are
// dropped. Throws only for indices outside the vocabulary.
inline DecodedRecord decode_target(const TokenSequence& seq, const Vocab& v, std::string id = {}) {
  DecodedRecord out;
  out.record.id = std::move(id);
  auto& d = out.diagnostics;
  for (int t : seq.tokens)
    if (t < 0 || t >= v.size()) throw std::out_of_range("token index " + std::to_string(t) + " outside vocabulary of " + std::to_string(v.size()));

  Line line;
  std::string word;
  std::optional<int> joint, cat, person;
  auto pending = [&] { return (joint ? 1 : 0) + (cat ? 1 : 0) + (person ? 1 : 0); };
  auto finish_word = [&] {
    if (word.empty()) return;
    TaggedWord w{word, std::nullopt};
    if (joint) {
      w.entity = EntityLabel{v.tag_category(*joint), v.tag_person(*joint)};
    } else if (cat && person) {
      w.entity = EntityLabel{v.tag_category(*cat), v.tag_person(*person)};
    } else if (cat || person) {
      ++d.incomplete_entity;
    }
    joint.reset();
    cat.reset();
    person.reset();
    line.push_back(std::move(w));
    word.clear();
  };
  auto finish_line = [&] {
    finish_word();
    d.orphan_tags += pending();
    joint.reset();
    cat.reset();
    person.reset();
    if (!line.empty()) out.record.lines.push_back(std::move(line));
    line.clear();
  };

  std::size_t i = 0;
  if (seq.tokens.empty() || seq.tokens[0] != Vocab::kSop) ++d.missing_sop;
  else i = 1;
  bool ended = false;
  for (; i < seq.tokens.size() && !ended; ++i) {
    const int t = seq.tokens[i];
    switch (v.kind(t)) {
      case Vocab::Kind::marker:
        if (t == Vocab::kEop) ended = true;
        else if (t == Vocab::kEol) finish_line();
        else ++d.stray_markers;
        break;
      case Vocab::Kind::character:
        if (v.label(t) == " ") finish_word();
        else word += v.label(t);
        break;
      case Vocab::Kind::joint_tag:
        finish_word();
        if (joint) ++d.orphan_tags;
        joint = t;
        break;
      case Vocab::Kind::category_tag:
        finish_word();
        if (cat) ++d.orphan_tags;
        cat = t;
        break;
      case Vocab::Kind::person_tag:
        finish_word();
        if (person) ++d.duplicate_person;
        person = t;
        break;
    }
  }
  finish_line();
  if (!ended) ++d.missing_eop;
  return out;
}

}  // namespace htrner
