#pragma once

// Template grammar for synthetic marriage-record style text with entity
// labels. Templates are space-separated tokens; `{category:person}` is an
// entity slot filled from the category lexicon, anything else is a literal
// plain word.

#include "htrner/record.hpp"
#include "htrner/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace htrner {

struct TemplateToken {
  std::string literal;                 // plain word when entity is empty
  std::optional<EntityLabel> entity;   // slot
};

struct GrammarConfig {
  std::vector<std::string> categories{"name", "surname", "occupation", "location", "state", "other"};
  std::vector<std::string> persons{"husband",        "wife",         "husbands_father", "husbands_mother",
                                   "wifes_father",   "wifes_mother", "other_person",    "none"};
  std::map<std::string, std::vector<std::string>> lexicons{
      {"name",
       {"joan", "pere", "maria", "anna", "jaume", "miquel", "francesc", "antoni", "eulalia", "caterina", "josep",
        "elisabet", "magdalena", "jeroni", "rafel", "joana", "margarida", "esteve", "wenceslau", "ximena"}},
      {"surname",
       {"puig", "vila", "soler", "ferrer", "pujol", "roca", "serra", "font", "vidal", "casas", "oliver", "bosch",
        "quintana", "xammar", "zamora", "kolb", "gelabert", "riera"}},
      {"occupation",
       {"pages", "teixidor", "sastre", "mariner", "fuster", "paraire", "sabater", "botiguer", "mercader",
        "traginer", "pescador", "hortola"}},
      {"location",
       {"barcelona", "vic", "girona", "mataro", "sabadell", "terrassa", "badalona", "manresa", "reus", "tortosa",
        "lleida", "olot"}},
      {"state", {"viudo", "viuda", "donsella", "solter", "fadri"}},
      {"other", {"quondam", "difunt", "honorable"}},
  };
  std::vector<std::string> templates{
      "dit dia rebere de {name:husband} {surname:husband} {occupation:husband} de {location:husband} ab "
      "{name:wife} {state:wife}",
      "{name:husband} {surname:husband} {occupation:husband} fill de {name:husbands_father} "
      "{surname:husbands_father} y de {name:husbands_mother} ab {name:wife} filla de {name:wifes_father}",
      "rebere de {name:husband} {occupation:husband} habitant en {location:husband} ab {name:wife} "
      "{surname:wife} {state:wife}",
      "{name:husband} {surname:husband} {state:husband} ab {name:wife} filla de {name:wifes_father} "
      "{surname:wifes_father} y {name:wifes_mother}",
      "{name:husband} {surname:husband} ab {name:wife} {surname:wife}",
      "dit dia {name:husband} {occupation:husband} ab {name:wife} viuda de {name:other_person} "
      "{surname:other_person} {other:none}",
      "{name:husband} {surname:husband} ab {name:wife} de {location:wife} filla de {name:wifes_father} "
      "{occupation:wifes_father} y {surname:wifes_mother}",
  };
  std::string charset = "abcdefghijklmnopqrstuvwxyz ";
  int min_words_per_line = 2;
  int max_words_per_line = 5;
  int min_lines = 2;
  int max_lines = 4;
};

inline std::vector<TemplateToken> parse_template(const std::string& tmpl) {
  std::vector<TemplateToken> out;
  std::istringstream in(tmpl);
  std::string tok;
  while (in >> tok) {
    if (tok.front() == '{') {
      const auto colon = tok.find(':');
      if (tok.back() != '}' || colon == std::string::npos)
        throw ConfigError("malformed template slot '" + tok + "' (expected {category:person})");
      out.push_back({"", EntityLabel{tok.substr(1, colon - 1), tok.substr(colon + 1, tok.size() - colon - 2)}});
    } else {
      out.push_back({tok, std::nullopt});
    }
  }
  if (out.empty()) throw ConfigError("empty template");
  return out;
}

inline bool in_charset(const std::string& word, const std::string& charset) {
  return std::all_of(word.begin(), word.end(), [&](char c) { return charset.find(c) != std::string::npos; });
}

// Checks every GrammarConfig invariant; throws ConfigError naming the problem.
inline void validate_grammar(const GrammarConfig& cfg) {
  if (cfg.charset.empty()) throw ConfigError("grammar charset is empty");
  if (cfg.templates.empty()) throw ConfigError("grammar has no templates");
  if (cfg.min_words_per_line < 1 || cfg.max_words_per_line < cfg.min_words_per_line)
    throw ConfigError("grammar words-per-line range is invalid");
  if (cfg.min_lines < 1 || cfg.max_lines < cfg.min_lines) throw ConfigError("grammar lines range is invalid");
  const std::set<std::string> cats(cfg.categories.begin(), cfg.categories.end());
  const std::set<std::string> pers(cfg.persons.begin(), cfg.persons.end());
  if (cats.size() != cfg.categories.size()) throw ConfigError("duplicate category in grammar");
  if (pers.size() != cfg.persons.size()) throw ConfigError("duplicate person in grammar");
  for (const auto& [cat, words] : cfg.lexicons) {
    for (const auto& w : words)
      if (!is_word_text(w) || !in_charset(w, cfg.charset))
        throw ConfigError("lexicon word '" + w + "' of category '" + cat + "' uses characters outside the charset");
  }
  for (const auto& t : cfg.templates) {
    const int n = static_cast<int>(parse_template(t).size());
    const int lo = std::max(cfg.min_lines, (n + cfg.max_words_per_line - 1) / cfg.max_words_per_line);
    const int hi = std::min(cfg.max_lines, n / cfg.min_words_per_line);
    if (lo > hi) throw ConfigError("template '" + t + "' cannot be laid out within the configured line limits");
    for (const auto& tok : parse_template(t)) {
      if (!tok.entity) {
        if (!is_word_text(tok.literal) || !in_charset(tok.literal, cfg.charset))
          throw ConfigError("template word '" + tok.literal + "' uses characters outside the charset");
        continue;
      }
      if (!cats.count(tok.entity->category))
        throw ConfigError("template references undeclared category '" + tok.entity->category + "'");
      if (!pers.count(tok.entity->person))
        throw ConfigError("template references undeclared person '" + tok.entity->person + "'");
      auto it = cfg.lexicons.find(tok.entity->category);
      if (it == cfg.lexicons.end() || it->second.empty())
        throw ConfigError("empty lexicon for referenced category '" + tok.entity->category + "'");
    }
  }
}

// (category, person) pairs realizable by the templates, ordered by their
// position in the declared category and person lists.
inline std::vector<EntityLabel> observed_pairs(const GrammarConfig& cfg) {
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto& t : cfg.templates)
    for (const auto& tok : parse_template(t)) {
      if (!tok.entity) continue;
      const auto ci = std::find(cfg.categories.begin(), cfg.categories.end(), tok.entity->category) - cfg.categories.begin();
      const auto pi = std::find(cfg.persons.begin(), cfg.persons.end(), tok.entity->person) - cfg.persons.begin();
      seen.insert({static_cast<std::size_t>(ci), static_cast<std::size_t>(pi)});
    }
  std::vector<EntityLabel> out;
  for (auto [ci, pi] : seen) out.push_back({cfg.categories[ci], cfg.persons[pi]});
  return out;
}

// Deterministic in (seed, cfg).
inline Record generate_record(std::uint64_t seed, const GrammarConfig& cfg) {
  validate_grammar(cfg);
  Rng rng(mix_seed(seed, 0x6772616d6d6172ULL));
  const auto& tmpl = cfg.templates[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(cfg.templates.size()) - 1))];
  std::vector<TaggedWord> words;
  for (const auto& tok : parse_template(tmpl)) {
    if (!tok.entity) {
      words.push_back({tok.literal, std::nullopt});
      continue;
    }
    const auto& lex = cfg.lexicons.at(tok.entity->category);
    words.push_back({lex[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(lex.size()) - 1))], tok.entity});
  }
  const int n = static_cast<int>(words.size());
  const int lo = std::max(cfg.min_lines, (n + cfg.max_words_per_line - 1) / cfg.max_words_per_line);
  const int hi = std::min(cfg.max_lines, n / cfg.min_words_per_line);
  if (lo > hi)
    throw ConfigError("template with " + std::to_string(n) + " words cannot be laid out in " + std::to_string(cfg.min_lines) +
                      ".." + std::to_string(cfg.max_lines) + " lines of " + std::to_string(cfg.min_words_per_line) + ".." +
                      std::to_string(cfg.max_words_per_line) + " words");
  const int lines = rng.uniform_int(lo, hi);
  std::vector<int> counts(static_cast<std::size_t>(lines), cfg.min_words_per_line);
  int remaining = n - lines * cfg.min_words_per_line;
  while (remaining > 0) {
    const int i = rng.uniform_int(0, lines - 1);
    if (counts[static_cast<std::size_t>(i)] < cfg.max_words_per_line) {
      ++counts[static_cast<std::size_t>(i)];
      --remaining;
    }
  }
  Record rec;
  rec.id = "r" + std::to_string(seed);
  std::size_t w = 0;
  for (int c : counts) {
    Line line(words.begin() + static_cast<std::ptrdiff_t>(w), words.begin() + static_cast<std::ptrdiff_t>(w + c));
    rec.lines.push_back(std::move(line));
    w += static_cast<std::size_t>(c);
  }
  return rec;
}

inline void to_json(nlohmann::json& j, const GrammarConfig& g) {
  j = nlohmann::json{{"categories", g.categories},
                     {"persons", g.persons},
                     {"lexicons", g.lexicons},
                     {"templates", g.templates},
                     {"charset", g.charset},
                     {"min_words_per_line", g.min_words_per_line},
                     {"max_words_per_line", g.max_words_per_line},
                     {"min_lines", g.min_lines},
                     {"max_lines", g.max_lines}};
}

inline void from_json(const nlohmann::json& j, GrammarConfig& g) {
  if (j.contains("categories")) j.at("categories").get_to(g.categories);
  if (j.contains("persons")) j.at("persons").get_to(g.persons);
  if (j.contains("lexicons")) j.at("lexicons").get_to(g.lexicons);
  if (j.contains("templates")) j.at("templates").get_to(g.templates);
  if (j.contains("charset")) j.at("charset").get_to(g.charset);
  if (j.contains("min_words_per_line")) j.at("min_words_per_line").get_to(g.min_words_per_line);
  if (j.contains("max_words_per_line")) j.at("max_words_per_line").get_to(g.max_words_per_line);
  if (j.contains("min_lines")) j.at("min_lines").get_to(g.min_lines);
  if (j.contains("max_lines")) j.at("max_lines").get_to(g.max_lines);
}

}  // namespace htrner
