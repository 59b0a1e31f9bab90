#pragma once

// Synthetic corpora for desk-scale experiments.
//
// make_toy_translation: an English-like source language with gold POS tags
// and a German-like target with grammatical gender, adjective inflection,
// verb-second word order and capitalized nouns.
//
// make_homograph_corpus: word-by-word translation where exactly one source
// token per sentence is a noun/verb homograph. Its translation is decided only
// by the POS tag supplied with the source, which is drawn 50/50 independently
// of the surrounding words.

#include <array>
#include <cctype>
#include <optional>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "synfuse/rng.hpp"
#include "synfuse/syntax.hpp"
#include "synfuse/text.hpp"

namespace synfuse::toy {

namespace detail {

struct Noun {
  const char* en;
  const char* de;
  int gender;  // 0 masculine, 1 feminine, 2 neuter
};

struct Verb {
  const char* en;
  const char* de;
};

inline constexpr std::array<Noun, 12> kNouns = {{
    {"dog", "Hund", 0},          {"cat", "Katze", 1},         {"house", "Haus", 2},
    {"teacher", "Lehrer", 0},    {"window", "Fenster", 2},    {"bicycle", "Fahrrad", 2},
    {"garden", "Garten", 0},     {"newspaper", "Zeitung", 1}, {"apple", "Apfel", 0},
    {"children", "Kinder", 2},   {"sunshine", "Sonnenschein", 0}, {"mountain", "Berg", 0},
}};

inline constexpr std::array<Verb, 8> kVerbs = {{
    {"sees", "sieht"},      {"likes", "mag"},       {"finds", "findet"},     {"paints", "malt"},
    {"carries", "traegt"}, {"follows", "folgt"},   {"visits", "besucht"},   {"remembers", "erinnert"},
}};

inline constexpr std::array<std::pair<const char*, const char*>, 6> kAdjectives = {{
    {"big", "gross"}, {"small", "klein"}, {"old", "alt"}, {"red", "rot"}, {"beautiful", "schoen"}, {"quiet", "leise"},
}};

inline constexpr std::array<std::pair<const char*, const char*>, 4> kAdverbs = {{
    {"today", "heute"}, {"often", "oft"}, {"rarely", "selten"}, {"yesterday", "gestern"},
}};

inline constexpr std::array<const char*, 5> kNames = {"Anna", "Bwelle", "Markus", "Lena", "Tobias"};

template <typename C>
const auto& pick(const C& c, Rng& rng) {
  return c[rng.below(c.size())];
}

}  // namespace detail

/// One noun phrase: (source words with tags, target words).
struct Phrase {
  std::vector<AnnotatedWord> source;
  std::vector<std::string> target;
};

inline Phrase noun_phrase(Rng& rng, bool subject) {
  using namespace detail;
  Phrase p;
  if (rng.below(5) == 0) {
    const char* name = pick(kNames, rng);
    p.source.push_back({name, "PROPN"});
    p.target.emplace_back(name);
    return p;
  }
  const Noun& n = pick(kNouns, rng);
  const bool definite = rng.below(3) != 0;
  p.source.push_back({definite ? "the" : "a", "DET"});
  // nominative (subject) vs accusative (object) only differs for masculine
  static constexpr std::array<const char*, 3> def_nom = {"der", "die", "das"};
  static constexpr std::array<const char*, 3> def_acc = {"den", "die", "das"};
  static constexpr std::array<const char*, 3> indef_nom = {"ein", "eine", "ein"};
  static constexpr std::array<const char*, 3> indef_acc = {"einen", "eine", "ein"};
  const auto g = static_cast<std::size_t>(n.gender);
  p.target.emplace_back(definite ? (subject ? def_nom[g] : def_acc[g]) : (subject ? indef_nom[g] : indef_acc[g]));
  if (rng.below(2) == 0) {
    const auto& adj = pick(kAdjectives, rng);
    p.source.push_back({adj.first, "ADJ"});
    std::string suffix;
    if (definite) {
      suffix = (!subject && g == 0) ? "en" : "e";
    } else {
      static constexpr std::array<const char*, 3> strong = {"er", "e", "es"};
      suffix = (!subject && g == 0) ? "en" : strong[g];
    }
    std::string stem = adj.second;
    if (stem.back() == 'e') stem.pop_back();
    p.target.push_back(stem + suffix);
  }
  p.source.push_back({n.en, "NOUN"});
  p.target.emplace_back(n.de);
  return p;
}

/// "subject verb object [adverb]" -> V2 target "subject verb [adverb] object".
/// With an adverb the source may instead start with it, which moves the
/// target subject after the verb.
inline std::vector<ParallelExample> make_toy_translation(std::size_t n, std::uint64_t seed) {
  using namespace detail;
  Rng rng(seed);
  std::vector<ParallelExample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Phrase subj = noun_phrase(rng, true);
    const Verb& v = pick(kVerbs, rng);
    const Phrase obj = noun_phrase(rng, false);
    const int adverb_mode = static_cast<int>(rng.below(3));  // 0 none, 1 trailing, 2 fronted
    const auto& adv = pick(kAdverbs, rng);

    ParallelExample ex;
    std::vector<std::string> tgt;
    auto& src = ex.source.words;
    if (adverb_mode == 2) {
      std::string fronted = adv.first;
      fronted[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(fronted[0])));
      src.push_back({fronted, "ADV"});
      src.push_back({",", "PUNCT"});
    }
    src.insert(src.end(), subj.source.begin(), subj.source.end());
    src.push_back({v.en, "VERB"});
    src.insert(src.end(), obj.source.begin(), obj.source.end());
    if (adverb_mode == 1) src.push_back({adv.first, "ADV"});
    src.push_back({".", "PUNCT"});

    if (adverb_mode == 2) {
      tgt.emplace_back(adv.second);
      tgt.emplace_back(v.de);
      tgt.insert(tgt.end(), subj.target.begin(), subj.target.end());
    } else {
      tgt.insert(tgt.end(), subj.target.begin(), subj.target.end());
      tgt.emplace_back(v.de);
      if (adverb_mode == 1) tgt.emplace_back(adv.second);
    }
    tgt.insert(tgt.end(), obj.target.begin(), obj.target.end());
    tgt.emplace_back(".");
    // sentence-initial capitalization on the target side
    tgt[0][0] = static_cast<char>(std::toupper(static_cast<unsigned char>(tgt[0][0])));
    ex.target = text::join(tgt);
    out.push_back(std::move(ex));
  }
  return out;
}

struct Homograph {
  const char* surface;
  const char* as_noun;
  const char* as_verb;
};

inline constexpr std::array<Homograph, 8> kHomographs = {{
    {"watch", "uhr", "schauen"},   {"fly", "fliege", "fliegen"},  {"book", "buch", "buchen"},
    {"light", "licht", "zuenden"}, {"ring", "ring", "klingeln"},  {"train", "zug", "trainieren"},
    {"fire", "feuer", "feuern"},   {"rock", "fels", "schaukeln"},
}};

struct HomographExample {
  ParallelExample pair;
  std::string expected;  // translation implied by the POS tag
  std::string other;     // translation of the other reading
  bool noun = false;
};

/// Sentences of 3-6 filler words with one homograph at a random position.
inline std::vector<HomographExample> make_homograph_corpus(std::size_t n, std::uint64_t seed) {
  static constexpr std::array<std::array<const char*, 3>, 16> fillers = {{
      {"we", "wir", "PRON"},      {"they", "sie", "PRON"},     {"often", "oft", "ADV"},
      {"quickly", "schnell", "ADV"}, {"blue", "blau", "ADJ"},   {"new", "neu", "ADJ"},
      {"here", "hier", "ADV"},    {"there", "dort", "ADV"},    {"and", "und", "CCONJ"},
      {"very", "sehr", "ADV"},    {"today", "heute", "ADV"},   {"never", "nie", "ADV"},
      {"old", "alt", "ADJ"},      {"small", "klein", "ADJ"},   {"again", "wieder", "ADV"},
      {"now", "jetzt", "ADV"},
  }};
  Rng rng(seed);
  std::vector<HomographExample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = 3 + rng.below(4);
    const std::size_t at = rng.below(len + 1);
    const Homograph& h = kHomographs[rng.below(kHomographs.size())];
    const bool noun = rng.below(2) == 0;
    HomographExample ex;
    std::vector<std::string> tgt;
    for (std::size_t k = 0; k <= len; ++k) {
      if (k == at) {
        ex.pair.source.words.push_back({h.surface, noun ? "NOUN" : "VERB"});
        tgt.emplace_back(noun ? h.as_noun : h.as_verb);
        continue;
      }
      const auto& f = fillers[rng.below(fillers.size())];
      ex.pair.source.words.push_back({f[0], f[2]});
      tgt.emplace_back(f[1]);
    }
    ex.pair.target = text::join(tgt);
    ex.expected = noun ? h.as_noun : h.as_verb;
    ex.other = noun ? h.as_verb : h.as_noun;
    ex.noun = noun;
    out.push_back(std::move(ex));
  }
  return out;
}

/// Sentence-classification toy task: label is "noun" when the first
/// homograph in the sentence is tagged NOUN, else "verb". Tokens are the same
/// regardless of label, so only POS input can separate the classes.
struct ClassificationExample {
  std::string label;
  AnnotatedSentence a;
  std::optional<AnnotatedSentence> b;
};

inline std::vector<ClassificationExample> make_pos_classification(std::size_t n, std::uint64_t seed, bool pairs) {
  const auto base = make_homograph_corpus(pairs ? 2 * n : n, seed);
  std::vector<ClassificationExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& first = base[pairs ? 2 * i : i];
    ClassificationExample ex;
    ex.label = first.noun ? "noun" : "verb";
    ex.a = first.pair.source;
    if (pairs) ex.b = base[2 * i + 1].pair.source;
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace synfuse::toy
