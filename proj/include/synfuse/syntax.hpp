#pragma once

// Per-subword syntactic features: the word's POS tag broadcast to every
// subword, a binary capitalization flag, and the subword's position within
// its word (B, M, E, or O for a whole-word subword).

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "synfuse/bpe.hpp"
#include "synfuse/error.hpp"
#include "synfuse/text.hpp"

namespace synfuse {

inline constexpr std::string_view kUnknownPos = "UNK_POS";

/// Ordered POS inventory. UNK_POS is always id 0.
class PosTagSet {
 public:
  /// The 17 universal POS tags.
  static PosTagSet universal() {
    return PosTagSet({"ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM", "PART", "PRON",
                      "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X"});
  }

  explicit PosTagSet(const std::vector<std::string>& tags) {
    add(std::string(kUnknownPos));
    for (const auto& t : tags) {
      if (t.empty() || t == kUnknownPos) continue;
      if (ids_.count(t)) throw UsageError("duplicate POS tag " + t);
      add(t);
    }
  }

  std::size_t size() const { return tags_.size(); }
  int unknown_id() const { return 0; }

  /// Unknown tag strings map to UNK_POS.
  int id(const std::string& tag) const {
    auto it = ids_.find(tag);
    return it == ids_.end() ? unknown_id() : it->second;
  }

  const std::string& tag(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tags_.size()) throw UsageError("POS id out of range");
    return tags_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& tags() const { return tags_; }

  /// One tag per line, UNK_POS first.
  std::string serialize() const { return text::join(tags_, "\n") + "\n"; }

  static PosTagSet deserialize(std::string_view s) {
    auto tags = text::split_whitespace(s);
    if (tags.empty() || tags.front() != kUnknownPos) throw DataFormatError("tagset must start with UNK_POS");
    return PosTagSet(tags);
  }

  bool operator==(const PosTagSet& other) const { return tags_ == other.tags_; }

 private:
  void add(std::string t) {
    ids_.emplace(t, static_cast<int>(tags_.size()));
    tags_.push_back(std::move(t));
  }

  std::vector<std::string> tags_;
  std::unordered_map<std::string, int> ids_;
};

enum class SubwordPosition : int { begin = 0, middle = 1, end = 2, only = 3 };

inline constexpr std::size_t kNumSubwordPositions = 4;

inline char position_letter(SubwordPosition p) {
  constexpr std::array<char, 4> letters = {'B', 'M', 'E', 'O'};
  return letters[static_cast<std::size_t>(p)];
}

struct FeatureTriple {
  int pos_id = 0;
  int case_id = 0;
  SubwordPosition position = SubwordPosition::only;

  int position_id() const { return static_cast<int>(position); }
  bool operator==(const FeatureTriple&) const = default;
};

struct AnnotatedWord {
  std::string surface;
  std::string pos;
};

/// A source sentence at word level, plus its aligned subword stream once
/// annotate() has run. features[i] describes subwords[i]; word_index[i] is the
/// originating word.
struct AnnotatedSentence {
  std::vector<AnnotatedWord> words;
  std::vector<std::string> subwords;
  std::vector<FeatureTriple> features;
  std::vector<std::size_t> word_index;

  std::size_t length() const { return subwords.size(); }

  std::string surface_text() const {
    std::string out;
    for (const auto& w : words) {
      if (!out.empty()) out += ' ';
      out += w.surface;
    }
    return out;
  }
};

/// Every subword inherits the POS of its word.
inline std::vector<int> propagate_pos(int word_pos_id, const Segmentation& seg) {
  return std::vector<int>(seg.size(), word_pos_id);
}

inline std::vector<std::string> propagate_pos(const std::string& word_pos, const Segmentation& seg) {
  return std::vector<std::string>(seg.size(), word_pos);
}

/// 1 iff the first character is an uppercase letter. Recognizes ASCII,
/// Latin-1, Latin Extended-A, Greek and Cyrillic capitals; anything else,
/// including digits and punctuation, counts as uncapitalized.
inline int case_feature(std::string_view word) {
  const std::uint32_t cp = text::first_code_point(word);
  if (cp >= 'A' && cp <= 'Z') return 1;
  if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) return 1;
  if (cp >= 0x100 && cp <= 0x17F && cp != 0x138 && cp != 0x149) {
    // Latin Extended-A alternates capital/small, with the parity flipping
    // between the 0x139-0x148 and 0x179-0x17E blocks.
    const bool odd_block = (cp >= 0x139 && cp <= 0x148) || (cp >= 0x179 && cp <= 0x17E);
    return ((cp % 2 == 1) == odd_block) ? 1 : 0;
  }
  if (cp >= 0x391 && cp <= 0x3A9 && cp != 0x3A2) return 1;
  if (cp >= 0x400 && cp <= 0x42F) return 1;
  return 0;
}

/// O for a single subword, B E for two, B M... E for three or more.
inline std::vector<SubwordPosition> subword_position_tags(const Segmentation& seg) {
  const std::size_t k = seg.size();
  if (k == 0) return {};
  if (k == 1) return {SubwordPosition::only};
  std::vector<SubwordPosition> tags(k, SubwordPosition::middle);
  tags.front() = SubwordPosition::begin;
  tags.back() = SubwordPosition::end;
  return tags;
}

/// Deterministic POS guess for corpora without a tag column. Rules, first
/// match wins:
///   no letters and no digits -> PUNCT;  digits only (with , . -) -> NUM
///   closed-class lexicon (determiners, pronouns, adpositions, conjunctions,
///   auxiliaries, a few particles) -> the listed tag
///   capitalized -> PROPN
///   suffix -ly -> ADV;  -ing -ed -ize -ise -ify -> VERB
///   -ous -ful -ive -able -ible -al -ic -less -ish -> ADJ
///   otherwise NOUN
inline std::string fallback_pos(std::string_view word) {
  bool has_alpha = false;
  bool has_digit = false;
  bool numeric = !word.empty();
  for (unsigned char c : word) {
    if (std::isalpha(c) || c >= 0x80) has_alpha = true;
    if (std::isdigit(c)) has_digit = true;
    if (!std::isdigit(c) && c != ',' && c != '.' && c != '-') numeric = false;
  }
  if (!has_alpha && !has_digit) return "PUNCT";
  if (numeric && has_digit) return "NUM";

  std::string lower(word);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });

  static const std::unordered_map<std::string, std::string> lexicon = {
      {"the", "DET"},    {"a", "DET"},      {"an", "DET"},     {"this", "DET"},   {"that", "DET"},
      {"these", "DET"},  {"those", "DET"},  {"every", "DET"},  {"some", "DET"},   {"i", "PRON"},
      {"you", "PRON"},   {"he", "PRON"},    {"she", "PRON"},   {"it", "PRON"},    {"we", "PRON"},
      {"they", "PRON"},  {"me", "PRON"},    {"him", "PRON"},   {"her", "PRON"},   {"us", "PRON"},
      {"them", "PRON"},  {"in", "ADP"},     {"on", "ADP"},     {"at", "ADP"},     {"of", "ADP"},
      {"to", "ADP"},     {"with", "ADP"},   {"from", "ADP"},   {"by", "ADP"},     {"for", "ADP"},
      {"into", "ADP"},   {"and", "CCONJ"},  {"or", "CCONJ"},   {"but", "CCONJ"},  {"because", "SCONJ"},
      {"if", "SCONJ"},   {"while", "SCONJ"}, {"is", "AUX"},    {"are", "AUX"},    {"was", "AUX"},
      {"were", "AUX"},   {"be", "AUX"},     {"been", "AUX"},   {"has", "AUX"},    {"have", "AUX"},
      {"had", "AUX"},    {"will", "AUX"},   {"can", "AUX"},    {"not", "PART"},   {"'s", "PART"},
  };
  if (auto it = lexicon.find(lower); it != lexicon.end()) return it->second;
  if (case_feature(word) == 1) return "PROPN";

  const auto ends_with = [&](std::string_view suffix) {
    return lower.size() > suffix.size() + 1 && std::string_view(lower).substr(lower.size() - suffix.size()) == suffix;
  };
  if (ends_with("ly")) return "ADV";
  for (auto s : {"ing", "ed", "ize", "ise", "ify"}) {
    if (ends_with(s)) return "VERB";
  }
  for (auto s : {"ous", "ful", "ive", "able", "ible", "al", "ic", "less", "ish"}) {
    if (ends_with(s)) return "ADJ";
  }
  return "NOUN";
}

/// Fill the subword fields of a word-level sentence.
inline AnnotatedSentence annotate(AnnotatedSentence sentence, const MergeTable& merges, const PosTagSet& tagset) {
  sentence.subwords.clear();
  sentence.features.clear();
  sentence.word_index.clear();
  for (std::size_t w = 0; w < sentence.words.size(); ++w) {
    const auto& word = sentence.words[w];
    const Segmentation seg = encode_word(word.surface, merges);
    const auto pos_ids = propagate_pos(tagset.id(word.pos), seg);
    const int cased = case_feature(word.surface);
    const auto positions = subword_position_tags(seg);
    const auto syms = seg.symbols();
    for (std::size_t i = 0; i < seg.size(); ++i) {
      sentence.subwords.push_back(syms[i]);
      sentence.features.push_back({pos_ids[i], cased, positions[i]});
      sentence.word_index.push_back(w);
    }
  }
  return sentence;
}

/// Read the annotated-TSV format: "surface<TAB>POS" per token, blank line
/// between sentences. A file may also omit the POS column entirely, in which
/// case tags come from fallback_pos; mixing the two forms is an error.
inline std::vector<AnnotatedSentence> read_annotated(std::istream& in) {
  std::vector<AnnotatedSentence> out;
  AnnotatedSentence current;
  std::string line;
  std::size_t lineno = 0;
  int columns = 0;
  while (std::getline(in, line)) {
    ++lineno;
    text::strip_cr(line);
    if (text::trim(line).empty()) {
      if (!current.words.empty()) out.push_back(std::move(current));
      current = {};
      continue;
    }
    auto parts = text::split(line, '\t');
    const int n = static_cast<int>(parts.size());
    if (n < 1 || n > 2 || (columns != 0 && n != columns)) {
      throw DataFormatError("expected " + std::string(columns == 1 ? "1 column" : "2 columns") + " (surface<TAB>POS), got " +
                                std::to_string(n),
                            lineno);
    }
    columns = n;
    if (parts[0].empty() || text::split_whitespace(parts[0]).size() != 1) {
      throw DataFormatError("surface form must be a single non-empty token", lineno);
    }
    std::string pos = n == 2 ? std::string(text::trim(parts[1])) : fallback_pos(parts[0]);
    if (pos.empty()) throw DataFormatError("empty POS column", lineno);
    current.words.push_back({std::move(parts[0]), std::move(pos)});
  }
  if (!current.words.empty()) out.push_back(std::move(current));
  return out;
}

inline std::vector<AnnotatedSentence> read_annotated_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open annotated file " + path);
  return read_annotated(in);
}

/// Sentences whose words have POS from the fallback heuristic.
inline AnnotatedSentence from_plain_text(std::string_view sentence) {
  AnnotatedSentence s;
  for (auto& w : text::split_whitespace(sentence)) {
    std::string pos = fallback_pos(w);
    s.words.push_back({std::move(w), std::move(pos)});
  }
  return s;
}

inline void write_annotated(std::ostream& out, std::span<const AnnotatedSentence> sentences) {
  for (const auto& s : sentences) {
    for (const auto& w : s.words) out << w.surface << '\t' << w.pos << '\n';
    out << '\n';
  }
}

/// Subword-level dump: "subword<TAB>pos<TAB>case<TAB>postag".
inline void write_subword_features(std::ostream& out, std::span<const AnnotatedSentence> sentences,
                                   const PosTagSet& tagset) {
  for (const auto& s : sentences) {
    for (std::size_t i = 0; i < s.subwords.size(); ++i) {
      const auto& f = s.features[i];
      out << s.subwords[i] << '\t' << tagset.tag(f.pos_id) << '\t' << f.case_id << '\t' << position_letter(f.position)
          << '\n';
    }
    out << '\n';
  }
}

struct ParallelExample {
  AnnotatedSentence source;
  std::string target;
};

/// Read "<prefix>.src.tsv" (annotated) and "<prefix>.tgt.txt" (one sentence
/// per line, aligned by sentence index).
inline std::vector<ParallelExample> read_parallel(const std::string& prefix) {
  auto sources = read_annotated_file(prefix + ".src.tsv");
  std::ifstream tgt(prefix + ".tgt.txt");
  if (!tgt) throw UsageError("cannot open " + prefix + ".tgt.txt");
  std::vector<std::string> targets;
  std::string line;
  while (std::getline(tgt, line)) {
    text::strip_cr(line);
    targets.push_back(text::normalize_whitespace(line));
  }
  while (!targets.empty() && targets.back().empty()) targets.pop_back();
  if (targets.size() != sources.size()) {
    throw DataFormatError("source has " + std::to_string(sources.size()) + " sentences but target has " +
                          std::to_string(targets.size()));
  }
  std::vector<ParallelExample> out;
  out.reserve(sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    if (targets[i].empty()) throw DataFormatError("empty target sentence", i + 1);
    out.push_back({std::move(sources[i]), std::move(targets[i])});
  }
  return out;
}

inline void write_parallel(const std::string& prefix, std::span<const ParallelExample> data) {
  std::ofstream src(prefix + ".src.tsv");
  std::ofstream tgt(prefix + ".tgt.txt");
  if (!src || !tgt) throw UsageError("cannot write parallel corpus at " + prefix);
  for (const auto& ex : data) {
    for (const auto& w : ex.source.words) src << w.surface << '\t' << w.pos << '\n';
    src << '\n';
    tgt << ex.target << '\n';
  }
}

}  // namespace synfuse
