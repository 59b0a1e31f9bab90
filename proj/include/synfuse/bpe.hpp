#pragma once

// Byte-pair-encoding segmentation shared between source and target sides.
//
// Merges are learned over plain characters of whitespace-separated words. The
// end-of-word marker is not part of the learned symbols; it is attached to
// the last subword of every word when a segmentation is rendered as vocabulary
// symbols, which makes decoding exactly invertible.

#include <algorithm>
#include <array>
#include <cstddef>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "synfuse/error.hpp"
#include "synfuse/text.hpp"

namespace synfuse {

inline constexpr std::string_view kEndOfWord = "</w>";

struct Merge {
  std::string left;
  std::string right;

  std::string merged() const { return left + right; }
  bool operator==(const Merge&) const = default;
};

/// Ordered list of merge rules. Rank (position) decides application order.
class MergeTable {
 public:
  MergeTable() = default;

  explicit MergeTable(std::vector<Merge> merges) : merges_(std::move(merges)) {
    for (std::size_t i = 0; i < merges_.size(); ++i) {
      const auto& m = merges_[i];
      if (m.left.empty() || m.right.empty()) {
        throw DataFormatError("empty merge symbol", i + 1);
      }
      if (!rank_.emplace(key(m.left, m.right), i).second) {
        throw DataFormatError("duplicate merge pair '" + m.left + " " + m.right + "'", i + 1);
      }
    }
  }

  std::size_t size() const { return merges_.size(); }
  bool empty() const { return merges_.empty(); }
  const std::vector<Merge>& merges() const { return merges_; }

  std::optional<std::size_t> rank(const std::string& left, const std::string& right) const {
    auto it = rank_.find(key(left, right));
    if (it == rank_.end()) return std::nullopt;
    return it->second;
  }

  /// One merge per line: "left right".
  void save(std::ostream& out) const {
    for (const auto& m : merges_) out << m.left << ' ' << m.right << '\n';
  }

  static MergeTable load(std::istream& in) {
    std::vector<Merge> merges;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      text::strip_cr(line);
      if (line.empty()) continue;
      auto parts = text::split(line, ' ');
      if (parts.size() != 2 || parts[0].empty() || parts[1].empty()) {
        throw DataFormatError("expected 'left right' merge line", lineno);
      }
      merges.push_back({std::move(parts[0]), std::move(parts[1])});
    }
    return MergeTable(std::move(merges));
  }

  void save_file(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw UsageError("cannot write merges file " + path);
    save(out);
  }

  static MergeTable load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open merges file " + path);
    return load(in);
  }

  bool operator==(const MergeTable& other) const { return merges_ == other.merges_; }

 private:
  static std::string key(const std::string& l, const std::string& r) { return l + ' ' + r; }

  std::vector<Merge> merges_;
  std::unordered_map<std::string, std::size_t> rank_;
};

/// A word split into subwords. end_of_word is true only for the last piece.
struct Segmentation {
  std::string word;
  std::vector<std::string> subwords;
  std::vector<bool> end_of_word;

  std::size_t size() const { return subwords.size(); }

  /// Vocabulary symbols: the final subword carries the end-of-word marker.
  std::vector<std::string> symbols() const {
    std::vector<std::string> out;
    out.reserve(subwords.size());
    for (std::size_t i = 0; i < subwords.size(); ++i) {
      out.push_back(end_of_word[i] ? subwords[i] + std::string(kEndOfWord) : subwords[i]);
    }
    return out;
  }
};

/// Repeatedly merge the lowest-ranked adjacent pair until no pair is in the
/// table. All occurrences of the chosen pair are merged left to right.
inline std::vector<std::string> apply_merges(std::vector<std::string> symbols,
                                             const MergeTable& merges) {
  if (merges.empty()) return symbols;
  while (symbols.size() > 1) {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto r = merges.rank(symbols[i], symbols[i + 1]);
      if (r && (!best || *r < *best)) best = r;
    }
    if (!best) break;
    const Merge& m = merges.merges()[*best];
    std::vector<std::string> next;
    next.reserve(symbols.size());
    for (std::size_t i = 0; i < symbols.size(); ++i) {
      if (i + 1 < symbols.size() && symbols[i] == m.left && symbols[i + 1] == m.right) {
        next.push_back(m.merged());
        ++i;
      } else {
        next.push_back(std::move(symbols[i]));
      }
    }
    symbols = std::move(next);
  }
  return symbols;
}

inline Segmentation encode_word(std::string_view word, const MergeTable& merges) {
  Segmentation seg;
  seg.word = std::string(word);
  seg.subwords = apply_merges(text::utf8_chars(word), merges);
  seg.end_of_word.assign(seg.subwords.size(), false);
  if (!seg.end_of_word.empty()) seg.end_of_word.back() = true;
  return seg;
}

/// Segment a whitespace-tokenized sentence into marked vocabulary symbols.
inline std::vector<std::string> encode_sentence(std::string_view sentence, const MergeTable& merges) {
  std::vector<std::string> out;
  for (const auto& w : text::split_whitespace(sentence)) {
    auto syms = encode_word(w, merges).symbols();
    out.insert(out.end(), syms.begin(), syms.end());
  }
  return out;
}

/// Inverse of encode_sentence: concatenate pieces, a marked piece ends a word.
inline std::string decode(std::span<const std::string> symbols) {
  std::string out;
  bool word_open = false;
  for (const auto& s : symbols) {
    std::string_view v = s;
    const bool ends = v.size() >= kEndOfWord.size() && v.substr(v.size() - kEndOfWord.size()) == kEndOfWord;
    if (ends) v.remove_suffix(kEndOfWord.size());
    if (!word_open && !out.empty()) out += ' ';
    out += v;
    word_open = !ends;
  }
  return out;
}

/// Learn up to num_merges merges. At each step the most frequent adjacent pair
/// wins; equal counts go to the lexicographically smallest (left, right).
/// Stops early once every word is a single symbol.
inline MergeTable learn_bpe(std::span<const std::string> corpus, std::size_t num_merges) {
  if (corpus.empty()) throw UsageError("learn_bpe: empty corpus");

  std::map<std::string, std::size_t> word_counts;
  for (const auto& sentence : corpus) {
    for (auto& w : text::split_whitespace(sentence)) ++word_counts[w];
  }
  if (word_counts.empty()) throw UsageError("learn_bpe: corpus contains no words");

  struct Word {
    std::vector<std::string> symbols;
    std::size_t count;
  };
  std::vector<Word> words;
  words.reserve(word_counts.size());
  for (const auto& [w, c] : word_counts) words.push_back({text::utf8_chars(w), c});

  std::vector<Merge> merges;
  while (merges.size() < num_merges) {
    std::map<std::pair<std::string, std::string>, std::size_t> pairs;
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) {
        pairs[{w.symbols[i], w.symbols[i + 1]}] += w.count;
      }
    }
    if (pairs.empty()) break;
    auto best = pairs.begin();
    for (auto it = pairs.begin(); it != pairs.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    Merge m{best->first.first, best->first.second};
    const std::string merged = m.merged();
    for (auto& w : words) {
      if (w.symbols.size() < 2) continue;
      std::vector<std::string> next;
      next.reserve(w.symbols.size());
      for (std::size_t i = 0; i < w.symbols.size(); ++i) {
        if (i + 1 < w.symbols.size() && w.symbols[i] == m.left && w.symbols[i + 1] == m.right) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(std::move(w.symbols[i]));
        }
      }
      w.symbols = std::move(next);
    }
    merges.push_back(std::move(m));
  }
  return MergeTable(std::move(merges));
}

/// Special symbols, in id order.
enum class Special : int { pad = 0, bos, eos, unk, cls, sep, mask };

inline constexpr std::array<std::string_view, 7> kSpecialSymbols = {
    "<pad>", "<s>", "</s>", "<unk>", "[CLS]", "[SEP]", "[MASK]"};

/// Bijective symbol/id map shared by source and target. Specials take ids 0-6.
class Vocab {
 public:
  Vocab() {
    for (auto s : kSpecialSymbols) add(std::string(s));
  }

  static constexpr int pad_id = static_cast<int>(Special::pad);
  static constexpr int bos_id = static_cast<int>(Special::bos);
  static constexpr int eos_id = static_cast<int>(Special::eos);
  static constexpr int unk_id = static_cast<int>(Special::unk);
  static constexpr int cls_id = static_cast<int>(Special::cls);
  static constexpr int sep_id = static_cast<int>(Special::sep);
  static constexpr int mask_id = static_cast<int>(Special::mask);

  static bool is_special(int id) { return id >= 0 && id < static_cast<int>(kSpecialSymbols.size()); }

  std::size_t size() const { return symbols_.size(); }

  /// Returns the id of a symbol, or unk_id when absent.
  int id(const std::string& symbol) const {
    auto it = ids_.find(symbol);
    return it == ids_.end() ? unk_id : it->second;
  }

  bool contains(const std::string& symbol) const { return ids_.count(symbol) > 0; }

  const std::string& symbol(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= symbols_.size()) {
      throw UsageError("vocab id out of range: " + std::to_string(id));
    }
    return symbols_[static_cast<std::size_t>(id)];
  }

  std::vector<int> ids(std::span<const std::string> symbols) const {
    std::vector<int> out;
    out.reserve(symbols.size());
    for (const auto& s : symbols) out.push_back(id(s));
    return out;
  }

  /// Map ids back to symbols, dropping pad/bos/eos/cls/sep/mask.
  std::vector<std::string> symbols(std::span<const int> ids) const {
    std::vector<std::string> out;
    for (int i : ids) {
      if (is_special(i) && i != unk_id) continue;
      out.push_back(symbol(i));
    }
    return out;
  }

  /// "symbol<TAB>id" per line.
  void save(std::ostream& out) const {
    for (std::size_t i = 0; i < symbols_.size(); ++i) out << symbols_[i] << '\t' << i << '\n';
  }

  static Vocab load(std::istream& in) {
    std::vector<std::pair<int, std::string>> entries;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      text::strip_cr(line);
      if (line.empty()) continue;
      auto parts = text::split(line, '\t');
      if (parts.size() != 2 || parts[0].empty()) throw DataFormatError("expected 'symbol<TAB>id'", lineno);
      int id = 0;
      try {
        id = std::stoi(parts[1]);
      } catch (const std::exception&) {
        throw DataFormatError("bad vocab id '" + parts[1] + "'", lineno);
      }
      entries.emplace_back(id, std::move(parts[0]));
    }
    std::sort(entries.begin(), entries.end());
    Vocab v;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].first != static_cast<int>(i)) throw DataFormatError("vocab ids must be 0..N-1 without gaps");
      if (i < kSpecialSymbols.size()) {
        if (entries[i].second != kSpecialSymbols[i]) throw DataFormatError("vocab special symbols out of place");
        continue;
      }
      if (v.contains(entries[i].second)) throw DataFormatError("duplicate vocab symbol " + entries[i].second);
      v.add(entries[i].second);
    }
    return v;
  }

  void save_file(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw UsageError("cannot write vocab file " + path);
    save(out);
  }

  static Vocab load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open vocab file " + path);
    return load(in);
  }

  bool operator==(const Vocab& other) const { return symbols_ == other.symbols_; }

 private:
  friend Vocab build_vocab(std::span<const std::vector<std::string>>);

  void add(std::string s) {
    ids_.emplace(s, static_cast<int>(symbols_.size()));
    symbols_.push_back(std::move(s));
  }

  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> ids_;
};

/// Build one shared vocabulary over segmented sentences from both languages.
/// Non-special symbols are assigned ids in sorted order.
inline Vocab build_vocab(std::span<const std::vector<std::string>> segmented) {
  std::vector<std::string> all;
  for (const auto& sent : segmented) all.insert(all.end(), sent.begin(), sent.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  Vocab v;
  for (auto& s : all) {
    if (!v.contains(s)) v.add(std::move(s));
  }
  return v;
}

}  // namespace synfuse
