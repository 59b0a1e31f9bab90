#pragma once

// Corpus BLEU-4 over whitespace tokens, case-sensitive, one reference per
// hypothesis. Score = BP * exp(mean_n log p_n), with p_n the clipped n-gram
// precision pooled over the corpus and BP = min(1, exp(1 - r / c)). Orders
// for which the hypotheses contain no n-grams at all are left out of the mean;
// any other zero precision makes the score 0.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "synfuse/error.hpp"
#include "synfuse/text.hpp"

namespace synfuse {

inline constexpr std::size_t kBleuOrder = 4;

struct BleuStats {
  std::array<std::size_t, kBleuOrder> matches{};
  std::array<std::size_t, kBleuOrder> totals{};
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;

  BleuStats& operator+=(const BleuStats& o) {
    for (std::size_t n = 0; n < kBleuOrder; ++n) {
      matches[n] += o.matches[n];
      totals[n] += o.totals[n];
    }
    hyp_length += o.hyp_length;
    ref_length += o.ref_length;
    return *this;
  }
};

inline BleuStats sentence_stats(const std::vector<std::string>& hyp, const std::vector<std::string>& ref) {
  BleuStats s;
  s.hyp_length = hyp.size();
  s.ref_length = ref.size();
  for (std::size_t n = 1; n <= kBleuOrder; ++n) {
    std::map<std::vector<std::string>, std::size_t> ref_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) {
      ++ref_counts[std::vector<std::string>(ref.begin() + static_cast<std::ptrdiff_t>(i),
                                            ref.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
    std::map<std::vector<std::string>, std::size_t> hyp_counts;
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) {
      ++hyp_counts[std::vector<std::string>(hyp.begin() + static_cast<std::ptrdiff_t>(i),
                                            hyp.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
    for (const auto& [gram, count] : hyp_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) s.matches[n - 1] += std::min(count, it->second);
      s.totals[n - 1] += count;
    }
  }
  return s;
}

inline double bleu_from_stats(const BleuStats& s) {
  if (s.hyp_length == 0) return 0.0;
  double log_sum = 0.0;
  std::size_t orders = 0;
  for (std::size_t n = 0; n < kBleuOrder; ++n) {
    if (s.totals[n] == 0) continue;
    if (s.matches[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(s.matches[n]) / static_cast<double>(s.totals[n]));
    ++orders;
  }
  if (orders == 0) return 0.0;
  const double c = static_cast<double>(s.hyp_length);
  const double r = static_cast<double>(s.ref_length);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / static_cast<double>(orders));
}

struct EvalReport {
  double bleu = 0.0;
  BleuStats corpus;
  std::vector<BleuStats> sentences;
  std::string fingerprint;
};

inline EvalReport evaluate_bleu(std::span<const std::string> hypotheses, std::span<const std::string> references) {
  if (hypotheses.empty()) throw UsageError("bleu: empty corpus");
  if (hypotheses.size() != references.size()) {
    throw UsageError("bleu: " + std::to_string(hypotheses.size()) + " hypotheses but " +
                     std::to_string(references.size()) + " references");
  }
  EvalReport report;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    report.sentences.push_back(
        sentence_stats(text::split_whitespace(hypotheses[i]), text::split_whitespace(references[i])));
    report.corpus += report.sentences.back();
  }
  report.bleu = bleu_from_stats(report.corpus);
  return report;
}

/// Corpus BLEU in [0, 1].
inline double bleu(std::span<const std::string> hypotheses, std::span<const std::string> references) {
  return evaluate_bleu(hypotheses, references).bleu;
}

}  // namespace synfuse
