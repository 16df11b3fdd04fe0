#pragma once

// Corpus BLEU-1..4 and sentence-averaged ROUGE-L F1.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "glossmt/error.hpp"
#include "glossmt/kv.hpp"

namespace glossmt {

struct ScoreReport {
  static constexpr const char* kRougeVariant = "ROUGE-L-F1";

  std::array<double, 4> bleu{};        // cumulative BLEU-1..4, percent
  std::array<double, 4> precision{};   // modified n-gram precisions, fractions
  double rouge = 0;                    // percent
  double brevity_penalty = 0;
  std::size_t hyp_tokens = 0;
  std::size_t ref_tokens = 0;

  std::string to_key_values() const {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(2);
    for (int n = 0; n < 4; ++n) os << "BLEU-" << n + 1 << " = " << bleu[n] << "\n";
    os << kRougeVariant << " = " << rouge << "\n";
    os.precision(4);
    os << "brevity_penalty = " << brevity_penalty << "\n";
    os << "hyp_tokens = " << hyp_tokens << "\n";
    os << "ref_tokens = " << ref_tokens << "\n";
    os << "rouge_variant = " << kRougeVariant << "\n";
    return os.str();
  }

  static std::string csv_header() {
    return "bleu1,bleu2,bleu3,bleu4,rouge,rouge_variant,brevity_penalty,hyp_tokens,ref_tokens";
  }

  std::string csv_row() const {
    std::string row;
    for (double b : bleu) row += format_double(b) + ",";
    row += format_double(rouge) + "," + kRougeVariant + "," + format_double(brevity_penalty) + "," +
           std::to_string(hyp_tokens) + "," + std::to_string(ref_tokens);
    return row;
  }
};

template <class Token>
std::size_t lcs_length(const std::vector<Token>& a, const std::vector<Token>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

namespace detail {

template <class Token>
std::map<std::vector<Token>, std::size_t> ngram_counts(const std::vector<Token>& s, std::size_t n) {
  std::map<std::vector<Token>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[std::vector<Token>(s.begin() + i, s.begin() + i + n)];
  return counts;
}

template <class Token>
void require_parallel(const std::vector<std::vector<Token>>& hyps, const std::vector<std::vector<Token>>& refs,
                      const char* what) {
  if (hyps.size() != refs.size()) {
    throw ContractError(std::string(what) + ": " + std::to_string(hyps.size()) + " hypotheses vs " +
                        std::to_string(refs.size()) + " references");
  }
}

}  // namespace detail

// Corpus-level BLEU with clipped n-gram counts and brevity penalty, no
// smoothing. Fills bleu[0..max_n-1].
template <class Token>
ScoreReport bleu(const std::vector<std::vector<Token>>& hyps, const std::vector<std::vector<Token>>& refs,
                 int max_n = 4) {
  detail::require_parallel(hyps, refs, "bleu");
  if (max_n < 1 || max_n > 4) throw ConfigError("bleu: max_n must lie in [1, 4]");
  ScoreReport r;
  std::array<std::size_t, 4> matches{}, totals{};
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    r.hyp_tokens += hyps[s].size();
    r.ref_tokens += refs[s].size();
    for (int n = 1; n <= max_n; ++n) {
      const auto h = detail::ngram_counts(hyps[s], static_cast<std::size_t>(n));
      const auto g = detail::ngram_counts(refs[s], static_cast<std::size_t>(n));
      for (const auto& [gram, count] : h) {
        totals[n - 1] += count;
        auto it = g.find(gram);
        if (it != g.end()) matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  const double c = static_cast<double>(r.hyp_tokens), ref = static_cast<double>(r.ref_tokens);
  r.brevity_penalty = c == 0 ? 0.0 : (c <= ref ? std::exp(1.0 - ref / c) : 1.0);
  double log_sum = 0;
  bool zero = false;
  for (int n = 1; n <= max_n; ++n) {
    const double p = totals[n - 1] ? static_cast<double>(matches[n - 1]) / static_cast<double>(totals[n - 1]) : 0.0;
    r.precision[n - 1] = p;
    if (p == 0) zero = true;
    if (!zero) log_sum += std::log(p);
    r.bleu[n - 1] = zero ? 0.0 : 100.0 * r.brevity_penalty * std::exp(log_sum / n);
  }
  return r;
}

// Mean over pairs of the LCS F-measure, in percent.
template <class Token>
double rouge(const std::vector<std::vector<Token>>& hyps, const std::vector<std::vector<Token>>& refs) {
  detail::require_parallel(hyps, refs, "rouge");
  if (hyps.empty()) return 0.0;
  double total = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const std::size_t l = lcs_length(hyps[s], refs[s]);
    if (l == 0) continue;
    const double p = static_cast<double>(l) / static_cast<double>(hyps[s].size());
    const double rc = static_cast<double>(l) / static_cast<double>(refs[s].size());
    total += 2 * p * rc / (p + rc);
  }
  return 100.0 * total / static_cast<double>(hyps.size());
}

template <class Token>
ScoreReport evaluate(const std::vector<std::vector<Token>>& hyps, const std::vector<std::vector<Token>>& refs) {
  ScoreReport r = bleu(hyps, refs, 4);
  r.rouge = rouge(hyps, refs);
  return r;
}

struct TokenAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;

  double value() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
  TokenAccuracy& operator+=(const TokenAccuracy& o) {
    correct += o.correct;
    total += o.total;
    return *this;
  }
};

}  // namespace glossmt
