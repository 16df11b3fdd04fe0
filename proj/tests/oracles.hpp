#pragma once

// Reference implementations used only by tests. None of these share code
// with the library paths they check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "glossmt/tensor.hpp"

namespace glossmt::testing {

// Central finite differences of f() with respect to every value of `param`.
inline std::vector<double> numeric_gradient(Tensor param, const std::function<double()>& f, double h = 1e-5) {
  auto values = param.mutable_data();
  std::vector<double> grad(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    const double up = f();
    values[i] = saved - h;
    const double down = f();
    values[i] = saved;
    grad[i] = (up - down) / (2 * h);
  }
  return grad;
}

// |a - n| / max(|a|, |n|, floor), maximised over entries.
inline double max_relative_error(std::span<const double> analytic, const std::vector<double>& numeric,
                                 double floor = 1e-6) {
  double worst = 0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double a = i < analytic.size() ? analytic[i] : 0.0;
    const double denom = std::max({std::abs(a), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(a - numeric[i]) / denom);
  }
  return worst;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = dist(rng);
  return requires_grad ? Tensor::parameter(std::move(shape), std::move(v))
                       : Tensor::constant(std::move(shape), std::move(v));
}

// Loss = sum(w ⊙ f(inputs)) with fixed random weights, so every output
// element contributes a distinct adjoint.
inline double weighted_sum(const Tensor& out, const std::vector<double>& w) {
  double s = 0;
  for (std::size_t i = 0; i < out.size(); ++i) s += w[i] * out.data()[i];
  return s;
}

// Worst relative error between backward() and finite differences over all
// `inputs`.
template <class Forward>
double check_gradients(std::vector<Tensor> inputs, Forward forward, std::mt19937_64& rng) {
  Tensor probe = forward();
  std::vector<double> w(probe.size());
  std::normal_distribution<double> dist;
  for (auto& x : w) x = dist(rng);
  const Tensor weights = Tensor::constant(probe.shape(), w);

  for (auto& in : inputs) in.zero_grad();
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(sum(mul(forward(), weights)));
  }
  double worst = 0;
  for (auto& in : inputs) {
    const auto numeric = numeric_gradient(in, [&] { return weighted_sum(forward(), w); });
    worst = std::max(worst, max_relative_error(in.grad(), numeric));
  }
  return worst;
}

// --- metric oracles -------------------------------------------------------

using Seq = std::vector<int>;

// LCS by enumerating every subsequence of `a` (2^|a| masks) and testing
// whether it is a subsequence of `b`.
inline std::size_t lcs_by_enumeration(const Seq& a, const Seq& b) {
  std::size_t best = 0;
  const std::size_t n = a.size();
  for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
    const auto len = static_cast<std::size_t>(__builtin_popcountll(mask));
    if (len <= best) continue;
    std::size_t j = 0;
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) {
      if (!(mask >> i & 1)) continue;
      while (j < b.size() && b[j] != a[i]) ++j;
      if (j == b.size()) ok = false;
      else ++j;
    }
    if (ok) best = len;
  }
  return best;
}

// Clipped n-gram matches counted by scanning positions directly: for each
// hypothesis n-gram occurrence, count how many earlier occurrences of the
// same n-gram exist in the hypothesis and compare with its reference count.
inline void ngram_matches_by_scan(const Seq& hyp, const Seq& ref, std::size_t n, std::size_t& matched,
                                  std::size_t& total) {
  if (hyp.size() < n) return;
  for (std::size_t i = 0; i + n <= hyp.size(); ++i) {
    ++total;
    auto same = [&](const Seq& s, std::size_t p) {
      for (std::size_t k = 0; k < n; ++k) {
        if (s[p + k] != hyp[i + k]) return false;
      }
      return true;
    };
    std::size_t earlier = 0;
    for (std::size_t j = 0; j < i; ++j) earlier += same(hyp, j);
    std::size_t in_ref = 0;
    for (std::size_t j = 0; j + n <= ref.size(); ++j) in_ref += same(ref, j);
    if (earlier < in_ref) ++matched;
  }
}

struct OracleScores {
  double bleu[4] = {0, 0, 0, 0};
  double rouge = 0;
};

inline OracleScores brute_force_scores(const std::vector<Seq>& hyps, const std::vector<Seq>& refs) {
  OracleScores out;
  std::size_t matched[4] = {0, 0, 0, 0}, total[4] = {0, 0, 0, 0}, c = 0, r = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    c += hyps[s].size();
    r += refs[s].size();
    for (std::size_t n = 1; n <= 4; ++n) ngram_matches_by_scan(hyps[s], refs[s], n, matched[n - 1], total[n - 1]);
  }
  const double bp = c == 0 ? 0.0 : (c > r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c)));
  double log_sum = 0;
  for (int n = 0; n < 4; ++n) {
    if (total[n] == 0 || matched[n] == 0) break;
    log_sum += std::log(static_cast<double>(matched[n]) / static_cast<double>(total[n]));
    out.bleu[n] = 100.0 * bp * std::exp(log_sum / (n + 1));
  }
  double f_sum = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const double l = static_cast<double>(lcs_by_enumeration(hyps[s], refs[s]));
    if (l == 0) continue;
    const double p = l / static_cast<double>(hyps[s].size());
    const double rc = l / static_cast<double>(refs[s].size());
    f_sum += 2 * p * rc / (p + rc);
  }
  out.rouge = hyps.empty() ? 0.0 : 100.0 * f_sum / static_cast<double>(hyps.size());
  return out;
}

}  // namespace glossmt::testing
