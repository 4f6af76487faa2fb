#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "vbsd/error.hpp"

// Small frequentist toolbox for the statistical contracts: chi-square
// uniformity of resampling, KS uniformity of task draws, Mann-Whitney trend
// checks. Approximations are the classical ones, adequate at the sample
// sizes used here.
namespace vbsd::stats {

// Standard normal CDF.
inline double norm_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

// Stable ln Σ exp(x_i); -inf entries contribute nothing. All -inf (or empty)
// yields -inf.
inline double log_sum_exp(std::span<const double> xs) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : xs) {
    require(!std::isnan(x), "log_sum_exp: NaN input");
    m = std::max(m, x);
  }
  if (m == -std::numeric_limits<double>::infinity()) return m;
  double acc = 0;
  for (double x : xs) acc += x == -std::numeric_limits<double>::infinity() ? 0.0 : std::exp(x - m);
  return m + std::log(acc);
}

// Composite Simpson rule on [lo, hi] with n (even) panels.
template <class Fn>
double simpson(Fn&& f, double lo, double hi, std::size_t n) {
  require(n >= 2 && n % 2 == 0, "simpson: panel count must be even and positive");
  double h = (hi - lo) / double(n);
  double acc = f(lo) + f(hi);
  for (std::size_t i = 1; i < n; ++i) acc += f(lo + h * double(i)) * (i % 2 == 1 ? 4.0 : 2.0);
  return acc * h / 3.0;
}

// Upper quantile of the standard normal (Acklam-style rational approximation
// is overkill; a bisection on erfc is exact enough and has no magic tables).
inline double norm_quantile(double p) {
  require(p > 0 && p < 1, "norm_quantile: p out of (0,1)");
  double lo = -10, hi = 10;
  for (int i = 0; i < 200; ++i) {
    double mid = 0.5 * (lo + hi);
    (norm_cdf(mid) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// Wilson-Hilferty upper critical value for chi-square with df degrees.
inline double chi_square_critical(double df, double alpha) {
  double z = norm_quantile(1.0 - alpha);
  double t = 1.0 - 2.0 / (9.0 * df) + z * std::sqrt(2.0 / (9.0 * df));
  return df * t * t * t;
}

// Pearson statistic against equal expected counts.
inline double chi_square_uniform_stat(std::span<const std::size_t> counts) {
  require(!counts.empty(), "chi_square_uniform_stat: no cells");
  double total = 0;
  for (auto c : counts) total += double(c);
  double expect = total / double(counts.size());
  require(expect > 0, "chi_square_uniform_stat: zero expected count");
  double stat = 0;
  for (auto c : counts) {
    double d = double(c) - expect;
    stat += d * d / expect;
  }
  return stat;
}

inline bool chi_square_uniform_pass(std::span<const std::size_t> counts, double alpha) {
  return chi_square_uniform_stat(counts) <=
         chi_square_critical(double(counts.size()) - 1.0, alpha);
}

// One-sample Kolmogorov-Smirnov statistic against U(lo, hi).
inline double ks_stat_uniform(std::vector<double> xs, double lo, double hi) {
  require(xs.size() > 1 && hi > lo, "ks_stat_uniform: bad inputs");
  std::sort(xs.begin(), xs.end());
  double n = double(xs.size());
  double d = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double cdf = std::clamp((xs[i] - lo) / (hi - lo), 0.0, 1.0);
    d = std::max(d, std::abs(cdf - double(i) / n));
    d = std::max(d, std::abs(cdf - double(i + 1) / n));
  }
  return d;
}

// Asymptotic KS critical value c(alpha)/sqrt(n); c(0.01) = 1.628.
inline bool ks_uniform_pass(std::vector<double> xs, double lo, double hi, double alpha) {
  double n = double(xs.size());
  double c = std::sqrt(-0.5 * std::log(alpha / 2.0));
  return ks_stat_uniform(std::move(xs), lo, hi) <= c / std::sqrt(n);
}

// One-sided Mann-Whitney U: p-value for the alternative "samples in b tend to
// be LARGER than samples in a" (normal approximation with tie correction).
inline double mann_whitney_p_greater(std::span<const double> a, std::span<const double> b) {
  require(a.size() > 1 && b.size() > 1, "mann_whitney: need at least 2 samples per group");
  std::vector<std::pair<double, int>> all;
  all.reserve(a.size() + b.size());
  for (double x : a) all.emplace_back(x, 0);
  for (double x : b) all.emplace_back(x, 1);
  std::sort(all.begin(), all.end());
  std::vector<double> rank(all.size());
  double tie_term = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    double r = 0.5 * double(i + 1 + j);  // average rank of the tied block
    for (std::size_t k = i; k < j; ++k) rank[k] = r;
    double t = double(j - i);
    tie_term += t * t * t - t;
    i = j;
  }
  double rb = 0;
  for (std::size_t i = 0; i < all.size(); ++i)
    if (all[i].second == 1) rb += rank[i];
  double nb = double(b.size()), na = double(a.size()), n = na + nb;
  double u = rb - nb * (nb + 1) / 2.0;  // large u  <=>  b larger
  double mean = na * nb / 2.0;
  double var = na * nb / 12.0 * ((n + 1) - tie_term / (n * (n - 1)));
  require(var > 0, "mann_whitney: degenerate variance (all values tied)");
  double z = (u - mean - 0.5) / std::sqrt(var);
  return 1.0 - norm_cdf(z);
}

}  // namespace vbsd::stats
