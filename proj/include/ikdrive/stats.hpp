#pragma once
// Small-sample statistics used by the analysis reports: streaming variance,
// rank statistics with midrank tie handling, normal-approximation p-values,
// precision-recall integration, and an exact binomial tail.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "ikdrive/tensor.hpp"

namespace ikdrive {

// ====== streaming moments ======

// Single-pass mean/variance accumulator. Population convention (divide by n):
// the law-of-total-variance identity marginal = conditional + between then
// holds exactly for finite samples.
struct Welford {
  int64_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double x) {
    n += 1;
    double d = x - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (x - mean);
  }

  double variance() const { return n > 0 ? m2 / static_cast<double>(n) : 0.0; }
};

// ====== normal distribution ======

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Two-sided tail mass for a standard-normal statistic.
inline double two_sided_p(double z) {
  if (!std::isfinite(z)) return 0.0;
  return std::min(1.0, 2.0 * normal_cdf(-std::abs(z)));
}

// ====== ranks ======

// Average ranks (1-based); tied values share the mean of their rank range.
inline std::vector<double> midranks(const std::vector<double>& v) {
  size_t n = v.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return v[a] != v[b] ? v[a] < v[b] : a < b;
  });
  std::vector<double> rank(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    double shared = 0.5 * static_cast<double>(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) rank[order[k]] = shared;
    i = j + 1;
  }
  return rank;
}

// ====== correlation ======

struct Correlation {
  double coefficient = 0.0;
  double p_value = 1.0;
};

// Pearson r; two-sided p from the Fisher z transform, z = atanh(r) * sqrt(n-3).
inline Correlation pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ArgumentError("pearson: length mismatch");
  size_t n = x.size();
  if (n < 2) throw ArgumentError("pearson: need at least 2 points");
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  Correlation c;
  if (sxx == 0.0 || syy == 0.0) return c;  // a constant input carries no evidence
  c.coefficient = sxy / std::sqrt(sxx * syy);
  if (n > 3 && std::abs(c.coefficient) < 1.0) {
    double z = std::atanh(c.coefficient) * std::sqrt(static_cast<double>(n - 3));
    c.p_value = two_sided_p(z);
  } else if (std::abs(c.coefficient) >= 1.0 && n > 3) {
    c.p_value = 0.0;
  }
  return c;
}

// Spearman rho = Pearson on midranks; two-sided p from z = rho * sqrt(n-1).
inline Correlation spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ArgumentError("spearman: length mismatch");
  size_t n = x.size();
  if (n < 2) throw ArgumentError("spearman: need at least 2 points");
  Correlation base = pearson(midranks(x), midranks(y));
  Correlation c;
  c.coefficient = base.coefficient;
  double z = c.coefficient * std::sqrt(static_cast<double>(n - 1));
  c.p_value = two_sided_p(z);
  return c;
}

// ====== Mann-Whitney U ======

struct MannWhitney {
  double u_a = 0.0;  // pair count in favor of a being larger (ties count 1/2)
  double u_b = 0.0;
  double z = 0.0;
  double p_value = 1.0;
};

// Rank-sum computation with midranks; normal approximation with tie
// correction. All-tied inputs have zero variance and report p = 1.
inline MannWhitney mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw ArgumentError("mann_whitney_u: empty sample");
  double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::vector<double> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  std::vector<double> rank = midranks(pooled);
  double ra = 0.0;
  for (size_t i = 0; i < a.size(); ++i) ra += rank[i];

  MannWhitney r;
  r.u_a = ra - na * (na + 1.0) / 2.0;
  r.u_b = na * nb - r.u_a;

  double n = na + nb;
  std::vector<double> sorted = pooled;
  std::sort(sorted.begin(), sorted.end());
  double tie_term = 0.0;
  size_t i = 0;
  while (i < sorted.size()) {
    size_t j = i;
    while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
    double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  double var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
  if (var > 0.0) {
    r.z = (r.u_a - na * nb / 2.0) / std::sqrt(var);
    r.p_value = two_sided_p(r.z);
  }
  return r;
}

// ====== precision-recall ======

// Average precision over all thresholds: scores are processed in groups of
// equal value (descending), AP = sum over groups of (recall gain * precision).
// Undefined (nullopt) when no cell is labeled positive.
inline std::optional<double> average_precision(const std::vector<double>& score,
                                               const std::vector<uint8_t>& label) {
  if (score.size() != label.size()) throw ShapeError("average_precision: length mismatch");
  int64_t positives = 0;
  for (uint8_t l : label) positives += l != 0;
  if (positives == 0) return std::nullopt;

  std::vector<size_t> order(score.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t x, size_t y) {
    return score[x] != score[y] ? score[x] > score[y] : x < y;
  });

  double ap = 0.0;
  double tp = 0.0, fp = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    double gtp = 0.0, gfp = 0.0;
    while (j < order.size() && score[order[j]] == score[order[i]]) {
      if (label[order[j]] != 0)
        gtp += 1.0;
      else
        gfp += 1.0;
      ++j;
    }
    double r0 = tp / static_cast<double>(positives);
    tp += gtp;
    fp += gfp;
    double r1 = tp / static_cast<double>(positives);
    double precision = tp / (tp + fp);
    ap += (r1 - r0) * precision;
    i = j;
  }
  return ap;
}

// ====== percentiles & bins ======

// Nearest-rank percentile: the smallest value with at least q of the mass at
// or below it (sorted[ceil(q*n) - 1]).
inline double percentile_nearest_rank(std::vector<double> v, double q) {
  if (v.empty()) throw ArgumentError("percentile_nearest_rank: empty input");
  if (!(q > 0.0 && q <= 1.0)) throw ArgumentError("percentile_nearest_rank: q must be in (0, 1]");
  std::sort(v.begin(), v.end());
  size_t idx = static_cast<size_t>(std::ceil(q * static_cast<double>(v.size())));
  if (idx == 0) idx = 1;
  return v[idx - 1];
}

// Sort indices ascending by (value, index) and cut into k bins at the integer
// boundaries floor(i*n/k); remainders land in the later bins.
inline std::vector<std::vector<size_t>> rank_bins(const std::vector<double>& v, int k) {
  if (k < 1) throw ArgumentError("rank_bins: k must be >= 1");
  if (v.size() < static_cast<size_t>(k)) throw ArgumentError("rank_bins: fewer values than bins");
  std::vector<size_t> order(v.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return v[a] != v[b] ? v[a] < v[b] : a < b;
  });
  std::vector<std::vector<size_t>> bins(static_cast<size_t>(k));
  size_t n = v.size();
  for (int i = 0; i < k; ++i) {
    size_t lo = n * static_cast<size_t>(i) / static_cast<size_t>(k);
    size_t hi = n * static_cast<size_t>(i + 1) / static_cast<size_t>(k);
    for (size_t j = lo; j < hi; ++j) bins[static_cast<size_t>(i)].push_back(order[j]);
  }
  return bins;
}

// ====== binomial tail ======

// Exact one-sided upper tail P(X >= k) for X ~ Binomial(n, p), via
// log-gamma terms to stay stable at large n.
inline double binomial_p_greater_equal(int64_t k, int64_t n, double p) {
  if (n < 1 || k < 0 || k > n) throw ArgumentError("binomial_p_greater_equal: need 0 <= k <= n, n >= 1");
  if (!(p >= 0.0 && p <= 1.0)) throw ArgumentError("binomial_p_greater_equal: p must be in [0, 1]");
  if (k == 0) return 1.0;
  if (p == 0.0) return 0.0;
  if (p == 1.0) return 1.0;
  double acc = 0.0;
  double lp = std::log(p), lq = std::log1p(-p);
  for (int64_t i = k; i <= n; ++i) {
    double lt = std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(i) + 1.0) -
                std::lgamma(static_cast<double>(n - i) + 1.0) + static_cast<double>(i) * lp +
                static_cast<double>(n - i) * lq;
    acc += std::exp(lt);
  }
  return std::min(1.0, acc);
}

}  // namespace ikdrive
