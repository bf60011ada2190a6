#pragma once

// Slow, direct reference implementations used to cross-check the library.
// None of these call into the code they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace oracle {

using Row = std::vector<double>;

inline double sq_dist(const Row& a, const Row& b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
  return s;
}

struct Nb {
  double sq;
  std::size_t idx;
};

// Full sort by (distance, index).
inline std::vector<Nb> knn(const std::vector<Row>& pts, const Row& q, std::size_t k,
                           std::size_t exclude = static_cast<std::size_t>(-1)) {
  std::vector<Nb> all;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (i != exclude) all.push_back({sq_dist(pts[i], q), i});
  }
  std::sort(all.begin(), all.end(), [](const Nb& a, const Nb& b) {
    return a.sq != b.sq ? a.sq < b.sq : a.idx < b.idx;
  });
  all.resize(std::min(k, all.size()));
  return all;
}

// LOF in novelty orientation, written out from the definitions. Points whose
// reachability sum is zero take the largest finite lrd (1 if none).
struct Lof {
  std::vector<Row> train;
  std::size_t k;
  std::vector<double> kdist, lrd;
  double cap = 1.0;

  Lof(std::vector<Row> t, std::size_t kk) : train(std::move(t)), k(kk) {
    const std::size_t n = train.size();
    std::vector<std::vector<Nb>> nn(n);
    kdist.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      nn[i] = knn(train, train[i], k, i);
      kdist[i] = std::sqrt(nn[i].back().sq);
    }
    lrd.assign(n, -1.0);
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (const auto& b : nn[i]) s += std::max(kdist[b.idx], std::sqrt(b.sq));
      if (s > 0.0) {
        lrd[i] = static_cast<double>(k) / s;
        cap = any ? std::max(cap, lrd[i]) : lrd[i];
        any = true;
      }
    }
    if (!any) cap = 1.0;
    for (auto& v : lrd) {
      if (v < 0.0) v = cap;
    }
  }

  double score(const Row& q) const {
    const auto nn = knn(train, q, k);
    double s = 0.0, mean = 0.0;
    for (const auto& b : nn) {
      s += std::max(kdist[b.idx], std::sqrt(b.sq));
      mean += lrd[b.idx];
    }
    mean /= static_cast<double>(nn.size());
    const double own = s > 0.0 ? static_cast<double>(k) / s : cap;
    return mean / own;
  }
};

// Shapley values as the average marginal contribution over all d! orderings.
inline std::vector<double> permutation_shapley(const std::function<double(std::uint64_t)>& v,
                                               std::size_t d) {
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> phi(d, 0.0);
  double count = 0.0;
  do {
    std::uint64_t mask = 0;
    double prev = v(mask);
    for (auto j : order) {
      mask |= std::uint64_t{1} << j;
      const double cur = v(mask);
      phi[j] += cur - prev;
      prev = cur;
    }
    count += 1.0;
  } while (std::next_permutation(order.begin(), order.end()));
  for (auto& p : phi) p /= count;
  return phi;
}

// Interventional coalition value with a uniformly weighted background.
inline double coalition_value(const std::function<double(const Row&)>& f, const Row& x,
                              const std::vector<Row>& background, std::uint64_t mask) {
  double total = 0.0;
  for (const auto& b : background) {
    Row z = b;
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (mask & (std::uint64_t{1} << j)) z[j] = x[j];
    }
    total += f(z);
  }
  return total / static_cast<double>(background.size());
}

// P(anomaly score > normal score) + 0.5 P(tie), over all pairs.
inline double pair_auc(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

// Linear interpolation between order statistics at (n - 1) q.
inline double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double laplace_cdf(double x, double b) {
  return x < 0.0 ? 0.5 * std::exp(x / b) : 1.0 - 0.5 * std::exp(-x / b);
}

inline double normal_cdf(double x, double sigma) {
  return 0.5 * std::erfc(-x / (sigma * std::sqrt(2.0)));
}

// Two-sided one-sample Kolmogorov-Smirnov statistic.
inline double ks_statistic(std::vector<double> sample, const std::function<double(double)>& cdf) {
  std::sort(sample.begin(), sample.end());
  const double n = static_cast<double>(sample.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double f = cdf(sample[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

// Asymptotic 1% critical value of the KS statistic.
inline double ks_critical_1pct(std::size_t n) { return 1.628 / std::sqrt(static_cast<double>(n)); }

inline double sample_variance(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return ss / static_cast<double>(v.size() - 1);
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dpshap_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace oracle
