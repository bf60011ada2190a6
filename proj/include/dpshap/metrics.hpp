#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpshap/common.hpp"
#include "dpshap/dataset.hpp"
#include "dpshap/shap.hpp"

namespace dpshap {

// Average (mid) ranks, 1-based; ties share the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j + 1);
    for (std::size_t t = i; t < j; ++t) ranks[order[t]] = rank;
    i = j;
  }
  return ranks;
}

// Mann-Whitney formulation: P(score_anomaly > score_normal) + 0.5 P(equal).
inline double auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw Error("auc: scores and labels differ in length");
  std::size_t n_pos = 0;
  for (auto l : labels) n_pos += (l == kAnomaly);
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error("auc: labels contain a single class");
  const auto ranks = average_ranks(scores);
  double pos_rank_sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == kAnomaly) pos_rank_sum += ranks[i];
  }
  const double np = static_cast<double>(n_pos);
  const double u = pos_rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(n_neg));
}

inline double fidelity(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) throw Error("fidelity: prediction vectors differ in length");
  if (a.empty()) throw Error("fidelity: empty prediction vectors");
  std::size_t agree = 0;
  for (std::size_t i = 0; i < a.size(); ++i) agree += (a[i] == b[i]);
  return static_cast<double>(agree) / static_cast<double>(a.size());
}

// Per-class precision; an entry is absent when no point was predicted in that
// class. The weighted entry averages the two classes by true-class frequency
// and is absent whenever either class entry is absent.
struct PrecisionReport {
  std::optional<double> anomaly;
  std::optional<double> normal;
  std::optional<double> weighted;
};

inline PrecisionReport precision(std::span<const std::uint8_t> pred,
                                 std::span<const std::uint8_t> labels) {
  if (pred.size() != labels.size()) throw Error("precision: length mismatch");
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == kAnomaly) {
      (labels[i] == kAnomaly ? tp : fp)++;
    } else {
      (labels[i] == kNormal ? tn : fn)++;
    }
  }
  PrecisionReport out;
  if (tp + fp > 0) out.anomaly = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (tn + fn > 0) out.normal = static_cast<double>(tn) / static_cast<double>(tn + fn);
  if (out.anomaly && out.normal && !labels.empty()) {
    const double n = static_cast<double>(labels.size());
    const double w_anom = static_cast<double>(tp + fn) / n;
    out.weighted = w_anom * *out.anomaly + (1.0 - w_anom) * *out.normal;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attribution drift

struct GapResult {
  double mean = 0.0;
  std::vector<double> per_point;
  // Cosine only: points where the zero-vector rule was applied.
  std::size_t zero_vector_cases = 0;
};

inline double euclidean_gap(std::span<const double> a, std::span<const double> b) {
  return std::sqrt(squared_distance(a, b));
}

// 1 - cos(a, b). Both zero -> 0; exactly one zero -> 1.
inline double cosine_gap(std::span<const double> a, std::span<const double> b, bool* zero_rule = nullptr) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) {
    if (zero_rule) *zero_rule = true;
    return (na == 0.0 && nb == 0.0) ? 0.0 : 1.0;
  }
  if (std::equal(a.begin(), a.end(), b.begin(), b.end())) return 0.0;  // exact, not 1 - ~1
  const double cos = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(1.0 - cos, 0.0, 2.0);
}

// Smallest number of features whose |phi| (sorted descending, ties by feature
// index) reach p * sum |phi|. Zero attributions have length 0.
inline std::size_t shap_length(std::span<const double> phi, double p = 0.90) {
  if (!(p > 0.0 && p <= 1.0)) throw Error("shap_length: p must lie in (0, 1]");
  std::vector<double> mags(phi.size());
  double total = 0.0;
  for (std::size_t j = 0; j < phi.size(); ++j) {
    mags[j] = std::fabs(phi[j]);
    total += mags[j];
  }
  if (total == 0.0) return 0;
  std::vector<std::size_t> order(phi.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return mags[a] > mags[b]; });
  const double target = p * total;
  double running = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    running += mags[order[i]];
    if (running >= target) return i + 1;
  }
  return phi.size();
}

// ---------------------------------------------------------------------------
// Distribution helpers

inline double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double stddev_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

// Linear-interpolation quantile over a sorted range (positions (n - 1) q).
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw Error("quantile of an empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline double quantile(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  return quantile_sorted(values, q);
}

struct BoxStats {
  double q1 = 0, median = 0, q3 = 0;
  double whisker_low = 0, whisker_high = 0;  // Tukey 1.5 IQR, clipped to data
  double min = 0, max = 0;
  std::size_t count = 0;

  double iqr() const { return q3 - q1; }
};

inline BoxStats box_stats(std::vector<double> values) {
  if (values.empty()) throw Error("box_stats: empty sample");
  std::sort(values.begin(), values.end());
  BoxStats b;
  b.count = values.size();
  b.q1 = quantile_sorted(values, 0.25);
  b.median = quantile_sorted(values, 0.5);
  b.q3 = quantile_sorted(values, 0.75);
  b.min = values.front();
  b.max = values.back();
  const double lo_fence = b.q1 - 1.5 * b.iqr();
  const double hi_fence = b.q3 + 1.5 * b.iqr();
  b.whisker_low = *std::lower_bound(values.begin(), values.end(), lo_fence);
  b.whisker_high = *(std::upper_bound(values.begin(), values.end(), hi_fence) - 1);
  return b;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw Error("pearson: need equal-length samples");
  const double ma = mean_of(a), mb = mean_of(b);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  return pearson(ra, rb);
}

// ---------------------------------------------------------------------------

struct ShapLengthConfig {
  double p = 0.90;
};

struct MetricReport {
  double auc = 0.5;
  PrecisionReport precision;
  double fidelity = 1.0;
  double shapgap_l2_mean = 0.0;
  double shapgap_cos_mean = 0.0;
  double shaplength_mean = 0.0;
  std::vector<double> per_point_l2;
  std::vector<double> per_point_cos;
  std::size_t cosine_zero_vector_cases = 0;
  bool explained = false;  // false when attributions were not computed
};

namespace detail {
inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}
inline std::optional<double> optional_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}
}  // namespace detail

inline void to_json(nlohmann::json& j, const PrecisionReport& p) {
  j = nlohmann::json{{"anomaly", detail::optional_json(p.anomaly)},
                     {"normal", detail::optional_json(p.normal)},
                     {"weighted", detail::optional_json(p.weighted)}};
}

inline void from_json(const nlohmann::json& j, PrecisionReport& p) {
  p.anomaly = detail::optional_from(j.at("anomaly"));
  p.normal = detail::optional_from(j.at("normal"));
  p.weighted = detail::optional_from(j.at("weighted"));
}

inline void to_json(nlohmann::json& j, const MetricReport& m) {
  j = nlohmann::json{{"auc", m.auc},
                     {"precision", m.precision},
                     {"fidelity", m.fidelity},
                     {"explained", m.explained},
                     {"shapgap_l2_mean", m.shapgap_l2_mean},
                     {"shapgap_cos_mean", m.shapgap_cos_mean},
                     {"shaplength_mean", m.shaplength_mean},
                     {"cosine_zero_vector_cases", m.cosine_zero_vector_cases},
                     {"per_point_l2", m.per_point_l2},
                     {"per_point_cos", m.per_point_cos}};
}

inline void from_json(const nlohmann::json& j, MetricReport& m) {
  m.auc = j.at("auc").get<double>();
  m.precision = j.at("precision").get<PrecisionReport>();
  m.fidelity = j.at("fidelity").get<double>();
  m.explained = j.value("explained", true);
  m.shapgap_l2_mean = j.at("shapgap_l2_mean").get<double>();
  m.shapgap_cos_mean = j.at("shapgap_cos_mean").get<double>();
  m.shaplength_mean = j.at("shaplength_mean").get<double>();
  m.cosine_zero_vector_cases = j.value("cosine_zero_vector_cases", std::size_t{0});
  m.per_point_l2 = j.at("per_point_l2").get<std::vector<double>>();
  m.per_point_cos = j.at("per_point_cos").get<std::vector<double>>();
}

// Per-point distribution as CSV: point index, l2, cosine.
inline void write_distribution_csv(std::ostream& out, const MetricReport& m) {
  out << "point,shapgap_l2,shapgap_cos\n";
  for (std::size_t i = 0; i < m.per_point_l2.size(); ++i) {
    out << i << ',' << format_real(m.per_point_l2[i]) << ','
        << format_real(m.per_point_cos[i]) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Matrix-level drift between two explanations of the same points.

namespace detail {
inline void check_paired(const AttributionMatrix& a, const AttributionMatrix& b) {
  if (a.size() != b.size() || a.d() != b.d()) {
    throw Error("shapgap: attribution matrices differ in shape (" + std::to_string(a.size()) +
                "x" + std::to_string(a.d()) + " vs " + std::to_string(b.size()) + "x" +
                std::to_string(b.d()) + ")");
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.rows[i].point_id != b.rows[i].point_id) {
      throw Error("shapgap: point id mismatch at row " + std::to_string(i));
    }
  }
}
}  // namespace detail

inline GapResult shapgap_euclidean(const AttributionMatrix& a, const AttributionMatrix& b) {
  detail::check_paired(a, b);
  GapResult g;
  g.per_point.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    g.per_point.push_back(euclidean_gap(a.rows[i].phi, b.rows[i].phi));
  }
  g.mean = mean_of(g.per_point);
  return g;
}

inline GapResult shapgap_cosine(const AttributionMatrix& a, const AttributionMatrix& b) {
  detail::check_paired(a, b);
  GapResult g;
  g.per_point.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    bool zero_rule = false;
    g.per_point.push_back(cosine_gap(a.rows[i].phi, b.rows[i].phi, &zero_rule));
    g.zero_vector_cases += zero_rule;
  }
  g.mean = mean_of(g.per_point);
  return g;
}

inline std::size_t shap_length(const Attribution& attr, const ShapLengthConfig& config = {}) {
  return shap_length(attr.phi, config.p);
}

inline double mean_shap_length(const AttributionMatrix& m, const ShapLengthConfig& config = {}) {
  if (m.rows.empty()) return 0.0;
  double total = 0.0;
  for (const auto& r : m.rows) total += static_cast<double>(shap_length(r.phi, config.p));
  return total / static_cast<double>(m.rows.size());
}

}  // namespace dpshap
