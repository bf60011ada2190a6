#pragma once

#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "dpshap/common.hpp"
#include "dpshap/dataset.hpp"

namespace dpshap {

enum class BackgroundSelection { random_subsample, kmeans_centroids };

inline std::string to_string(BackgroundSelection s) {
  return s == BackgroundSelection::random_subsample ? "random_subsample" : "kmeans_centroids";
}

inline BackgroundSelection parse_background_selection(std::string_view s) {
  if (s == "random_subsample" || s == "random") return BackgroundSelection::random_subsample;
  if (s == "kmeans_centroids" || s == "kmeans") return BackgroundSelection::kmeans_centroids;
  throw Error("unknown background selection '" + std::string(s) + "'");
}

// Reference points that stand in for "feature absent". Weights sum to one;
// random subsamples are uniformly weighted, k-means centroids by cluster size.
struct BackgroundSet {
  Matrix points;
  std::vector<double> weights;
  BackgroundSelection selection = BackgroundSelection::random_subsample;
  std::uint64_t seed = 0;

  std::size_t size() const { return points.rows(); }
  std::size_t d() const { return points.cols(); }

  std::string digest() const {
    return Digest().add(points).add(std::span<const double>(weights)).add(to_string(selection)).hex();
  }

  // Seeded subsample of m rows (all rows when m >= n), kept in row order.
  static BackgroundSet random_subsample(const Matrix& data, std::size_t m, std::uint64_t seed) {
    if (data.rows() == 0) throw Error("background: empty data");
    if (m == 0) throw Error("background: size must be >= 1");
    m = std::min(m, data.rows());
    Rng rng(derive_seed(seed, "background"));
    auto rows = rng.sample_without_replacement(data.rows(), m);
    std::sort(rows.begin(), rows.end());
    BackgroundSet b;
    b.points = data.select_rows(rows);
    b.weights.assign(m, 1.0 / static_cast<double>(m));
    b.selection = BackgroundSelection::random_subsample;
    b.seed = seed;
    return b;
  }

  // Lloyd's k-means with k-means++ seeding; empty clusters are dropped.
  static BackgroundSet kmeans(const Matrix& data, std::size_t m, std::uint64_t seed,
                              std::size_t iterations = 50) {
    if (data.rows() == 0) throw Error("background: empty data");
    if (m == 0) throw Error("background: size must be >= 1");
    m = std::min(m, data.rows());
    const std::size_t n = data.rows();
    Rng rng(derive_seed(seed, "kmeans"));
    Matrix centers(0, data.cols());
    centers.append_row(data.row(rng.below(n)));
    std::vector<double> best(n, std::numeric_limits<double>::infinity());
    while (centers.rows() < m) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        best[i] = std::min(best[i], squared_distance(data.row(i), centers.row(centers.rows() - 1)));
        total += best[i];
      }
      if (total == 0.0) break;
      double target = rng.uniform() * total;
      std::size_t pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        target -= best[i];
        if (target <= 0.0) {
          pick = i;
          break;
        }
      }
      centers.append_row(data.row(pick));
    }
    const std::size_t k = centers.rows();
    std::vector<std::size_t> assign(n, 0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t it = 0; it < iterations; ++it) {
      bool changed = it == 0;
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t arg = 0;
        double dmin = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) {
          const double dist = squared_distance(data.row(i), centers.row(c));
          if (dist < dmin) {
            dmin = dist;
            arg = c;
          }
        }
        if (assign[i] != arg) changed = true;
        assign[i] = arg;
      }
      Matrix sums(k, data.cols());
      std::fill(counts.begin(), counts.end(), 0);
      for (std::size_t i = 0; i < n; ++i) {
        ++counts[assign[i]];
        for (std::size_t j = 0; j < data.cols(); ++j) sums(assign[i], j) += data(i, j);
      }
      for (std::size_t c = 0; c < k; ++c) {
        if (counts[c] == 0) continue;
        for (std::size_t j = 0; j < data.cols(); ++j) {
          centers(c, j) = sums(c, j) / static_cast<double>(counts[c]);
        }
      }
      if (!changed) break;
    }
    BackgroundSet b;
    b.points = Matrix(0, data.cols());
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      b.points.append_row(centers.row(c));
      b.weights.push_back(static_cast<double>(counts[c]) / static_cast<double>(n));
    }
    b.selection = BackgroundSelection::kmeans_centroids;
    b.seed = seed;
    return b;
  }
};

struct Attribution {
  std::vector<double> phi;
  double base_value = 0.0;
  double prediction = 0.0;  // model score of the explained point
  std::size_t point_id = 0;
  std::string model_tag;

  // |base + sum(phi) - prediction|
  double additivity_error() const {
    return std::fabs(base_value + std::accumulate(phi.begin(), phi.end(), 0.0) - prediction);
  }
};

struct AttributionMatrix {
  std::vector<Attribution> rows;
  std::string model_tag;
  std::string background_digest;

  std::size_t size() const { return rows.size(); }
  std::size_t d() const { return rows.empty() ? 0 : rows.front().phi.size(); }

  void validate() const {
    for (const auto& r : rows) {
      if (r.phi.size() != d()) throw Error("attribution matrix has rows of differing width");
      if (r.model_tag != model_tag) throw Error("attribution matrix mixes model tags");
    }
  }

  // Mean |phi_j| per feature.
  std::vector<double> mean_abs() const {
    std::vector<double> out(d(), 0.0);
    for (const auto& r : rows) {
      for (std::size_t j = 0; j < out.size(); ++j) out[j] += std::fabs(r.phi[j]);
    }
    for (auto& v : out) v /= rows.empty() ? 1.0 : static_cast<double>(rows.size());
    return out;
  }
};

// ---------------------------------------------------------------------------
// Coalition game: v(S) = E_b[f(x_S, b_{not S})] over the background.

template <class ScoreFn>
class CoalitionGame {
 public:
  CoalitionGame(const ScoreFn& score, std::span<const double> x, const BackgroundSet& background)
      : score_(score), x_(x), background_(background), buffer_(x.size()) {
    if (background.size() == 0) throw Error("shap: empty background");
    if (background.d() != x.size()) {
      throw Error("shap: background has " + std::to_string(background.d()) +
                  " features, point has " + std::to_string(x.size()));
    }
  }

  // `in` is a 0/1 mask over features.
  double value(std::span<const std::uint8_t> in) {
    double total = 0.0;
    for (std::size_t b = 0; b < background_.size(); ++b) {
      auto bg = background_.points.row(b);
      for (std::size_t j = 0; j < buffer_.size(); ++j) buffer_[j] = in[j] ? x_[j] : bg[j];
      total += background_.weights[b] * score_(std::span<const double>(buffer_));
    }
    return total;
  }

  double value_of_bits(std::uint64_t bits) {
    mask_.resize(x_.size());
    for (std::size_t j = 0; j < x_.size(); ++j) mask_[j] = (bits >> j) & 1U;
    return value(mask_);
  }

 private:
  const ScoreFn& score_;
  std::span<const double> x_;
  const BackgroundSet& background_;
  std::vector<double> buffer_;
  std::vector<std::uint8_t> mask_;
};

inline constexpr std::size_t kMaxExactFeatures = 12;

inline double log_factorial(std::size_t n) { return std::lgamma(static_cast<double>(n) + 1.0); }

// Exact Shapley values by enumerating all 2^d coalitions:
// phi_j = sum_{S not containing j} |S|!(d-|S|-1)!/d! [v(S u {j}) - v(S)].
template <class ScoreFn>
Attribution exact_shapley(const ScoreFn& score, std::span<const double> x,
                          const BackgroundSet& background, std::size_t point_id = 0) {
  const std::size_t d = x.size();
  if (d == 0) throw Error("exact_shapley: point has no features");
  if (d > kMaxExactFeatures) {
    throw Error("exact_shapley: d=" + std::to_string(d) + " exceeds the enumeration limit of " +
                std::to_string(kMaxExactFeatures));
  }
  CoalitionGame game(score, x, background);
  const std::uint64_t n_masks = std::uint64_t{1} << d;
  std::vector<double> v(n_masks);
  for (std::uint64_t m = 0; m < n_masks; ++m) v[m] = game.value_of_bits(m);

  std::vector<double> weight(d);
  for (std::size_t s = 0; s < d; ++s) {
    weight[s] = std::exp(log_factorial(s) + log_factorial(d - s - 1) - log_factorial(d));
  }
  Attribution a;
  a.phi.assign(d, 0.0);
  for (std::uint64_t m = 0; m < n_masks; ++m) {
    const auto s = static_cast<std::size_t>(std::popcount(m));
    for (std::size_t j = 0; j < d; ++j) {
      if (m & (std::uint64_t{1} << j)) continue;
      a.phi[j] += weight[s] * (v[m | (std::uint64_t{1} << j)] - v[m]);
    }
  }
  a.base_value = v[0];
  a.prediction = score(x);
  a.point_id = point_id;
  return a;
}

struct KernelShapConfig {
  std::size_t n_coalitions = 2048;  // used only when sampling
  double ridge = 1e-8;
  std::uint64_t seed = 0;
  std::size_t enumeration_max_d = kMaxExactFeatures;
};

// Shapley kernel weight of a coalition of size s among d features.
inline double shapley_kernel_weight(std::size_t d, std::size_t s) {
  const double log_binom = log_factorial(d) - log_factorial(s) - log_factorial(d - s);
  return static_cast<double>(d - 1) /
         (std::exp(log_binom) * static_cast<double>(s) * static_cast<double>(d - s));
}

struct CoalitionDesign {
  std::vector<std::vector<std::uint8_t>> masks;
  std::vector<double> weights;  // normalized to sum to one
};

// All 2^d - 2 non-trivial coalitions with their kernel weights.
inline CoalitionDesign enumerate_coalitions(std::size_t d) {
  CoalitionDesign design;
  const std::uint64_t n_masks = std::uint64_t{1} << d;
  for (std::uint64_t m = 1; m + 1 < n_masks; ++m) {
    std::vector<std::uint8_t> mask(d);
    for (std::size_t j = 0; j < d; ++j) mask[j] = (m >> j) & 1U;
    design.masks.push_back(std::move(mask));
    design.weights.push_back(shapley_kernel_weight(d, static_cast<std::size_t>(std::popcount(m))));
  }
  return design;
}

// Paired sampling: coalition sizes are drawn proportionally to the total
// kernel mass of each size, members uniformly; each draw is added together
// with its complement. Every sampled coalition carries equal weight.
inline CoalitionDesign sample_coalitions(std::size_t d, std::size_t n_coalitions, Rng& rng) {
  if (d < 2) throw Error("sample_coalitions: need d >= 2");
  std::vector<double> size_cdf(d - 1);
  double acc = 0.0;
  for (std::size_t s = 1; s < d; ++s) {
    acc += static_cast<double>(d - 1) / (static_cast<double>(s) * static_cast<double>(d - s));
    size_cdf[s - 1] = acc;
  }
  CoalitionDesign design;
  const std::size_t pairs = std::max<std::size_t>(1, n_coalitions / 2);
  for (std::size_t p = 0; p < pairs; ++p) {
    const double u = rng.uniform() * acc;
    const auto s = static_cast<std::size_t>(
                       std::lower_bound(size_cdf.begin(), size_cdf.end(), u) - size_cdf.begin()) + 1;
    std::vector<std::uint8_t> mask(d, 0);
    for (auto j : rng.sample_without_replacement(d, std::min(s, d - 1))) mask[j] = 1;
    std::vector<std::uint8_t> complement(d);
    for (std::size_t j = 0; j < d; ++j) complement[j] = 1 - mask[j];
    design.masks.push_back(std::move(mask));
    design.masks.push_back(std::move(complement));
  }
  design.weights.assign(design.masks.size(), 1.0);
  return design;
}

namespace detail {

inline std::uint64_t mask_bits(std::span<const std::uint8_t> mask) {
  std::uint64_t bits = 0;
  for (std::size_t j = 0; j < mask.size(); ++j) {
    if (mask[j]) bits |= std::uint64_t{1} << j;
  }
  return bits;
}

// Weighted least squares over the coalition design given v(S) through
// `value(mask)`; base = v(empty), prediction = v(full).
template <class ValueFn>
Attribution solve_kernel_shap(ValueFn&& value, double prediction, double base, std::size_t d,
                              const KernelShapConfig& config, std::size_t point_id) {
  Attribution a;
  a.point_id = point_id;
  a.prediction = prediction;
  a.base_value = base;
  const double delta = a.prediction - a.base_value;
  if (d == 1) {
    a.phi = {delta};
    return a;
  }

  CoalitionDesign design;
  if (d <= config.enumeration_max_d) {
    design = enumerate_coalitions(d);
  } else {
    Rng rng(derive_seed(config.seed, "kernel_shap", static_cast<std::uint64_t>(point_id)));
    design = sample_coalitions(d, config.n_coalitions, rng);
  }
  const double weight_sum = std::accumulate(design.weights.begin(), design.weights.end(), 0.0);

  const std::size_t p = d - 1;
  Eigen::MatrixXd normal = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p));
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
  Eigen::VectorXd row(static_cast<Eigen::Index>(p));
  for (std::size_t c = 0; c < design.masks.size(); ++c) {
    const auto& mask = design.masks[c];
    const double w = design.weights[c] / weight_sum;
    const double last = mask[d - 1];
    const double target = value(std::span<const std::uint8_t>(mask)) - a.base_value - last * delta;
    for (std::size_t j = 0; j < p; ++j) row[static_cast<Eigen::Index>(j)] = mask[j] - last;
    normal.selfadjointView<Eigen::Lower>().rankUpdate(row, w);
    rhs += w * target * row;
  }
  normal = normal.selfadjointView<Eigen::Lower>();
  normal.diagonal().array() += config.ridge;

  Eigen::LLT<Eigen::MatrixXd> llt(normal);
  if (llt.info() != Eigen::Success) {
    throw Error("kernel_shap: singular coalition system for point " + std::to_string(point_id));
  }
  const Eigen::VectorXd solution = llt.solve(rhs);
  if (!solution.allFinite()) {
    throw Error("kernel_shap: non-finite solution for point " + std::to_string(point_id));
  }
  a.phi.resize(d);
  double partial = 0.0;
  for (std::size_t j = 0; j < p; ++j) {
    a.phi[j] = solution[static_cast<Eigen::Index>(j)];
    partial += a.phi[j];
  }
  a.phi[d - 1] = delta - partial;
  return a;
}

}  // namespace detail

// Kernel SHAP. Solves the Shapley-kernel weighted least-squares problem with
// phi_0 fixed to v(empty) and sum(phi) = f(x) - v(empty) enforced by
// eliminating the last coefficient. Full enumeration for d <= 12 (exact
// Shapley values up to the ridge term), paired sampling otherwise.
template <class ScoreFn>
Attribution kernel_shap(const ScoreFn& score, std::span<const double> x,
                        const BackgroundSet& background, const KernelShapConfig& config,
                        std::size_t point_id = 0) {
  const std::size_t d = x.size();
  if (d == 0) throw Error("kernel_shap: point has no features");
  CoalitionGame game(score, x, background);
  const double base = game.value(std::vector<std::uint8_t>(d, 0));
  return detail::solve_kernel_shap([&](std::span<const std::uint8_t> m) { return game.value(m); },
                                   score(x), base, d, config, point_id);
}

// Same solver over a precomputed table of all 2^d coalition values, indexed
// by bit mask (bit j set = feature j taken from the explained point).
inline Attribution kernel_shap_from_table(std::span<const double> values, double prediction,
                                          std::size_t d, const KernelShapConfig& config,
                                          std::size_t point_id = 0) {
  if (d == 0) throw Error("kernel_shap: point has no features");
  if (d > 62 || values.size() != (std::size_t{1} << d)) {
    throw Error("kernel_shap_from_table: table size does not match 2^d");
  }
  return detail::solve_kernel_shap(
      [&](std::span<const std::uint8_t> m) { return values[detail::mask_bits(m)]; },
      prediction, values.front(), d, config, point_id);
}

// Explains the given rows of `points`. point_ids label each row (defaults to
// the row index). Per-point work is independent and seeded by point id.
template <class Scorer>
AttributionMatrix explain_dataset(const Scorer& scorer, const Matrix& points,
                                  const BackgroundSet& background, const KernelShapConfig& config,
                                  std::span<const std::size_t> point_ids = {},
                                  std::size_t jobs = 1) {
  if (points.cols() != scorer.n_features() || background.d() != scorer.n_features()) {
    throw Error("explain_dataset: model, data and background dimensions disagree");
  }
  if (!point_ids.empty() && point_ids.size() != points.rows()) {
    throw Error("explain_dataset: point id count does not match rows");
  }
  AttributionMatrix out;
  out.model_tag = scorer.tag();
  out.background_digest = background.digest();
  out.rows.resize(points.rows());
  auto score = [&scorer](std::span<const double> p) { return scorer.score(p); };
  const std::size_t d = points.cols();
  parallel_for(points.rows(), jobs, [&](std::size_t i) {
    const std::size_t id = point_ids.empty() ? i : point_ids[i];
    // Scorers that can tabulate every coalition value at once do so when the
    // design is a full enumeration; the table equals the per-call values.
    std::optional<std::vector<double>> table;
    if constexpr (requires { scorer.coalition_values(points.row(i), background); }) {
      if (d <= config.enumeration_max_d) table = scorer.coalition_values(points.row(i), background);
    }
    out.rows[i] = table ? kernel_shap_from_table(*table, scorer.score(points.row(i)), d, config, id)
                        : kernel_shap(score, points.row(i), background, config, id);
    out.rows[i].model_tag = out.model_tag;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline void write_attributions_csv(std::ostream& out, const AttributionMatrix& m) {
  out << "point_id,base";
  for (std::size_t j = 0; j < m.d(); ++j) out << ",phi_" << (j + 1);
  out << '\n';
  for (const auto& r : m.rows) {
    out << r.point_id << ',' << format_real(r.base_value);
    for (double v : r.phi) out << ',' << format_real(v);
    out << '\n';
  }
}

inline void to_json(nlohmann::json& j, const AttributionMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : m.rows) {
    rows.push_back({{"point_id", r.point_id},
                    {"base", r.base_value},
                    {"prediction", r.prediction},
                    {"phi", r.phi}});
  }
  j = nlohmann::json{{"model_tag", m.model_tag},
                     {"background_digest", m.background_digest},
                     {"rows", std::move(rows)}};
}

inline void from_json(const nlohmann::json& j, AttributionMatrix& m) {
  m.model_tag = j.at("model_tag").get<std::string>();
  m.background_digest = j.at("background_digest").get<std::string>();
  m.rows.clear();
  for (const auto& r : j.at("rows")) {
    Attribution a;
    a.point_id = r.at("point_id").get<std::size_t>();
    a.base_value = r.at("base").get<double>();
    a.prediction = r.at("prediction").get<double>();
    a.phi = r.at("phi").get<std::vector<double>>();
    a.model_tag = m.model_tag;
    m.rows.push_back(std::move(a));
  }
  m.validate();
}

}  // namespace dpshap
