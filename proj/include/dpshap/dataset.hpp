#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpshap/common.hpp"

namespace dpshap {

inline constexpr std::uint8_t kNormal = 0;
inline constexpr std::uint8_t kAnomaly = 1;

// Numeric feature matrix with optional binary labels (1 = anomaly). Labels
// ride along for evaluation; fitting code only ever receives `features`.
struct Dataset {
  Matrix features;
  std::optional<std::vector<std::uint8_t>> labels;
  std::vector<std::string> feature_names;
  std::string provenance;

  std::size_t n() const { return features.rows(); }
  std::size_t d() const { return features.cols(); }

  std::size_t anomaly_count() const {
    if (!labels) return 0;
    return static_cast<std::size_t>(std::count(labels->begin(), labels->end(), kAnomaly));
  }

  double contamination() const {
    return n() == 0 ? 0.0 : static_cast<double>(anomaly_count()) / static_cast<double>(n());
  }

  // Checks the structural invariants. Evaluation use additionally requires
  // both classes to be present (see require_both_classes).
  void validate() const {
    if (feature_names.size() != d()) {
      throw Error("feature_names has " + std::to_string(feature_names.size()) +
                  " entries but data has " + std::to_string(d()) + " columns");
    }
    std::set<std::string> seen;
    for (const auto& name : feature_names) {
      if (!seen.insert(name).second) throw Error("duplicate feature name '" + name + "'");
    }
    for (std::size_t r = 0; r < n(); ++r) {
      for (std::size_t c = 0; c < d(); ++c) {
        if (!std::isfinite(features(r, c))) {
          throw Error("non-finite value at row " + std::to_string(r) + ", column " +
                      feature_names[c]);
        }
      }
    }
    if (labels) {
      if (labels->size() != n()) throw Error("label vector length does not match row count");
      for (auto l : *labels) {
        if (l != kNormal && l != kAnomaly) throw Error("labels must be 0 or 1");
      }
    }
  }

  void require_both_classes() const {
    if (!labels) throw Error("dataset '" + provenance + "' has no labels");
    const auto a = anomaly_count();
    if (a == 0 || a == n()) throw Error("labels of '" + provenance + "' contain a single class");
  }

  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset out;
    out.features = features.select_rows(rows);
    if (labels) {
      std::vector<std::uint8_t> sub(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) sub[i] = (*labels)[rows[i]];
      out.labels = std::move(sub);
    }
    out.feature_names = feature_names;
    out.provenance = provenance;
    return out;
  }
};

inline std::vector<std::string> default_feature_names(std::size_t d) {
  std::vector<std::string> names(d);
  for (std::size_t j = 0; j < d; ++j) names[j] = "f" + std::to_string(j);
  return names;
}

struct DatasetDescriptor {
  std::string name;
  std::size_t n_records = 0;
  std::size_t n_features = 0;
  std::size_t n_anomalies = 0;

  void validate() const {
    if (n_features < 1) throw Error("descriptor '" + name + "': n_features must be >= 1");
    if (n_anomalies >= n_records) {
      throw Error("descriptor '" + name + "': n_anomalies must be < n_records");
    }
  }
};

// Manifest format: {"mammography": {"n_records": 11183, "n_features": 6,
// "n_anomalies": 260}, ...}
inline std::map<std::string, DatasetDescriptor> parse_descriptor_manifest(
    const nlohmann::json& j) {
  if (!j.is_object()) throw Error("descriptor manifest must be a JSON object");
  std::map<std::string, DatasetDescriptor> out;
  for (const auto& [name, entry] : j.items()) {
    DatasetDescriptor d;
    d.name = name;
    try {
      d.n_records = entry.at("n_records").get<std::size_t>();
      d.n_features = entry.at("n_features").get<std::size_t>();
      d.n_anomalies = entry.at("n_anomalies").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw Error("descriptor '" + name + "': " + e.what());
    }
    d.validate();
    out.emplace(name, d);
  }
  return out;
}

inline std::map<std::string, DatasetDescriptor> load_descriptor_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open descriptor manifest " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("descriptor manifest " + path + ": " + e.what());
  }
  return parse_descriptor_manifest(j);
}

// ---------------------------------------------------------------------------
// CSV ingestion

struct CsvOptions {
  std::optional<std::string> label_column;
  std::optional<DatasetDescriptor> descriptor;
  // Rows with empty/NaN cells are an error unless this is set.
  bool drop_missing_rows = false;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cell.push_back('"');
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cell.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      cells.push_back(std::move(cell));
      cell.clear();
    } else if (ch != '\r') {
      cell.push_back(ch);
    }
  }
  cells.push_back(std::move(cell));
  return cells;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

inline bool is_missing_token(const std::string& s) {
  return s.empty() || s == "NA" || s == "nan" || s == "NaN" || s == "?";
}

inline std::optional<double> parse_real(const std::string& s) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace detail

inline Dataset read_csv(std::istream& in, const CsvOptions& options,
                        const std::string& source = "<stream>") {
  std::string line;
  if (!std::getline(in, line)) throw Error(source + ": missing header row");
  auto header = detail::split_csv_line(line);
  for (auto& h : header) h = detail::trim(h);

  std::optional<std::size_t> label_idx;
  if (options.label_column) {
    auto it = std::find(header.begin(), header.end(), *options.label_column);
    if (it == header.end()) {
      throw Error(source + ": label column '" + *options.label_column + "' not found");
    }
    label_idx = static_cast<std::size_t>(it - header.begin());
  }

  Dataset data;
  data.provenance = source;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c != label_idx) data.feature_names.push_back(header[c]);
  }
  const std::size_t d = data.feature_names.size();
  if (d == 0) throw Error(source + ": no feature columns");
  data.features = Matrix(0, d);
  std::vector<std::uint8_t> labels;
  std::vector<double> row(d);

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw Error(source + ": row " + std::to_string(line_no) + " has " +
                  std::to_string(cells.size()) + " cells, expected " +
                  std::to_string(header.size()));
    }
    bool missing = false;
    std::uint8_t label = kNormal;
    std::size_t f = 0;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const std::string cell = detail::trim(cells[c]);
      if (detail::is_missing_token(cell)) {
        if (!options.drop_missing_rows) {
          throw Error(source + ": missing value at row " + std::to_string(line_no) +
                      ", column '" + header[c] + "'");
        }
        missing = true;
        continue;
      }
      const auto v = detail::parse_real(cell);
      if (!v) {
        throw Error(source + ": cannot parse '" + cell + "' at row " + std::to_string(line_no) +
                    ", column '" + header[c] + "'");
      }
      if (c == label_idx) {
        if (*v != 0.0 && *v != 1.0) {
          throw Error(source + ": label at row " + std::to_string(line_no) +
                      " must be 0 or 1, got '" + cell + "'");
        }
        label = *v == 1.0 ? kAnomaly : kNormal;
      } else {
        row[f++] = *v;
      }
    }
    if (missing) continue;
    data.features.append_row(row);
    labels.push_back(label);
  }
  if (label_idx) data.labels = std::move(labels);

  if (options.descriptor) {
    const auto& desc = *options.descriptor;
    if (data.n() != desc.n_records || data.d() != desc.n_features ||
        data.anomaly_count() != desc.n_anomalies) {
      throw Error(source + ": descriptor '" + desc.name + "' mismatch: expected (" +
                  std::to_string(desc.n_records) + " records, " +
                  std::to_string(desc.n_features) + " features, " +
                  std::to_string(desc.n_anomalies) + " anomalies), got (" +
                  std::to_string(data.n()) + ", " + std::to_string(data.d()) + ", " +
                  std::to_string(data.anomaly_count()) + ")");
    }
  }
  data.validate();
  return data;
}

inline Dataset load_csv(const std::string& path, const CsvOptions& options = {}) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return read_csv(in, options, path);
}

inline std::string format_real(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline void write_csv(std::ostream& out, const Dataset& data,
                      const std::string& label_column = "label") {
  for (std::size_t j = 0; j < data.d(); ++j) {
    if (j) out << ',';
    out << data.feature_names[j];
  }
  if (data.labels) out << ',' << label_column;
  out << '\n';
  for (std::size_t r = 0; r < data.n(); ++r) {
    for (std::size_t j = 0; j < data.d(); ++j) {
      if (j) out << ',';
      out << format_real(data.features(r, j));
    }
    if (data.labels) out << ',' << static_cast<int>((*data.labels)[r]);
    out << '\n';
  }
}

inline void save_csv(const std::string& path, const Dataset& data,
                     const std::string& label_column = "label") {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  write_csv(out, data, label_column);
}

// ---------------------------------------------------------------------------
// Standardization (sample standard deviation, n - 1 denominator).

struct Standardization {
  std::vector<double> mean;
  std::vector<double> stddev;
  std::vector<bool> zero_variance;

  // Applies the fitted transform; zero-variance columns pass through.
  Matrix apply(const Matrix& m) const {
    if (m.cols() != mean.size()) throw Error("standardization width mismatch");
    Matrix out = m;
    for (std::size_t r = 0; r < m.rows(); ++r) {
      for (std::size_t j = 0; j < m.cols(); ++j) {
        if (!zero_variance[j]) out(r, j) = (m(r, j) - mean[j]) / stddev[j];
      }
    }
    return out;
  }
};

struct StandardizedDataset {
  Dataset data;
  Standardization transform;
};

inline Standardization fit_standardization(const Matrix& m) {
  const std::size_t n = m.rows();
  const std::size_t d = m.cols();
  Standardization t;
  t.mean.assign(d, 0.0);
  t.stddev.assign(d, 0.0);
  t.zero_variance.assign(d, false);
  for (std::size_t j = 0; j < d; ++j) {
    double sum = 0.0;
    for (std::size_t r = 0; r < n; ++r) sum += m(r, j);
    const double mu = n ? sum / static_cast<double>(n) : 0.0;
    double ss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      const double dev = m(r, j) - mu;
      ss += dev * dev;
    }
    const double sd = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
    t.mean[j] = mu;
    t.stddev[j] = sd;
    t.zero_variance[j] = !(sd > 0.0);
  }
  return t;
}

inline StandardizedDataset standardize(const Dataset& data) {
  StandardizedDataset out;
  out.transform = fit_standardization(data.features);
  out.data = data;
  out.data.features = out.transform.apply(data.features);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic benchmarks

enum class SyntheticKind { global_outliers, local_outliers };

inline std::string to_string(SyntheticKind k) {
  return k == SyntheticKind::global_outliers ? "global_outliers" : "local_outliers";
}

inline SyntheticKind parse_synthetic_kind(std::string_view s) {
  if (s == "global_outliers" || s == "global") return SyntheticKind::global_outliers;
  if (s == "local_outliers" || s == "local") return SyntheticKind::local_outliers;
  throw Error("unknown synthetic kind '" + std::string(s) + "'");
}

// Geometry of the generators. The defaults are the "desk-scale" geometry the
// test-suite relies on.
struct SyntheticGeometry {
  // global_outliers: normals ~ N(0, I). Anomalies sit at |x[planted_axis]| in
  // [far_min, far_max] (random sign) and are uniform in [-spread, spread] on
  // every other axis.
  std::size_t planted_axis = 0;
  double far_min = 5.0;
  double far_max = 8.0;
  double spread = 1.5;
  // local_outliers: a dense cluster at the origin and a sparse cluster at
  // distance `cluster_gap`; anomalies lie on a shell of radius
  // [shell_min, shell_max] * sqrt(d / 2) around the dense cluster.
  double dense_fraction = 0.5;
  double dense_sd = 0.25;
  double sparse_sd = 2.0;
  double cluster_gap = 8.0;
  double shell_min = 1.0;
  double shell_max = 1.6;
};

inline Dataset gen_synthetic(SyntheticKind kind, std::size_t n_normal, std::size_t n_anomalies,
                             std::size_t d, std::uint64_t seed,
                             const SyntheticGeometry& geo = {}) {
  if (d < 2) throw Error("gen_synthetic: d must be >= 2");
  if (n_anomalies == 0 || n_normal < 10 * n_anomalies) {
    throw Error("gen_synthetic: need n_anomalies >= 1 and n_normal >= 10 * n_anomalies");
  }
  if (geo.planted_axis >= d) throw Error("gen_synthetic: planted axis out of range");

  Rng rng(derive_seed(seed, "gen_synthetic", static_cast<int>(kind)));
  const std::size_t n = n_normal + n_anomalies;
  Matrix x(n, d);
  std::vector<std::uint8_t> labels(n, kNormal);

  if (kind == SyntheticKind::global_outliers) {
    for (std::size_t r = 0; r < n_normal; ++r) {
      for (std::size_t j = 0; j < d; ++j) x(r, j) = rng.normal();
    }
    for (std::size_t r = n_normal; r < n; ++r) {
      for (std::size_t j = 0; j < d; ++j) {
        if (j == geo.planted_axis) {
          const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
          x(r, j) = sign * rng.uniform(geo.far_min, geo.far_max);
        } else {
          x(r, j) = rng.uniform(-geo.spread, geo.spread);
        }
      }
      labels[r] = kAnomaly;
    }
  } else {
    const auto n_dense = static_cast<std::size_t>(
        std::llround(geo.dense_fraction * static_cast<double>(n_normal)));
    const double offset = geo.cluster_gap / std::sqrt(static_cast<double>(d));
    for (std::size_t r = 0; r < n_normal; ++r) {
      const bool dense = r < n_dense;
      for (std::size_t j = 0; j < d; ++j) {
        x(r, j) = dense ? geo.dense_sd * rng.normal() : offset + geo.sparse_sd * rng.normal();
      }
    }
    std::vector<double> dir(d);
    for (std::size_t r = n_normal; r < n; ++r) {
      double norm = 0.0;
      do {
        norm = 0.0;
        for (auto& v : dir) {
          v = rng.normal();
          norm += v * v;
        }
        norm = std::sqrt(norm);
      } while (norm == 0.0);
      // The dense cluster's typical radius grows like sqrt(d); the shell keeps
      // pace so it stays outside it (unchanged at d = 2).
      const double radius =
          rng.uniform(geo.shell_min, geo.shell_max) * std::sqrt(static_cast<double>(d) / 2.0);
      for (std::size_t j = 0; j < d; ++j) x(r, j) = radius * dir[j] / norm;
      labels[r] = kAnomaly;
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);

  Dataset out;
  out.features = x.select_rows(order);
  std::vector<std::uint8_t> shuffled(n);
  for (std::size_t i = 0; i < n; ++i) shuffled[i] = labels[order[i]];
  out.labels = std::move(shuffled);
  out.feature_names = default_feature_names(d);
  out.provenance = "synthetic:" + to_string(kind) + ":seed=" + std::to_string(seed);
  return out;
}

// Stratified, seeded subsample of row indices (sorted ascending). Keeps the
// class proportions of the full dataset.
inline std::vector<std::size_t> stratified_subsample(std::span<const std::uint8_t> labels,
                                                     std::size_t count, std::uint64_t seed) {
  const std::size_t n = labels.size();
  if (count >= n) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
  }
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < n; ++i) (labels[i] == kAnomaly ? pos : neg).push_back(i);
  auto n_pos = static_cast<std::size_t>(std::llround(
      static_cast<double>(count) * static_cast<double>(pos.size()) / static_cast<double>(n)));
  if (!pos.empty()) n_pos = std::clamp<std::size_t>(n_pos, 1, std::min(pos.size(), count - 1));
  const std::size_t n_neg = std::min(neg.size(), count - n_pos);
  Rng rng(derive_seed(seed, "stratified_subsample"));
  std::vector<std::size_t> out;
  for (auto i : rng.sample_without_replacement(pos.size(), n_pos)) out.push_back(pos[i]);
  for (auto i : rng.sample_without_replacement(neg.size(), n_neg)) out.push_back(neg[i]);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace dpshap
