#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpshap/common.hpp"
#include "dpshap/dataset.hpp"
#include "dpshap/iforest.hpp"
#include "dpshap/lof.hpp"
#include "dpshap/metrics.hpp"

namespace dpshap {

enum class ModelKind { iforest, lof };

inline std::string to_string(ModelKind k) { return k == ModelKind::iforest ? "iforest" : "lof"; }

inline ModelKind parse_model_kind(std::string_view s) {
  if (s == "iforest" || s == "iForest") return ModelKind::iforest;
  if (s == "lof" || s == "LOF") return ModelKind::lof;
  throw Error("unknown model kind '" + std::string(s) + "'");
}

struct ModelParams {
  ModelKind kind = ModelKind::iforest;
  IForestParams iforest;
  std::size_t lof_k = 20;

  // Ordering used for grid-search tie-breaks: fewer trees / smaller k first.
  auto size_key() const {
    return kind == ModelKind::iforest
               ? std::tuple(iforest.n_estimators, iforest.max_features, iforest.subsample_size)
               : std::tuple(lof_k, std::size_t{0}, std::size_t{0});
  }
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

inline void to_json(nlohmann::json& j, const ModelParams& p) {
  j = nlohmann::json{{"kind", to_string(p.kind)}};
  if (p.kind == ModelKind::iforest) {
    j["n_estimators"] = p.iforest.n_estimators;
    j["max_features"] = p.iforest.max_features;
    j["subsample_size"] = p.iforest.subsample_size;
    j["height_limit"] = p.iforest.height_limit;
  } else {
    j["k"] = p.lof_k;
  }
}

inline void from_json(const nlohmann::json& j, ModelParams& p) {
  p.kind = parse_model_kind(j.at("kind").get<std::string>());
  p.iforest.n_estimators = j.value("n_estimators", std::size_t{100});
  p.iforest.max_features = j.value("max_features", std::size_t{0});
  p.iforest.subsample_size = j.value("subsample_size", std::size_t{0});
  p.iforest.height_limit = j.value("height_limit", std::size_t{0});
  p.lof_k = j.value("k", std::size_t{20});
}

// A fitted detector with "higher score = more anomalous" orientation. The
// training scores are computed with the same scoring function at fit time.
class AnomalyScorer {
 public:
  using Model = std::variant<IsolationForestModel, LofModel>;

  AnomalyScorer() = default;
  explicit AnomalyScorer(Model model) : model_(std::move(model)) {}

  static AnomalyScorer fit(const Matrix& x, const ModelParams& params, std::uint64_t seed) {
    if (params.kind == ModelKind::iforest) {
      return AnomalyScorer(fit_iforest(x, params.iforest, seed));
    }
    return AnomalyScorer(fit_lof(x, params.lof_k));
  }

  double score(std::span<const double> x) const {
    return std::visit([&](const auto& m) { return m.score(x); }, model_);
  }

  std::vector<double> score_all(const Matrix& x) const {
    std::vector<double> out(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) out[r] = score(x.row(r));
    return out;
  }

  // All 2^d coalition values against `background` when the model can
  // tabulate them directly (iForest); nullopt otherwise.
  std::optional<std::vector<double>> coalition_values(std::span<const double> x,
                                                      const BackgroundSet& background) const {
    if (const auto* f = std::get_if<IsolationForestModel>(&model_)) {
      return f->coalition_values(x, background.points, background.weights);
    }
    return std::nullopt;
  }

  ModelKind kind() const {
    return std::holds_alternative<IsolationForestModel>(model_) ? ModelKind::iforest
                                                                : ModelKind::lof;
  }
  static constexpr bool higher_is_anomalous = true;

  std::size_t n_features() const {
    return std::visit([](const auto& m) { return m.n_features(); }, model_);
  }

  const Model& model() const { return model_; }

  // Digest of the fitted model contents.
  std::string tag() const {
    Digest d;
    d.add(to_string(kind()));
    if (const auto* f = std::get_if<IsolationForestModel>(&model_)) {
      d.add(static_cast<std::uint64_t>(f->subsample_size()));
      for (const auto& t : f->trees()) {
        for (const auto& n : t.nodes()) {
          d.add(static_cast<std::uint64_t>(static_cast<std::uint32_t>(n.feature)));
          d.add(n.split);
          d.add(static_cast<std::uint64_t>(n.size));
        }
      }
    } else {
      const auto& l = std::get<LofModel>(model_);
      d.add(static_cast<std::uint64_t>(l.k()));
      d.add(l.training_points());
    }
    return d.hex();
  }

 private:
  Model model_;
};

// Scores above the (1 - contamination) quantile of the training scores are
// flagged as anomalies.
inline double decision_threshold(std::span<const double> training_scores, double contamination) {
  if (training_scores.empty()) throw Error("decision_threshold: no training scores");
  if (!(contamination >= 0.0 && contamination < 1.0)) {
    throw Error("decision_threshold: contamination must lie in [0, 1)");
  }
  std::vector<double> sorted(training_scores.begin(), training_scores.end());
  std::sort(sorted.begin(), sorted.end());
  return quantile_sorted(sorted, 1.0 - contamination);
}

inline std::vector<std::uint8_t> predict(std::span<const double> scores, double threshold) {
  std::vector<std::uint8_t> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] > threshold ? kAnomaly : kNormal;
  return out;
}

// ---------------------------------------------------------------------------
// Model artifacts (JSON, versioned)

inline constexpr int kModelFormatVersion = 1;

struct ModelArtifact {
  AnomalyScorer scorer;
  ModelParams params;
  std::uint64_t seed = 0;
  std::vector<std::string> feature_names;
  std::optional<Standardization> standardization;
  double threshold = 0.0;
};

inline nlohmann::json model_to_json(const ModelArtifact& a) {
  nlohmann::json j;
  j["format"] = "dpshap-model";
  j["version"] = kModelFormatVersion;
  j["params"] = a.params;
  j["seed"] = a.seed;
  j["feature_names"] = a.feature_names;
  j["threshold"] = a.threshold;
  if (a.standardization) {
    std::vector<int> zv(a.standardization->zero_variance.begin(),
                        a.standardization->zero_variance.end());
    j["standardization"] = {{"mean", a.standardization->mean},
                            {"stddev", a.standardization->stddev},
                            {"zero_variance", zv}};
  }
  if (const auto* f = std::get_if<IsolationForestModel>(&a.scorer.model())) {
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : f->trees()) {
      nlohmann::json nodes = nlohmann::json::array();
      for (const auto& n : t.nodes()) {
        nodes.push_back({n.feature, n.left, n.right, n.size, n.depth, n.split});
      }
      trees.push_back({{"height_limit", t.height_limit()}, {"nodes", std::move(nodes)}});
    }
    j["iforest"] = {{"n_features", f->n_features()},
                    {"subsample_size", f->subsample_size()},
                    {"max_features", f->max_features()},
                    {"seed", f->seed()},
                    {"trees", std::move(trees)}};
  } else {
    const auto& l = std::get<LofModel>(a.scorer.model());
    j["lof"] = {{"k", l.k()},
                {"rows", l.training_points().rows()},
                {"cols", l.training_points().cols()},
                {"points", l.training_points().values()}};
  }
  return j;
}

inline ModelArtifact model_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != "dpshap-model") throw Error("not a dpshap model artifact");
  if (j.value("version", 0) != kModelFormatVersion) {
    throw Error("unsupported model artifact version " + std::to_string(j.value("version", 0)));
  }
  ModelArtifact a;
  a.params = j.at("params").get<ModelParams>();
  a.seed = j.at("seed").get<std::uint64_t>();
  a.feature_names = j.at("feature_names").get<std::vector<std::string>>();
  a.threshold = j.at("threshold").get<double>();
  if (j.contains("standardization")) {
    Standardization s;
    const auto& js = j.at("standardization");
    s.mean = js.at("mean").get<std::vector<double>>();
    s.stddev = js.at("stddev").get<std::vector<double>>();
    for (int v : js.at("zero_variance").get<std::vector<int>>()) s.zero_variance.push_back(v != 0);
    a.standardization = std::move(s);
  }
  if (j.contains("iforest")) {
    const auto& jf = j.at("iforest");
    std::vector<IsolationTree> trees;
    for (const auto& jt : jf.at("trees")) {
      std::vector<IsolationTree::Node> nodes;
      for (const auto& jn : jt.at("nodes")) {
        IsolationTree::Node n;
        n.feature = jn.at(0).get<std::int32_t>();
        n.left = jn.at(1).get<std::int32_t>();
        n.right = jn.at(2).get<std::int32_t>();
        n.size = jn.at(3).get<std::uint32_t>();
        n.depth = jn.at(4).get<std::uint32_t>();
        n.split = jn.at(5).get<double>();
        nodes.push_back(n);
      }
      trees.emplace_back(std::move(nodes), jt.at("height_limit").get<std::size_t>());
    }
    a.scorer = AnomalyScorer(IsolationForestModel(
        std::move(trees), jf.at("n_features").get<std::size_t>(),
        jf.at("subsample_size").get<std::size_t>(), jf.at("max_features").get<std::size_t>(),
        jf.at("seed").get<std::uint64_t>()));
  } else {
    const auto& jl = j.at("lof");
    Matrix pts(jl.at("rows").get<std::size_t>(), jl.at("cols").get<std::size_t>(),
               jl.at("points").get<std::vector<double>>());
    a.scorer = AnomalyScorer(fit_lof(pts, jl.at("k").get<std::size_t>()));
  }
  return a;
}

inline void save_model(const std::string& path, const ModelArtifact& a) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << model_to_json(a).dump() << '\n';
}

inline ModelArtifact load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(path + ": " + e.what());
  }
  return model_from_json(j);
}

// ---------------------------------------------------------------------------
// Hyperparameter search

struct GridEntry {
  ModelParams params;
  std::vector<double> fold_auc;
  double mean_auc = 0.0;
  std::optional<std::string> error;  // set when the entry cannot be fitted on a fold
};

struct GridSearchResult {
  ModelParams best;
  std::vector<GridEntry> entries;
};

// Stratified fold assignment; fold f holds every n_folds-th member of each
// class after a seeded shuffle.
inline std::vector<std::size_t> assign_folds(std::span<const std::uint8_t> labels,
                                             std::size_t n_folds, std::uint64_t seed) {
  std::vector<std::size_t> fold(labels.size(), 0);
  Rng rng(derive_seed(seed, "folds"));
  for (std::uint8_t cls : {kNormal, kAnomaly}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == cls) members.push_back(i);
    }
    rng.shuffle(members);
    for (std::size_t i = 0; i < members.size(); ++i) fold[members[i]] = i % n_folds;
  }
  return fold;
}

// Exhaustive cross-validated search. For each fold the model is fitted on the
// remaining folds (features only) and its scores on the held-out fold are
// ranked against the held-out labels. The winner has the highest mean fold
// AUC; ties go to the smaller model, then to the earlier lattice entry.
// Entries that cannot be fitted on some fold (e.g. k >= fold size) are kept
// with their error and never win.
inline GridSearchResult grid_search(const Matrix& x, std::span<const std::uint8_t> labels,
                                    const std::vector<ModelParams>& grid, std::size_t n_folds,
                                    std::uint64_t seed) {
  if (grid.empty()) throw Error("grid_search: empty grid");
  if (labels.size() != x.rows()) throw Error("grid_search: labels do not match rows");
  if (n_folds < 2) throw Error("grid_search: need at least 2 folds");
  const auto fold = assign_folds(labels, n_folds, seed);

  std::vector<std::vector<std::size_t>> train_rows(n_folds), test_rows(n_folds);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t f = 0; f < n_folds; ++f) (fold[i] == f ? test_rows : train_rows)[f].push_back(i);
  }
  std::vector<Matrix> train_x(n_folds), test_x(n_folds);
  std::vector<std::vector<std::uint8_t>> test_y(n_folds);
  for (std::size_t f = 0; f < n_folds; ++f) {
    std::size_t pos = 0;
    for (auto r : test_rows[f]) pos += labels[r] == kAnomaly;
    if (pos == 0 || pos == test_rows[f].size()) {
      throw Error("grid_search: fold " + std::to_string(f) + " has single-class labels");
    }
    train_x[f] = x.select_rows(train_rows[f]);
    test_x[f] = x.select_rows(test_rows[f]);
    for (auto r : test_rows[f]) test_y[f].push_back(labels[r]);
  }

  GridSearchResult result;
  std::optional<std::size_t> best;
  for (const auto& params : grid) {
    GridEntry entry;
    entry.params = params;
    try {
      for (std::size_t f = 0; f < n_folds; ++f) {
        const auto scorer =
            AnomalyScorer::fit(train_x[f], params, derive_seed(seed, "grid_fit", f));
        entry.fold_auc.push_back(auc(scorer.score_all(test_x[f]), test_y[f]));
      }
      entry.mean_auc = mean_of(entry.fold_auc);
    } catch (const Error& e) {
      entry.fold_auc.clear();
      entry.error = e.what();
    }
    result.entries.push_back(std::move(entry));
    const auto& e = result.entries.back();
    if (e.error) continue;
    if (!best) {
      best = result.entries.size() - 1;
      continue;
    }
    const auto& b = result.entries[*best];
    if (e.mean_auc > b.mean_auc ||
        (e.mean_auc == b.mean_auc && e.params.size_key() < b.params.size_key())) {
      best = result.entries.size() - 1;
    }
  }
  if (!best) {
    throw Error("grid_search: no grid entry could be fitted (" + *result.entries.front().error + ")");
  }
  result.best = result.entries[*best].params;
  return result;
}

}  // namespace dpshap
