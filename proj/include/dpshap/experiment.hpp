#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpshap/common.hpp"
#include "dpshap/dataset.hpp"
#include "dpshap/metrics.hpp"
#include "dpshap/privacy.hpp"
#include "dpshap/scorer.hpp"
#include "dpshap/shap.hpp"

namespace dpshap {

inline constexpr const char* kVersion = "1.0.0";
inline constexpr int kReportFormatVersion = 1;

// ---------------------------------------------------------------------------
// Configuration

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::global_outliers;
  std::size_t n_normal = 1000;
  std::size_t n_anomalies = 50;
  std::size_t d = 6;
  std::uint64_t seed = 0;
  SyntheticGeometry geometry;
};

// Either a CSV file (with label column and optional descriptor) or a
// synthetic generator call.
struct DatasetRef {
  std::string name;
  std::optional<std::string> csv;
  std::optional<std::string> label_column;
  std::optional<DatasetDescriptor> descriptor;
  bool drop_missing_rows = false;
  std::optional<SyntheticSpec> synthetic;
};

struct ShapSettings {
  bool enabled = true;
  std::size_t background_size = 100;
  BackgroundSelection selection = BackgroundSelection::random_subsample;
  std::size_t n_coalitions = 2048;
  double ridge = 1e-8;
  std::size_t enumeration_max_d = kMaxExactFeatures;
  double shaplength_p = 0.90;
};

struct TuningSettings {
  bool enabled = true;
  double fraction = 0.2;  // share of rows held out for tuning
  std::size_t folds = 3;
  std::vector<ModelParams> iforest_grid;
  std::vector<ModelParams> lof_grid;

  const std::vector<ModelParams>& grid(ModelKind k) const {
    return k == ModelKind::iforest ? iforest_grid : lof_grid;
  }
};

inline std::vector<ModelParams> iforest_lattice(const std::vector<std::size_t>& n_estimators,
                                                const std::vector<std::size_t>& max_features,
                                                const std::vector<std::size_t>& subsample_size) {
  std::vector<ModelParams> out;
  for (auto t : n_estimators) {
    for (auto f : max_features) {
      for (auto s : subsample_size) {
        ModelParams p;
        p.kind = ModelKind::iforest;
        p.iforest.n_estimators = t;
        p.iforest.max_features = f;
        p.iforest.subsample_size = s;
        out.push_back(p);
      }
    }
  }
  return out;
}

inline std::vector<ModelParams> lof_lattice(const std::vector<std::size_t>& ks) {
  std::vector<ModelParams> out;
  for (auto k : ks) {
    ModelParams p;
    p.kind = ModelKind::lof;
    p.lof_k = k;
    out.push_back(p);
  }
  return out;
}

inline TuningSettings default_tuning() {
  TuningSettings t;
  t.iforest_grid = iforest_lattice({50, 100, 200}, {0}, {0});
  t.lof_grid = lof_lattice({5, 10, 20, 35});
  return t;
}

enum class PrecisionVariant { anomaly, normal, weighted };

inline std::string to_string(PrecisionVariant v) {
  switch (v) {
    case PrecisionVariant::anomaly: return "anomaly";
    case PrecisionVariant::normal: return "normal";
    default: return "weighted";
  }
}

inline PrecisionVariant parse_precision_variant(std::string_view s) {
  if (s == "anomaly") return PrecisionVariant::anomaly;
  if (s == "normal") return PrecisionVariant::normal;
  if (s == "weighted") return PrecisionVariant::weighted;
  throw Error("unknown precision variant '" + std::string(s) + "'");
}

inline std::optional<double> pick(const PrecisionReport& p, PrecisionVariant v) {
  switch (v) {
    case PrecisionVariant::anomaly: return p.anomaly;
    case PrecisionVariant::normal: return p.normal;
    default: return p.weighted;
  }
}

struct SweepConfig {
  std::vector<DatasetRef> datasets;
  std::vector<ModelKind> models{ModelKind::iforest, ModelKind::lof};
  std::vector<Mechanism> mechanisms{Mechanism::laplace, Mechanism::gaussian};
  std::vector<double> epsilons{0.01, 0.1, 1.0, 5.0};
  std::size_t runs = 5;
  std::uint64_t base_seed = 0;
  double delta = kDefaultDelta;
  bool standardize = true;
  std::optional<std::size_t> eval_subsample = 1000;
  ShapSettings shap;
  TuningSettings tuning = default_tuning();
  ModelParams iforest_defaults{ModelKind::iforest, {}, 20};
  ModelParams lof_defaults{ModelKind::lof, {}, 20};
  std::size_t jobs = 0;  // 0 = hardware concurrency
  bool keep_attributions = false;
  PrecisionVariant table_precision = PrecisionVariant::weighted;
  // dataset -> model -> {"auc": x, "precision": y}, fractions in [0, 1].
  nlohmann::json reference = nlohmann::json::object();

  const ModelParams& defaults(ModelKind k) const {
    return k == ModelKind::iforest ? iforest_defaults : lof_defaults;
  }

  void validate() const {
    if (datasets.empty()) throw Error("config: datasets must not be empty");
    if (models.empty()) throw Error("config: models must not be empty");
    if (mechanisms.empty()) throw Error("config: mechanisms must not be empty");
    if (epsilons.empty()) throw Error("config: epsilons must not be empty");
    if (runs < 1) throw Error("config: runs must be >= 1");
    for (double e : epsilons) {
      if (!(e > 0.0) || !std::isfinite(e)) throw Error("config: epsilons must be positive");
    }
    if (!(delta > 0.0 && delta < 1.0)) throw Error("config: delta must lie in (0, 1)");
    std::set<std::string> names;
    for (const auto& d : datasets) {
      if (d.name.empty()) throw Error("config: dataset without a name");
      if (!names.insert(d.name).second) throw Error("config: duplicate dataset '" + d.name + "'");
      if (d.csv.has_value() == d.synthetic.has_value()) {
        throw Error("config: dataset '" + d.name + "' needs exactly one of csv / synthetic");
      }
      if (d.csv && !d.label_column) {
        throw Error("config: dataset '" + d.name + "' needs a label_column for evaluation");
      }
    }
    if (eval_subsample && *eval_subsample == 0) throw Error("config: eval_subsample must be >= 1");
    if (shap.background_size == 0) throw Error("config: shap.background_size must be >= 1");
    if (!(shap.shaplength_p > 0.0 && shap.shaplength_p <= 1.0)) {
      throw Error("config: shap.shaplength_p must lie in (0, 1]");
    }
    if (tuning.enabled) {
      if (!(tuning.fraction > 0.0 && tuning.fraction < 1.0)) {
        throw Error("config: tuning.fraction must lie in (0, 1)");
      }
      if (tuning.folds < 2) throw Error("config: tuning.folds must be >= 2");
      for (auto m : models) {
        if (tuning.grid(m).empty()) throw Error("config: empty tuning grid for " + to_string(m));
      }
    }
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                       const std::string& where) {
  if (!j.is_object()) throw Error("config: " + where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw Error("config: unknown key '" + key + "' in " + where);
    }
  }
}

inline SyntheticGeometry geometry_from_json(const nlohmann::json& j) {
  check_keys(j,
             {"planted_axis", "far_min", "far_max", "spread", "dense_fraction", "dense_sd",
              "sparse_sd", "cluster_gap", "shell_min", "shell_max"},
             "geometry");
  SyntheticGeometry g;
  g.planted_axis = j.value("planted_axis", g.planted_axis);
  g.far_min = j.value("far_min", g.far_min);
  g.far_max = j.value("far_max", g.far_max);
  g.spread = j.value("spread", g.spread);
  g.dense_fraction = j.value("dense_fraction", g.dense_fraction);
  g.dense_sd = j.value("dense_sd", g.dense_sd);
  g.sparse_sd = j.value("sparse_sd", g.sparse_sd);
  g.cluster_gap = j.value("cluster_gap", g.cluster_gap);
  g.shell_min = j.value("shell_min", g.shell_min);
  g.shell_max = j.value("shell_max", g.shell_max);
  return g;
}

inline nlohmann::json geometry_to_json(const SyntheticGeometry& g) {
  return {{"planted_axis", g.planted_axis}, {"far_min", g.far_min},
          {"far_max", g.far_max},           {"spread", g.spread},
          {"dense_fraction", g.dense_fraction}, {"dense_sd", g.dense_sd},
          {"sparse_sd", g.sparse_sd},       {"cluster_gap", g.cluster_gap},
          {"shell_min", g.shell_min},       {"shell_max", g.shell_max}};
}

inline std::string resolve_path(const std::string& p, const std::filesystem::path& base_dir) {
  std::filesystem::path path(p);
  if (path.is_relative() && !base_dir.empty()) path = base_dir / path;
  return path.string();
}

inline DatasetRef dataset_ref_from_json(const nlohmann::json& j,
                                        const std::filesystem::path& base_dir) {
  check_keys(j,
             {"name", "csv", "label_column", "descriptor", "descriptor_manifest",
              "drop_missing_rows", "synthetic"},
             "dataset");
  DatasetRef r;
  r.name = j.at("name").get<std::string>();
  if (j.contains("csv")) r.csv = resolve_path(j.at("csv").get<std::string>(), base_dir);
  if (j.contains("label_column")) r.label_column = j.at("label_column").get<std::string>();
  r.drop_missing_rows = j.value("drop_missing_rows", false);
  if (j.contains("descriptor")) {
    const auto& jd = j.at("descriptor");
    DatasetDescriptor d;
    d.name = r.name;
    d.n_records = jd.at("n_records").get<std::size_t>();
    d.n_features = jd.at("n_features").get<std::size_t>();
    d.n_anomalies = jd.at("n_anomalies").get<std::size_t>();
    d.validate();
    r.descriptor = d;
  } else if (j.contains("descriptor_manifest")) {
    const auto manifest =
        load_descriptor_manifest(resolve_path(j.at("descriptor_manifest").get<std::string>(), base_dir));
    auto it = manifest.find(r.name);
    if (it == manifest.end()) throw Error("descriptor manifest has no entry '" + r.name + "'");
    r.descriptor = it->second;
  }
  if (j.contains("synthetic")) {
    const auto& js = j.at("synthetic");
    check_keys(js, {"kind", "n_normal", "n_anomalies", "d", "seed", "geometry"}, "synthetic");
    SyntheticSpec s;
    s.kind = parse_synthetic_kind(js.at("kind").get<std::string>());
    s.n_normal = js.value("n_normal", s.n_normal);
    s.n_anomalies = js.value("n_anomalies", s.n_anomalies);
    s.d = js.value("d", s.d);
    s.seed = js.value("seed", s.seed);
    if (js.contains("geometry")) s.geometry = geometry_from_json(js.at("geometry"));
    r.synthetic = s;
  }
  return r;
}

inline nlohmann::json dataset_ref_to_json(const DatasetRef& r) {
  nlohmann::json j{{"name", r.name}};
  if (r.csv) j["csv"] = *r.csv;
  if (r.label_column) j["label_column"] = *r.label_column;
  if (r.descriptor) {
    j["descriptor"] = {{"n_records", r.descriptor->n_records},
                       {"n_features", r.descriptor->n_features},
                       {"n_anomalies", r.descriptor->n_anomalies}};
  }
  if (r.csv) j["drop_missing_rows"] = r.drop_missing_rows;
  if (r.synthetic) {
    const auto& s = *r.synthetic;
    j["synthetic"] = {{"kind", to_string(s.kind)}, {"n_normal", s.n_normal},
                      {"n_anomalies", s.n_anomalies}, {"d", s.d},
                      {"seed", s.seed}, {"geometry", geometry_to_json(s.geometry)}};
  }
  return j;
}

template <class T>
std::vector<T> list_or(const nlohmann::json& j, const char* key, std::vector<T> fallback) {
  return j.contains(key) ? j.at(key).get<std::vector<T>>() : std::move(fallback);
}

}  // namespace detail

// Relative CSV / manifest paths resolve against `base_dir`.
inline SweepConfig parse_sweep_config(const nlohmann::json& j,
                                      const std::filesystem::path& base_dir = {}) {
  detail::check_keys(j,
                     {"datasets", "models", "mechanisms", "epsilons", "runs", "base_seed", "delta",
                      "standardize", "eval_subsample", "shap", "tuning", "model_defaults", "jobs",
                      "keep_attributions", "table_precision", "reference"},
                     "config");
  SweepConfig c;
  try {
    for (const auto& jd : j.at("datasets")) {
      c.datasets.push_back(detail::dataset_ref_from_json(jd, base_dir));
    }
    if (j.contains("models")) {
      c.models.clear();
      for (const auto& m : j.at("models")) c.models.push_back(parse_model_kind(m.get<std::string>()));
    }
    if (j.contains("mechanisms")) {
      c.mechanisms.clear();
      for (const auto& m : j.at("mechanisms")) {
        c.mechanisms.push_back(parse_mechanism(m.get<std::string>()));
      }
    }
    c.epsilons = detail::list_or<double>(j, "epsilons", c.epsilons);
    c.runs = j.value("runs", c.runs);
    c.base_seed = j.value("base_seed", c.base_seed);
    c.delta = j.value("delta", c.delta);
    c.standardize = j.value("standardize", c.standardize);
    if (j.contains("eval_subsample")) {
      const auto& e = j.at("eval_subsample");
      c.eval_subsample = e.is_null() ? std::nullopt : std::optional(e.get<std::size_t>());
    }
    if (j.contains("shap")) {
      const auto& js = j.at("shap");
      detail::check_keys(js,
                         {"enabled", "background_size", "background_selection", "n_coalitions",
                          "ridge", "enumeration_max_d", "shaplength_p"},
                         "shap");
      c.shap.enabled = js.value("enabled", c.shap.enabled);
      c.shap.background_size = js.value("background_size", c.shap.background_size);
      if (js.contains("background_selection")) {
        c.shap.selection =
            parse_background_selection(js.at("background_selection").get<std::string>());
      }
      c.shap.n_coalitions = js.value("n_coalitions", c.shap.n_coalitions);
      c.shap.ridge = js.value("ridge", c.shap.ridge);
      c.shap.enumeration_max_d = js.value("enumeration_max_d", c.shap.enumeration_max_d);
      c.shap.shaplength_p = js.value("shaplength_p", c.shap.shaplength_p);
    }
    if (j.contains("tuning")) {
      const auto& jt = j.at("tuning");
      detail::check_keys(jt, {"enabled", "fraction", "folds", "iforest", "lof"}, "tuning");
      c.tuning.enabled = jt.value("enabled", c.tuning.enabled);
      c.tuning.fraction = jt.value("fraction", c.tuning.fraction);
      c.tuning.folds = jt.value("folds", c.tuning.folds);
      if (jt.contains("iforest")) {
        const auto& ji = jt.at("iforest");
        detail::check_keys(ji, {"n_estimators", "max_features", "subsample_size"}, "tuning.iforest");
        c.tuning.iforest_grid = iforest_lattice(
            detail::list_or<std::size_t>(ji, "n_estimators", {100}),
            detail::list_or<std::size_t>(ji, "max_features", {0}),
            detail::list_or<std::size_t>(ji, "subsample_size", {0}));
      }
      if (jt.contains("lof")) {
        const auto& jl = jt.at("lof");
        detail::check_keys(jl, {"k"}, "tuning.lof");
        c.tuning.lof_grid = lof_lattice(detail::list_or<std::size_t>(jl, "k", {20}));
      }
    }
    if (j.contains("model_defaults")) {
      const auto& jm = j.at("model_defaults");
      detail::check_keys(jm, {"iforest", "lof"}, "model_defaults");
      if (jm.contains("iforest")) {
        auto p = jm.at("iforest");
        p["kind"] = "iforest";
        c.iforest_defaults = p.get<ModelParams>();
      }
      if (jm.contains("lof")) {
        auto p = jm.at("lof");
        p["kind"] = "lof";
        c.lof_defaults = p.get<ModelParams>();
      }
    }
    c.jobs = j.value("jobs", c.jobs);
    c.keep_attributions = j.value("keep_attributions", c.keep_attributions);
    if (j.contains("table_precision")) {
      c.table_precision = parse_precision_variant(j.at("table_precision").get<std::string>());
    }
    if (j.contains("reference")) c.reference = j.at("reference");
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline SweepConfig load_sweep_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("config " + path + ": " + e.what());
  }
  return parse_sweep_config(j, std::filesystem::path(path).parent_path());
}

// Echo of the effective configuration; `jobs` is left out because it does
// not influence results.
inline nlohmann::json config_to_json(const SweepConfig& c) {
  nlohmann::json j;
  j["datasets"] = nlohmann::json::array();
  for (const auto& d : c.datasets) j["datasets"].push_back(detail::dataset_ref_to_json(d));
  j["models"] = nlohmann::json::array();
  for (auto m : c.models) j["models"].push_back(to_string(m));
  j["mechanisms"] = nlohmann::json::array();
  for (auto m : c.mechanisms) j["mechanisms"].push_back(to_string(m));
  j["epsilons"] = c.epsilons;
  j["runs"] = c.runs;
  j["base_seed"] = c.base_seed;
  j["delta"] = c.delta;
  j["standardize"] = c.standardize;
  j["eval_subsample"] = c.eval_subsample ? nlohmann::json(*c.eval_subsample) : nlohmann::json(nullptr);
  j["shap"] = {{"enabled", c.shap.enabled},
               {"background_size", c.shap.background_size},
               {"background_selection", to_string(c.shap.selection)},
               {"n_coalitions", c.shap.n_coalitions},
               {"ridge", c.shap.ridge},
               {"enumeration_max_d", c.shap.enumeration_max_d},
               {"shaplength_p", c.shap.shaplength_p}};
  j["tuning"] = {{"enabled", c.tuning.enabled},
                 {"fraction", c.tuning.fraction},
                 {"folds", c.tuning.folds},
                 {"iforest_grid", c.tuning.iforest_grid},
                 {"lof_grid", c.tuning.lof_grid}};
  j["model_defaults"] = {{"iforest", c.iforest_defaults}, {"lof", c.lof_defaults}};
  j["keep_attributions"] = c.keep_attributions;
  j["table_precision"] = to_string(c.table_precision);
  j["reference"] = c.reference;
  return j;
}

// ---------------------------------------------------------------------------
// Data-access tracing. Every stage of the pipeline reports which matrix it
// reads; tests use this to check arm isolation and label blindness.

enum class Arm { baseline, dp };

inline std::string to_string(Arm a) { return a == Arm::baseline ? "baseline" : "dp"; }

struct DataAccess {
  std::string dataset;
  std::optional<ModelKind> model;
  Arm arm = Arm::baseline;
  std::string stage;   // tune, privatize, fit, threshold, background, explain, evaluate
  std::string source;  // clean_train, noisy_train, tuning_rows, eval_points, labels
};

using AccessHook = std::function<void(const DataAccess&)>;

namespace detail {
inline void trace(const AccessHook& hook, const std::string& dataset, std::optional<ModelKind> model,
                  Arm arm, const char* stage, const char* source) {
  if (hook) hook(DataAccess{dataset, model, arm, stage, source});
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Pipeline

struct PreparedDataset {
  std::string name;
  std::string provenance;
  std::size_t n_total = 0;
  std::optional<Standardization> standardization;
  std::vector<std::size_t> tuning_rows;   // indices into the loaded dataset
  std::vector<std::size_t> working_rows;  // indices into the loaded dataset
  Dataset tuning;                         // rows held out for grid search
  Dataset working;                        // rows that are fitted, privatized and explained
  std::vector<std::size_t> eval_rows;     // indices into `working`
  Matrix eval_points;
  std::vector<std::uint8_t> eval_labels;
  std::vector<double> sensitivity;

  std::size_t d() const { return working.d(); }
};

inline Dataset load_dataset(const DatasetRef& ref) {
  if (ref.synthetic) {
    const auto& s = *ref.synthetic;
    return gen_synthetic(s.kind, s.n_normal, s.n_anomalies, s.d, s.seed, s.geometry);
  }
  CsvOptions opts;
  opts.label_column = ref.label_column;
  opts.descriptor = ref.descriptor;
  opts.drop_missing_rows = ref.drop_missing_rows;
  return load_csv(*ref.csv, opts);
}

inline PreparedDataset prepare_dataset(const DatasetRef& ref, const SweepConfig& config) {
  Dataset raw = load_dataset(ref);
  raw.validate();
  raw.require_both_classes();

  PreparedDataset p;
  p.name = ref.name;
  p.provenance = raw.provenance;
  p.n_total = raw.n();
  Dataset data;
  if (config.standardize) {
    auto st = standardize(raw);
    p.standardization = std::move(st.transform);
    data = std::move(st.data);
  } else {
    data = std::move(raw);
  }

  const auto& labels = *data.labels;
  if (config.tuning.enabled) {
    const auto count = static_cast<std::size_t>(
        std::llround(config.tuning.fraction * static_cast<double>(data.n())));
    p.tuning_rows =
        stratified_subsample(labels, count, derive_seed(config.base_seed, ref.name, "tuning"));
    std::vector<bool> held(data.n(), false);
    for (auto r : p.tuning_rows) held[r] = true;
    for (std::size_t r = 0; r < data.n(); ++r) {
      if (!held[r]) p.working_rows.push_back(r);
    }
    p.tuning = data.subset(p.tuning_rows);
  } else {
    p.working_rows.resize(data.n());
    std::iota(p.working_rows.begin(), p.working_rows.end(), std::size_t{0});
  }
  p.working = data.subset(p.working_rows);
  p.working.require_both_classes();

  const auto& wl = *p.working.labels;
  if (config.eval_subsample) {
    p.eval_rows = stratified_subsample(wl, *config.eval_subsample,
                                       derive_seed(config.base_seed, ref.name, "eval"));
  } else {
    p.eval_rows.resize(p.working.n());
    std::iota(p.eval_rows.begin(), p.eval_rows.end(), std::size_t{0});
  }
  p.eval_points = p.working.features.select_rows(p.eval_rows);
  for (auto r : p.eval_rows) p.eval_labels.push_back(wl[r]);
  p.sensitivity = estimate_sensitivity(p.working.features);
  return p;
}

inline KernelShapConfig kernel_config(const SweepConfig& c, const std::string& dataset,
                                      ModelKind model) {
  KernelShapConfig k;
  k.n_coalitions = c.shap.n_coalitions;
  k.ridge = c.shap.ridge;
  k.enumeration_max_d = c.shap.enumeration_max_d;
  // Shared by both arms so sampled designs coincide.
  k.seed = derive_seed(c.base_seed, dataset, to_string(model), "kernel_shap");
  return k;
}

// Background rows are drawn with a model- and arm-independent seed, so both
// arms use the same row indices (each from its own training matrix).
inline BackgroundSet make_background(const Matrix& train, const SweepConfig& c,
                                     const std::string& dataset) {
  const auto seed = derive_seed(c.base_seed, dataset, "background");
  if (c.shap.selection == BackgroundSelection::kmeans_centroids) {
    return BackgroundSet::kmeans(train, c.shap.background_size, seed);
  }
  return BackgroundSet::random_subsample(train, c.shap.background_size, seed);
}

struct BaselineState {
  std::string dataset;
  ModelKind model = ModelKind::iforest;
  ModelParams params;
  std::optional<GridSearchResult> tuning;
  std::uint64_t fit_seed = 0;
  AnomalyScorer scorer;
  double threshold = 0.0;
  std::vector<double> eval_scores;
  std::vector<std::uint8_t> eval_pred;
  std::optional<AttributionMatrix> attributions;
  MetricReport metrics;
};

namespace detail {

// Shared tail of both arms: threshold on the arm's own training scores,
// decisions and ranking on the clean evaluation points.
struct ArmOutput {
  double threshold = 0.0;
  std::vector<double> eval_scores;
  std::vector<std::uint8_t> eval_pred;
  double auc = 0.5;
  PrecisionReport precision;
};

inline ArmOutput evaluate_arm(const AnomalyScorer& scorer, const Matrix& train,
                              const PreparedDataset& p, Arm arm, ModelKind model,
                              const AccessHook& hook) {
  ArmOutput out;
  trace(hook, p.name, model, arm, "threshold", arm == Arm::baseline ? "clean_train" : "noisy_train");
  trace(hook, p.name, model, arm, "threshold", "labels");
  out.threshold = decision_threshold(scorer.score_all(train), p.working.contamination());
  trace(hook, p.name, model, arm, "evaluate", "eval_points");
  trace(hook, p.name, model, arm, "evaluate", "labels");
  out.eval_scores = scorer.score_all(p.eval_points);
  out.eval_pred = predict(out.eval_scores, out.threshold);
  out.auc = auc(out.eval_scores, p.eval_labels);
  out.precision = precision(out.eval_pred, p.eval_labels);
  return out;
}

}  // namespace detail

inline BaselineState run_baseline(const PreparedDataset& p, ModelKind model,
                                  const SweepConfig& config, const AccessHook& hook = {}) {
  BaselineState b;
  b.dataset = p.name;
  b.model = model;
  if (config.tuning.enabled) {
    detail::trace(hook, p.name, model, Arm::baseline, "tune", "tuning_rows");
    detail::trace(hook, p.name, model, Arm::baseline, "tune", "labels");
    b.tuning = grid_search(p.tuning.features, *p.tuning.labels, config.tuning.grid(model),
                           config.tuning.folds,
                           derive_seed(config.base_seed, p.name, to_string(model), "tuning"));
    b.params = b.tuning->best;
  } else {
    b.params = config.defaults(model);
  }
  b.fit_seed = derive_seed(config.base_seed, p.name, to_string(model), "fit");
  detail::trace(hook, p.name, model, Arm::baseline, "fit", "clean_train");
  b.scorer = AnomalyScorer::fit(p.working.features, b.params, b.fit_seed);

  auto arm = detail::evaluate_arm(b.scorer, p.working.features, p, Arm::baseline, model, hook);
  b.threshold = arm.threshold;
  b.eval_scores = std::move(arm.eval_scores);
  b.eval_pred = std::move(arm.eval_pred);
  b.metrics.auc = arm.auc;
  b.metrics.precision = arm.precision;
  b.metrics.fidelity = fidelity(b.eval_pred, b.eval_pred);

  if (config.shap.enabled) {
    detail::trace(hook, p.name, model, Arm::baseline, "background", "clean_train");
    const auto background = make_background(p.working.features, config, p.name);
    detail::trace(hook, p.name, model, Arm::baseline, "explain", "eval_points");
    b.attributions = explain_dataset(b.scorer, p.eval_points, background,
                                     kernel_config(config, p.name, model), p.eval_rows, 1);
    const auto l2 = shapgap_euclidean(*b.attributions, *b.attributions);
    const auto cos = shapgap_cosine(*b.attributions, *b.attributions);
    b.metrics.explained = true;
    b.metrics.shapgap_l2_mean = l2.mean;
    b.metrics.per_point_l2 = l2.per_point;
    b.metrics.shapgap_cos_mean = cos.mean;
    b.metrics.per_point_cos = cos.per_point;
    b.metrics.cosine_zero_vector_cases = cos.zero_vector_cases;
    b.metrics.shaplength_mean =
        mean_shap_length(*b.attributions, ShapLengthConfig{config.shap.shaplength_p});
  }
  return b;
}

struct CellKey {
  std::string dataset;
  ModelKind model = ModelKind::iforest;
  Mechanism mechanism = Mechanism::laplace;
  double epsilon = 1.0;
  std::size_t run = 0;

  friend bool operator==(const CellKey&, const CellKey&) = default;
};

inline std::uint64_t cell_seed(const SweepConfig& c, const CellKey& k) {
  return derive_seed(c.base_seed, k.dataset, to_string(k.model), to_string(k.mechanism), k.epsilon,
                     static_cast<std::uint64_t>(k.run));
}

struct CellRecord {
  CellKey key;
  std::uint64_t noise_seed = 0;
  double threshold = 0.0;
  bool gaussian_outside_classical_regime = false;
  std::optional<MetricReport> metrics;
  std::optional<std::string> error;
  std::optional<AttributionMatrix> attributions;
};

// Privatize the working set, refit with the baseline's parameters and fit
// seed, then score and explain the same clean evaluation points.
inline CellRecord run_cell(const PreparedDataset& p, const BaselineState& baseline,
                           const CellKey& key, const SweepConfig& config,
                           const AccessHook& hook = {}) {
  CellRecord rec;
  rec.key = key;
  rec.noise_seed = cell_seed(config, key);
  try {
    if (key.dataset != p.name || key.dataset != baseline.dataset || key.model != baseline.model) {
      throw Error("run_cell: cell does not match the dataset / baseline");
    }
    NoiseSpec spec;
    spec.mechanism = key.mechanism;
    spec.epsilon = key.epsilon;
    spec.delta = config.delta;
    spec.sensitivity = p.sensitivity;
    spec.seed = rec.noise_seed;
    rec.gaussian_outside_classical_regime = spec.outside_classical_gaussian_regime();

    detail::trace(hook, p.name, key.model, Arm::dp, "privatize", "clean_train");
    const PrivatizedDataset noisy = privatize(p.working, spec);
    const Matrix& train = noisy.data.features;

    detail::trace(hook, p.name, key.model, Arm::dp, "fit", "noisy_train");
    const auto scorer = AnomalyScorer::fit(train, baseline.params, baseline.fit_seed);
    auto arm = detail::evaluate_arm(scorer, train, p, Arm::dp, key.model, hook);
    rec.threshold = arm.threshold;

    MetricReport m;
    m.auc = arm.auc;
    m.precision = arm.precision;
    m.fidelity = fidelity(baseline.eval_pred, arm.eval_pred);
    if (config.shap.enabled) {
      if (!baseline.attributions) throw Error("run_cell: baseline has no attributions");
      detail::trace(hook, p.name, key.model, Arm::dp, "background", "noisy_train");
      const auto background = make_background(train, config, p.name);
      detail::trace(hook, p.name, key.model, Arm::dp, "explain", "eval_points");
      auto attributions = explain_dataset(scorer, p.eval_points, background,
                                          kernel_config(config, p.name, key.model), p.eval_rows, 1);
      const auto l2 = shapgap_euclidean(*baseline.attributions, attributions);
      const auto cos = shapgap_cosine(*baseline.attributions, attributions);
      m.explained = true;
      m.shapgap_l2_mean = l2.mean;
      m.per_point_l2 = l2.per_point;
      m.shapgap_cos_mean = cos.mean;
      m.per_point_cos = cos.per_point;
      m.cosine_zero_vector_cases = cos.zero_vector_cases;
      m.shaplength_mean = mean_shap_length(attributions, ShapLengthConfig{config.shap.shaplength_p});
      if (config.keep_attributions) rec.attributions = std::move(attributions);
    }
    rec.metrics = std::move(m);
  } catch (const std::exception& e) {
    rec.metrics.reset();
    rec.attributions.reset();
    rec.error = e.what();
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Report

struct DatasetSummary {
  std::string name;
  std::string provenance;
  std::size_t n_total = 0;
  std::size_t n_working = 0;
  std::size_t n_tuning = 0;
  std::size_t d = 0;
  double contamination = 0.0;  // of the working set
  std::vector<std::string> feature_names;
  std::optional<Standardization> standardization;
  std::vector<double> sensitivity;
  std::vector<std::size_t> eval_rows;
  Matrix eval_points;
  std::vector<std::uint8_t> eval_labels;
  std::optional<std::string> error;
};

struct BaselineRecord {
  std::string dataset;
  ModelKind model = ModelKind::iforest;
  ModelParams params;
  nlohmann::json tuning;  // grid-search entries, or null when disabled
  std::uint64_t fit_seed = 0;
  double threshold = 0.0;
  std::optional<MetricReport> metrics;
  std::optional<AttributionMatrix> attributions;
  nlohmann::json precision_match;  // null when no reference is configured
  std::optional<std::string> error;
};

struct SweepReport {
  nlohmann::json config;
  std::vector<std::string> dataset_names;
  std::vector<ModelKind> models;
  std::vector<Mechanism> mechanisms;
  std::vector<double> epsilons;
  std::size_t runs = 0;
  double delta = kDefaultDelta;
  PrecisionVariant table_precision = PrecisionVariant::weighted;
  std::vector<DatasetSummary> datasets;
  std::vector<BaselineRecord> baselines;
  std::vector<CellRecord> cells;

  std::size_t error_count() const {
    std::size_t n = 0;
    for (const auto& d : datasets) n += d.error.has_value();
    for (const auto& b : baselines) n += b.error.has_value();
    for (const auto& c : cells) n += c.error.has_value();
    return n;
  }

  const BaselineRecord* baseline(const std::string& dataset, ModelKind model) const {
    for (const auto& b : baselines) {
      if (b.dataset == dataset && b.model == model) return &b;
    }
    return nullptr;
  }

  const DatasetSummary* dataset(const std::string& name) const {
    for (const auto& d : datasets) {
      if (d.name == name) return &d;
    }
    return nullptr;
  }

  std::vector<const CellRecord*> select(const std::string& dataset, ModelKind model,
                                        std::optional<Mechanism> mechanism = std::nullopt,
                                        std::optional<double> epsilon = std::nullopt) const {
    std::vector<const CellRecord*> out;
    for (const auto& c : cells) {
      if (c.key.dataset != dataset || c.key.model != model) continue;
      if (mechanism && c.key.mechanism != *mechanism) continue;
      if (epsilon && c.key.epsilon != *epsilon) continue;
      out.push_back(&c);
    }
    return out;
  }
};

// Which reported precision variant lies closest to the reference value.
inline nlohmann::json precision_match(const PrecisionReport& p, double reference) {
  nlohmann::json j{{"reference", reference},
                   {"anomaly", detail::optional_json(p.anomaly)},
                   {"normal", detail::optional_json(p.normal)},
                   {"weighted", detail::optional_json(p.weighted)}};
  std::optional<PrecisionVariant> best;
  double best_gap = 0.0;
  for (auto v : {PrecisionVariant::anomaly, PrecisionVariant::normal, PrecisionVariant::weighted}) {
    const auto value = pick(p, v);
    if (!value) continue;
    const double gap = std::fabs(*value - reference);
    if (!best || gap < best_gap) {
      best = v;
      best_gap = gap;
    }
  }
  j["best_match"] = best ? nlohmann::json(to_string(*best)) : nlohmann::json(nullptr);
  return j;
}

namespace detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"values", m.values()}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                j.at("values").get<std::vector<double>>());
}

inline nlohmann::json cell_key_json(const CellKey& k) {
  return {{"dataset", k.dataset},
          {"model", to_string(k.model)},
          {"mechanism", to_string(k.mechanism)},
          {"epsilon", k.epsilon},
          {"run", k.run}};
}

inline CellKey cell_key_from_json(const nlohmann::json& j) {
  CellKey k;
  k.dataset = j.at("dataset").get<std::string>();
  k.model = parse_model_kind(j.at("model").get<std::string>());
  k.mechanism = parse_mechanism(j.at("mechanism").get<std::string>());
  k.epsilon = j.at("epsilon").get<double>();
  k.run = j.at("run").get<std::size_t>();
  return k;
}

inline nlohmann::json grid_json(const std::optional<GridSearchResult>& g) {
  if (!g) return nullptr;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : g->entries) {
    nlohmann::json je{{"params", e.params}, {"fold_auc", e.fold_auc}, {"mean_auc", e.mean_auc}};
    if (e.error) je["error"] = *e.error;
    entries.push_back(std::move(je));
  }
  return {{"best", g->best}, {"entries", std::move(entries)}};
}

inline nlohmann::json standardization_json(const std::optional<Standardization>& s) {
  if (!s) return nullptr;
  std::vector<int> zv(s->zero_variance.begin(), s->zero_variance.end());
  return {{"mean", s->mean}, {"stddev", s->stddev}, {"zero_variance", zv}};
}

inline std::optional<Standardization> standardization_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  Standardization s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.stddev = j.at("stddev").get<std::vector<double>>();
  for (int v : j.at("zero_variance").get<std::vector<int>>()) s.zero_variance.push_back(v != 0);
  return s;
}

template <class T>
nlohmann::json opt_json(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

template <class T>
std::optional<T> opt_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<T>();
}

}  // namespace detail

inline nlohmann::json cell_to_json(const CellRecord& c) {
  nlohmann::json j = detail::cell_key_json(c.key);
  j["noise_seed"] = c.noise_seed;
  j["threshold"] = c.threshold;
  j["gaussian_outside_classical_regime"] = c.gaussian_outside_classical_regime;
  j["metrics"] = detail::opt_json(c.metrics);
  j["error"] = detail::opt_json(c.error);
  if (c.attributions) j["attributions"] = *c.attributions;
  return j;
}

inline CellRecord cell_from_json(const nlohmann::json& j) {
  CellRecord c;
  c.key = detail::cell_key_from_json(j);
  c.noise_seed = j.at("noise_seed").get<std::uint64_t>();
  c.threshold = j.at("threshold").get<double>();
  c.gaussian_outside_classical_regime = j.at("gaussian_outside_classical_regime").get<bool>();
  c.metrics = detail::opt_from<MetricReport>(j, "metrics");
  c.error = detail::opt_from<std::string>(j, "error");
  c.attributions = detail::opt_from<AttributionMatrix>(j, "attributions");
  return c;
}

inline nlohmann::json report_to_json(const SweepReport& r) {
  nlohmann::json j;
  j["format"] = "dpshap-sweep-report";
  j["version"] = kReportFormatVersion;
  j["config"] = r.config;
  j["layout"] = {{"datasets", r.dataset_names},
                 {"models", nlohmann::json::array()},
                 {"mechanisms", nlohmann::json::array()},
                 {"epsilons", r.epsilons},
                 {"runs", r.runs},
                 {"delta", r.delta},
                 {"table_precision", to_string(r.table_precision)}};
  for (auto m : r.models) j["layout"]["models"].push_back(to_string(m));
  for (auto m : r.mechanisms) j["layout"]["mechanisms"].push_back(to_string(m));

  j["datasets"] = nlohmann::json::array();
  for (const auto& d : r.datasets) {
    j["datasets"].push_back({{"name", d.name},
                             {"provenance", d.provenance},
                             {"n_total", d.n_total},
                             {"n_working", d.n_working},
                             {"n_tuning", d.n_tuning},
                             {"d", d.d},
                             {"contamination", d.contamination},
                             {"feature_names", d.feature_names},
                             {"standardization", detail::standardization_json(d.standardization)},
                             {"sensitivity", d.sensitivity},
                             {"eval_rows", d.eval_rows},
                             {"eval_points", detail::matrix_to_json(d.eval_points)},
                             {"eval_labels", d.eval_labels},
                             {"error", detail::opt_json(d.error)}});
  }
  j["baselines"] = nlohmann::json::array();
  for (const auto& b : r.baselines) {
    nlohmann::json jb{{"dataset", b.dataset},
                      {"model", to_string(b.model)},
                      {"params", b.params},
                      {"tuning", b.tuning},
                      {"fit_seed", b.fit_seed},
                      {"threshold", b.threshold},
                      {"metrics", detail::opt_json(b.metrics)},
                      {"precision_match", b.precision_match},
                      {"error", detail::opt_json(b.error)}};
    if (b.attributions) jb["attributions"] = *b.attributions;
    j["baselines"].push_back(std::move(jb));
  }
  j["cells"] = nlohmann::json::array();
  for (const auto& c : r.cells) j["cells"].push_back(cell_to_json(c));
  return j;
}

inline SweepReport report_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != "dpshap-sweep-report") {
    throw Error("not a dpshap sweep report");
  }
  if (j.value("version", 0) != kReportFormatVersion) {
    throw Error("unsupported report version " + std::to_string(j.value("version", 0)));
  }
  SweepReport r;
  try {
    r.config = j.at("config");
    const auto& lay = j.at("layout");
    r.dataset_names = lay.at("datasets").get<std::vector<std::string>>();
    for (const auto& m : lay.at("models")) r.models.push_back(parse_model_kind(m.get<std::string>()));
    for (const auto& m : lay.at("mechanisms")) {
      r.mechanisms.push_back(parse_mechanism(m.get<std::string>()));
    }
    r.epsilons = lay.at("epsilons").get<std::vector<double>>();
    r.runs = lay.at("runs").get<std::size_t>();
    r.delta = lay.at("delta").get<double>();
    r.table_precision = parse_precision_variant(lay.at("table_precision").get<std::string>());
    for (const auto& jd : j.at("datasets")) {
      DatasetSummary d;
      d.name = jd.at("name").get<std::string>();
      d.provenance = jd.at("provenance").get<std::string>();
      d.n_total = jd.at("n_total").get<std::size_t>();
      d.n_working = jd.at("n_working").get<std::size_t>();
      d.n_tuning = jd.at("n_tuning").get<std::size_t>();
      d.d = jd.at("d").get<std::size_t>();
      d.contamination = jd.at("contamination").get<double>();
      d.feature_names = jd.at("feature_names").get<std::vector<std::string>>();
      d.standardization = detail::standardization_from_json(jd.at("standardization"));
      d.sensitivity = jd.at("sensitivity").get<std::vector<double>>();
      d.eval_rows = jd.at("eval_rows").get<std::vector<std::size_t>>();
      d.eval_points = detail::matrix_from_json(jd.at("eval_points"));
      d.eval_labels = jd.at("eval_labels").get<std::vector<std::uint8_t>>();
      d.error = detail::opt_from<std::string>(jd, "error");
      r.datasets.push_back(std::move(d));
    }
    for (const auto& jb : j.at("baselines")) {
      BaselineRecord b;
      b.dataset = jb.at("dataset").get<std::string>();
      b.model = parse_model_kind(jb.at("model").get<std::string>());
      b.params = jb.at("params").get<ModelParams>();
      b.tuning = jb.at("tuning");
      b.fit_seed = jb.at("fit_seed").get<std::uint64_t>();
      b.threshold = jb.at("threshold").get<double>();
      b.metrics = detail::opt_from<MetricReport>(jb, "metrics");
      b.precision_match = jb.at("precision_match");
      b.error = detail::opt_from<std::string>(jb, "error");
      b.attributions = detail::opt_from<AttributionMatrix>(jb, "attributions");
      r.baselines.push_back(std::move(b));
    }
    for (const auto& jc : j.at("cells")) r.cells.push_back(cell_from_json(jc));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("report: ") + e.what());
  }
  return r;
}

inline SweepReport load_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open report " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("report " + path + ": " + e.what());
  }
  return report_from_json(j);
}

// Seeds, sensitivity vectors, thresholds and calibration flags.
inline nlohmann::json environment_json(const SweepReport& r, std::uint64_t base_seed) {
  nlohmann::json j;
  j["versions"] = {{"dpshap", kVersion},
                   {"compiler", __VERSION__},
                   {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                 std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)}};
  j["base_seed"] = base_seed;
  j["delta"] = r.delta;
  j["gaussian_calibration"] = "sigma = sensitivity * sqrt(2 ln(1.25/delta)) / epsilon";
  j["sensitivity_model"] = "per-feature empirical range of the working set";
  j["datasets"] = nlohmann::json::array();
  for (const auto& d : r.datasets) {
    j["datasets"].push_back({{"name", d.name},
                             {"sensitivity", d.sensitivity},
                             {"standardized", d.standardization.has_value()},
                             {"eval_points", d.eval_rows.size()},
                             {"eval_digest", digest_of(d.eval_points)}});
  }
  j["baselines"] = nlohmann::json::array();
  for (const auto& b : r.baselines) {
    j["baselines"].push_back({{"dataset", b.dataset},
                              {"model", to_string(b.model)},
                              {"params", b.params},
                              {"fit_seed", b.fit_seed},
                              {"threshold", b.threshold}});
  }
  j["cells"] = nlohmann::json::array();
  for (const auto& c : r.cells) {
    auto jc = detail::cell_key_json(c.key);
    jc["noise_seed"] = c.noise_seed;
    jc["threshold"] = c.threshold;
    jc["gaussian_outside_classical_regime"] = c.gaussian_outside_classical_regime;
    j["cells"].push_back(std::move(jc));
  }
  return j;
}

// ---------------------------------------------------------------------------
// Sweep

struct SweepOptions {
  std::ostream* progress = nullptr;            // one line per finished unit
  std::optional<std::string> cells_jsonl;      // incremental per-cell records
  AccessHook hook;
};

namespace detail {

class LineSink {
 public:
  explicit LineSink(const SweepOptions& o) : progress_(o.progress) {
    if (o.cells_jsonl) {
      jsonl_.open(*o.cells_jsonl, std::ios::trunc);
      if (!jsonl_) throw Error("cannot write " + *o.cells_jsonl);
    }
  }

  void progress(const std::string& line) {
    if (!progress_) return;
    std::lock_guard lock(mutex_);
    *progress_ << line << std::endl;
  }

  void record(const nlohmann::json& j) {
    if (!jsonl_.is_open()) return;
    std::lock_guard lock(mutex_);
    jsonl_ << j.dump() << '\n';
    jsonl_.flush();
  }

 private:
  std::ostream* progress_;
  std::ofstream jsonl_;
  std::mutex mutex_;
};

inline std::string describe(const CellKey& k) {
  return k.dataset + " " + to_string(k.model) + " " + to_string(k.mechanism) +
         " eps=" + format_real(k.epsilon) + " run=" + std::to_string(k.run);
}

}  // namespace detail

// Cells of one (dataset, model) pair in report order.
inline std::vector<CellKey> cell_keys(const SweepConfig& c, const std::string& dataset,
                                      ModelKind model) {
  std::vector<CellKey> keys;
  for (auto mech : c.mechanisms) {
    for (double eps : c.epsilons) {
      for (std::size_t run = 0; run < c.runs; ++run) keys.push_back({dataset, model, mech, eps, run});
    }
  }
  return keys;
}

// Full factorial sweep. Datasets are prepared in order, baselines and cells
// run on a bounded pool; the report is assembled in configuration order, so
// it does not depend on the number of workers.
inline SweepReport run_sweep(const SweepConfig& config, const SweepOptions& options = {}) {
  config.validate();
  detail::LineSink sink(options);

  SweepReport report;
  report.config = config_to_json(config);
  report.models = config.models;
  report.mechanisms = config.mechanisms;
  report.epsilons = config.epsilons;
  report.runs = config.runs;
  report.delta = config.delta;
  report.table_precision = config.table_precision;

  std::vector<std::optional<PreparedDataset>> prepared;
  for (const auto& ref : config.datasets) {
    report.dataset_names.push_back(ref.name);
    DatasetSummary s;
    s.name = ref.name;
    try {
      auto p = prepare_dataset(ref, config);
      s.provenance = p.provenance;
      s.n_total = p.n_total;
      s.n_working = p.working.n();
      s.n_tuning = p.tuning_rows.size();
      s.d = p.d();
      s.contamination = p.working.contamination();
      s.feature_names = p.working.feature_names;
      s.standardization = p.standardization;
      s.sensitivity = p.sensitivity;
      s.eval_rows = p.eval_rows;
      s.eval_points = p.eval_points;
      s.eval_labels = p.eval_labels;
      prepared.push_back(std::move(p));
    } catch (const std::exception& e) {
      s.error = e.what();
      prepared.emplace_back();
      sink.progress("dataset " + ref.name + " failed: " + e.what());
    }
    report.datasets.push_back(std::move(s));
  }

  struct Pair {
    std::size_t dataset;
    ModelKind model;
  };
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < config.datasets.size(); ++i) {
    for (auto m : config.models) pairs.push_back({i, m});
  }

  std::vector<std::optional<BaselineState>> states(pairs.size());
  report.baselines.resize(pairs.size());
  parallel_for(pairs.size(), config.jobs, [&](std::size_t i) {
    const auto& [di, model] = pairs[i];
    auto& rec = report.baselines[i];
    rec.dataset = config.datasets[di].name;
    rec.model = model;
    rec.tuning = nullptr;
    rec.precision_match = nullptr;
    if (!prepared[di]) {
      rec.error = "dataset preparation failed";
      return;
    }
    try {
      auto b = run_baseline(*prepared[di], model, config, options.hook);
      rec.params = b.params;
      rec.tuning = detail::grid_json(b.tuning);
      rec.fit_seed = b.fit_seed;
      rec.threshold = b.threshold;
      rec.metrics = b.metrics;
      rec.attributions = b.attributions;
      const auto& ref = config.reference;
      if (ref.contains(rec.dataset) && ref.at(rec.dataset).contains(to_string(model)) &&
          ref.at(rec.dataset).at(to_string(model)).contains("precision")) {
        rec.precision_match = precision_match(
            b.metrics.precision,
            ref.at(rec.dataset).at(to_string(model)).at("precision").get<double>());
      }
      states[i] = std::move(b);
      sink.progress("baseline " + rec.dataset + " " + to_string(model) +
                    ": auc=" + format_real(rec.metrics->auc));
    } catch (const std::exception& e) {
      rec.error = e.what();
      sink.progress("baseline " + rec.dataset + " " + to_string(model) + " failed: " + e.what());
    }
  });

  struct Job {
    std::size_t pair;
    CellKey key;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    for (auto& k : cell_keys(config, config.datasets[pairs[i].dataset].name, pairs[i].model)) {
      jobs.push_back({i, std::move(k)});
    }
  }
  report.cells.resize(jobs.size());
  std::atomic<std::size_t> done{0};
  parallel_for(jobs.size(), config.jobs, [&](std::size_t i) {
    const auto& job = jobs[i];
    auto& rec = report.cells[i];
    const auto& state = states[job.pair];
    if (!state) {
      rec.key = job.key;
      rec.noise_seed = cell_seed(config, job.key);
      rec.error = "baseline unavailable: " +
                  report.baselines[job.pair].error.value_or("unknown error");
    } else {
      rec = run_cell(*prepared[pairs[job.pair].dataset], *state, job.key, config, options.hook);
    }
    sink.record(cell_to_json(rec));
    const std::size_t n = ++done;
    std::string line = "[" + std::to_string(n) + "/" + std::to_string(jobs.size()) + "] " +
                       detail::describe(rec.key);
    if (rec.error) {
      line += " ERROR: " + *rec.error;
    } else {
      line += " auc=" + format_real(rec.metrics->auc) +
              " fidelity=" + format_real(rec.metrics->fidelity);
    }
    sink.progress(line);
  });
  return report;
}

// ---------------------------------------------------------------------------
// Tables and plot data

namespace detail {

inline void write_file_atomically(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
    if (!out) throw Error("cannot write " + tmp.string());
    out << content;
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string csv_value(const std::optional<double>& v) {
  return v ? format_real(*v) : std::string{};
}

}  // namespace detail

struct TableCell {
  std::optional<double> mean;
  std::optional<double> std;
};

// Run-averaged metric over the cells of one (dataset, model, mechanism, eps).
inline TableCell table_cell(const SweepReport& r, const std::string& dataset, ModelKind model,
                            Mechanism mechanism, double epsilon, const std::string& metric) {
  std::vector<double> values;
  for (const auto* c : r.select(dataset, model, mechanism, epsilon)) {
    if (!c->metrics) continue;
    if (metric == "auc") {
      values.push_back(c->metrics->auc);
    } else if (auto v = pick(c->metrics->precision, r.table_precision)) {
      values.push_back(*v);
    }
  }
  if (values.empty()) return {};
  return {mean_of(values), stddev_of(values)};
}

inline std::vector<std::string> table_header(const SweepReport& r) {
  std::vector<std::string> h{"dataset", "metric", "no_dp"};
  for (auto mech : r.mechanisms) {
    for (double eps : r.epsilons) {
      const std::string base = to_string(mech) + "_eps" + format_real(eps);
      h.push_back(base + "_mean");
      h.push_back(base + "_std");
    }
  }
  return h;
}

// One CSV per model: rows dataset x {auc, precision}, columns no_dp then
// mean/std per mechanism x epsilon. An empty report yields header-only files.
inline void write_table_csv(std::ostream& out, const SweepReport& r, ModelKind model) {
  const auto header = table_header(r);
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n';
  for (const auto& dataset : r.dataset_names) {
    const auto* base = r.baseline(dataset, model);
    if (!base) continue;
    for (const std::string metric : {"auc", "precision"}) {
      std::optional<double> no_dp;
      if (base->metrics) {
        no_dp = metric == "auc" ? std::optional(base->metrics->auc)
                                : pick(base->metrics->precision, r.table_precision);
      }
      out << dataset << ',' << metric << ',' << detail::csv_value(no_dp);
      for (auto mech : r.mechanisms) {
        for (double eps : r.epsilons) {
          const auto cell = table_cell(r, dataset, model, mech, eps, metric);
          out << ',' << detail::csv_value(cell.mean) << ',' << detail::csv_value(cell.std);
        }
      }
      out << '\n';
    }
  }
}

inline std::vector<std::filesystem::path> emit_tables(const SweepReport& r,
                                                      const std::filesystem::path& out_dir) {
  std::vector<std::filesystem::path> written;
  for (auto model : r.models) {
    std::ostringstream s;
    write_table_csv(s, r, model);
    const auto path = out_dir / "tables" / (to_string(model) + ".csv");
    detail::write_file_atomically(path, s.str());
    written.push_back(path);
  }
  return written;
}

enum class PlotKind { shapgap_scatter, shapgap_box, summary_plot };

inline std::string to_string(PlotKind k) {
  switch (k) {
    case PlotKind::shapgap_scatter: return "shapgap_scatter";
    case PlotKind::shapgap_box: return "shapgap_box";
    default: return "summary_plot";
  }
}

inline PlotKind parse_plot_kind(std::string_view s) {
  if (s == "shapgap_scatter") return PlotKind::shapgap_scatter;
  if (s == "shapgap_box") return PlotKind::shapgap_box;
  if (s == "summary_plot") return PlotKind::summary_plot;
  throw Error("unknown plot kind '" + std::string(s) + "'");
}

inline nlohmann::json box_json(const std::vector<double>& values) {
  const auto b = box_stats(values);
  return {{"q1", b.q1},
          {"median", b.median},
          {"q3", b.q3},
          {"iqr", b.iqr()},
          {"whisker_low", b.whisker_low},
          {"whisker_high", b.whisker_high},
          {"min", b.min},
          {"max", b.max},
          {"count", b.count},
          {"values", values}};
}

// Per feature: (phi, min-max normalized feature value) for every explained
// point; features ordered by mean |phi|, ties by feature index.
inline nlohmann::json summary_plot_json(const AttributionMatrix& a, const Matrix& points,
                                        const std::vector<std::string>& names) {
  const std::size_t d = a.d();
  if (points.rows() != a.size() || points.cols() != d || names.size() != d) {
    throw Error("summary_plot: attributions and points disagree");
  }
  const auto mean_abs = a.mean_abs();
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return mean_abs[x] > mean_abs[y]; });
  nlohmann::json features = nlohmann::json::array();
  for (std::size_t rank = 0; rank < d; ++rank) {
    const std::size_t j = order[rank];
    const auto col = points.column(j);
    const auto [lo, hi] = std::minmax_element(col.begin(), col.end());
    std::vector<double> phi(a.size()), value(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      phi[i] = a.rows[i].phi[j];
      value[i] = *hi > *lo ? (col[i] - *lo) / (*hi - *lo) : 0.5;
    }
    features.push_back({{"feature", names[j]},
                        {"index", j},
                        {"rank", rank},
                        {"mean_abs_phi", mean_abs[j]},
                        {"phi", phi},
                        {"value", value}});
  }
  return features;
}

inline nlohmann::json plot_data(const SweepReport& r, PlotKind kind) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& dataset : r.dataset_names) {
    for (auto model : r.models) {
      if (kind == PlotKind::shapgap_scatter) {
        nlohmann::json points = nlohmann::json::array();
        for (const auto* c : r.select(dataset, model)) {
          if (!c->metrics || !c->metrics->explained) continue;
          points.push_back({{"mechanism", to_string(c->key.mechanism)},
                            {"epsilon", c->key.epsilon},
                            {"run", c->key.run},
                            {"fidelity", c->metrics->fidelity},
                            {"shapgap_l2_mean", c->metrics->shapgap_l2_mean},
                            {"shapgap_cos_mean", c->metrics->shapgap_cos_mean},
                            {"shaplength_mean", c->metrics->shaplength_mean}});
        }
        groups.push_back({{"dataset", dataset}, {"model", to_string(model)}, {"points", points}});
      } else if (kind == PlotKind::shapgap_box) {
        for (auto mech : r.mechanisms) {
          for (double eps : r.epsilons) {
            std::vector<double> cos, l2;
            for (const auto* c : r.select(dataset, model, mech, eps)) {
              if (!c->metrics || !c->metrics->explained) continue;
              cos.insert(cos.end(), c->metrics->per_point_cos.begin(),
                         c->metrics->per_point_cos.end());
              l2.insert(l2.end(), c->metrics->per_point_l2.begin(), c->metrics->per_point_l2.end());
            }
            if (cos.empty()) continue;
            groups.push_back({{"dataset", dataset},
                              {"model", to_string(model)},
                              {"mechanism", to_string(mech)},
                              {"epsilon", eps},
                              {"cosine", box_json(cos)},
                              {"euclidean", box_json(l2)}});
          }
        }
      } else {
        const auto* ds = r.dataset(dataset);
        const auto* base = r.baseline(dataset, model);
        if (!ds || !base || !base->attributions) continue;
        groups.push_back({{"dataset", dataset},
                          {"model", to_string(model)},
                          {"arm", "baseline"},
                          {"features", summary_plot_json(*base->attributions, ds->eval_points,
                                                         ds->feature_names)}});
        for (const auto* c : r.select(dataset, model)) {
          if (!c->attributions) continue;
          groups.push_back({{"dataset", dataset},
                            {"model", to_string(model)},
                            {"arm", "dp"},
                            {"mechanism", to_string(c->key.mechanism)},
                            {"epsilon", c->key.epsilon},
                            {"run", c->key.run},
                            {"features", summary_plot_json(*c->attributions, ds->eval_points,
                                                           ds->feature_names)}});
        }
      }
    }
  }
  return {{"kind", to_string(kind)}, {"groups", std::move(groups)}};
}

inline std::filesystem::path emit_plot_data(const SweepReport& r, PlotKind kind,
                                            const std::filesystem::path& out_dir) {
  const auto path = out_dir / "plots" / (to_string(kind) + ".json");
  detail::write_file_atomically(path, plot_data(r, kind).dump(1) + "\n");
  return path;
}

// report.json, env.json, tables/*.csv and plots/*.json under `out_dir`.
inline void write_sweep_outputs(const SweepReport& r, std::uint64_t base_seed,
                                const std::filesystem::path& out_dir) {
  detail::write_file_atomically(out_dir / "report.json", report_to_json(r).dump(1) + "\n");
  detail::write_file_atomically(out_dir / "env.json", environment_json(r, base_seed).dump(1) + "\n");
  emit_tables(r, out_dir);
  for (auto k : {PlotKind::shapgap_scatter, PlotKind::shapgap_box, PlotKind::summary_plot}) {
    emit_plot_data(r, k, out_dir);
  }
}

}  // namespace dpshap
