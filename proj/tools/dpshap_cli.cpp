#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "dpshap/dpshap.hpp"

using namespace dpshap;

namespace {

struct GenSynthArgs {
  std::string kind = "global_outliers";
  std::size_t n_normal = 1000;
  std::size_t n_anomalies = 50;
  std::size_t d = 6;
  std::uint64_t seed = 0;
  std::string out;
};

struct DataArgs {
  std::string path;
  std::string label_column;
  bool drop_missing = false;

  Dataset load() const {
    CsvOptions o;
    if (!label_column.empty()) o.label_column = label_column;
    o.drop_missing_rows = drop_missing;
    auto data = load_csv(path, o);
    data.validate();
    return data;
  }
};

void add_data_options(CLI::App* cmd, DataArgs& a) {
  cmd->add_option("--data", a.path, "Input CSV")->required()->check(CLI::ExistingFile);
  cmd->add_option("--label-column", a.label_column, "Label column (dropped from the features)");
  cmd->add_flag("--drop-missing", a.drop_missing, "Drop rows with missing cells instead of failing");
}

struct FitArgs {
  DataArgs data;
  std::string model = "iforest";
  std::size_t n_estimators = 100;
  std::size_t max_features = 0;
  std::size_t subsample_size = 0;
  std::size_t height_limit = 0;
  std::size_t k = 20;
  double contamination = -1.0;
  bool no_standardize = false;
  std::uint64_t seed = 0;
  std::string out;
};

int run_gen_synth(const GenSynthArgs& a) {
  const auto data = gen_synthetic(parse_synthetic_kind(a.kind), a.n_normal, a.n_anomalies, a.d, a.seed);
  if (a.out.empty() || a.out == "-") {
    write_csv(std::cout, data);
  } else {
    save_csv(a.out, data);
  }
  return 0;
}

int run_fit(const FitArgs& a) {
  Dataset data = a.data.load();
  ModelArtifact art;
  art.params.kind = parse_model_kind(a.model);
  art.params.iforest.n_estimators = a.n_estimators;
  art.params.iforest.max_features = a.max_features;
  art.params.iforest.subsample_size = a.subsample_size;
  art.params.iforest.height_limit = a.height_limit;
  art.params.lof_k = a.k;
  art.seed = a.seed;
  art.feature_names = data.feature_names;
  if (!a.no_standardize) {
    auto st = standardize(data);
    art.standardization = st.transform;
    data = std::move(st.data);
  }

  double contamination = a.contamination;
  if (contamination < 0.0) {
    if (!data.labels) throw Error("fit: pass --contamination or a --label-column to derive it");
    contamination = data.contamination();
  }
  art.scorer = AnomalyScorer::fit(data.features, art.params, a.seed);
  art.threshold = decision_threshold(art.scorer.score_all(data.features), contamination);
  save_model(a.out, art);
  std::cerr << "fitted " << to_string(art.params.kind) << " on " << data.n() << " rows, threshold "
            << format_real(art.threshold) << '\n';
  return 0;
}

struct ExplainArgs {
  std::string model;
  DataArgs data;
  std::string background;
  std::size_t background_size = 100;
  std::string selection = "random_subsample";
  std::size_t n_coalitions = 2048;
  std::uint64_t seed = 0;
  std::size_t jobs = 0;
  std::string format = "csv";
  std::string out;
};

Matrix prepared_features(const Dataset& data, const ModelArtifact& art) {
  if (data.d() != art.scorer.n_features()) {
    throw Error("explain: data has " + std::to_string(data.d()) + " features, model expects " +
                std::to_string(art.scorer.n_features()));
  }
  return art.standardization ? art.standardization->apply(data.features) : data.features;
}

int run_explain(const ExplainArgs& a) {
  const auto art = load_model(a.model);
  const Matrix points = prepared_features(a.data.load(), art);
  Matrix bg_source = points;
  if (!a.background.empty()) {
    DataArgs bg = a.data;
    bg.path = a.background;
    bg_source = prepared_features(bg.load(), art);
  }
  const auto bg_seed = derive_seed(a.seed, "background");
  const auto background = parse_background_selection(a.selection) ==
                                  BackgroundSelection::kmeans_centroids
                              ? BackgroundSet::kmeans(bg_source, a.background_size, bg_seed)
                              : BackgroundSet::random_subsample(bg_source, a.background_size, bg_seed);
  KernelShapConfig config;
  config.n_coalitions = a.n_coalitions;
  config.seed = derive_seed(a.seed, "kernel_shap");
  const auto attributions = explain_dataset(art.scorer, points, background, config, {}, a.jobs);

  std::ofstream file;
  if (!a.out.empty() && a.out != "-") {
    file.open(a.out);
    if (!file) throw Error("cannot write " + a.out);
  }
  std::ostream& out = file.is_open() ? file : std::cout;
  if (a.format == "json") {
    out << nlohmann::json(attributions).dump(1) << '\n';
  } else {
    write_attributions_csv(out, attributions);
  }
  return 0;
}

struct SweepArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  bool quiet = false;
};

int run_sweep_cmd(const SweepArgs& a) {
  auto config = load_sweep_config(a.config);
  if (a.seed) config.base_seed = *a.seed;
  if (a.jobs) config.jobs = *a.jobs;
  std::filesystem::create_directories(a.out);

  SweepOptions options;
  if (!a.quiet) options.progress = &std::cerr;
  options.cells_jsonl = (std::filesystem::path(a.out) / "cells.jsonl").string();
  const auto report = run_sweep(config, options);
  write_sweep_outputs(report, config.base_seed, a.out);

  const auto errors = report.error_count();
  std::cerr << report.cells.size() << " cells, " << errors << " errors; wrote " << a.out << '\n';
  return errors == 0 ? 0 : 1;
}

struct ReportArgs {
  std::string report;
  std::string out;
  std::vector<std::string> plots{"shapgap_scatter", "shapgap_box", "summary_plot"};
};

int run_report(const ReportArgs& a) {
  const auto report = load_report(a.report);
  const std::filesystem::path out =
      a.out.empty() ? std::filesystem::path(a.report).parent_path() : std::filesystem::path(a.out);
  for (const auto& p : emit_tables(report, out)) std::cerr << "wrote " << p.string() << '\n';
  for (const auto& kind : a.plots) {
    std::cerr << "wrote " << emit_plot_data(report, parse_plot_kind(kind), out).string() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentially private anomaly detection with SHAP drift metrics"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  GenSynthArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-synth", "Generate a labeled synthetic benchmark as CSV");
  gen_cmd->add_option("--kind", gen.kind, "global_outliers | local_outliers");
  gen_cmd->add_option("--n-normal", gen.n_normal);
  gen_cmd->add_option("--n-anomalies", gen.n_anomalies);
  gen_cmd->add_option("--d", gen.d, "Number of features");
  gen_cmd->add_option("--seed", gen.seed);
  gen_cmd->add_option("--out", gen.out, "Output CSV (stdout when omitted)");

  FitArgs fit;
  auto* fit_cmd = app.add_subcommand("fit", "Fit a detector and save it as JSON");
  add_data_options(fit_cmd, fit.data);
  fit_cmd->add_option("--model", fit.model, "iforest | lof");
  fit_cmd->add_option("--n-estimators", fit.n_estimators);
  fit_cmd->add_option("--max-features", fit.max_features, "Features per tree (0 = all)");
  fit_cmd->add_option("--subsample-size", fit.subsample_size, "Rows per tree (0 = min(256, n))");
  fit_cmd->add_option("--height-limit", fit.height_limit, "0 = ceil(log2 subsample)");
  fit_cmd->add_option("--k", fit.k, "LOF neighbourhood size");
  fit_cmd->add_option("--contamination", fit.contamination,
                      "Anomaly share for the decision threshold (default: from labels)");
  fit_cmd->add_flag("--no-standardize", fit.no_standardize);
  fit_cmd->add_option("--seed", fit.seed);
  fit_cmd->add_option("--out", fit.out, "Model JSON")->required();

  ExplainArgs explain;
  auto* explain_cmd = app.add_subcommand("explain", "Kernel SHAP attributions for every row");
  explain_cmd->add_option("--model", explain.model, "Model JSON from `fit`")
      ->required()
      ->check(CLI::ExistingFile);
  add_data_options(explain_cmd, explain.data);
  explain_cmd->add_option("--background", explain.background,
                          "CSV the background is drawn from (default: --data)")
      ->check(CLI::ExistingFile);
  explain_cmd->add_option("--background-size", explain.background_size);
  explain_cmd->add_option("--background-selection", explain.selection,
                          "random_subsample | kmeans_centroids");
  explain_cmd->add_option("--n-coalitions", explain.n_coalitions, "Sampled coalitions when d > 12");
  explain_cmd->add_option("--seed", explain.seed);
  explain_cmd->add_option("--jobs", explain.jobs, "Worker threads (0 = all cores)");
  explain_cmd->add_option("--format", explain.format)->check(CLI::IsMember({"csv", "json"}));
  explain_cmd->add_option("--out", explain.out, "Output file (stdout when omitted)");

  SweepArgs sweep;
  auto* sweep_cmd = app.add_subcommand("sweep", "Run the dataset x model x mechanism x epsilon sweep");
  sweep_cmd->add_option("--config", sweep.config, "Sweep config JSON")
      ->required()
      ->check(CLI::ExistingFile);
  sweep_cmd->add_option("--out", sweep.out, "Output directory")->required();
  sweep_cmd->add_option("--seed", sweep.seed, "Override base_seed");
  sweep_cmd->add_option("--jobs", sweep.jobs, "Override jobs (0 = all cores)");
  sweep_cmd->add_flag("--quiet", sweep.quiet, "No per-cell progress lines");

  ReportArgs rep;
  auto* report_cmd = app.add_subcommand("report", "Regenerate tables and plot data from report.json");
  report_cmd->add_option("--report", rep.report, "report.json")->required()->check(CLI::ExistingFile);
  report_cmd->add_option("--out", rep.out, "Output directory (default: next to the report)");
  report_cmd->add_option("--plots", rep.plots, "shapgap_scatter | shapgap_box | summary_plot");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen_cmd->parsed()) return run_gen_synth(gen);
    if (fit_cmd->parsed()) return run_fit(fit);
    if (explain_cmd->parsed()) return run_explain(explain);
    if (sweep_cmd->parsed()) return run_sweep_cmd(sweep);
    if (report_cmd->parsed()) return run_report(rep);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
