#include <gtest/gtest.h>

#include <sstream>

#include "dpshap/scorer.hpp"
#include "dpshap/shap.hpp"
#include "oracles.hpp"

using namespace dpshap;

namespace {

using ScoreFn = std::function<double(std::span<const double>)>;

BackgroundSet uniform_background(const Matrix& m) {
  BackgroundSet b;
  b.points = m;
  b.weights.assign(m.rows(), 1.0 / static_cast<double>(m.rows()));
  return b;
}

std::vector<oracle::Row> rows_of(const Matrix& m) {
  std::vector<oracle::Row> out;
  for (std::size_t r = 0; r < m.rows(); ++r) out.emplace_back(m.row(r).begin(), m.row(r).end());
  return out;
}

Matrix random_matrix(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(n, d);
  for (auto& v : m.values()) v = rng.normal();
  return m;
}

double additivity(const Attribution& a, double score) {
  return std::fabs(a.base_value + std::accumulate(a.phi.begin(), a.phi.end(), 0.0) - score);
}

// Hides coalition_values so explain_dataset takes the per-call path.
struct BlackBox {
  const AnomalyScorer& inner;
  double score(std::span<const double> x) const { return inner.score(x); }
  std::size_t n_features() const { return inner.n_features(); }
  std::string tag() const { return inner.tag(); }
};

}  // namespace

TEST(ExactShapley, MatchesPermutationDefinition) {
  const auto bg = uniform_background(random_matrix(5, 4, 1));
  const ScoreFn f = [](std::span<const double> x) {
    return std::sin(x[0]) * x[1] + x[2] * x[2] * x[3] - std::max(x[0], x[3]);
  };
  const std::vector<double> x{0.4, -1.2, 0.7, 2.0};
  const auto a = exact_shapley(f, x, bg);
  const auto bgr = rows_of(bg.points);
  const auto want = oracle::permutation_shapley(
      [&](std::uint64_t m) {
        return oracle::coalition_value([&](const oracle::Row& z) { return f(z); }, x, bgr, m);
      },
      4);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(a.phi[j], want[j], 1e-12);
  EXPECT_LE(additivity(a, f(x)), 1e-9);
}

TEST(ExactShapley, ConstantScoreIsNullForEveryFeature) {
  const auto bg = uniform_background(random_matrix(4, 5, 2));
  const ScoreFn f = [](std::span<const double>) { return 3.5; };
  const auto a = exact_shapley(f, std::vector<double>{1, 2, 3, 4, 5}, bg);
  for (double p : a.phi) EXPECT_EQ(p, 0.0);
  EXPECT_EQ(a.base_value, 3.5);
}

TEST(ExactShapley, SingleFeature) {
  const auto bg = uniform_background(Matrix(3, 1, std::vector<double>{1.0, 2.0, 6.0}));
  const ScoreFn f = [](std::span<const double> x) { return x[0] * x[0]; };
  const auto a = exact_shapley(f, std::vector<double>{4.0}, bg);
  EXPECT_NEAR(a.phi[0], 16.0 - (1.0 + 4.0 + 36.0) / 3.0, 1e-12);
}

TEST(ExactShapley, LinearClosedForm) {
  Rng rng(3);
  std::vector<double> w(5), x(5);
  for (auto& v : w) v = rng.normal();
  for (auto& v : x) v = rng.normal();
  const auto bg = uniform_background(random_matrix(20, 5, 4));
  const ScoreFn f = [&](std::span<const double> z) {
    double s = 0;
    for (std::size_t j = 0; j < 5; ++j) s += w[j] * z[j];
    return s;
  };
  const auto a = exact_shapley(f, x, bg);
  for (std::size_t j = 0; j < 5; ++j) {
    const auto col = bg.points.column(j);
    const double mean = std::accumulate(col.begin(), col.end(), 0.0) / 20.0;
    EXPECT_NEAR(a.phi[j], w[j] * (x[j] - mean), 1e-12);
  }
}

TEST(ExactShapley, NullPlayerAndLimits) {
  const auto bg = uniform_background(random_matrix(6, 4, 5));
  const ScoreFn f = [](std::span<const double> x) { return x[0] * x[1] + std::exp(x[3]); };
  const auto a = exact_shapley(f, std::vector<double>{1.0, 0.5, -3.0, 0.2}, bg);
  EXPECT_LE(std::fabs(a.phi[2]), 1e-9);
  const auto wide = uniform_background(Matrix(1, 13));
  EXPECT_THROW(exact_shapley(f, std::vector<double>(13, 0.0), wide), Error);
  EXPECT_THROW(exact_shapley(f, std::vector<double>{}, uniform_background(Matrix(1, 0))), Error);
}

TEST(KernelShap, EqualsExactOnIForestScores) {
  const auto d = gen_synthetic(SyntheticKind::global_outliers, 300, 15, 6, 6);
  const auto s = AnomalyScorer::fit(d.features, {}, 1);
  const auto bg = BackgroundSet::random_subsample(d.features, 20, 2);
  const ScoreFn f = [&](std::span<const double> x) { return s.score(x); };
  for (std::size_t r : {0u, 5u, 299u, 300u, 314u}) {
    const auto x = d.features.row(r);
    const auto exact = exact_shapley(f, x, bg);
    const auto kern = kernel_shap(f, x, bg, {});
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(kern.phi[j], exact.phi[j], 1e-6);
    EXPECT_LE(additivity(kern, s.score(x)), 1e-6);
  }
}

TEST(KernelShap, ConstantScoreGivesZero) {
  const ScoreFn f = [](std::span<const double>) { return -1.0; };
  for (std::size_t d : {1u, 3u, 8u, 14u}) {
    const auto bg = uniform_background(random_matrix(3, d, d));
    const auto a = kernel_shap(f, std::vector<double>(d, 1.0), bg, {});
    for (double p : a.phi) EXPECT_NEAR(p, 0.0, 1e-9);
  }
}

TEST(KernelShap, SymmetricFeaturesGetEqualCredit) {
  const ScoreFn f = [](std::span<const double> x) { return x[0] * x[1] + x[0] + x[1] + x[2] * x[2]; };
  Matrix bg(0, 3);
  Rng rng(7);
  for (int i = 0; i < 5; ++i) {
    const double a = rng.normal(), b = rng.normal(), c = rng.normal();
    bg.append_row(std::vector<double>{a, b, c});
    bg.append_row(std::vector<double>{b, a, c});
  }
  const auto a = kernel_shap(f, std::vector<double>{0.8, 0.8, -0.3}, uniform_background(bg), {});
  EXPECT_LT(std::fabs(a.phi[0] - a.phi[1]), 1e-6);
}

TEST(KernelShap, SampledDesignKeepsAdditivity) {
  const ScoreFn f = [](std::span<const double> x) {
    double s = 0;
    for (std::size_t j = 0; j < x.size(); ++j) s += std::tanh(x[j] * static_cast<double>(j + 1) / 7.0);
    return s * s;
  };
  const auto bg = uniform_background(random_matrix(10, 14, 8));
  const auto x = random_matrix(1, 14, 9);
  KernelShapConfig c;
  c.n_coalitions = 512;
  const auto a = kernel_shap(f, x.row(0), bg, c, 3);
  EXPECT_LE(additivity(a, f(x.row(0))), 1e-3);
  EXPECT_EQ(a.phi, kernel_shap(f, x.row(0), bg, c, 3).phi);
  c.seed = 1;
  EXPECT_NE(a.phi, kernel_shap(f, x.row(0), bg, c, 3).phi);
}

TEST(KernelShap, EnumeratedResultsIgnoreTheSeed) {
  const ScoreFn f = [](std::span<const double> x) { return x[0] * x[1] - x[2]; };
  const auto bg = uniform_background(random_matrix(4, 3, 10));
  KernelShapConfig a, b;
  b.seed = 12345;
  const std::vector<double> x{1.0, 2.0, 3.0};
  EXPECT_EQ(kernel_shap(f, x, bg, a).phi, kernel_shap(f, x, bg, b).phi);
}

TEST(KernelShap, SingularSystemIsReported) {
  const ScoreFn f = [](std::span<const double> x) { return x[0]; };
  KernelShapConfig c;
  c.ridge = -10.0;
  EXPECT_THROW(kernel_shap(f, std::vector<double>{1, 2, 3}, uniform_background(Matrix(1, 3)), c), Error);
  EXPECT_THROW(kernel_shap(f, std::vector<double>{1, 2}, uniform_background(Matrix(1, 3)), {}), Error);
  EXPECT_THROW(kernel_shap_from_table(std::vector<double>(7), 0.0, 3, {}), Error);
}

TEST(ExplainDataset, HundredRowsAdditiveAndDeterministic) {
  const auto d = gen_synthetic(SyntheticKind::local_outliers, 500, 25, 6, 11);
  ModelParams p;
  p.kind = ModelKind::lof;
  const auto s = AnomalyScorer::fit(d.features, p, 0);
  const auto bg = BackgroundSet::random_subsample(d.features, 30, 1);
  const Matrix pts = d.features.select_rows([] {
    std::vector<std::size_t> r(100);
    std::iota(r.begin(), r.end(), std::size_t{400});
    return r;
  }());
  const auto m = explain_dataset(s, pts, bg, {}, {}, 2);
  ASSERT_EQ(m.size(), 100u);
  EXPECT_EQ(m.d(), 6u);
  for (std::size_t i = 0; i < 100; ++i) {
    EXPECT_EQ(m.rows[i].point_id, i);
    EXPECT_LE(additivity(m.rows[i], s.score(pts.row(i))), 1e-6);
  }
  const auto again = explain_dataset(s, pts, bg, {}, {}, 1);
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(again.rows[i].phi, m.rows[i].phi);
  EXPECT_NO_THROW(m.validate());
}

TEST(ExplainDataset, CoalitionTableMatchesPerCallPathExactly) {
  const auto d = gen_synthetic(SyntheticKind::global_outliers, 300, 15, 5, 12);
  const auto s = AnomalyScorer::fit(d.features, {}, 3);
  const auto bg = BackgroundSet::random_subsample(d.features, 15, 2);
  const auto pts = d.features.select_rows(std::vector<std::size_t>{1, 2, 3, 301, 302});
  const std::vector<std::size_t> ids{10, 20, 30, 40, 50};
  const auto table = explain_dataset(s, pts, bg, {}, ids);
  const auto generic = explain_dataset(BlackBox{s}, pts, bg, {}, ids);
  for (std::size_t i = 0; i < pts.rows(); ++i) {
    EXPECT_EQ(table.rows[i].point_id, ids[i]);
    EXPECT_EQ(table.rows[i].phi, generic.rows[i].phi);
    EXPECT_EQ(table.rows[i].base_value, generic.rows[i].base_value);
  }
}

TEST(ExplainDataset, PlantedAxisRanksFirst) {
  SyntheticGeometry geo;
  geo.planted_axis = 3;
  const auto d = gen_synthetic(SyntheticKind::global_outliers, 500, 50, 6, 13, geo);
  const auto s = AnomalyScorer::fit(d.features, {}, 4);
  const auto bg = BackgroundSet::random_subsample(d.features, 50, 5);
  // Every anomaly plus as many normals; rows are shuffled by the generator.
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < d.n() && rows.size() < 50; ++r) {
    if ((*d.labels)[r] == kNormal) rows.push_back(r);
  }
  for (std::size_t r = 0; r < d.n(); ++r) {
    if ((*d.labels)[r] == kAnomaly) rows.push_back(r);
  }
  const auto m = explain_dataset(s, d.features.select_rows(rows), bg, {});
  const auto imp = m.mean_abs();
  EXPECT_EQ(std::max_element(imp.begin(), imp.end()) - imp.begin(), 3);
}

TEST(ExplainDataset, DimensionChecks) {
  const auto s = AnomalyScorer::fit(random_matrix(50, 3, 1), {}, 0);
  EXPECT_THROW(explain_dataset(s, random_matrix(5, 2, 2), uniform_background(Matrix(1, 3)), {}), Error);
  EXPECT_THROW(explain_dataset(s, random_matrix(5, 3, 2), uniform_background(Matrix(1, 2)), {}), Error);
  const std::vector<std::size_t> ids{1, 2};
  EXPECT_THROW(explain_dataset(s, random_matrix(5, 3, 2), uniform_background(Matrix(1, 3)), {}, ids),
               Error);
}

TEST(Background, RandomSubsampleAndKmeans) {
  const auto x = random_matrix(200, 3, 14);
  const auto r = BackgroundSet::random_subsample(x, 40, 1);
  EXPECT_EQ(r.size(), 40u);
  EXPECT_EQ(r.digest(), BackgroundSet::random_subsample(x, 40, 1).digest());
  EXPECT_NE(r.digest(), BackgroundSet::random_subsample(x, 40, 2).digest());
  EXPECT_EQ(BackgroundSet::random_subsample(x, 1000, 1).size(), 200u);

  Matrix two(0, 2);
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const double c = i < 50 ? -5.0 : 5.0;
    two.append_row(std::vector<double>{c + 0.1 * rng.normal(), 0.1 * rng.normal()});
  }
  const auto k = BackgroundSet::kmeans(two, 2, 1);
  ASSERT_EQ(k.size(), 2u);
  EXPECT_NEAR(std::accumulate(k.weights.begin(), k.weights.end(), 0.0), 1.0, 1e-12);
  EXPECT_NEAR(std::fabs(k.points(0, 0)), 5.0, 0.1);
  EXPECT_LT(k.points(0, 0) * k.points(1, 0), 0.0);
  EXPECT_THROW(BackgroundSet::random_subsample(Matrix(0, 2), 5, 0), Error);
  EXPECT_THROW(BackgroundSet::kmeans(two, 0, 0), Error);
}

TEST(Attributions, JsonAndCsv) {
  AttributionMatrix m;
  m.model_tag = "iforest:abc";
  m.background_digest = "ff";
  for (std::size_t i = 0; i < 3; ++i) {
    Attribution a;
    a.point_id = i * 7;
    a.base_value = 0.1 * static_cast<double>(i);
    a.prediction = 0.5;
    a.phi = {0.1, -0.2 / 3.0};
    a.model_tag = m.model_tag;
    m.rows.push_back(a);
  }
  const AttributionMatrix back = nlohmann::json::parse(nlohmann::json(m).dump()).get<AttributionMatrix>();
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.rows[i].phi, m.rows[i].phi);
    EXPECT_EQ(back.rows[i].point_id, m.rows[i].point_id);
  }
  std::ostringstream csv;
  write_attributions_csv(csv, m);
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "point_id,base,phi_1,phi_2");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 4), "0,0,");
  auto bad = nlohmann::json(m);
  bad["rows"][1]["phi"] = {1.0};
  EXPECT_THROW(bad.get<AttributionMatrix>(), Error);
  EXPECT_DOUBLE_EQ(m.mean_abs()[0], 0.1);
}
