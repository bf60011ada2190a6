#include <gtest/gtest.h>

#include "dpshap/metrics.hpp"
#include "oracles.hpp"

using namespace dpshap;

namespace {

AttributionMatrix matrix_of(const std::vector<std::vector<double>>& phis) {
  AttributionMatrix m;
  m.model_tag = "t";
  for (std::size_t i = 0; i < phis.size(); ++i) {
    Attribution a;
    a.point_id = i;
    a.phi = phis[i];
    a.model_tag = "t";
    m.rows.push_back(a);
  }
  return m;
}

std::vector<std::vector<double>> random_phis(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> out(n, std::vector<double>(d));
  for (auto& r : out) {
    for (auto& v : r) v = rng.normal();
  }
  return out;
}

using Labels = std::vector<std::uint8_t>;

}  // namespace

// --- ShapGAP ---------------------------------------------------------------

TEST(ShapGap, EuclideanExamples) {
  const auto a = matrix_of({{1, 0}});
  const auto b = matrix_of({{0, 1}});
  EXPECT_NEAR(shapgap_euclidean(a, b).mean, std::sqrt(2.0), 1e-15);
  EXPECT_EQ(shapgap_euclidean(a, a).mean, 0.0);
  const auto c = matrix_of({{0, 0}, {0, 0}});
  const auto d = matrix_of({{3, 0}, {0, 4}});
  const auto g = shapgap_euclidean(c, d);
  EXPECT_EQ(g.mean, 3.5);
  EXPECT_EQ(g.per_point, (std::vector<double>{3.0, 4.0}));
}

TEST(ShapGap, CosineExamples) {
  const std::vector<double> v{0.3, -1.2, 0.5};
  const std::vector<double> neg{-0.3, 1.2, -0.5};
  EXPECT_EQ(cosine_gap(v, v), 0.0);
  EXPECT_EQ(cosine_gap(v, neg), 2.0);
  EXPECT_EQ(cosine_gap(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 1.0);
}

TEST(ShapGap, CosineZeroVectorRule) {
  bool rule = false;
  EXPECT_EQ(cosine_gap(std::vector<double>{0, 0}, std::vector<double>{0, 0}, &rule), 0.0);
  EXPECT_TRUE(rule);
  EXPECT_EQ(cosine_gap(std::vector<double>{0, 0}, std::vector<double>{1, 0}), 1.0);
  const auto g = shapgap_cosine(matrix_of({{0, 0}, {1, 1}}), matrix_of({{2, 0}, {1, 1}}));
  EXPECT_EQ(g.zero_vector_cases, 1u);
  EXPECT_EQ(g.mean, 0.5);
}

TEST(ShapGap, ShapeAndIdMismatch) {
  EXPECT_THROW(shapgap_euclidean(matrix_of({{1, 2}}), matrix_of({{1, 2, 3}})), Error);
  EXPECT_THROW(shapgap_cosine(matrix_of({{1, 2}}), matrix_of({{1, 2}, {3, 4}})), Error);
  auto b = matrix_of({{1, 2}});
  b.rows[0].point_id = 9;
  EXPECT_THROW(shapgap_euclidean(matrix_of({{1, 2}}), b), Error);
}

TEST(ShapGap, BoundsAndScaling) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto pa = random_phis(30, 5, seed);
    const auto pb = random_phis(30, 5, seed + 100);
    const auto a = matrix_of(pa), b = matrix_of(pb);
    for (double c : shapgap_cosine(a, b).per_point) {
      EXPECT_GE(c, 0.0);
      EXPECT_LE(c, 2.0);
    }
    for (double e : shapgap_euclidean(a, b).per_point) EXPECT_GE(e, 0.0);
    auto scaled = pa;
    for (auto& r : scaled) {
      for (auto& v : r) v *= 2.0;
    }
    EXPECT_LE(shapgap_cosine(a, matrix_of(scaled)).mean, 1e-12);
    EXPECT_GT(shapgap_euclidean(a, matrix_of(scaled)).mean, 0.0);
    EXPECT_EQ(shapgap_cosine(a, a).mean, 0.0);
  }
}

// --- ShapLength --------------------------------------------------------------

TEST(ShapLength, PrefixExamples) {
  EXPECT_EQ(shap_length(std::vector<double>{0.5, 0.3, 0.2}, 0.8), 2u);
  EXPECT_EQ(shap_length(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 0.9), 4u);
  for (double p : {0.1, 0.5, 0.9, 1.0}) {
    EXPECT_EQ(shap_length(std::vector<double>{0.0, -3.0, 0.0}, p), 1u);
  }
  EXPECT_EQ(shap_length(std::vector<double>{0.0, 0.0}), 0u);
  EXPECT_EQ(shap_length(std::vector<double>{-0.1, 0.6, 0.3}), 3u);
  EXPECT_THROW(shap_length(std::vector<double>{1.0}, 0.0), Error);
  EXPECT_THROW(shap_length(std::vector<double>{1.0}, 1.5), Error);
}

TEST(ShapLength, MonotoneInP) {
  for (const auto& phi : random_phis(50, 8, 3)) {
    std::size_t prev = 0;
    for (double p = 0.05; p <= 1.0; p += 0.05) {
      const auto l = shap_length(phi, p);
      EXPECT_GE(l, prev);
      EXPECT_GE(l, 1u);
      EXPECT_LE(l, 8u);
      prev = l;
    }
  }
  const auto m = matrix_of({{1, 0, 0}, {1, 1, 1}});
  EXPECT_EQ(mean_shap_length(m), 2.0);
}

// --- Fidelity ------------------------------------------------------------------

TEST(Fidelity, Examples) {
  const Labels a{1, 0, 1, 0};
  const Labels comp{0, 1, 0, 1};
  const Labels half{1, 0, 0, 1};
  EXPECT_EQ(fidelity(a, a), 1.0);
  EXPECT_EQ(fidelity(a, comp), 0.0);
  EXPECT_EQ(fidelity(a, half), 0.5);
  EXPECT_EQ(fidelity(half, a), 0.5);
  EXPECT_THROW(fidelity(a, Labels{1}), Error);
}

// --- AUC -------------------------------------------------------------------------

TEST(Auc, Examples) {
  EXPECT_EQ(auc(std::vector<double>{0.9, 0.8, 0.7, 0.1}, Labels{1, 0, 1, 0}), 0.75);
  EXPECT_EQ(auc(std::vector<double>{3, 4, 1, 2}, Labels{1, 1, 0, 0}), 1.0);
  EXPECT_EQ(auc(std::vector<double>(6, 0.2), Labels{1, 0, 1, 0, 0, 0}), 0.5);
  EXPECT_THROW(auc(std::vector<double>{1, 2}, Labels{0, 0}), Error);
  EXPECT_THROW(auc(std::vector<double>{1, 2}, Labels{0}), Error);
}

TEST(Auc, MatchesPairCountingWithTies) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(200);
    Labels y(200);
    for (std::size_t i = 0; i < 200; ++i) {
      s[i] = static_cast<double>(rng.below(15));
      y[i] = i % 7 == 0 ? 1 : 0;
    }
    EXPECT_NEAR(auc(s, y), oracle::pair_auc(s, y), 1e-12);
  }
}

TEST(Auc, InvariantUnderMonotoneTransforms) {
  Rng rng(6);
  std::vector<double> s(300), t(300);
  Labels y(300);
  for (std::size_t i = 0; i < 300; ++i) {
    s[i] = rng.normal();
    t[i] = std::exp(3.0 * s[i]) + 7.0;
    y[i] = rng.uniform() < 0.1 ? 1 : 0;
  }
  EXPECT_EQ(auc(s, y), auc(t, y));
}

// --- Precision --------------------------------------------------------------------

TEST(Precision, Examples) {
  const Labels y{1, 0, 0, 0};
  auto p = precision(y, y);
  EXPECT_EQ(*p.anomaly, 1.0);
  EXPECT_EQ(*p.normal, 1.0);
  EXPECT_EQ(*p.weighted, 1.0);

  p = precision(Labels{1, 1, 0, 0}, y);
  EXPECT_EQ(*p.anomaly, 0.5);
  EXPECT_EQ(*p.normal, 1.0);
  EXPECT_EQ(*p.weighted, 0.875);

  Labels ten(100, 0);
  for (std::size_t i = 0; i < 10; ++i) ten[i] = 1;
  p = precision(Labels(100, 1), ten);
  EXPECT_NEAR(*p.anomaly, 0.10, 1e-15);
  EXPECT_FALSE(p.normal);
  EXPECT_FALSE(p.weighted);
  EXPECT_THROW(precision(Labels{1}, y), Error);
}

// --- Distribution helpers -----------------------------------------------------------

TEST(Distribution, QuantilesMatchSortOracle) {
  Rng rng(7);
  for (std::size_t n : {1u, 2u, 5u, 64u, 1001u}) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    for (double q : {0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0}) {
      EXPECT_EQ(quantile(v, q), oracle::quantile(v, q)) << n << " " << q;
    }
    const auto b = box_stats(v);
    EXPECT_EQ(b.q1, oracle::quantile(v, 0.25));
    EXPECT_EQ(b.median, oracle::quantile(v, 0.5));
    EXPECT_EQ(b.q3, oracle::quantile(v, 0.75));
    EXPECT_EQ(b.count, n);
  }
  EXPECT_THROW(quantile({}, 0.5), Error);
}

TEST(Distribution, TukeyWhiskers) {
  const auto b = box_stats({1, 2, 3, 4, 5, 6, 7, 8, 100});
  EXPECT_EQ(b.q1, 3.0);
  EXPECT_EQ(b.q3, 7.0);
  EXPECT_EQ(b.iqr(), 4.0);
  EXPECT_EQ(b.whisker_low, 1.0);
  EXPECT_EQ(b.whisker_high, 8.0);
  EXPECT_EQ(b.max, 100.0);
}

TEST(Distribution, Correlations) {
  const std::vector<double> x{1, 2, 3, 4, 5};
  const std::vector<double> y{2, 4, 6, 8, 10};
  const std::vector<double> cubic{1, 8, 27, 64, 125};
  EXPECT_NEAR(pearson(x, y), 1.0, 1e-15);
  EXPECT_LT(pearson(x, cubic), 1.0);
  EXPECT_NEAR(spearman(x, cubic), 1.0, 1e-15);
  const std::vector<double> rev{5, 4, 3, 2, 1};
  EXPECT_NEAR(spearman(x, rev), -1.0, 1e-15);
  EXPECT_EQ(pearson(x, std::vector<double>(5, 1.0)), 0.0);
  EXPECT_THROW(pearson(x, std::vector<double>{1, 2}), Error);
}

TEST(Distribution, AverageRanksShareTies) {
  const auto r = average_ranks(std::vector<double>{10, 20, 10, 30});
  EXPECT_EQ(r, (std::vector<double>{1.5, 3.0, 1.5, 4.0}));
}

// --- Report ---------------------------------------------------------------------------

TEST(MetricReportJson, RoundTrip) {
  MetricReport m;
  m.auc = 0.8125;
  m.precision.anomaly = 0.5;
  m.fidelity = 0.97;
  m.shapgap_l2_mean = 0.1;
  m.shapgap_cos_mean = 1.0 / 3.0;
  m.shaplength_mean = 2.5;
  m.per_point_l2 = {0.1, 0.2};
  m.per_point_cos = {0.0, 2.0 / 3.0};
  m.cosine_zero_vector_cases = 1;
  m.explained = true;
  const MetricReport b = nlohmann::json::parse(nlohmann::json(m).dump()).get<MetricReport>();
  EXPECT_EQ(b.auc, m.auc);
  EXPECT_EQ(b.precision.anomaly, m.precision.anomaly);
  EXPECT_FALSE(b.precision.normal);
  EXPECT_EQ(b.shapgap_cos_mean, m.shapgap_cos_mean);
  EXPECT_EQ(b.per_point_cos, m.per_point_cos);
  EXPECT_EQ(b.cosine_zero_vector_cases, 1u);
  EXPECT_TRUE(b.explained);
}
