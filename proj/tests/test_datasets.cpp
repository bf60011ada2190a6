#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "dpshap/dataset.hpp"
#include "oracles.hpp"

using namespace dpshap;

namespace {

Dataset parse(const std::string& text, CsvOptions opts = {}) {
  std::istringstream in(text);
  return read_csv(in, opts, "mem.csv");
}

std::string thrown_message(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Csv, ParsesFeaturesAndLabels) {
  CsvOptions opts;
  opts.label_column = "y";
  const auto d = parse("a,y,b\n1,0,2\n3.5,1,-4e-1\n", opts);
  EXPECT_EQ(d.n(), 2u);
  EXPECT_EQ(d.d(), 2u);
  EXPECT_EQ(d.feature_names, (std::vector<std::string>{"a", "b"}));
  EXPECT_DOUBLE_EQ(d.features(1, 0), 3.5);
  EXPECT_DOUBLE_EQ(d.features(1, 1), -0.4);
  ASSERT_TRUE(d.labels);
  EXPECT_EQ(*d.labels, (std::vector<std::uint8_t>{0, 1}));
  EXPECT_EQ(d.anomaly_count(), 1u);
}

TEST(Csv, QuotedHeadersAndWhitespace) {
  const auto d = parse("\"x 1\", x2\n 1 , 2\n");
  EXPECT_EQ(d.feature_names[0], "x 1");
  EXPECT_EQ(d.feature_names[1], "x2");
  EXPECT_DOUBLE_EQ(d.features(0, 1), 2.0);
}

TEST(Csv, NonNumericCellNamesRowAndColumn) {
  const auto msg = thrown_message([] { parse("a,b\n1,2\n3,oops\n"); });
  EXPECT_NE(msg.find("row 3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("'b'"), std::string::npos) << msg;
}

TEST(Csv, MissingLabelColumn) {
  CsvOptions opts;
  opts.label_column = "label";
  EXPECT_THROW(parse("a,b\n1,2\n", opts), Error);
}

TEST(Csv, MissingValuesRejectedByDefaultDroppedOnRequest) {
  EXPECT_THROW(parse("a,b\n1,\n2,3\n"), Error);
  EXPECT_THROW(parse("a,b\n1,NA\n2,3\n"), Error);
  CsvOptions opts;
  opts.drop_missing_rows = true;
  const auto d = parse("a,b\n1,\n2,3\n4,nan\n", opts);
  EXPECT_EQ(d.n(), 1u);
  EXPECT_DOUBLE_EQ(d.features(0, 0), 2.0);
}

TEST(Csv, RejectsBadLabelsRaggedRowsAndDuplicates) {
  CsvOptions opts;
  opts.label_column = "y";
  EXPECT_THROW(parse("a,y\n1,2\n", opts), Error);
  EXPECT_THROW(parse("a,b\n1,2,3\n"), Error);
  EXPECT_THROW(parse("a,a\n1,2\n"), Error);
  EXPECT_THROW(parse(""), Error);
  EXPECT_THROW(parse("a,b\n1,inf\n"), Error);
}

TEST(Csv, DescriptorMustMatchExactly) {
  CsvOptions opts;
  opts.label_column = "y";
  opts.descriptor = DatasetDescriptor{"toy", 3, 2, 1};
  EXPECT_NO_THROW(parse("a,b,y\n1,2,0\n3,4,1\n5,6,0\n", opts));
  opts.descriptor = DatasetDescriptor{"toy", 3, 2, 2};
  const auto msg = thrown_message([&] { parse("a,b,y\n1,2,0\n3,4,1\n5,6,0\n", opts); });
  EXPECT_NE(msg.find("descriptor 'toy' mismatch"), std::string::npos) << msg;
}

TEST(Csv, RoundTripIsLossless) {
  auto data = gen_synthetic(SyntheticKind::local_outliers, 200, 10, 4, 11);
  std::stringstream buf;
  write_csv(buf, data);
  CsvOptions opts;
  opts.label_column = "label";
  const auto back = read_csv(buf, opts);
  EXPECT_EQ(back.features, data.features);
  EXPECT_EQ(back.labels, data.labels);
  EXPECT_EQ(back.feature_names, data.feature_names);
}

TEST(Csv, LoadCsvFromFile) {
  const auto dir = oracle::temp_dir("csv");
  const auto path = (dir / "d.csv").string();
  std::ofstream(path) << "a,b,label\n1,2,0\n3,4,1\n";
  CsvOptions opts;
  opts.label_column = "label";
  EXPECT_EQ(load_csv(path, opts).n(), 2u);
  EXPECT_THROW(load_csv((dir / "absent.csv").string()), Error);
}

TEST(Descriptors, ManifestParsingAndValidation) {
  const auto m = parse_descriptor_manifest(nlohmann::json::parse(
      R"({"mammography": {"n_records": 11183, "n_features": 6, "n_anomalies": 260}})"));
  ASSERT_EQ(m.count("mammography"), 1u);
  EXPECT_EQ(m.at("mammography").n_records, 11183u);
  EXPECT_EQ(m.at("mammography").n_features, 6u);
  EXPECT_EQ(m.at("mammography").n_anomalies, 260u);
  EXPECT_THROW(parse_descriptor_manifest(nlohmann::json::parse(
                   R"({"x": {"n_records": 5, "n_features": 1, "n_anomalies": 5}})")),
               Error);
  EXPECT_THROW(parse_descriptor_manifest(nlohmann::json::parse(
                   R"({"x": {"n_records": 5, "n_features": 0, "n_anomalies": 1}})")),
               Error);
  EXPECT_THROW(parse_descriptor_manifest(nlohmann::json::parse("[]")), Error);
}

TEST(Descriptors, ShippedManifestMatchesKnownDatasets) {
  const auto m = load_descriptor_manifest(DPSHAP_SOURCE_DIR "/data/descriptors.json");
  EXPECT_EQ(m.at("mammography").n_records, 11183u);
  EXPECT_EQ(m.at("mammography").n_anomalies, 260u);
  EXPECT_EQ(m.at("thyroid").n_records, 7200u);
  EXPECT_EQ(m.at("thyroid").n_features, 21u);
  EXPECT_EQ(m.at("thyroid").n_anomalies, 534u);
  EXPECT_EQ(m.at("bank").n_records, 41188u);
  EXPECT_EQ(m.at("bank").n_features, 62u);
  EXPECT_EQ(m.at("bank").n_anomalies, 4640u);
}

TEST(Standardize, SampleStdHandComputation) {
  Dataset d;
  d.features = Matrix(3, 1, std::vector<double>{2, 4, 6});
  d.feature_names = {"x"};
  const auto s = standardize(d);
  EXPECT_NEAR(s.data.features(0, 0), -1.0, 1e-12);
  EXPECT_NEAR(s.data.features(1, 0), 0.0, 1e-12);
  EXPECT_NEAR(s.data.features(2, 0), 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(s.transform.mean[0], 4.0);
  EXPECT_DOUBLE_EQ(s.transform.stddev[0], 2.0);
}

TEST(Standardize, ConstantColumnPassesThroughFlagged) {
  Dataset d;
  d.features = Matrix(3, 2, std::vector<double>{5, 1, 5, 2, 5, 3});
  d.feature_names = {"c", "x"};
  const auto s = standardize(d);
  EXPECT_TRUE(s.transform.zero_variance[0]);
  EXPECT_FALSE(s.transform.zero_variance[1]);
  for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(s.data.features(r, 0), 5.0);
}

TEST(Standardize, MomentsAndIdempotence) {
  const auto data = gen_synthetic(SyntheticKind::global_outliers, 500, 25, 5, 3);
  const auto once = standardize(data);
  for (std::size_t j = 0; j < data.d(); ++j) {
    const auto col = once.data.features.column(j);
    double m = 0.0;
    for (double v : col) m += v;
    m /= static_cast<double>(col.size());
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(std::sqrt(oracle::sample_variance(col)), 1.0, 1e-9);
  }
  const auto twice = standardize(once.data);
  for (std::size_t i = 0; i < once.data.features.values().size(); ++i) {
    EXPECT_NEAR(twice.data.features.values()[i], once.data.features.values()[i], 1e-9);
  }
  EXPECT_EQ(once.data.labels, data.labels);
}

TEST(Standardize, ApplyChecksWidth) {
  Standardization t;
  t.mean = {0.0};
  t.stddev = {1.0};
  t.zero_variance = {false};
  EXPECT_THROW(t.apply(Matrix(1, 2)), Error);
}

TEST(Synthetic, CountsAndDeterminism) {
  const auto a = gen_synthetic(SyntheticKind::global_outliers, 1000, 50, 2, 7);
  EXPECT_EQ(a.n(), 1050u);
  EXPECT_EQ(a.anomaly_count(), 50u);
  const auto b = gen_synthetic(SyntheticKind::global_outliers, 1000, 50, 2, 7);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
  const auto c = gen_synthetic(SyntheticKind::global_outliers, 1000, 50, 2, 8);
  EXPECT_NE(a.features, c.features);
  EXPECT_NO_THROW(a.validate());
}

TEST(Synthetic, InvalidArguments) {
  EXPECT_THROW(gen_synthetic(SyntheticKind::global_outliers, 100, 50, 2, 1), Error);
  EXPECT_THROW(gen_synthetic(SyntheticKind::global_outliers, 100, 0, 2, 1), Error);
  EXPECT_THROW(gen_synthetic(SyntheticKind::local_outliers, 100, 5, 1, 1), Error);
  SyntheticGeometry g;
  g.planted_axis = 3;
  EXPECT_THROW(gen_synthetic(SyntheticKind::global_outliers, 100, 5, 3, 1, g), Error);
  EXPECT_THROW(parse_synthetic_kind("cluster"), Error);
}

TEST(Synthetic, GlobalOutliersAreFarOnThePlantedAxis) {
  const auto a = gen_synthetic(SyntheticKind::global_outliers, 1000, 50, 4, 5);
  for (std::size_t r = 0; r < a.n(); ++r) {
    if ((*a.labels)[r] == kAnomaly) {
      EXPECT_GE(std::fabs(a.features(r, 0)), 5.0);
      EXPECT_LE(std::fabs(a.features(r, 0)), 8.0);
    }
  }
}

// Local anomalies are not global outliers: their distance to the global
// centroid lies inside the range spanned by the normal points.
TEST(Synthetic, LocalOutliersSitInsideTheNormalDistanceRange) {
  const auto a = gen_synthetic(SyntheticKind::local_outliers, 1000, 50, 2, 7);
  oracle::Row centroid(2, 0.0);
  for (std::size_t r = 0; r < a.n(); ++r) {
    for (std::size_t j = 0; j < 2; ++j) centroid[j] += a.features(r, j) / static_cast<double>(a.n());
  }
  std::vector<double> normal, anomaly;
  for (std::size_t r = 0; r < a.n(); ++r) {
    const oracle::Row p{a.features(r, 0), a.features(r, 1)};
    ((*a.labels)[r] == kAnomaly ? anomaly : normal).push_back(std::sqrt(oracle::sq_dist(p, centroid)));
  }
  const auto [lo, hi] = std::minmax_element(normal.begin(), normal.end());
  for (double q : {0.05, 0.5, 0.95}) {
    const double v = oracle::quantile(anomaly, q);
    EXPECT_GT(v, *lo);
    EXPECT_LT(v, *hi);
  }
}

TEST(Subsample, StratifiedSortedAndDeterministic) {
  const auto a = gen_synthetic(SyntheticKind::global_outliers, 1000, 50, 2, 1);
  const auto idx = stratified_subsample(*a.labels, 210, 9);
  EXPECT_EQ(idx.size(), 210u);
  EXPECT_TRUE(std::is_sorted(idx.begin(), idx.end()));
  EXPECT_EQ(std::adjacent_find(idx.begin(), idx.end()), idx.end());
  std::size_t pos = 0;
  for (auto i : idx) pos += (*a.labels)[i] == kAnomaly;
  EXPECT_EQ(pos, 10u);
  EXPECT_EQ(idx, stratified_subsample(*a.labels, 210, 9));
  EXPECT_NE(idx, stratified_subsample(*a.labels, 210, 10));
  EXPECT_EQ(stratified_subsample(*a.labels, 5000, 9).size(), a.n());
}

TEST(Subsample, KeepsARareClassRepresented) {
  std::vector<std::uint8_t> labels(1000, kNormal);
  labels[17] = kAnomaly;
  const auto idx = stratified_subsample(labels, 20, 3);
  EXPECT_NE(std::find(idx.begin(), idx.end(), 17u), idx.end());
}

TEST(DatasetType, ValidationAndSubset) {
  Dataset d;
  d.features = Matrix(2, 2, std::vector<double>{1, 2, 3, 4});
  d.feature_names = {"a", "b"};
  d.labels = std::vector<std::uint8_t>{0, 1};
  EXPECT_NO_THROW(d.validate());
  EXPECT_NO_THROW(d.require_both_classes());
  const auto s = d.subset(std::vector<std::size_t>{1});
  EXPECT_EQ(s.features(0, 0), 3.0);
  EXPECT_THROW(s.require_both_classes(), Error);
  d.labels = std::vector<std::uint8_t>{0, 2};
  EXPECT_THROW(d.validate(), Error);
  d.labels.reset();
  EXPECT_THROW(d.require_both_classes(), Error);
  d.feature_names = {"a"};
  EXPECT_THROW(d.validate(), Error);
}
