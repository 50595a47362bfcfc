#include "sdmlm/sdm.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

using namespace sdmlm;

namespace {

SupportIndex line_support(const std::vector<float>& xs, const std::vector<int>& labels) {
  SupportIndex s;
  s.features.resize(static_cast<Eigen::Index>(xs.size()), 1);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    s.features(static_cast<Eigen::Index>(i), 0) = xs[i];
    s.ids.push_back("s" + std::to_string(i));
  }
  s.labels = labels;
  return s;
}

LayerDataset clusters(std::size_t n, int dim, double separation, bool shuffle_labels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 1.0f);
  LayerDataset d;
  d.features.resize(static_cast<Eigen::Index>(n), dim);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    for (int c = 0; c < dim; ++c) {
      d.features(static_cast<Eigen::Index>(i), c) = noise(rng) + static_cast<float>(y ? separation : -separation);
    }
    d.labels.push_back(y);
    d.ids.push_back("doc-" + std::to_string(i));
  }
  if (shuffle_labels) std::shuffle(d.labels.begin(), d.labels.end(), rng);
  return d;
}

LayerTrainOptions small_options() {
  LayerTrainOptions o;
  o.filters = 64;
  o.epochs = 60;
  o.learning_rate = 1e-3;
  return o;
}

}  // namespace

TEST(Knn, PrefixSimilarity) {
  auto s = line_support({0.1f, 0.2f, 0.3f, 0.4f}, {1, 1, 0, 1});
  const float q[1] = {0.0f};
  auto r = knn_q_d(q, s, 1);
  EXPECT_EQ(r.q, 2u);
  EXPECT_NEAR(r.d, 0.1, 1e-7);
  EXPECT_EQ(knn_q_d(q, s, 0).q, 0u);
}

TEST(Knn, AllMatchingGivesFullCount) {
  auto s = line_support({3.0f, 1.0f, 2.0f}, {0, 0, 0});
  const float q[1] = {0.0f};
  EXPECT_EQ(knn_q_d(q, s, 0).q, 3u);
}

TEST(Knn, ExclusionSkipsById) {
  auto s = line_support({0.0f, 0.5f, 2.0f}, {1, 0, 1});
  const float q[1] = {0.0f};
  auto r = knn_q_d(q, s, 1, "s0");
  EXPECT_NEAR(r.d, 0.5, 1e-7);
  EXPECT_EQ(r.q, 0u);
  EXPECT_EQ(knn_q_d(q, s, 1).d, 0.0);
  auto one = line_support({1.0f}, {0});
  EXPECT_THROW(knn_q_d(q, one, 0, "s0"), EstimatorError);
}

TEST(Knn, DistanceTiesOrderByIndex) {
  auto s = line_support({1.0f, -1.0f, 1.0f}, {1, 0, 1});
  const float q[1] = {0.0f};
  EXPECT_EQ(knn_q_d(q, s, 1).q, 1u);
  auto t = line_support({-1.0f, 1.0f, 1.0f}, {0, 1, 1});
  EXPECT_EQ(knn_q_d(q, t, 1).q, 0u);
}

TEST(Ecdf, StrictLowerFraction) {
  auto e = DistanceEcdf::from_samples({3.0, 1.0, 2.0, 2.0});
  EXPECT_EQ(e(0.0), 0.0);
  EXPECT_EQ(e(1.0), 0.0);
  EXPECT_EQ(e(1.5), 0.25);
  EXPECT_EQ(e(2.0), 0.25);
  EXPECT_EQ(e(2.5), 0.75);
  EXPECT_EQ(e(10.0), 1.0);
  EXPECT_THROW(DistanceEcdf::from_samples({}), EstimatorError);
}

TEST(RescaleSimilarity, Examples) {
  std::vector<double> d;
  for (int i = 1; i <= 101; ++i) d.push_back(i);
  auto e = DistanceEcdf::from_samples(d);
  EXPECT_EQ(rescale_similarity(7, 0.5, e), 7.0);
  EXPECT_EQ(rescale_similarity(7, 1000.0, e), 0.0);
  EXPECT_NEAR(rescale_similarity(100, 51.0, e), 50.0, 1.0);
}

TEST(Verdict, ProbabilityExamples) {
  auto e = DistanceEcdf::from_samples({1.0, 2.0});
  auto v = make_verdict({0.0, 1.0}, KnnResult{0, 0.5}, e, 10);
  EXPECT_NEAR(v.p[0], 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(v.p[1], 2.0 / 3.0, 1e-12);
  EXPECT_EQ(v.y_hat, 1);
  auto w = make_verdict({0.0, 1.0}, KnnResult{10, 0.5}, e, 10);
  EXPECT_EQ(w.q_tilde, 10.0);
  EXPECT_NEAR(w.p[0], 0.25, 1e-12);
  EXPECT_NEAR(w.p[1], 0.75, 1e-12);
  auto sym = make_verdict({0.3, 0.3}, KnnResult{4, 0.5}, e, 10);
  EXPECT_EQ(sym.p[0], 0.5);
  EXPECT_EQ(sym.y_hat, 0);
}

TEST(Admission, ClosedThresholds) {
  SdmVerdict v;
  v.y_hat = 1;
  v.q_tilde = 2.0;
  v.p = {0.1, 0.9};
  EXPECT_TRUE(is_admitted(v, Thresholds{0.5, 0.9, 2.0, 0}));
  EXPECT_FALSE(is_admitted(v, Thresholds{0.5, 0.91, 2.0, 0}));
  EXPECT_FALSE(is_admitted(v, Thresholds{0.5, 0.9, 2.01, 0}));
  EXPECT_FALSE(is_admitted(v, Thresholds{}));
}

TEST(FitThresholds, AllCorrectAdmitsEverything) {
  std::vector<SdmVerdict> v(30);
  std::vector<int> y(30);
  for (int i = 0; i < 30; ++i) {
    v[i].y_hat = i % 2;
    v[i].q_tilde = 1.0 + i;
    v[i].p[v[i].y_hat] = 0.6 + 0.01 * i;
    v[i].p[1 - v[i].y_hat] = 1 - v[i].p[v[i].y_hat];
    y[i] = v[i].y_hat;
  }
  auto t = fit_thresholds(v, y, 0.95, 20);
  EXPECT_EQ(t.admitted, 30u);
  EXPECT_EQ(t.q_tilde_min, 1.0);
  EXPECT_EQ(t.psi0, 0.6);
  EXPECT_EQ(t.psi1, 0.61);
}

TEST(FitThresholds, NothingAdmissible) {
  std::vector<SdmVerdict> v(40);
  std::vector<int> y(40);
  for (int i = 0; i < 40; ++i) {
    v[i].y_hat = 0;
    v[i].q_tilde = 1.0;
    v[i].p = {0.8, 0.2};
    y[i] = i % 2;
  }
  auto t = fit_thresholds(v, y, 0.95, 20);
  EXPECT_TRUE(std::isinf(t.q_tilde_min));
  EXPECT_EQ(t.admitted, 0u);
  EXPECT_EQ(t.psi0, 0.95);
  EXPECT_EQ(t.psi1, 0.95);
}

TEST(FitThresholds, MinimumAdmittedCount) {
  std::vector<SdmVerdict> v(10);
  std::vector<int> y(10, 0);
  for (auto& x : v) x.p = {0.9, 0.1};
  EXPECT_EQ(fit_thresholds(v, y, 0.95, 20).admitted, 0u);
  EXPECT_EQ(fit_thresholds(v, y, 0.95, 10).admitted, 10u);
  EXPECT_EQ(default_min_admitted(0.95), 20u);
  EXPECT_EQ(default_min_admitted(0.9), 10u);
}

TEST(FitThresholds, HandBuiltTenPoints) {
  // (y_hat, q_tilde, p[y_hat], label)
  const double rows[10][4] = {{0, 3, 0.9, 0}, {0, 3, 0.7, 1}, {1, 2, 0.95, 1}, {1, 2, 0.6, 0}, {0, 1, 0.99, 0},
                              {1, 3, 0.8, 1}, {0, 0, 0.55, 1}, {1, 1, 0.97, 1}, {0, 2, 0.85, 0}, {1, 0, 0.7, 0}};
  std::vector<SdmVerdict> v(10);
  std::vector<int> y(10);
  for (int i = 0; i < 10; ++i) {
    v[i].y_hat = static_cast<int>(rows[i][0]);
    v[i].q_tilde = rows[i][1];
    v[i].p[v[i].y_hat] = rows[i][2];
    v[i].p[1 - v[i].y_hat] = 1 - rows[i][2];
    y[i] = static_cast<int>(rows[i][3]);
  }
  auto got = fit_thresholds(v, y, 0.95, 1);
  EXPECT_EQ(got, oracle::fit_thresholds(v, y, 0.95, 1));
  // Admitted set by hand: every point with q >= 1 except the two mistakes.
  EXPECT_EQ(got.admitted, 6u);
  EXPECT_EQ(got.q_tilde_min, 1.0);
  EXPECT_EQ(got.psi0, 0.85);
  EXPECT_EQ(got.psi1, 0.7);
}

TEST(FitThresholds, MatchesExhaustiveOracle) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<SdmVerdict> v;
    std::vector<int> y;
    oracle::random_verdicts(rng, 1 + trial % 40, v, y);
    for (std::size_t m : {std::size_t{1}, std::size_t{3}, std::size_t{20}}) {
      ASSERT_EQ(fit_thresholds(v, y, 0.9, m), oracle::fit_thresholds(v, y, 0.9, m)) << trial;
    }
  }
}

TEST(FitThresholds, AdmittedSetIsPointwiseFilter) {
  std::mt19937_64 rng(5);
  std::vector<SdmVerdict> v;
  std::vector<int> y;
  oracle::random_verdicts(rng, 200, v, y);
  auto t = fit_thresholds(v, y, 0.8, 5);
  std::size_t n = 0;
  for (const auto& x : v) n += is_admitted(x, t);
  EXPECT_EQ(n, t.admitted);
}

TEST(TrainLayer, SeparableClusters) {
  auto data = clusters(400, 6, 3.0, false, 1);
  LayerFitReport report;
  auto layer = train_layer(data, 7, small_options(), &report);
  EXPECT_EQ(layer.support.size(), 200u);
  EXPECT_EQ(report.calib_verdicts.size(), 200u);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < report.calib_verdicts.size(); ++i) {
    correct += report.calib_verdicts[i].y_hat == report.calib_labels[i];
  }
  EXPECT_EQ(correct, 200u);
  EXPECT_TRUE(std::isfinite(layer.artifacts.thresholds.q_tilde_min));
  EXPECT_GT(layer.artifacts.thresholds.admitted, 0u);
}

TEST(TrainLayer, ShuffledLabelsRejectEverything) {
  auto data = clusters(400, 6, 3.0, true, 2);
  auto layer = train_layer(data, 7, small_options());
  EXPECT_TRUE(std::isinf(layer.artifacts.thresholds.q_tilde_min));
  EXPECT_EQ(layer.artifacts.thresholds.admitted, 0u);
}

TEST(TrainLayer, DefaultHyperparameters) {
  auto data = clusters(120, 4, 3.0, false, 3);
  LayerFitReport report;
  auto layer = train_layer(data, 1, {}, &report);
  EXPECT_EQ(layer.params.filters(), 1000);
  EXPECT_EQ(layer.params.input_dim(), 4);
  EXPECT_EQ(layer.artifacts.min_admitted, 20u);
  EXPECT_GE(report.best_epoch, 1);
  EXPECT_LE(report.best_epoch, 200);
}

TEST(TrainLayer, DeterministicAndPersistent) {
  auto data = clusters(200, 5, 2.0, false, 4);
  auto a = train_layer(data, 11, small_options());
  auto b = train_layer(data, 11, small_options());
  EXPECT_EQ(a.params.w_filter, b.params.w_filter);
  EXPECT_EQ(a.artifacts.thresholds, b.artifacts.thresholds);
  EXPECT_EQ(a.artifacts.ecdf.knots, b.artifacts.ecdf.knots);

  const auto path = std::filesystem::temp_directory_path() / "sdmlm_test_layer.art";
  save_layer(path, a);
  auto c = load_layer(path);
  std::filesystem::remove(path);
  EXPECT_EQ(c.params.center, a.params.center);
  EXPECT_EQ(c.params.w_filter, a.params.w_filter);
  EXPECT_EQ(c.params.b_filter, a.params.b_filter);
  EXPECT_EQ(c.params.w_out, a.params.w_out);
  EXPECT_EQ(c.params.b_out, a.params.b_out);
  EXPECT_EQ(c.support.features, a.support.features);
  EXPECT_EQ(c.support.labels, a.support.labels);
  EXPECT_EQ(c.support.ids, a.support.ids);
  EXPECT_EQ(c.artifacts.ecdf.knots, a.artifacts.ecdf.knots);
  EXPECT_EQ(c.artifacts.thresholds, a.artifacts.thresholds);
  EXPECT_EQ(c.artifacts.alpha, a.artifacts.alpha);
  EXPECT_EQ(c.artifacts.min_admitted, a.artifacts.min_admitted);
}

TEST(TrainLayer, PredictExcludesOwnSupportPoint) {
  auto data = clusters(200, 5, 2.0, false, 5);
  auto layer = train_layer(data, 3, small_options());
  const auto& id = layer.support.ids.front();
  const auto row = std::find(data.ids.begin(), data.ids.end(), id) - data.ids.begin();
  RowVector<float> x = data.features.row(row);
  auto with = layer.predict(std::span<const float>(x.data(), static_cast<std::size_t>(x.size())));
  auto without = layer.predict(std::span<const float>(x.data(), static_cast<std::size_t>(x.size())), id);
  EXPECT_EQ(with.d, 0.0);
  EXPECT_GT(without.d, 0.0);
  Matrix<float> xs = data.features.topRows(10);
  std::vector<std::string> ids(10);
  ids[row < 10 ? row : 0] = id;
  auto batch = layer.predict_batch(xs, ids);
  for (int i = 0; i < 10; ++i) {
    RowVector<float> r = xs.row(i);
    auto single = layer.predict(std::span<const float>(r.data(), 5),
                                ids[i].empty() ? std::nullopt : std::optional<std::string_view>(ids[i]));
    EXPECT_EQ(batch[i].z, single.z);
    EXPECT_EQ(batch[i].q, single.q);
    EXPECT_EQ(batch[i].admitted, single.admitted);
  }
}

TEST(TrainLayer, Errors) {
  auto data = clusters(20, 3, 1.0, false, 6);
  std::fill(data.labels.begin(), data.labels.end(), 1);
  EXPECT_THROW(train_layer(data, 1, small_options()), EstimatorError);
  data.labels.pop_back();
  EXPECT_THROW(train_layer(data, 1, small_options()), EstimatorError);
}
