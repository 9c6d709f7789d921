#include <doctest.h>

#include <random>

#include "cdua/errors.hpp"
#include "cdua/gbdt.hpp"

using namespace cdua;

namespace {

struct Data {
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
};

Data make_data(int n, int p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  Data data{Eigen::MatrixXd(n, p), Eigen::VectorXd(n)};
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < p; ++j) data.x(i, j) = d(rng);
  return data;
}

double stddev(const Eigen::VectorXd& v) { return std::sqrt((v.array() - v.mean()).square().mean()); }

// Exhaustive depth-1 split search computing child SSE directly.
gbdt::Split brute_force_split(const Eigen::MatrixXd& x, const Eigen::VectorXd& r, double msl) {
  const auto sse = [](const std::vector<double>& v) {
    double m = 0.0;
    for (const double e : v) m += e;
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (const double e : v) s += (e - m) * (e - m);
    return s;
  };
  std::vector<double> all(r.data(), r.data() + r.size());
  const double parent = sse(all);
  gbdt::Split best;
  for (int f = 0; f < x.cols(); ++f) {
    std::vector<double> values(x.col(f).data(), x.col(f).data() + x.rows());
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    for (std::size_t k = 0; k + 1 < values.size(); ++k) {
      const double th = 0.5 * (values[k] + values[k + 1]);
      std::vector<double> left, right;
      for (int i = 0; i < x.rows(); ++i) (x(i, f) <= th ? left : right).push_back(r[i]);
      if (static_cast<double>(left.size()) < msl || static_cast<double>(right.size()) < msl) continue;
      const double gain = parent - sse(left) - sse(right);
      if (gain > best.gain + 1e-9) best = {f, th, gain};
    }
  }
  return best;
}

}  // namespace

TEST_CASE("boosting fits a single-feature target") {
  auto d = make_data(200, 5, 1);
  d.y = d.x.col(2);
  const auto model = gbdt::fit(d.x, d.y);
  const Eigen::VectorXd pred = gbdt::predict_rows(model, d.x);
  const double rmse = std::sqrt((pred - d.y).array().square().mean());
  CHECK(rmse < 0.05 * stddev(d.y));
  CHECK(static_cast<int>(model.trees.size()) == 100);
  for (const auto& t : model.trees) {
    CHECK(t.depth <= 3);
    CHECK(t.nodes.size() <= 15);
    for (const auto& n : t.nodes) {
      if (n.is_leaf()) {
        CHECK(n.left < 0);
        CHECK(n.right < 0);
      } else {
        CHECK(n.gain >= 0.0);
      }
    }
  }
  const auto imp = gbdt::gain_importance(model);
  CHECK(imp[2] >= 0.9);
  CHECK(std::abs(imp.sum() - 1.0) < 1e-9);
  CHECK((imp.array() >= 0.0).all());
}

TEST_CASE("training loss never increases across rounds") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto d = make_data(150, 4, 40 + seed);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 0.3);
    for (int i = 0; i < d.x.rows(); ++i) d.y[i] = std::sin(d.x(i, 0)) + d.x(i, 1) * d.x(i, 3) + noise(rng);
    const auto model = gbdt::fit(d.x, d.y, {60, 3, 0.3, 3});
    for (std::size_t k = 1; k < model.training_mse.size(); ++k) {
      CHECK(model.training_mse[k] <= model.training_mse[k - 1] + 1e-12);
    }
  }
}

TEST_CASE("zero rounds predict the mean") {
  auto d = make_data(30, 2, 2);
  d.y = d.x.col(0) * 3.0 + Eigen::VectorXd::Constant(30, 7.0);
  const auto model = gbdt::fit(d.x, d.y, {0, 3, 0.1, 5});
  CHECK(model.trees.empty());
  CHECK(gbdt::predict(model, Eigen::VectorXd(d.x.row(4).transpose())) == doctest::Approx(d.y.mean()));
  CHECK_THROWS_AS(gbdt::gain_importance(model), Error);
}

TEST_CASE("predict closed form and errors") {
  gbdt::Model model;
  model.base_score = 2.0;
  model.learning_rate = 0.5;
  model.n_features = 3;
  for (const double v : {1.0, -4.0, 10.0}) {
    gbdt::RegressionTree t;
    t.nodes.push_back(gbdt::TreeNode{-1, 0.0, -1, -1, v, 0.0});
    model.trees.push_back(t);
  }
  const Eigen::VectorXd x = Eigen::VectorXd::Zero(3);
  CHECK(gbdt::predict(model, x) == doctest::Approx(2.0 + 0.5 * 7.0));
  CHECK_THROWS_AS(gbdt::predict(model, Eigen::VectorXd::Zero(2)), Error);

  auto d = make_data(100, 3, 3);
  d.y = d.x.col(0).array().exp();
  const auto fitted = gbdt::fit(d.x, d.y);
  auto extreme = make_data(50, 3, 4);
  extreme.x *= 1e6;
  CHECK(gbdt::predict_rows(fitted, extreme.x).allFinite());
}

TEST_CASE("all-constant features cannot be split") {
  Eigen::MatrixXd x = Eigen::MatrixXd::Ones(40, 3);
  Eigen::VectorXd y = Eigen::VectorXd::LinSpaced(40, 0.0, 1.0);
  CHECK_THROWS_AS(gbdt::fit(x, y), Error);
  CHECK_THROWS_AS(gbdt::fit(Eigen::MatrixXd::Random(6, 2), Eigen::VectorXd::Random(6)), Error);
}

TEST_CASE("duplicate rows equal a weighted fit") {
  auto d = make_data(40, 3, 5);
  d.y = d.x.col(1) + 0.5 * d.x.col(0).cwiseAbs();
  Eigen::VectorXd w = Eigen::VectorXd::Ones(40);
  std::vector<int> dup_rows;
  for (int i = 0; i < 40; i += 3) {
    w[i] = 2.0;
    dup_rows.push_back(i);
  }
  Eigen::MatrixXd xd(40 + static_cast<int>(dup_rows.size()), 3);
  Eigen::VectorXd yd(xd.rows());
  xd.topRows(40) = d.x;
  yd.head(40) = d.y;
  for (std::size_t k = 0; k < dup_rows.size(); ++k) {
    xd.row(40 + static_cast<int>(k)) = d.x.row(dup_rows[k]);
    yd[40 + static_cast<int>(k)] = d.y[dup_rows[k]];
  }
  const gbdt::Config cfg{20, 3, 0.2, 4};
  const auto dup = gbdt::fit(xd, yd, cfg);
  const auto weighted = gbdt::fit(d.x, d.y, cfg, w);
  CHECK(dup.base_score == doctest::Approx(weighted.base_score).epsilon(1e-12));
  REQUIRE(dup.trees.size() == weighted.trees.size());
  for (std::size_t t = 0; t < dup.trees.size(); ++t) {
    REQUIRE(dup.trees[t].nodes.size() == weighted.trees[t].nodes.size());
    for (std::size_t n = 0; n < dup.trees[t].nodes.size(); ++n) {
      const auto& a = dup.trees[t].nodes[n];
      const auto& b = weighted.trees[t].nodes[n];
      CHECK(a.feature == b.feature);
      CHECK(a.threshold == b.threshold);
      CHECK(a.value == doctest::Approx(b.value).epsilon(1e-9));
      CHECK(a.gain == doctest::Approx(b.gain).epsilon(1e-9));
    }
  }
}

TEST_CASE("depth-1 split matches brute force") {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<int> rows(10, 50), cols(1, 5);
  for (int trial = 0; trial < 200; ++trial) {
    auto d = make_data(rows(rng), cols(rng), 1000 + static_cast<std::uint64_t>(trial));
    std::normal_distribution<double> noise(0.0, 1.0);
    for (int i = 0; i < d.x.rows(); ++i) d.y[i] = d.x(i, 0) * noise(rng) + noise(rng);
    const double msl = 1 + trial % 4;
    const auto model = gbdt::fit(d.x, d.y, {1, 1, 1.0, msl});
    const Eigen::VectorXd residual = d.y - Eigen::VectorXd::Constant(d.y.size(), d.y.mean());
    const auto oracle = brute_force_split(d.x, residual, msl);
    const auto& root = model.trees[0].nodes[0];
    if (oracle.feature < 0) {
      CHECK(root.is_leaf());
      continue;
    }
    REQUIRE_FALSE(root.is_leaf());
    CHECK(root.feature == oracle.feature);
    CHECK(root.threshold == doctest::Approx(oracle.threshold));
    CHECK(root.gain == doctest::Approx(oracle.gain).epsilon(1e-9));
  }
}

TEST_CASE("importance is invariant to a monotone transform of one feature") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto d = make_data(60, 3, 300 + seed);
    d.y = d.x.col(0) + 0.5 * d.x.col(1).array().square().matrix() - d.x.col(2);
    const gbdt::Config cfg{10, 2, 0.5, 3};
    const auto base = gbdt::fit(d.x, d.y, cfg);
    Eigen::MatrixXd xt = d.x;
    xt.col(1) = (d.x.col(1).array() * 3.0).exp();
    const auto transformed = gbdt::fit(xt, d.y, cfg);
    CHECK((gbdt::gain_importance(base) - gbdt::gain_importance(transformed)).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("symmetric target gives balanced importance") {
  double total_gap = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto d = make_data(300, 2, 500 + seed);
    d.y = d.x.col(0) + d.x.col(1);
    const auto imp = gbdt::gain_importance(gbdt::fit(d.x, d.y));
    total_gap += std::abs(imp[0] - imp[1]);
  }
  CHECK(total_gap / 10.0 < 0.15);
}

TEST_CASE("model dump is JSON") {
  auto d = make_data(30, 2, 9);
  d.y = d.x.col(0);
  const auto text = gbdt::dump_json(gbdt::fit(d.x, d.y, {2, 2, 0.1, 2}));
  CHECK(text.find("\"trees\"") != std::string::npos);
}
