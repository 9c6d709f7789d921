#include <doctest.h>

#include <random>
#include <set>

#include "cdua/errors.hpp"
#include "cdua/featureng.hpp"
#include "test_util.hpp"

using namespace cdua;
using namespace cdua::featureng;

namespace {

std::size_t index_of(const std::string& name) {
  const auto& names = feature_names();
  return static_cast<std::size_t>(std::find(names.begin(), names.end(), name) - names.begin());
}

// Rows whose features are independent noise, capacity a declining trend.
std::vector<WeeklyFeatureRow> noise_rows(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<WeeklyFeatureRow> rows(n);
  for (std::size_t i = 0; i < n; ++i) {
    rows[i].vehicle_id = "v" + std::to_string(i % 5);
    rows[i].week = static_cast<int>(i % 97);
    rows[i].capacity = 100.0 + 3.0 * noise(rng);
    for (auto& f : rows[i].features) f = noise(rng);
  }
  return rows;
}

}  // namespace

TEST_CASE("feature catalog") {
  CHECK(feature_names().size() == 27);
  CHECK(candidate_names().size() == 28);
  CHECK(candidate_names().front() == "week");
  std::set<std::string> unique(feature_names().begin(), feature_names().end());
  CHECK(unique.size() == 27);
  CHECK(reference_feature_set().size() == 9);
  for (const auto& name : reference_feature_set()) CHECK(is_candidate(name));
}

TEST_CASE("compute_weekly_features") {
  auto seg = testutil::make_segment(100, -40, 20, 60);
  const auto row = compute_weekly_features({&seg});
  REQUIRE(row.has_value());
  CHECK(row->features[index_of("pack_voltage_mean")] == doctest::Approx(350.0));
  CHECK(row->features[index_of("pack_voltage_sum")] == doctest::Approx(35000.0));
  CHECK(row->features[index_of("pack_voltage_std")] == doctest::Approx(0.0));
  CHECK(row->features[index_of("cell_voltage_diff_mean")] == doctest::Approx(0.05));
  CHECK(row->features[index_of("temp_diff_mean")] == doctest::Approx(2.0));

  // signal {1,2,3}: mean 2, sum 6, population std sqrt(2/3)
  auto tiny = testutil::make_segment(3, -1, 20, 60);
  tiny.records[0].pack_voltage = 1;
  tiny.records[1].pack_voltage = 2;
  tiny.records[2].pack_voltage = 3;
  const auto t = compute_weekly_features({&tiny});
  CHECK(t->features[index_of("pack_voltage_mean")] == doctest::Approx(2.0));
  CHECK(t->features[index_of("pack_voltage_sum")] == doctest::Approx(6.0));
  CHECK(t->features[index_of("pack_voltage_std")] == doctest::Approx(0.816496580927726));

  CHECK_FALSE(compute_weekly_features({}).has_value());
}

TEST_CASE("compute_weekly_features aggregates over the union of segments") {
  auto a = testutil::make_segment(120, -40, 20, 60);
  auto b = testutil::make_segment(130, -30, 30, 80, 100000);
  for (std::size_t i = 0; i < b.records.size(); ++i) b.records[i].max_temp = 31.0 + 0.01 * static_cast<double>(i);
  ingest::ChargingSegment joined = a;
  joined.records.insert(joined.records.end(), b.records.begin(), b.records.end());
  const auto two = compute_weekly_features({&a, &b});
  const auto one = compute_weekly_features({&joined});
  for (std::size_t k = 0; k < kFeatureCount; ++k) {
    CHECK(two->features[k] == doctest::Approx(one->features[k]).epsilon(1e-12));
    if (k % 3 == 2) CHECK(two->features[k] >= 0.0);
  }
}

TEST_CASE("pearson_corr") {
  Eigen::VectorXd x(3), up(3), down(3);
  x << 1, 2, 3;
  up << 2, 4, 6;
  down << 3, 2, 1;
  CHECK(pearson_corr(x, up) == doctest::Approx(1.0));
  CHECK(pearson_corr(x, down) == doctest::Approx(-1.0));
  Eigen::VectorXd a(4), b(4);
  a << 1, 2, 3, 4;
  b << 1, 3, 2, 4;
  CHECK(std::abs(pearson_corr(a, b) - 0.8) < 1e-12);

  CHECK_THROWS_AS(pearson_corr(Eigen::VectorXd::Constant(4, 2.0), b), Error);
  CHECK_THROWS_AS(pearson_corr(x, b), Error);
}

TEST_CASE("pearson is equivariant to affine maps") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    Eigen::VectorXd x(50), z(50);
    for (int i = 0; i < 50; ++i) {
      x[i] = n(rng);
      z[i] = 0.5 * x[i] + n(rng);
    }
    const double a = n(rng) * 10.0, b = n(rng) * 100.0;
    const Eigen::VectorXd y = (a * x.array() + b).matrix();
    const double rho = pearson_corr(x, z);
    CHECK(std::abs(pearson_corr(y, z) - (a > 0 ? rho : -rho)) < 1e-12);
    CHECK(std::abs(rho) <= 1.0 + 1e-12);
  }
}

TEST_CASE("select_by_pearson") {
  auto rows = noise_rows(2000, 1);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> tiny(0.0, 1e-3);
  for (auto& r : rows) r.features[index_of("soc_sum")] = r.capacity + tiny(rng);
  const auto sel = select_by_pearson(rows, 0.6);
  CHECK(sel == std::vector<std::string>{"soc_sum"});

  // Raising the threshold never adds features.
  for (auto& r : rows) r.features[index_of("min_temp_mean")] = r.capacity + 2.0 * tiny(rng) * 1e3;
  std::size_t previous = candidate_names().size() + 1;
  for (double th = 0.0; th <= 1.0; th += 0.05) {
    const auto s = select_by_pearson(rows, th);
    CHECK(s.size() <= previous);
    previous = s.size();
  }
}

TEST_CASE("pure-noise features are excluded at n=2000") {
  int included = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    included += static_cast<int>(select_by_pearson(noise_rows(2000, 100 + seed), 0.6).size());
  }
  CHECK(included == 0);
}

TEST_CASE("select_by_importance finds the informative feature") {
  auto rows = noise_rows(400, 4);
  for (auto& r : rows) r.capacity = 90.0 + 5.0 * std::tanh(r.features[index_of("current_std")]);
  const auto scores = importance_scores(rows);
  CHECK(scores.at("current_std") >= 0.9);
  const auto sel = select_by_importance(rows, 0.01);
  CHECK(std::find(sel.begin(), sel.end(), "current_std") != sel.end());

  auto constant = noise_rows(50, 5);
  for (auto& r : constant) {
    r.week = 1;
    r.features.fill(1.0);
  }
  CHECK_THROWS_AS(select_by_importance(constant, 0.01), Error);
}

TEST_CASE("merge_feature_sets") {
  const auto m = merge_feature_sets({"week", "a"}, {"week", "b"});
  CHECK(m.f3 == std::vector<std::string>{"week", "a", "b"});
  const auto sub = merge_feature_sets({"week", "a", "b"}, {"b", "week"});
  CHECK(sub.f3 == sub.f1);

  const std::vector<std::string> f1 = {"week", "min_cell_voltage_mean", "pack_voltage_mean", "soc_sum",
                                       "pack_voltage_sum", "min_cell_voltage_sum"};
  const std::vector<std::string> f2 = {"week", "current_std", "max_cell_voltage_sum", "cell_voltage_diff_mean"};
  const auto reference = merge_feature_sets(f1, f2);
  CHECK(reference.f3.size() == 9);
  for (const auto& n : f1) CHECK(std::find(reference.f3.begin(), reference.f3.end(), n) != reference.f3.end());
  for (const auto& n : f2) CHECK(std::find(reference.f3.begin(), reference.f3.end(), n) != reference.f3.end());
  CHECK(std::set<std::string>(reference.f3.begin(), reference.f3.end()) ==
        std::set<std::string>(reference_feature_set().begin(), reference_feature_set().end()));
}

TEST_CASE("select_features report") {
  auto rows = noise_rows(300, 8);
  for (auto& r : rows) r.features[index_of("pack_voltage_mean")] = r.capacity * 0.1;
  const auto sel = select_features(rows);
  CHECK(std::find(sel.f1.begin(), sel.f1.end(), "pack_voltage_mean") != sel.f1.end());
  CHECK(sel.f3.size() <= sel.f1.size() + sel.f2.size());
  CHECK(sel.scores.size() == candidate_names().size());
  const auto json = selection_to_json(sel);
  CHECK(json.find("\"f3\"") != std::string::npos);
}

TEST_CASE("normalizer") {
  std::vector<WeeklyFeatureRow> rows(2);
  rows[0].vehicle_id = "a";
  rows[1].vehicle_id = "b";
  rows[0].features[index_of("soc_sum")] = 2.0;
  rows[1].features[index_of("soc_sum")] = 4.0;
  rows[0].capacity = 90.0;
  rows[1].capacity = 100.0;
  rows[0].week = 0;
  rows[1].week = 10;
  const auto norm = fit_normalizer(rows, {"soc_sum", "week", "current_mean"});
  REQUIRE(norm.warnings.size() == 1);  // current_mean is constant
  WeeklyFeatureRow probe = rows[0];
  probe.features[index_of("soc_sum")] = 3.0;
  probe.week = 5;
  const auto v = norm.apply_features(probe);
  CHECK(v[0] == doctest::Approx(0.5));
  CHECK(v[1] == doctest::Approx(0.5));
  CHECK(v[2] == 0.5);
  CHECK(norm.apply_capacity(95.0) == doctest::Approx(0.5));

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(80.0, 110.0);
  for (int i = 0; i < 100; ++i) {
    const double c = u(rng);
    CHECK(std::abs(norm.invert_capacity(norm.apply_capacity(c)) - c) < 1e-12);
    const double s = 2.0 + 2.0 * (u(rng) - 80.0) / 30.0;
    probe.features[index_of("soc_sum")] = s;
    CHECK(std::abs(norm.invert_feature(0, norm.apply_features(probe)[0]) - s) < 1e-12);
  }

  const auto back = normalizer_from_json(normalizer_to_json(norm));
  CHECK(back.features == norm.features);
  CHECK(back.capacity_min == norm.capacity_min);
  CHECK(back.feature_max == norm.feature_max);
}

TEST_CASE("fold guard blocks held-out vehicles") {
  auto rows = noise_rows(20, 3);
  const FoldGuard guard({"v2"});
  try {
    fit_normalizer(rows, {"soc_sum"}, guard);
    FAIL("expected hygiene violation");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::validation);
  }
  std::erase_if(rows, [](const auto& r) { return r.vehicle_id == "v2"; });
  CHECK_NOTHROW(fit_normalizer(rows, {"soc_sum"}, guard));
}

TEST_CASE("feature table CSV round trip") {
  const auto rows = noise_rows(10, 12);
  testutil::TempDir dir("ft");
  write_feature_table(dir.file("f.csv"), rows);
  const auto back = read_feature_table(dir.file("f.csv"));
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].vehicle_id == rows[i].vehicle_id);
    CHECK(back[i].week == rows[i].week);
    CHECK(back[i].capacity == rows[i].capacity);
    CHECK(back[i].features == rows[i].features);
  }
  testutil::write_text(dir.file("bad.csv"), "vehicle_id,week\nv,1\n");
  CHECK_THROWS_AS(read_feature_table(dir.file("bad.csv")), Error);
}
