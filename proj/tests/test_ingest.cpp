#include <doctest.h>

#include <algorithm>
#include <random>

#include "cdua/errors.hpp"
#include "cdua/ingest.hpp"
#include "test_util.hpp"

using namespace cdua;
using namespace cdua::ingest;

namespace {

const char* kHeader = "vehicle_id,timestamp,current_a,pack_voltage_v,soc_pct,max_cell_v,min_cell_v,max_temp_c,min_temp_c\n";

std::vector<ChargingRecord> stream_with_gaps(const std::vector<std::int64_t>& gaps) {
  std::vector<ChargingRecord> out;
  std::int64_t t = 1000;
  ChargingRecord r;
  r.vehicle_id = "v";
  r.timestamp = t;
  out.push_back(r);
  for (const auto g : gaps) {
    t += g;
    r.timestamp = t;
    out.push_back(r);
  }
  return out;
}

// Naive oracle: full sort of each replicate-padded window.
Eigen::VectorXd naive_median(const Eigen::VectorXd& x, int w) {
  const int n = static_cast<int>(x.size());
  Eigen::VectorXd out(n);
  for (int i = 0; i < n; ++i) {
    std::vector<double> win;
    for (int k = -w / 2; k <= w / 2; ++k) win.push_back(x[std::clamp(i + k, 0, n - 1)]);
    std::sort(win.begin(), win.end());
    out[i] = win[static_cast<std::size_t>(w / 2)];
  }
  return out;
}

}  // namespace

TEST_CASE("parse_charging_log reads well-formed rows") {
  testutil::TempDir dir("parse");
  testutil::write_text(dir.file("log.csv"), std::string(kHeader) +
                                                "v1,100,-50,350.1,20,3.9,3.8,30,28\n"
                                                "v1,108,-50,350.2,20.1,3.9,3.8,30,28\n"
                                                "v1,116,-50,350.3,20.2,3.9,3.8,30,28\n");
  const auto res = parse_charging_log(dir.file("log.csv"));
  CHECK(res.records.size() == 3);
  CHECK(res.skipped == 0);
  CHECK(res.records[1].timestamp == 108);
  CHECK(res.records[2].soc == doctest::Approx(20.2));
}

TEST_CASE("parse_charging_log tallies a corrupt SOC field") {
  testutil::TempDir dir("parse");
  testutil::write_text(dir.file("log.csv"), std::string(kHeader) +
                                                "v1,100,-50,350.1,20,3.9,3.8,30,28\n"
                                                "v1,108,-50,350.2,abc,3.9,3.8,30,28\n"
                                                "v1,116,-50,350.3,20.2,3.9,3.8,30,28\n");
  const auto res = parse_charging_log(dir.file("log.csv"));
  CHECK(res.records.size() == 2);
  CHECK(res.skipped == 1);
  CHECK(res.row_errors.size() == 1);
}

TEST_CASE("parse_charging_log edge cases") {
  testutil::TempDir dir("parse");
  testutil::write_text(dir.file("empty.csv"), kHeader);
  const auto empty = parse_charging_log(dir.file("empty.csv"));
  CHECK(empty.records.empty());
  CHECK(empty.skipped == 0);

  testutil::write_text(dir.file("nosoc.csv"),
                       "vehicle_id,timestamp,current_a,pack_voltage_v,max_cell_v,min_cell_v,max_temp_c,min_temp_c\n");
  try {
    parse_charging_log(dir.file("nosoc.csv"));
    FAIL("expected schema error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::schema);
  }

  testutil::write_text(dir.file("badts.csv"), std::string(kHeader) + "v1,12.5x,-50,350,20,3.9,3.8,30,28\n");
  const auto badts = parse_charging_log(dir.file("badts.csv"));
  CHECK(badts.records.empty());
  CHECK(badts.skipped == 1);

  CHECK_THROWS_AS(parse_charging_log(dir.file("missing.csv")), Error);
}

TEST_CASE("split_sessions applies the strictly-greater gap rule") {
  CHECK(split_sessions(stream_with_gaps(std::vector<std::int64_t>(200, 8))).size() == 1);

  auto gaps = std::vector<std::int64_t>(100, 8);
  gaps[50] = 3600;
  const auto two = split_sessions(stream_with_gaps(gaps));
  REQUIRE(two.size() == 2);
  CHECK(two[0].records.size() == 51);
  CHECK(two[1].records.size() == 50);
  CHECK(two[0].sample_interval == 8.0);

  CHECK(split_sessions(stream_with_gaps(std::vector<std::int64_t>(30, 10))).size() == 1);
  CHECK(split_sessions(stream_with_gaps(std::vector<std::int64_t>(3, 11))).size() == 4);
}

TEST_CASE("split_sessions rejects unsorted input") {
  auto recs = stream_with_gaps({8, 8, 8});
  std::swap(recs[1].timestamp, recs[2].timestamp);
  try {
    split_sessions(recs);
    FAIL("expected ordering error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ordering);
  }
}

TEST_CASE("split_sessions partitions the stream") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> gap(0, 14);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::int64_t> gaps(300);
    for (auto& g : gaps) g = gap(rng);
    auto recs = stream_with_gaps(gaps);
    for (std::size_t i = 0; i < recs.size(); ++i) recs[i].soc = static_cast<double>(i % 100);
    const auto segs = split_sessions(recs);
    std::vector<ChargingRecord> joined;
    for (const auto& s : segs) {
      CHECK(s.start_time == s.records.front().timestamp);
      for (std::size_t i = 1; i < s.records.size(); ++i) {
        CHECK(s.records[i].timestamp - s.records[i - 1].timestamp <= 10);
      }
      joined.insert(joined.end(), s.records.begin(), s.records.end());
    }
    REQUIRE(joined.size() == recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
      CHECK(joined[i].timestamp == recs[i].timestamp);
      CHECK(joined[i].soc == recs[i].soc);
    }
  }
}

TEST_CASE("validate_segment") {
  const auto ok = validate_segment(testutil::make_segment(150, -50, 20, 70));
  CHECK(ok.valid);
  CHECK(ok.verdict == SegmentVerdict::valid);

  const auto short_seg = validate_segment(testutil::make_segment(80, -50, 20, 70));
  CHECK_FALSE(short_seg.valid);
  CHECK(short_seg.verdict == SegmentVerdict::too_short);
  CHECK_FALSE(validate_segment(testutil::make_segment(100, -50, 20, 70)).valid);
  CHECK(validate_segment(testutil::make_segment(101, -50, 20, 70)).valid);

  const auto narrow = validate_segment(testutil::make_segment(150, -50, 50, 52));
  CHECK_FALSE(narrow.valid);
  CHECK(narrow.verdict == SegmentVerdict::soc_span_too_small);

  auto reset = testutil::make_segment(150, -50, 20, 70);
  reset.records[80].soc = 10.0;  // BMS reset
  CHECK(validate_segment(reset).verdict == SegmentVerdict::soc_backtrack);

  auto jitter = testutil::make_segment(150, -50, 20, 70);
  jitter.records[80].soc -= 0.4;  // within tolerance
  CHECK(validate_segment(jitter).valid);
}

TEST_CASE("estimate_segment_capacity by Coulomb counting") {
  const auto est = estimate_segment_capacity(testutil::make_segment(450, -50.0, 20, 70));
  CHECK(std::abs(est.capacity - 100.0) < 1e-9);
  CHECK(est.soc_span == doctest::Approx(0.5));
  CHECK(est.valid);

  try {
    estimate_segment_capacity(testutil::make_segment(450, -50.0, 20, 20.0));
    FAIL("expected division guard");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::numeric);
  }

  // -50 A for 1800 s then -25 A for 1800 s: 25 Ah + 12.5 Ah over 37.5 SOC points.
  auto piecewise = testutil::make_segment(450, -50.0, 20, 57.5);
  for (std::size_t i = 225; i < 450; ++i) piecewise.records[i].current = -25.0;
  CHECK(std::abs(estimate_segment_capacity(piecewise).capacity - 100.0) < 1e-9);
}

TEST_CASE("Coulomb counting is exact for constant-current segments") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> cur(-120.0, -5.0), soc0(5.0, 40.0), span(5.0, 55.0);
  std::uniform_int_distribution<int> count(101, 900);
  for (int trial = 0; trial < 200; ++trial) {
    const double i = cur(rng), s0 = soc0(rng), ds = span(rng);
    const int n = count(rng);
    const auto seg = testutil::make_segment(static_cast<std::size_t>(n), i, s0, s0 + ds);
    const double expected = -i * (n * 8.0 / 3600.0) / (((s0 + ds) - s0) / 100.0);
    CHECK(std::abs(estimate_segment_capacity(seg).capacity - expected) < 1e-9);
  }
}

TEST_CASE("week_index anchors at the fleet epoch") {
  CHECK(week_index(0, 0) == 0);
  CHECK(week_index(604799, 0) == 0);
  CHECK(week_index(604800, 0) == 1);
  CHECK(week_index(1000 + 3 * 604800, 1000) == 3);
  CHECK(week_index(-1, 0) == -1);
}

TEST_CASE("aggregate_weekly averages valid estimates and keeps gaps") {
  std::vector<SegmentCapacityEstimate> ests = {
      {"a", 0, 100.0, 0.5, true}, {"a", 0, 102.0, 0.5, true}, {"a", 2, 99.0, 0.5, true},
      {"a", 2, 500.0, 0.5, false}, {"b", 1, 80.0, 0.4, true}};
  const auto series = aggregate_weekly(ests);
  REQUIRE(series.size() == 2);
  CHECK(series[0].vehicle_id == "a");
  REQUIRE(series[0].weeks.size() == 3);
  CHECK(*series[0].weeks[0].capacity == doctest::Approx(101.0));
  CHECK(series[0].weeks[0].n_segments == 2);
  CHECK_FALSE(series[0].weeks[1].capacity.has_value());
  CHECK(*series[0].weeks[2].capacity == 99.0);
  CHECK(series[0].weeks[2].n_segments == 1);
  CHECK_FALSE(series[1].weeks[0].capacity.has_value());
  CHECK(*series[1].weeks[1].capacity == 80.0);
}

TEST_CASE("aggregate_weekly is permutation invariant within a week") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> cap(90.0, 110.0);
  std::vector<SegmentCapacityEstimate> ests;
  for (int w = 0; w < 6; ++w)
    for (int k = 0; k < 7; ++k) ests.push_back({"v", w, cap(rng), 0.5, true});
  const auto reference = aggregate_weekly(ests);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(ests.begin(), ests.end(), rng);
    const auto again = aggregate_weekly(ests);
    for (std::size_t w = 0; w < reference[0].weeks.size(); ++w) {
      CHECK(*again[0].weeks[w].capacity == *reference[0].weeks[w].capacity);
    }
  }
}

TEST_CASE("median_filter basic cases") {
  const Eigen::VectorXd constant = Eigen::VectorXd::Constant(9, 4.25);
  for (const int w : {1, 3, 5, 7, 9}) CHECK(median_filter(constant, w) == constant);

  Eigen::VectorXd x(3);
  x << 1, 9, 2;
  Eigen::VectorXd expected(3);
  expected << 1, 2, 2;
  CHECK(median_filter(x, 3) == expected);

  Eigen::VectorXd ramp = Eigen::VectorXd::LinSpaced(20, 100.0, 90.0);
  Eigen::VectorXd spiked = ramp;
  spiked[9] += 25.0;
  const auto filtered = median_filter(spiked, 5);
  CHECK(filtered == naive_median(spiked, 5));
  CHECK(filtered[9] < 100.0);
  CHECK((filtered - ramp).cwiseAbs().maxCoeff() < 1.0);
  CHECK(filtered[0] == ramp[0]);
  CHECK(filtered[19] == ramp[19]);

  CHECK_THROWS_AS(median_filter(x, 2), Error);
  CHECK_THROWS_AS(median_filter(x, 5), Error);
  CHECK_THROWS_AS(median_filter(x, -1), Error);
}

TEST_CASE("median_filter matches the naive oracle") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_int_distribution<int> len(9, 80);
  for (int trial = 0; trial < 1000; ++trial) {
    Eigen::VectorXd x(len(rng));
    for (auto& v : x) v = std::round(noise(rng) * 4.0) / 4.0;  // include ties
    for (const int w : {3, 5, 7, 9}) {
      const auto got = median_filter(x, w);
      REQUIRE(got == naive_median(x, w));
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        const auto lo = std::max<Eigen::Index>(0, i - w / 2);
        const auto hi = std::min<Eigen::Index>(x.size() - 1, i + w / 2);
        CHECK(got[i] >= x.segment(lo, hi - lo + 1).minCoeff());
        CHECK(got[i] <= x.segment(lo, hi - lo + 1).maxCoeff());
      }
    }
  }
}

TEST_CASE("median_filter is idempotent on monotone sequences with window 3") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> step(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    Eigen::VectorXd x(30);
    double v = 100.0;
    for (auto& e : x) e = (v -= step(rng));
    CHECK(median_filter(x, 3) == x);
    CHECK(median_filter(median_filter(x, 3), 3) == median_filter(x, 3));
  }
}

TEST_CASE("smooth_series skips gaps and write_weekly_labels emits observed weeks") {
  VehicleCapacitySeries s{"v9", {}};
  const double values[] = {100, 99.5, 130, 99, 98.5};
  for (int w = 0; w < 6; ++w) {
    WeeklyCapacity wc{w, std::nullopt, 0};
    if (w != 3) {
      wc.capacity = values[w < 3 ? w : w - 1];
      wc.n_segments = 2;
    }
    s.weeks.push_back(wc);
  }
  smooth_series(s, 3);
  CHECK(*s.weeks[2].capacity == 99.5);
  CHECK_FALSE(s.weeks[3].capacity.has_value());

  testutil::TempDir dir("labels");
  write_weekly_labels(dir.file("w.csv"), {s});
  const auto text = testutil::read_text(dir.file("w.csv"));
  CHECK(text.rfind("vehicle_id,week,capacity_ah,n_segments\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 6);
}
