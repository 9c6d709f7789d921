#include "cdua/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "cdua/csv.hpp"
#include "cdua/errors.hpp"

namespace cdua::ingest {

const std::vector<std::string>& log_columns() {
  static const std::vector<std::string> columns = {
      "vehicle_id", "timestamp", "current_a", "pack_voltage_v", "soc_pct",
      "max_cell_v", "min_cell_v", "max_temp_c", "min_temp_c"};
  return columns;
}

ParseResult parse_charging_log(const std::string& path) {
  const auto table = csv::read_file(path);
  const auto& columns = log_columns();
  std::vector<int> index;
  for (const auto& name : columns) {
    const int i = table.column(name);
    if (i < 0) fail(ErrorKind::schema, path + ": missing column '" + name + "'");
    index.push_back(i);
  }
  if (table.header.size() != columns.size()) {
    fail(ErrorKind::schema, path + ": expected exactly " + std::to_string(columns.size()) +
                                " columns, found " + std::to_string(table.header.size()));
  }

  ParseResult result;
  result.records.reserve(table.rows.size());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const auto reject = [&](const std::string& why) {
      ++result.skipped;
      result.row_errors.push_back("row " + std::to_string(r + 2) + ": " + why);
    };
    if (row.size() != columns.size()) {
      reject("field count");
      continue;
    }
    ChargingRecord rec;
    rec.vehicle_id = row[index[0]];
    long long ts = 0;
    if (rec.vehicle_id.empty()) {
      reject("empty vehicle_id");
      continue;
    }
    if (!csv::parse_int64(row[index[1]], ts)) {
      reject("unparseable timestamp");
      continue;
    }
    rec.timestamp = ts;
    double* targets[] = {&rec.current,          &rec.pack_voltage,     &rec.soc,
                         &rec.max_cell_voltage, &rec.min_cell_voltage, &rec.max_temp,
                         &rec.min_temp};
    bool ok = true;
    for (std::size_t k = 0; k < 7; ++k) {
      if (!csv::parse_double(row[index[k + 2]], *targets[k])) {
        reject("unparseable " + columns[k + 2]);
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    if (rec.soc < 0.0 || rec.soc > 100.0) {
      reject("soc outside [0,100]");
      continue;
    }
    if (rec.min_cell_voltage > rec.max_cell_voltage || rec.min_temp > rec.max_temp) {
      reject("min exceeds max");
      continue;
    }
    result.records.push_back(std::move(rec));
  }
  return result;
}

namespace {

double median_gap(const std::vector<ChargingRecord>& recs, double fallback) {
  if (recs.size() < 2) return fallback;
  std::vector<double> gaps;
  gaps.reserve(recs.size() - 1);
  for (std::size_t i = 1; i < recs.size(); ++i) {
    gaps.push_back(static_cast<double>(recs[i].timestamp - recs[i - 1].timestamp));
  }
  auto mid = gaps.begin() + static_cast<std::ptrdiff_t>(gaps.size() / 2);
  std::nth_element(gaps.begin(), mid, gaps.end());
  return *mid > 0.0 ? *mid : fallback;
}

ChargingSegment close_segment(std::vector<ChargingRecord>&& recs, const SegmentRules& rules) {
  ChargingSegment seg;
  seg.vehicle_id = recs.front().vehicle_id;
  seg.start_time = recs.front().timestamp;
  seg.end_time = recs.back().timestamp;
  seg.sample_interval = median_gap(recs, rules.nominal_interval_s);
  seg.records = std::move(recs);
  return seg;
}

}  // namespace

std::vector<ChargingSegment> split_sessions(const std::vector<ChargingRecord>& records,
                                            const SegmentRules& rules) {
  std::vector<ChargingSegment> segments;
  if (records.empty()) return segments;
  std::vector<ChargingRecord> current{records.front()};
  for (std::size_t i = 1; i < records.size(); ++i) {
    const auto& prev = records[i - 1];
    const auto& rec = records[i];
    if (rec.vehicle_id != prev.vehicle_id) {
      fail(ErrorKind::ordering, "split_sessions expects a single vehicle stream");
    }
    if (rec.timestamp < prev.timestamp) {
      fail(ErrorKind::ordering, "timestamps decrease at record " + std::to_string(i) +
                                    " of vehicle " + rec.vehicle_id);
    }
    if (static_cast<double>(rec.timestamp - prev.timestamp) > rules.max_gap_s) {
      segments.push_back(close_segment(std::move(current), rules));
      current.clear();
    }
    current.push_back(rec);
  }
  segments.push_back(close_segment(std::move(current), rules));
  return segments;
}

std::vector<ChargingSegment> split_fleet_sessions(const std::vector<ChargingRecord>& records,
                                                  const SegmentRules& rules) {
  std::vector<VehicleId> order;
  std::map<VehicleId, std::vector<ChargingRecord>> by_vehicle;
  for (const auto& rec : records) {
    auto [it, inserted] = by_vehicle.try_emplace(rec.vehicle_id);
    if (inserted) order.push_back(rec.vehicle_id);
    it->second.push_back(rec);
  }
  std::vector<ChargingSegment> out;
  for (const auto& id : order) {
    auto segs = split_sessions(by_vehicle[id], rules);
    std::move(segs.begin(), segs.end(), std::back_inserter(out));
  }
  return out;
}

const char* to_string(SegmentVerdict verdict) {
  switch (verdict) {
    case SegmentVerdict::valid: return "valid";
    case SegmentVerdict::too_short: return "too_short";
    case SegmentVerdict::soc_backtrack: return "soc_backtrack";
    case SegmentVerdict::soc_span_too_small: return "soc_span_too_small";
  }
  return "unknown";
}

SegmentValidity validate_segment(const ChargingSegment& seg, const SegmentRules& rules) {
  if (seg.records.size() <= rules.min_points) return {false, SegmentVerdict::too_short};
  double running_max = seg.records.front().soc;
  for (const auto& rec : seg.records) {
    if (rec.soc < running_max - rules.soc_backtrack_tolerance) {
      return {false, SegmentVerdict::soc_backtrack};
    }
    running_max = std::max(running_max, rec.soc);
  }
  const double span = seg.records.back().soc - seg.records.front().soc;
  if (span < rules.min_soc_span) return {false, SegmentVerdict::soc_span_too_small};
  return {true, SegmentVerdict::valid};
}

int week_index(std::int64_t timestamp, std::int64_t fleet_epoch) {
  constexpr std::int64_t week_seconds = 604800;
  const std::int64_t delta = timestamp - fleet_epoch;
  // floor division for timestamps before the epoch
  std::int64_t w = delta / week_seconds;
  if (delta % week_seconds != 0 && delta < 0) --w;
  return static_cast<int>(w);
}

SegmentCapacityEstimate estimate_segment_capacity(const ChargingSegment& seg,
                                                  std::int64_t fleet_epoch) {
  if (seg.records.empty()) fail(ErrorKind::validation, "empty segment");
  const double soc_span = (seg.records.back().soc - seg.records.front().soc) / 100.0;
  if (soc_span == 0.0) {
    fail(ErrorKind::numeric, "zero SOC span in segment of vehicle " + seg.vehicle_id);
  }
  const double dt_hours = seg.sample_interval / 3600.0;
  double charge = 0.0;
  for (const auto& rec : seg.records) charge += rec.current * dt_hours;

  SegmentCapacityEstimate est;
  est.vehicle_id = seg.vehicle_id;
  est.week_index = week_index(seg.start_time, fleet_epoch);
  est.soc_span = soc_span;
  est.capacity = -charge / soc_span;
  est.valid = est.capacity > 0.0 && soc_span > 0.0;
  return est;
}

std::vector<VehicleCapacitySeries> aggregate_weekly(
    const std::vector<SegmentCapacityEstimate>& estimates) {
  std::vector<VehicleId> order;
  std::map<VehicleId, std::map<int, std::vector<double>>> buckets;
  for (const auto& est : estimates) {
    auto [it, inserted] = buckets.try_emplace(est.vehicle_id);
    if (inserted) order.push_back(est.vehicle_id);
    auto& week = it->second[est.week_index];
    if (est.valid) week.push_back(est.capacity);
  }
  std::vector<VehicleCapacitySeries> out;
  for (const auto& id : order) {
    const auto& weeks = buckets[id];
    VehicleCapacitySeries series{id, {}};
    const int last = weeks.rbegin()->first;
    for (int w = 0; w <= last; ++w) {
      WeeklyCapacity wc{w, std::nullopt, 0};
      if (const auto it = weeks.find(w); it != weeks.end() && !it->second.empty()) {
        // Sorted summation keeps the mean independent of segment order.
        auto values = it->second;
        std::sort(values.begin(), values.end());
        double sum = 0.0;
        for (const double v : values) sum += v;
        wc.capacity = sum / static_cast<double>(values.size());
        wc.n_segments = static_cast<int>(values.size());
      }
      series.weeks.push_back(wc);
    }
    out.push_back(std::move(series));
  }
  return out;
}

Eigen::VectorXd median_filter(const Eigen::VectorXd& series, int window) {
  if (window < 1 || window % 2 == 0) {
    fail(ErrorKind::validation, "median window must be odd and >= 1, got " + std::to_string(window));
  }
  const Eigen::Index n = series.size();
  if (window > n) {
    fail(ErrorKind::validation, "median window " + std::to_string(window) +
                                    " exceeds series length " + std::to_string(n));
  }
  const int half = window / 2;
  Eigen::VectorXd out(n);
  std::vector<double> buf(static_cast<std::size_t>(window));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int k = -half; k <= half; ++k) {
      const Eigen::Index j = std::clamp<Eigen::Index>(i + k, 0, n - 1);
      buf[static_cast<std::size_t>(k + half)] = series[j];
    }
    auto mid = buf.begin() + half;
    std::nth_element(buf.begin(), mid, buf.end());
    out[i] = *mid;
  }
  return out;
}

void smooth_series(VehicleCapacitySeries& series, int window) {
  std::vector<std::size_t> observed;
  for (std::size_t i = 0; i < series.weeks.size(); ++i) {
    if (series.weeks[i].capacity) observed.push_back(i);
  }
  if (observed.empty()) return;
  int w = std::min<int>(window, static_cast<int>(observed.size()));
  if (w % 2 == 0) --w;
  if (w <= 1) return;
  Eigen::VectorXd values(static_cast<Eigen::Index>(observed.size()));
  for (std::size_t i = 0; i < observed.size(); ++i) {
    values[static_cast<Eigen::Index>(i)] = *series.weeks[observed[i]].capacity;
  }
  const Eigen::VectorXd smoothed = median_filter(values, w);
  for (std::size_t i = 0; i < observed.size(); ++i) {
    series.weeks[observed[i]].capacity = smoothed[static_cast<Eigen::Index>(i)];
  }
}

void write_weekly_labels(const std::string& path, const std::vector<VehicleCapacitySeries>& series) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path);
  csv::write_row(out, {"vehicle_id", "week", "capacity_ah", "n_segments"});
  for (const auto& s : series) {
    for (const auto& w : s.weeks) {
      if (!w.capacity) continue;
      csv::write_row(out, {s.vehicle_id, std::to_string(w.week), csv::format_double(*w.capacity),
                           std::to_string(w.n_segments)});
    }
  }
}

}  // namespace cdua::ingest
