#pragma once

// Charging-log ingestion: CSV parsing, session splitting, segment validation,
// Coulomb-counting capacity labels, weekly aggregation, median smoothing.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace cdua::ingest {

using VehicleId = std::string;

struct ChargingRecord {
  VehicleId vehicle_id;
  std::int64_t timestamp = 0;  // epoch seconds
  double current = 0.0;        // A, negative while charging
  double pack_voltage = 0.0;   // V
  double soc = 0.0;            // percent
  double max_cell_voltage = 0.0;
  double min_cell_voltage = 0.0;
  double max_temp = 0.0;
  double min_temp = 0.0;
};

struct ChargingSegment {
  VehicleId vehicle_id;
  std::vector<ChargingRecord> records;
  std::int64_t start_time = 0;
  std::int64_t end_time = 0;
  double sample_interval = 8.0;  // s
};

struct SegmentCapacityEstimate {
  VehicleId vehicle_id;
  int week_index = 0;
  double capacity = 0.0;  // Ah
  double soc_span = 0.0;  // fraction
  bool valid = false;
};

/// Thresholds for session splitting and validation.
struct SegmentRules {
  double max_gap_s = 10.0;             // gaps strictly greater split a session
  std::size_t min_points = 100;        // valid segments need more than this
  double min_soc_span = 5.0;           // SOC points
  double soc_backtrack_tolerance = 0.5;  // SOC points
  double nominal_interval_s = 8.0;
};

/// Column names of the raw charging-log CSV, in file order.
const std::vector<std::string>& log_columns();

struct ParseResult {
  std::vector<ChargingRecord> records;
  std::size_t skipped = 0;
  std::vector<std::string> row_errors;  // one message per skipped row
};

/// Parses a charging log. A missing column is a schema error; malformed rows
/// are skipped and tallied.
ParseResult parse_charging_log(const std::string& path);

/// Splits one vehicle's time-ordered stream whenever the gap exceeds
/// rules.max_gap_s. Throws ErrorKind::ordering on decreasing timestamps or on
/// a stream mixing vehicles.
std::vector<ChargingSegment> split_sessions(const std::vector<ChargingRecord>& records,
                                            const SegmentRules& rules = {});

/// Groups a multi-vehicle stream by vehicle (stable) and splits each.
std::vector<ChargingSegment> split_fleet_sessions(const std::vector<ChargingRecord>& records,
                                                  const SegmentRules& rules = {});

enum class SegmentVerdict { valid, too_short, soc_backtrack, soc_span_too_small };

const char* to_string(SegmentVerdict verdict);

struct SegmentValidity {
  bool valid = false;
  SegmentVerdict verdict = SegmentVerdict::too_short;
};

SegmentValidity validate_segment(const ChargingSegment& seg, const SegmentRules& rules = {});

/// Coulomb counting with a rectangular sum over the fixed sample interval:
/// C = -(sum I_k * dt) / ((SOC_end - SOC_start) / 100), dt in hours.
/// Throws ErrorKind::numeric when the SOC span is zero. The week index is
/// computed from `fleet_epoch`.
SegmentCapacityEstimate estimate_segment_capacity(const ChargingSegment& seg,
                                                  std::int64_t fleet_epoch = 0);

int week_index(std::int64_t timestamp, std::int64_t fleet_epoch);

struct WeeklyCapacity {
  int week = 0;
  std::optional<double> capacity;  // empty for weeks without valid segments
  int n_segments = 0;
};

struct VehicleCapacitySeries {
  VehicleId vehicle_id;
  std::vector<WeeklyCapacity> weeks;  // contiguous from week 0 to the last observed week
};

/// Mean of valid estimates per (vehicle, week). Vehicles appear in order of
/// first occurrence; weeks without estimates are kept as gaps.
std::vector<VehicleCapacitySeries> aggregate_weekly(
    const std::vector<SegmentCapacityEstimate>& estimates);

/// Sliding median with replicate padding. `window` must be odd, at least 1,
/// and no longer than the series.
Eigen::VectorXd median_filter(const Eigen::VectorXd& series, int window);

/// Applies the median filter to the observed weeks of a series, in order,
/// leaving gaps untouched. Series shorter than the window use the largest odd
/// window that fits.
void smooth_series(VehicleCapacitySeries& series, int window);

/// Writes `vehicle_id,week,capacity_ah,n_segments` for observed weeks.
void write_weekly_labels(const std::string& path, const std::vector<VehicleCapacitySeries>& series);

}  // namespace cdua::ingest
