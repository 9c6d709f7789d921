#pragma once

// Synthetic fleets with known capacity fade: per-vehicle fade profiles,
// constant-current charging sessions whose Coulomb count reproduces the
// capacity, and the weekly feature table built from those sessions.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cdua/featureng.hpp"
#include "cdua/ingest.hpp"

namespace cdua::synthfleet {

struct DegradationProfile {
  double initial_capacity = 150.0;  // Ah
  double linear_fade = 0.04;        // Ah per week
  std::optional<int> knee_week;
  double knee_fade = 0.12;          // Ah per week after the knee
  double noise_std = 0.3;           // Ah, weekly observation noise
  int weeks = 120;

  void validate() const;
};

struct ProfileSeries {
  Eigen::VectorXd truth;     // noiseless capacity per week
  Eigen::VectorXd observed;  // truth plus Gaussian noise
};

/// Piecewise-linear fade with an optional knee plus Gaussian noise.
ProfileSeries generate_profile(const DegradationProfile& profile, std::uint64_t seed);

struct SessionTemplate {
  double start_soc_min = 15.0, start_soc_max = 35.0;  // percent
  double span_min = 45.0, span_max = 65.0;            // SOC points
  std::vector<double> stage_c_rates = {2.0, 1.2, 0.6};  // current per Ah of capacity
  std::vector<double> stage_fractions = {0.5, 0.3, 0.2}; // share of the charge per stage
  double sample_interval_s = 8.0;
  int cells_in_series = 96;
  double current_noise_std = 0.0;  // A, sensor noise applied after the SOC trace is fixed
  double voltage_noise_std = 0.002;  // V per cell
  double temp_noise_std = 0.1;       // degC
};

/// One charging session at `start_time` whose rectangular Coulomb count over
/// its SOC span equals `capacity_ah` before sensor noise.
ingest::ChargingSegment synthesize_session(const std::string& vehicle_id, double capacity_ah, double reference_capacity,
                                           std::int64_t start_time, const SessionTemplate& tmpl, std::uint64_t seed);

struct FleetConfig {
  int n_vehicles = 20;
  int weeks = 120;
  int sessions_per_week = 2;
  double initial_capacity_min = 145.0, initial_capacity_max = 155.0;
  double fade_min = 0.02, fade_max = 0.06;  // Ah per week
  double knee_probability = 0.3;
  double knee_fade_factor = 3.0;
  int knee_week_min = 50, knee_week_max = 100;
  double noise_std = 0.3;
  double missing_week_probability = 0.0;
  std::int64_t start_time = 1672531200;  // 2023-01-01T00:00:00Z
  bool keep_records = true;
  int threads = 1;
  SessionTemplate session;
};

struct GroundTruthRow {
  std::string vehicle_id;
  int week = 0;
  double true_capacity = 0.0;
  double observed_capacity = 0.0;
};

struct FleetData {
  std::vector<ingest::ChargingRecord> records;             // empty unless keep_records
  std::vector<featureng::WeeklyFeatureRow> weekly;          // observed capacity, no smoothing
  std::vector<GroundTruthRow> truth;                        // one row per generated week
  std::vector<DegradationProfile> profiles;
};

FleetData generate_fleet(const FleetConfig& config, std::uint64_t seed);

void write_charging_log(const std::string& path, const std::vector<ingest::ChargingRecord>& records);
void write_ground_truth(const std::string& path, const std::vector<GroundTruthRow>& rows);

}  // namespace cdua::synthfleet
