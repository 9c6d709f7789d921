#include "cdua/synthfleet.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <random>
#include <thread>

#include "cdua/csv.hpp"
#include "cdua/errors.hpp"
#include "cdua/seeding.hpp"

namespace cdua::synthfleet {

namespace {

using Rng = std::mt19937_64;
constexpr std::int64_t kWeek = 7 * 24 * 3600;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double normal(Rng& rng, double sd) {
  if (sd <= 0.0) return 0.0;
  return std::normal_distribution<double>(0.0, sd)(rng);
}

// cell open-circuit voltage, V, for SOC in percent
double ocv(double soc) {
  return 3.25 + 0.85 * soc / 100.0 + 0.04 * std::tanh((soc - 50.0) / 15.0);
}

std::string vehicle_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "V%02d", i + 1);
  return buf;
}

}  // namespace

void DegradationProfile::validate() const {
  if (weeks < 1) fail(ErrorKind::validation, "profile needs at least one week");
  if (!(initial_capacity > 0.0)) fail(ErrorKind::validation, "initial capacity must be positive");
  if (!(noise_std >= 0.0)) fail(ErrorKind::validation, "noise_std must be non-negative");
  if (!(linear_fade >= 0.0) || !(knee_fade >= 0.0)) fail(ErrorKind::validation, "fade rates must be non-negative");
  if (knee_week && (*knee_week < 0 || *knee_week >= weeks)) {
    fail(ErrorKind::validation, "knee week outside the horizon");
  }
  const int last = weeks - 1;
  double end = initial_capacity - linear_fade * last;
  if (knee_week) end -= (knee_fade - linear_fade) * (last - *knee_week);
  if (!(end > 0.0)) fail(ErrorKind::validation, "capacity reaches zero within the horizon");
}

ProfileSeries generate_profile(const DegradationProfile& profile, std::uint64_t seed) {
  profile.validate();
  Rng rng(seed);
  ProfileSeries out;
  out.truth.resize(profile.weeks);
  out.observed.resize(profile.weeks);
  for (int w = 0; w < profile.weeks; ++w) {
    double c = profile.initial_capacity - profile.linear_fade * w;
    if (profile.knee_week && w > *profile.knee_week) c -= (profile.knee_fade - profile.linear_fade) * (w - *profile.knee_week);
    out.truth[w] = c;
    out.observed[w] = c + normal(rng, profile.noise_std);
  }
  return out;
}

ingest::ChargingSegment synthesize_session(const std::string& vehicle_id, double capacity_ah, double reference_capacity,
                                           std::int64_t start_time, const SessionTemplate& tmpl, std::uint64_t seed) {
  if (!(capacity_ah > 0.0) || !(reference_capacity > 0.0)) fail(ErrorKind::validation, "capacities must be positive");
  if (tmpl.stage_c_rates.empty() || tmpl.stage_c_rates.size() != tmpl.stage_fractions.size()) {
    fail(ErrorKind::validation, "stage rates and fractions must be non-empty and of equal length");
  }
  if (!(tmpl.sample_interval_s > 0.0)) fail(ErrorKind::validation, "sample interval must be positive");
  double fraction_sum = 0.0;
  for (std::size_t i = 0; i < tmpl.stage_fractions.size(); ++i) {
    if (!(tmpl.stage_fractions[i] > 0.0) || !(tmpl.stage_c_rates[i] > 0.0)) {
      fail(ErrorKind::validation, "stage rates and fractions must be positive");
    }
    fraction_sum += tmpl.stage_fractions[i];
  }

  Rng rng(seed);
  const double s0 = uniform(rng, tmpl.start_soc_min, tmpl.start_soc_max);
  const double span = uniform(rng, tmpl.span_min, tmpl.span_max);
  if (s0 + span > 100.0) fail(ErrorKind::validation, "session SOC exceeds 100%");
  const double ambient = uniform(rng, 15.0, 25.0);
  const double charge = capacity_ah * span / 100.0;  // Ah
  const double dt_h = tmpl.sample_interval_s / 3600.0;
  const double wear = std::max(0.0, 1.0 - capacity_ah / reference_capacity);

  // stage currents are rescaled so that each stage delivers its exact share
  std::vector<double> currents;
  for (std::size_t i = 0; i < tmpl.stage_c_rates.size(); ++i) {
    const double q = charge * tmpl.stage_fractions[i] / fraction_sum;
    const double nominal = tmpl.stage_c_rates[i] * reference_capacity;
    const auto n = std::max<long>(1, std::lround(q / (nominal * dt_h)));
    const double amps = q / (static_cast<double>(n) * dt_h);
    currents.insert(currents.end(), static_cast<std::size_t>(n), amps);
  }
  currents.push_back(0.0);  // charger off

  ingest::ChargingSegment seg;
  seg.vehicle_id = vehicle_id;
  seg.sample_interval = tmpl.sample_interval_s;
  seg.start_time = start_time;
  seg.records.reserve(currents.size());

  const double resistance = 0.05 * (1.0 + 4.0 * wear);  // V per C-rate per cell
  const double spread = 0.01 + 0.2 * wear;
  const double heating = 6.0 * (1.0 + 3.0 * wear);
  double delivered = 0.0;
  double temp = ambient;
  const auto cells = static_cast<double>(tmpl.cells_in_series);
  for (std::size_t k = 0; k < currents.size(); ++k) {
    const double amps = currents[k];
    const double soc = s0 + 100.0 * delivered / capacity_ah;
    const double crate = amps / reference_capacity;
    const double cell = ocv(soc) + resistance * crate + normal(rng, tmpl.voltage_noise_std);
    const double half = 0.5 * (spread + std::abs(normal(rng, 0.002)));
    temp += (ambient + heating * crate * crate - temp) / 150.0;

    ingest::ChargingRecord r;
    r.vehicle_id = vehicle_id;
    r.timestamp = start_time + static_cast<std::int64_t>(std::llround(tmpl.sample_interval_s * static_cast<double>(k)));
    r.current = -amps + normal(rng, tmpl.current_noise_std);
    r.soc = soc;
    r.pack_voltage = cells * cell;
    r.max_cell_voltage = cell + half;
    r.min_cell_voltage = cell - half;
    r.max_temp = temp + 1.0 + normal(rng, tmpl.temp_noise_std);
    r.min_temp = temp - 1.0 - 2.0 * wear + normal(rng, tmpl.temp_noise_std);
    seg.records.push_back(std::move(r));
    delivered += amps * dt_h;
  }
  seg.end_time = seg.records.back().timestamp;
  return seg;
}

namespace {

struct VehicleOutput {
  std::vector<ingest::ChargingRecord> records;
  std::vector<featureng::WeeklyFeatureRow> weekly;
  std::vector<GroundTruthRow> truth;
  DegradationProfile profile;
};

VehicleOutput generate_vehicle(const FleetConfig& cfg, int index, std::uint64_t seed) {
  const std::string id = vehicle_name(index);
  Rng rng(derive_seed(seed, "vehicle/" + id));

  VehicleOutput out;
  auto& p = out.profile;
  p.weeks = cfg.weeks;
  p.noise_std = cfg.noise_std;
  p.initial_capacity = uniform(rng, cfg.initial_capacity_min, cfg.initial_capacity_max);
  p.linear_fade = uniform(rng, cfg.fade_min, cfg.fade_max);
  if (uniform(rng, 0.0, 1.0) < cfg.knee_probability) {
    const int hi = std::min(cfg.knee_week_max, cfg.weeks - 1);
    const int lo = std::min(cfg.knee_week_min, hi);
    p.knee_week = std::uniform_int_distribution<int>(lo, hi)(rng);
    p.knee_fade = p.linear_fade * cfg.knee_fade_factor;
  } else {
    p.knee_fade = p.linear_fade;
  }
  const auto series = generate_profile(p, rng());

  const int spw = std::max(1, cfg.sessions_per_week);
  std::vector<ingest::ChargingRecord> records;
  for (int w = 0; w < cfg.weeks; ++w) {
    out.truth.push_back({id, w, series.truth[w], series.observed[w]});
    const bool missing = w > 0 && uniform(rng, 0.0, 1.0) < cfg.missing_week_probability;
    const std::uint64_t week_seed = rng();
    if (missing) continue;
    for (int s = 0; s < spw; ++s) {
      const std::int64_t slot = kWeek / spw;
      const std::int64_t jitter =
          (w == 0 && s == 0) ? 0 : static_cast<std::int64_t>(uniform(rng, 0.0, 6.0 * 3600.0));
      const std::int64_t start = cfg.start_time + w * kWeek + s * slot + jitter;
      auto seg = synthesize_session(id, series.observed[w], p.initial_capacity, start, cfg.session,
                                    splitmix64(week_seed + static_cast<std::uint64_t>(s)));
      for (auto& r : seg.records) records.push_back(std::move(r));
    }
  }

  featureng::TableBuildOptions options;
  options.median_window = 1;
  options.rules.nominal_interval_s = cfg.session.sample_interval_s;
  options.rules.max_gap_s = std::max(options.rules.max_gap_s, 1.25 * cfg.session.sample_interval_s);
  out.weekly = featureng::build_weekly_table(records, options);
  if (cfg.keep_records) out.records = std::move(records);
  return out;
}

}  // namespace

FleetData generate_fleet(const FleetConfig& config, std::uint64_t seed) {
  if (config.n_vehicles < 1 || config.weeks < 1) fail(ErrorKind::validation, "fleet needs vehicles and weeks");
  if (config.n_vehicles > 99) fail(ErrorKind::validation, "at most 99 vehicles");
  if (config.missing_week_probability < 0.0 || config.missing_week_probability >= 1.0) {
    fail(ErrorKind::validation, "missing_week_probability must be in [0, 1)");
  }

  std::vector<VehicleOutput> parts(static_cast<std::size_t>(config.n_vehicles));
  const int workers = std::clamp(config.threads, 1, config.n_vehicles);
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (int i = next++; i < config.n_vehicles; i = next++) {
      try {
        parts[static_cast<std::size_t>(i)] = generate_vehicle(config, i, seed);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);

  FleetData data;
  for (auto& part : parts) {
    data.records.insert(data.records.end(), std::make_move_iterator(part.records.begin()),
                        std::make_move_iterator(part.records.end()));
    data.weekly.insert(data.weekly.end(), part.weekly.begin(), part.weekly.end());
    data.truth.insert(data.truth.end(), part.truth.begin(), part.truth.end());
    data.profiles.push_back(part.profile);
  }
  return data;
}

void write_charging_log(const std::string& path, const std::vector<ingest::ChargingRecord>& records) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path);
  csv::write_row(out, ingest::log_columns());
  for (const auto& r : records) {
    csv::write_row(out, {r.vehicle_id, std::to_string(r.timestamp), csv::format_double(r.current),
                         csv::format_double(r.pack_voltage), csv::format_double(r.soc),
                         csv::format_double(r.max_cell_voltage), csv::format_double(r.min_cell_voltage),
                         csv::format_double(r.max_temp), csv::format_double(r.min_temp)});
  }
  if (!out) fail(ErrorKind::io, "write failed: " + path);
}

void write_ground_truth(const std::string& path, const std::vector<GroundTruthRow>& rows) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path);
  csv::write_row(out, {"vehicle_id", "week", "true_capacity_ah", "observed_capacity_ah"});
  for (const auto& r : rows) {
    csv::write_row(out, {r.vehicle_id, std::to_string(r.week), csv::format_double(r.true_capacity),
                         csv::format_double(r.observed_capacity)});
  }
  if (!out) fail(ErrorKind::io, "write failed: " + path);
}

}  // namespace cdua::synthfleet
