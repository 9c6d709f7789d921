#include "cdua/featureng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "cdua/csv.hpp"
#include "cdua/errors.hpp"

namespace cdua::featureng {

namespace {

const std::array<std::string, kBaseSignals> kSignals = {
    "current",          "pack_voltage", "soc",      "max_cell_voltage", "min_cell_voltage",
    "cell_voltage_diff", "max_temp",    "min_temp", "temp_diff"};

std::array<double, kBaseSignals> signals_of(const ingest::ChargingRecord& r) {
  return {r.current,
          r.pack_voltage,
          r.soc,
          r.max_cell_voltage,
          r.min_cell_voltage,
          r.max_cell_voltage - r.min_cell_voltage,
          r.max_temp,
          r.min_temp,
          r.max_temp - r.min_temp};
}

int feature_index(const std::string& name) {
  const auto& names = feature_names();
  const auto it = std::find(names.begin(), names.end(), name);
  return it == names.end() ? -1 : static_cast<int>(it - names.begin());
}

}  // namespace

const std::array<std::string, kFeatureCount>& feature_names() {
  static const auto names = [] {
    std::array<std::string, kFeatureCount> out;
    std::size_t k = 0;
    for (const auto& s : kSignals) {
      for (const char* stat : {"_mean", "_sum", "_std"}) out[k++] = s + stat;
    }
    return out;
  }();
  return names;
}

const std::vector<std::string>& candidate_names() {
  static const auto names = [] {
    std::vector<std::string> out{"week"};
    for (const auto& n : feature_names()) out.push_back(n);
    return out;
  }();
  return names;
}

const std::vector<std::string>& reference_feature_set() {
  static const std::vector<std::string> names = {
      "week",           "min_cell_voltage_mean", "pack_voltage_mean",
      "current_std",    "soc_sum",               "pack_voltage_sum",
      "min_cell_voltage_sum", "max_cell_voltage_sum", "cell_voltage_diff_mean"};
  return names;
}

bool is_candidate(const std::string& name) { return name == "week" || feature_index(name) >= 0; }

double feature_value(const WeeklyFeatureRow& row, const std::string& name) {
  if (name == "week") return static_cast<double>(row.week);
  const int i = feature_index(name);
  if (i < 0) fail(ErrorKind::schema, "unknown feature '" + name + "'");
  return row.features[static_cast<std::size_t>(i)];
}

std::optional<WeeklyFeatureRow> compute_weekly_features(
    const std::vector<const ingest::ChargingSegment*>& segments) {
  std::size_t n = 0;
  std::array<double, kBaseSignals> sum{};
  for (const auto* seg : segments) {
    for (const auto& rec : seg->records) {
      const auto s = signals_of(rec);
      for (std::size_t k = 0; k < kBaseSignals; ++k) sum[k] += s[k];
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  std::array<double, kBaseSignals> mean{}, sq{};
  for (std::size_t k = 0; k < kBaseSignals; ++k) mean[k] = sum[k] / static_cast<double>(n);
  for (const auto* seg : segments) {
    for (const auto& rec : seg->records) {
      const auto s = signals_of(rec);
      for (std::size_t k = 0; k < kBaseSignals; ++k) sq[k] += (s[k] - mean[k]) * (s[k] - mean[k]);
    }
  }
  WeeklyFeatureRow row;
  row.vehicle_id = segments.front()->vehicle_id;
  for (std::size_t k = 0; k < kBaseSignals; ++k) {
    row.features[3 * k] = mean[k];
    row.features[3 * k + 1] = sum[k];
    row.features[3 * k + 2] = std::sqrt(sq[k] / static_cast<double>(n));
  }
  return row;
}

std::vector<WeeklyFeatureRow> build_weekly_table(
    const std::vector<ingest::ChargingRecord>& records, const TableBuildOptions& options,
    TableBuildStats* stats, std::vector<ingest::VehicleCapacitySeries>* weekly_labels) {
  const auto segments = ingest::split_fleet_sessions(records, options.rules);

  std::map<ingest::VehicleId, std::int64_t> epoch;
  for (const auto& seg : segments) {
    auto [it, inserted] = epoch.try_emplace(seg.vehicle_id, seg.start_time);
    if (!inserted) it->second = std::min(it->second, seg.start_time);
  }

  TableBuildStats local;
  std::vector<ingest::SegmentCapacityEstimate> estimates;
  std::map<std::pair<ingest::VehicleId, int>, std::vector<const ingest::ChargingSegment*>> by_week;
  for (const auto& seg : segments) {
    ++local.segments;
    const auto validity = ingest::validate_segment(seg, options.rules);
    if (!validity.valid) {
      ++local.rejections[ingest::to_string(validity.verdict)];
      continue;
    }
    auto est = ingest::estimate_segment_capacity(seg, epoch.at(seg.vehicle_id));
    if (!est.valid) {
      ++local.rejections["nonpositive_capacity"];
      continue;
    }
    ++local.valid_segments;
    by_week[{seg.vehicle_id, est.week_index}].push_back(&seg);
    estimates.push_back(std::move(est));
  }

  auto series = ingest::aggregate_weekly(estimates);
  for (auto& s : series) ingest::smooth_series(s, options.median_window);

  std::vector<WeeklyFeatureRow> rows;
  for (const auto& s : series) {
    for (const auto& w : s.weeks) {
      if (!w.capacity) continue;
      auto row = compute_weekly_features(by_week.at({s.vehicle_id, w.week}));
      row->week = w.week;
      row->capacity = *w.capacity;
      rows.push_back(std::move(*row));
    }
  }
  if (stats) *stats = std::move(local);
  if (weekly_labels) *weekly_labels = std::move(series);
  return rows;
}

void write_feature_table(const std::string& path, const std::vector<WeeklyFeatureRow>& rows) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path);
  std::vector<std::string> header{"vehicle_id", "week", "capacity_ah"};
  for (const auto& n : feature_names()) header.push_back(n);
  csv::write_row(out, header);
  for (const auto& row : rows) {
    std::vector<std::string> fields{row.vehicle_id, std::to_string(row.week),
                                    csv::format_double(row.capacity)};
    for (const double v : row.features) fields.push_back(csv::format_double(v));
    csv::write_row(out, fields);
  }
}

std::vector<WeeklyFeatureRow> read_feature_table(const std::string& path) {
  const auto table = csv::read_file(path);
  const int vid = table.column("vehicle_id");
  const int week = table.column("week");
  const int cap = table.column("capacity_ah");
  if (vid < 0 || week < 0 || cap < 0) {
    fail(ErrorKind::schema, path + ": feature table needs vehicle_id, week, capacity_ah");
  }
  std::array<int, kFeatureCount> idx{};
  for (std::size_t k = 0; k < kFeatureCount; ++k) {
    idx[k] = table.column(feature_names()[k]);
    if (idx[k] < 0) fail(ErrorKind::schema, path + ": missing feature column '" + feature_names()[k] + "'");
  }
  std::vector<WeeklyFeatureRow> rows;
  rows.reserve(table.rows.size());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& f = table.rows[r];
    if (f.size() != table.header.size()) {
      fail(ErrorKind::schema, path + ": row " + std::to_string(r + 2) + " has wrong field count");
    }
    WeeklyFeatureRow row;
    row.vehicle_id = f[static_cast<std::size_t>(vid)];
    long long w = 0;
    if (!csv::parse_int64(f[static_cast<std::size_t>(week)], w) ||
        !csv::parse_double(f[static_cast<std::size_t>(cap)], row.capacity)) {
      fail(ErrorKind::schema, path + ": row " + std::to_string(r + 2) + " is malformed");
    }
    row.week = static_cast<int>(w);
    for (std::size_t k = 0; k < kFeatureCount; ++k) {
      if (!csv::parse_double(f[static_cast<std::size_t>(idx[k])], row.features[k])) {
        fail(ErrorKind::schema, path + ": row " + std::to_string(r + 2) + " is malformed");
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

double pearson_corr(const Eigen::Ref<const Eigen::VectorXd>& x,
                    const Eigen::Ref<const Eigen::VectorXd>& z) {
  if (x.size() != z.size() || x.size() < 2) {
    fail(ErrorKind::validation, "pearson_corr needs two series of equal length >= 2");
  }
  const Eigen::ArrayXd dx = x.array() - x.mean();
  const Eigen::ArrayXd dz = z.array() - z.mean();
  const double denom = std::sqrt(dx.square().sum() * dz.square().sum());
  if (!(denom > 0.0)) fail(ErrorKind::numeric, "pearson_corr undefined for a constant series");
  return std::clamp((dx * dz).sum() / denom, -1.0, 1.0);
}

namespace {

Eigen::MatrixXd candidate_matrix(const std::vector<WeeklyFeatureRow>& rows) {
  const auto& names = candidate_names();
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(names.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    x(static_cast<Eigen::Index>(r), 0) = rows[r].week;
    for (std::size_t k = 0; k < kFeatureCount; ++k) {
      x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k + 1)) = rows[r].features[k];
    }
  }
  return x;
}

Eigen::VectorXd capacity_vector(const std::vector<WeeklyFeatureRow>& rows) {
  Eigen::VectorXd z(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) z[static_cast<Eigen::Index>(r)] = rows[r].capacity;
  return z;
}

}  // namespace

std::map<std::string, double> pearson_scores(const std::vector<WeeklyFeatureRow>& rows) {
  if (rows.size() < 2) fail(ErrorKind::validation, "pearson selection needs at least 2 rows");
  const auto x = candidate_matrix(rows);
  const auto z = capacity_vector(rows);
  std::map<std::string, double> out;
  const auto& names = candidate_names();
  for (std::size_t c = 0; c < names.size(); ++c) {
    double score = 0.0;
    try {
      score = std::abs(pearson_corr(x.col(static_cast<Eigen::Index>(c)), z));
    } catch (const Error&) {
      score = 0.0;
    }
    out[names[c]] = score;
  }
  return out;
}

std::vector<std::string> select_by_pearson(const std::vector<WeeklyFeatureRow>& rows,
                                           double threshold) {
  const auto scores = pearson_scores(rows);
  std::vector<std::string> out;
  for (const auto& name : candidate_names()) {
    if (scores.at(name) > threshold) out.push_back(name);
  }
  return out;
}

std::map<std::string, double> importance_scores(const std::vector<WeeklyFeatureRow>& rows,
                                                const gbdt::Config& config) {
  const auto x = candidate_matrix(rows);
  const auto z = capacity_vector(rows);
  auto model = gbdt::fit(x, z, config);
  model.feature_names = candidate_names();
  const auto imp = gbdt::gain_importance(model);
  std::map<std::string, double> out;
  for (std::size_t c = 0; c < candidate_names().size(); ++c) {
    out[candidate_names()[c]] = imp[static_cast<Eigen::Index>(c)];
  }
  return out;
}

std::vector<std::string> select_by_importance(const std::vector<WeeklyFeatureRow>& rows,
                                              double threshold, const gbdt::Config& config) {
  const auto scores = importance_scores(rows, config);
  std::vector<std::string> out;
  for (const auto& name : candidate_names()) {
    if (scores.at(name) > threshold) out.push_back(name);
  }
  return out;
}

FeatureSelection merge_feature_sets(const std::vector<std::string>& f1,
                                    const std::vector<std::string>& f2) {
  FeatureSelection sel;
  sel.f1 = f1;
  sel.f2 = f2;
  for (const auto* set : {&f1, &f2}) {
    for (const auto& name : *set) {
      if (std::find(sel.f3.begin(), sel.f3.end(), name) == sel.f3.end()) sel.f3.push_back(name);
    }
  }
  return sel;
}

FeatureSelection select_features(const std::vector<WeeklyFeatureRow>& rows,
                                 const SelectionConfig& config) {
  const auto pearson = pearson_scores(rows);
  const auto importance = importance_scores(rows, config.gbdt);
  std::vector<std::string> f1, f2;
  for (const auto& name : candidate_names()) {
    if (pearson.at(name) > config.pearson_threshold) f1.push_back(name);
    if (importance.at(name) > config.importance_threshold) f2.push_back(name);
  }
  auto sel = merge_feature_sets(f1, f2);
  for (const auto& name : candidate_names()) sel.scores[name] = {pearson.at(name), importance.at(name)};
  return sel;
}

std::string selection_to_json(const FeatureSelection& selection) {
  nlohmann::json j;
  j["f1"] = selection.f1;
  j["f2"] = selection.f2;
  j["f3"] = selection.f3;
  auto& scores = j["scores"] = nlohmann::json::object();
  for (const auto& name : candidate_names()) {
    const auto it = selection.scores.find(name);
    if (it == selection.scores.end()) continue;
    scores[name] = {{"pearson_abs", it->second.pearson_abs}, {"importance", it->second.importance}};
  }
  return j.dump(2);
}

void FoldGuard::check(const std::vector<WeeklyFeatureRow>& rows, const char* stage) const {
  for (const auto& row : rows) {
    if (held_out_.count(row.vehicle_id)) {
      fail(ErrorKind::validation, std::string("held-out vehicle ") + row.vehicle_id +
                                      " reached " + stage);
    }
  }
}

Eigen::VectorXd Normalizer::apply_features(const WeeklyFeatureRow& row) const {
  Eigen::VectorXd out(static_cast<Eigen::Index>(features.size()));
  for (std::size_t k = 0; k < features.size(); ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    const double range = feature_max[i] - feature_min[i];
    if (!(range > 0.0)) {
      out[i] = 0.5;
      continue;
    }
    const double v = (feature_value(row, features[k]) - feature_min[i]) / range;
    out[i] = std::clamp(v, -slack, 1.0 + slack);
  }
  return out;
}

double Normalizer::capacity_scale() const {
  const double range = capacity_max - capacity_min;
  return range > 0.0 ? range : 1.0;
}

double Normalizer::apply_capacity(double capacity_ah) const {
  if (!(capacity_max - capacity_min > 0.0)) return 0.5 + (capacity_ah - capacity_min);
  return (capacity_ah - capacity_min) / (capacity_max - capacity_min);
}

double Normalizer::invert_capacity(double normalized) const {
  if (!(capacity_max - capacity_min > 0.0)) return normalized - 0.5 + capacity_min;
  return capacity_min + normalized * (capacity_max - capacity_min);
}

double Normalizer::invert_feature(std::size_t index, double normalized) const {
  const auto i = static_cast<Eigen::Index>(index);
  const double range = feature_max[i] - feature_min[i];
  if (!(range > 0.0)) return feature_min[i];
  return feature_min[i] + normalized * range;
}

Normalizer fit_normalizer(const std::vector<WeeklyFeatureRow>& train_rows,
                          const std::vector<std::string>& features, const FoldGuard& guard) {
  guard.check(train_rows, "normalizer fitting");
  if (train_rows.empty()) fail(ErrorKind::validation, "normalizer needs at least one row");
  Normalizer n;
  n.features = features;
  const auto k = static_cast<Eigen::Index>(features.size());
  n.feature_min = Eigen::VectorXd::Constant(k, std::numeric_limits<double>::infinity());
  n.feature_max = Eigen::VectorXd::Constant(k, -std::numeric_limits<double>::infinity());
  n.capacity_min = std::numeric_limits<double>::infinity();
  n.capacity_max = -std::numeric_limits<double>::infinity();
  for (const auto& row : train_rows) {
    for (Eigen::Index i = 0; i < k; ++i) {
      const double v = feature_value(row, features[static_cast<std::size_t>(i)]);
      n.feature_min[i] = std::min(n.feature_min[i], v);
      n.feature_max[i] = std::max(n.feature_max[i], v);
    }
    n.capacity_min = std::min(n.capacity_min, row.capacity);
    n.capacity_max = std::max(n.capacity_max, row.capacity);
  }
  for (Eigen::Index i = 0; i < k; ++i) {
    if (!(n.feature_max[i] > n.feature_min[i])) {
      n.warnings.push_back("feature '" + features[static_cast<std::size_t>(i)] +
                           "' is constant on the training rows; mapped to 0.5");
    }
  }
  if (!(n.capacity_max > n.capacity_min)) {
    n.warnings.push_back("capacity is constant on the training rows");
  }
  return n;
}

std::string normalizer_to_json(const Normalizer& n) {
  nlohmann::json j;
  j["features"] = n.features;
  j["feature_min"] = std::vector<double>(n.feature_min.data(), n.feature_min.data() + n.feature_min.size());
  j["feature_max"] = std::vector<double>(n.feature_max.data(), n.feature_max.data() + n.feature_max.size());
  j["capacity_min"] = n.capacity_min;
  j["capacity_max"] = n.capacity_max;
  j["slack"] = n.slack;
  return j.dump(2);
}

Normalizer normalizer_from_json(const std::string& text) {
  Normalizer n;
  try {
    const auto j = nlohmann::json::parse(text);
    n.features = j.at("features").get<std::vector<std::string>>();
    const auto lo = j.at("feature_min").get<std::vector<double>>();
    const auto hi = j.at("feature_max").get<std::vector<double>>();
    if (lo.size() != n.features.size() || hi.size() != n.features.size()) {
      fail(ErrorKind::schema, "normalizer: feature bounds do not match feature list");
    }
    n.feature_min = Eigen::Map<const Eigen::VectorXd>(lo.data(), static_cast<Eigen::Index>(lo.size()));
    n.feature_max = Eigen::Map<const Eigen::VectorXd>(hi.data(), static_cast<Eigen::Index>(hi.size()));
    n.capacity_min = j.at("capacity_min").get<double>();
    n.capacity_max = j.at("capacity_max").get<double>();
    n.slack = j.at("slack").get<double>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, std::string("normalizer: ") + e.what());
  }
  return n;
}

}  // namespace cdua::featureng
