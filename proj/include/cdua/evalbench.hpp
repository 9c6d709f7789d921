#pragma once

// Metrics, fold plans, rolling windows and the cross-validated experiment
// drivers behind the evaluate and ablate commands.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cdua/diffusion.hpp"
#include "cdua/featureng.hpp"
#include "cdua/model.hpp"

namespace cdua::evalbench {

using ingest::VehicleId;

double rmse(const Eigen::VectorXd& y, const Eigen::VectorXd& yhat);
double mae(const Eigen::VectorXd& y, const Eigen::VectorXd& yhat);
/// Mean of upper - lower.
double ci_width(const Eigen::VectorXd& lower, const Eigen::VectorXd& upper);
/// Percent of y inside the closed interval [lower, upper].
double picp(const Eigen::VectorXd& y, const Eigen::VectorXd& lower, const Eigen::VectorXd& upper);
/// 100 * metric / reference.
double relativize(double metric_ah, double reference_ah);

struct FoldPlan {
  int k = 0;
  std::vector<std::vector<VehicleId>> folds;  // test vehicles of each fold
  bool train_equals_test = false;             // k = 1: every vehicle is both train and test

  std::vector<VehicleId> train_ids(int fold) const;
};

/// Sorts ids, shuffles them with `seed` and deals them into k near-equal folds.
FoldPlan make_folds(std::vector<VehicleId> ids, int k, std::uint64_t seed);

struct WindowOptions {
  dg::Index history_len = 8;
  dg::Index horizon = 8;
  int stride = 1;
  int max_gap = 2;             // longer runs of missing weeks drop the window
  bool include_partial = true;  // keep windows whose targets run past the series end
};

/// Sliding windows over one vehicle's weekly rows (any order). Inputs are the
/// normalizer's features plus, when `capacity_channel`, the normalized
/// capacity. Targets are normalized capacity minus the anchor (the last
/// history week) and are masked where the week was not observed.
std::vector<diffusion::SupervisedWindow> make_windows(const std::vector<featureng::WeeklyFeatureRow>& rows,
                                                      const featureng::Normalizer& norm, bool capacity_channel,
                                                      const WindowOptions& options);

/// The most recent history window of one vehicle, with every target week in
/// the future (all masked). Throws when fewer than history_len weeks exist or
/// a long gap falls inside the history.
diffusion::SupervisedWindow latest_window(const std::vector<featureng::WeeklyFeatureRow>& rows,
                                          const featureng::Normalizer& norm, bool capacity_channel,
                                          const WindowOptions& options);

/// Root mean square of all unmasked targets (1 when there are none or all are zero).
double fit_target_scale(const std::vector<diffusion::SupervisedWindow>& windows);
void scale_targets(std::vector<diffusion::SupervisedWindow>& windows, double scale);

enum class FeatureSetKind { f1, f2, f3, reference, custom };
struct FeatureSetSpec {
  FeatureSetKind kind = FeatureSetKind::f3;
  std::vector<std::string> custom;  // names for kind == custom
  std::string label() const;
};
FeatureSetSpec parse_feature_set(const std::string& text);  // f1|f2|f3|reference|custom:PATH

struct ExperimentConfig {
  std::vector<dg::Index> history_lens = {8, 16, 24, 32};
  model::CduaConfig model;  // history_len and feature_dim are set per run
  int diffusion_steps = 700;
  double beta_start = 1e-4, beta_end = 2e-2;
  diffusion::TrainConfig train;
  diffusion::SamplerConfig sampler;
  featureng::SelectionConfig selection;
  FeatureSetSpec features;
  int folds = 5;
  int max_folds = 0;  // evaluate only the first n folds when positive
  int stride = 1;
  int max_gap = 2;
  std::string relative_reference = "initial";  // or "rated"
  double rated_capacity = 0.0;
  bool shuffle_labels = false;  // negative control: permute training capacities
  std::uint64_t seed = 42;
};

struct ForecastPoint {
  std::string variant, feature_set;
  dg::Index horizon = 0;  // history length of the run
  int fold = 0;
  VehicleId vehicle_id;
  int origin_week = 0;  // last history week
  int target_week = 0;
  double truth_ah = 0, mean_ah = 0, std_ah = 0, lower_ah = 0, upper_ah = 0, reference_ah = 0;
  std::vector<double> trajectories_ah;
};

struct MetricsRow {
  std::string variant, feature_set;
  dg::Index horizon = 0;
  int fold = 0;  // -1 for the pooled row over all folds
  double rmse_rel = 0, mae_rel = 0, ci_width_rel = 0, picp = 0;
  std::size_t n_points = 0;
};

struct FoldLog {
  int fold = 0;
  dg::Index horizon = 0;
  std::string variant, feature_set;
  std::vector<VehicleId> test_vehicles;
  std::vector<std::string> features;
  std::size_t train_windows = 0, test_windows = 0;
  dg::Index parameters = 0;
  double target_scale = 1.0;
  std::vector<double> loss_history;
  std::vector<std::string> warnings;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;
  std::vector<ForecastPoint> points;
  std::vector<FoldLog> logs;
  void append(const MetricsReport& other);
};

/// Fleet metrics over forecast points: per-vehicle values relative to each
/// vehicle's reference, combined as a point-count-weighted mean.
MetricsRow aggregate(const std::vector<const ForecastPoint*>& points);

/// Per (fold, horizon) rows plus a pooled row (fold -1) per horizon.
std::vector<MetricsRow> summarize_points(const std::vector<ForecastPoint>& points);

using Progress = std::function<void(const std::string&)>;

/// Cross-validated experiment for one feature set and one variant.
MetricsReport run_experiment(const std::vector<featureng::WeeklyFeatureRow>& table, const ExperimentConfig& config,
                             const Progress& progress = {});

/// The same experiment for several feature sets (identical seeds and folds).
MetricsReport run_feature_ablation(const std::vector<featureng::WeeklyFeatureRow>& table, ExperimentConfig config,
                                   const std::vector<FeatureSetSpec>& sets, const Progress& progress = {});

/// The same experiment for several variants (identical seeds and folds).
MetricsReport run_model_ablation(const std::vector<featureng::WeeklyFeatureRow>& table, ExperimentConfig config,
                                 const std::vector<model::Variant>& variants, const Progress& progress = {});

/// Resolves the feature list for one fold from training rows only.
std::vector<std::string> resolve_features(const FeatureSetSpec& spec,
                                          const std::vector<featureng::WeeklyFeatureRow>& train_rows,
                                          const featureng::SelectionConfig& selection,
                                          const featureng::FoldGuard& guard);

// Report files (report.cpp)

std::string metrics_to_json(const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> metrics_from_json(const std::string& text);

/// Writes metrics.json, fold_logs.json, trajectories.csv, forecasts/*.csv and
/// plots/*.svg under out_dir. Returns the relative paths written.
std::vector<std::string> emit_report(const MetricsReport& report, const std::string& out_dir);

/// Re-reads trajectories.csv and recomputes every metrics row from the raw
/// trajectory values.
std::vector<MetricsRow> recompute_from_trajectories(const std::string& path, double z = 1.96);

}  // namespace cdua::evalbench
