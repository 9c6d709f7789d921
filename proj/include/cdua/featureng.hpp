#pragma once

// Weekly feature table, Pearson and boosted-tree feature scoring, feature-set
// assembly, and train-fold min-max normalization.

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cdua/gbdt.hpp"
#include "cdua/ingest.hpp"

namespace cdua::featureng {

inline constexpr std::size_t kBaseSignals = 9;
inline constexpr std::size_t kFeatureCount = 27;

/// The 27 aggregate feature names, signal-major: `<signal>_{mean,sum,std}`.
const std::array<std::string, kFeatureCount>& feature_names();

/// Every candidate for selection: "week" followed by the 27 aggregates.
const std::vector<std::string>& candidate_names();

/// The nine-feature comprehensive set used for the reference experiments.
const std::vector<std::string>& reference_feature_set();

struct WeeklyFeatureRow {
  ingest::VehicleId vehicle_id;
  int week = 0;
  double capacity = 0.0;  // Ah
  std::array<double, kFeatureCount> features{};
};

/// Value of a candidate feature ("week" or one of the 27 aggregates).
double feature_value(const WeeklyFeatureRow& row, const std::string& name);

bool is_candidate(const std::string& name);

/// Mean, sum, and population std of the nine base signals over every record
/// of the given segments. Returns nullopt for an empty week.
std::optional<WeeklyFeatureRow> compute_weekly_features(
    const std::vector<const ingest::ChargingSegment*>& segments);

struct TableBuildOptions {
  ingest::SegmentRules rules;
  int median_window = 5;
};

struct TableBuildStats {
  std::size_t segments = 0;
  std::size_t valid_segments = 0;
  std::map<std::string, std::size_t> rejections;  // verdict -> count
};

/// Runs the ingest chain on a record stream: split, validate, Coulomb-count,
/// aggregate weekly, median-smooth, and compute weekly features. Weeks
/// without valid segments produce no row.
std::vector<WeeklyFeatureRow> build_weekly_table(
    const std::vector<ingest::ChargingRecord>& records, const TableBuildOptions& options,
    TableBuildStats* stats = nullptr,
    std::vector<ingest::VehicleCapacitySeries>* weekly_labels = nullptr);

void write_feature_table(const std::string& path, const std::vector<WeeklyFeatureRow>& rows);
std::vector<WeeklyFeatureRow> read_feature_table(const std::string& path);

/// Pearson correlation. Throws ErrorKind::numeric when either series is
/// constant; ErrorKind::validation on length mismatch or fewer than 2 points.
double pearson_corr(const Eigen::Ref<const Eigen::VectorXd>& x,
                    const Eigen::Ref<const Eigen::VectorXd>& z);

struct FeatureScore {
  double pearson_abs = 0.0;
  double importance = 0.0;
};

/// |rho(feature, capacity)| for each candidate, pooled over all rows.
/// Constant features score 0.
std::map<std::string, double> pearson_scores(const std::vector<WeeklyFeatureRow>& rows);

/// Candidates with |rho| strictly above the threshold, in catalog order.
std::vector<std::string> select_by_pearson(const std::vector<WeeklyFeatureRow>& rows,
                                           double threshold = 0.6);

std::map<std::string, double> importance_scores(const std::vector<WeeklyFeatureRow>& rows,
                                                const gbdt::Config& config = {});

/// Candidates with normalized gain importance strictly above the threshold.
std::vector<std::string> select_by_importance(const std::vector<WeeklyFeatureRow>& rows,
                                              double threshold = 0.01,
                                              const gbdt::Config& config = {});

struct FeatureSelection {
  std::vector<std::string> f1;
  std::vector<std::string> f2;
  std::vector<std::string> f3;
  std::map<std::string, FeatureScore> scores;
};

/// Order-stable deduplicated union: f1 first, then new names from f2.
FeatureSelection merge_feature_sets(const std::vector<std::string>& f1,
                                    const std::vector<std::string>& f2);

struct SelectionConfig {
  double pearson_threshold = 0.6;
  double importance_threshold = 0.01;
  gbdt::Config gbdt;
};

FeatureSelection select_features(const std::vector<WeeklyFeatureRow>& rows,
                                 const SelectionConfig& config = {});

std::string selection_to_json(const FeatureSelection& selection);

/// Vehicles whose rows must never reach fitting code in the current fold.
class FoldGuard {
 public:
  FoldGuard() = default;
  explicit FoldGuard(std::set<ingest::VehicleId> held_out) : held_out_(std::move(held_out)) {}

  /// Throws ErrorKind::validation if any row belongs to a held-out vehicle.
  void check(const std::vector<WeeklyFeatureRow>& rows, const char* stage) const;
  const std::set<ingest::VehicleId>& held_out() const { return held_out_; }

 private:
  std::set<ingest::VehicleId> held_out_;
};

/// Min-max normalizer for the selected features and the capacity target.
struct Normalizer {
  std::vector<std::string> features;
  Eigen::VectorXd feature_min, feature_max;
  double capacity_min = 0.0, capacity_max = 1.0;
  double slack = 1.0;  // normalized features are clipped to [-slack, 1 + slack]
  std::vector<std::string> warnings;

  Eigen::VectorXd apply_features(const WeeklyFeatureRow& row) const;
  double apply_capacity(double capacity_ah) const;
  double invert_capacity(double normalized) const;
  double invert_feature(std::size_t index, double normalized) const;
  double capacity_scale() const;  // Ah per normalized unit
};

Normalizer fit_normalizer(const std::vector<WeeklyFeatureRow>& train_rows,
                          const std::vector<std::string>& features, const FoldGuard& guard = {});

std::string normalizer_to_json(const Normalizer& n);
Normalizer normalizer_from_json(const std::string& text);

}  // namespace cdua::featureng
