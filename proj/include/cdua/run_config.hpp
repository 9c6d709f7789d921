#pragma once

// Run configuration shared by every CLI command: JSON with every default
// spelled out, strict key checking, and conversion into the per-module
// configuration structs.

#include <cstdint>
#include <string>
#include <vector>

#include "cdua/diffusion.hpp"
#include "cdua/evalbench.hpp"
#include "cdua/featureng.hpp"
#include "cdua/ingest.hpp"
#include "cdua/model.hpp"
#include "cdua/synthfleet.hpp"

namespace cdua {

struct RunConfig {
  std::uint64_t seed = 42;
  int threads = 1;

  ingest::SegmentRules rules;
  int median_window = 5;

  synthfleet::FleetConfig synth;
  bool synth_write_logs = true;

  std::string feature_set = "f3";
  featureng::SelectionConfig selection;

  model::CduaConfig model;  // feature_dim is derived from the selected features

  int diffusion_steps = 700;
  double beta_start = 1e-4, beta_end = 2e-2;
  bool scale_betas_with_steps = false;  // multiply both betas by 700 / steps

  diffusion::TrainConfig train;
  diffusion::SamplerConfig sampler;

  std::vector<dg::Index> history_lens = {8, 16, 24, 32};
  int folds = 5;
  int max_folds = 0;
  int stride = 1;
  int max_gap_weeks = 2;
  std::string relative_reference = "initial";
  double rated_capacity = 0.0;
  bool shuffle_labels = false;

  std::vector<std::string> ablation_feature_sets = {"f1", "f2", "f3"};
  std::vector<std::string> ablation_variants = {"backbone", "no_self_attn", "no_cross_attn", "full"};

  /// Throws ErrorKind::validation on out-of-range values.
  void validate() const;

  /// Betas actually used, after the optional step scaling.
  double effective_beta_start() const;
  double effective_beta_end() const;
  diffusion::NoiseSchedule schedule() const;

  evalbench::ExperimentConfig experiment() const;
};

std::string run_config_to_json(const RunConfig& config);

/// Parses a config file body. Keys missing from the file keep their defaults;
/// keys the defaults do not know are a schema error.
RunConfig run_config_from_json(const std::string& text);

RunConfig load_run_config(const std::string& path);

}  // namespace cdua
