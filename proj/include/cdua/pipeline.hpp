#pragma once

// One function per CLI command. Each writes its outputs, the effective
// config and a file manifest under `out_dir`, and never touches its inputs.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cdua/featureng.hpp"
#include "cdua/model.hpp"
#include "cdua/run_config.hpp"

namespace cdua::pipeline {

using Log = std::function<void(const std::string&)>;

struct Checkpoint {
  model::CduaConfig model_config;
  featureng::Normalizer normalizer;
  double target_scale = 1.0;
  int diffusion_steps = 700;
  double beta_start = 1e-4, beta_end = 2e-2;
  std::uint64_t seed = 0;
  std::unique_ptr<model::CduaModel<float>> net;
};

/// Writes manifest.json, weights.bin, model.json, normalizer.json and
/// diffusion.json into `dir`.
void save_checkpoint(const Checkpoint& ckpt, const std::string& dir);
Checkpoint load_checkpoint(const std::string& dir);

/// 64-bit FNV-1a of a file's bytes, as 16 hex digits.
std::string file_digest(const std::string& path);

std::vector<std::string> cmd_synth(const RunConfig& config, const std::string& out_dir, const Log& log = {});
std::vector<std::string> cmd_ingest(const std::string& raw_csv, const RunConfig& config, const std::string& out_dir,
                                    const Log& log = {});
std::vector<std::string> cmd_features(const std::string& weekly_csv, const RunConfig& config,
                                      const std::string& out_dir, const Log& log = {});
std::vector<std::string> cmd_train(const std::string& features_csv, const RunConfig& config,
                                   const std::string& out_dir, const Log& log = {});
std::vector<std::string> cmd_forecast(const std::string& checkpoint_dir, const std::string& history_csv,
                                      const RunConfig& config, const std::string& out_dir, const Log& log = {});
std::vector<std::string> cmd_evaluate(const std::string& features_csv, const RunConfig& config,
                                      const std::string& out_dir, const Log& log = {});
/// mode is "features" or "model".
std::vector<std::string> cmd_ablate(const std::string& features_csv, const RunConfig& config, const std::string& mode,
                                    const std::string& out_dir, const Log& log = {});

}  // namespace cdua::pipeline
