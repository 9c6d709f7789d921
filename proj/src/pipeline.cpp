#include "cdua/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "cdua/csv.hpp"
#include "cdua/diffgraph/checkpoint.hpp"
#include "cdua/diffusion.hpp"
#include "cdua/errors.hpp"
#include "cdua/evalbench.hpp"
#include "cdua/ingest.hpp"
#include "cdua/seeding.hpp"
#include "cdua/synthfleet.hpp"

namespace cdua::pipeline {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << text;
  if (!out) fail(ErrorKind::io, "write failed: " + path.string());
}

void require_file(const std::string& path) {
  if (!fs::is_regular_file(path)) fail(ErrorKind::io, "input not found: " + path);
}

void make_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) fail(ErrorKind::io, "cannot create output directory " + dir);
}

void say(const Log& log, const std::string& msg) {
  if (log) log(msg);
}

// Effective config plus a manifest listing every produced file with size and digest.
std::vector<std::string> finish(const std::string& command, const RunConfig& config,
                                const std::vector<std::string>& inputs, std::vector<std::string> files,
                                const std::string& out_dir) {
  const fs::path root(out_dir);
  write_text(root / "config.json", run_config_to_json(config));
  files.push_back("config.json");
  std::sort(files.begin(), files.end());
  files.erase(std::unique(files.begin(), files.end()), files.end());

  ordered_json m;
  m["command"] = command;
  m["seed"] = config.seed;
  m["inputs"] = inputs;
  m["files"] = ordered_json::array();
  for (const auto& f : files) {
    const auto path = (root / f).string();
    ordered_json e;
    e["path"] = f;
    e["bytes"] = static_cast<std::uint64_t>(fs::file_size(path));
    e["fnv1a64"] = file_digest(path);
    m["files"].push_back(e);
  }
  write_text(root / "manifest.json", m.dump(2) + "\n");
  files.push_back("manifest.json");
  return files;
}

std::map<std::string, std::vector<featureng::WeeklyFeatureRow>> by_vehicle(
    const std::vector<featureng::WeeklyFeatureRow>& rows) {
  std::map<std::string, std::vector<featureng::WeeklyFeatureRow>> out;
  for (const auto& r : rows) out[r.vehicle_id].push_back(r);
  return out;
}

}  // namespace

std::string file_digest(const std::string& path) {
  const auto bytes = read_text(path);
  std::uint64_t h = 1469598103934665603ULL;
  for (const unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& dir) {
  if (!ckpt.net) fail(ErrorKind::validation, "save_checkpoint: no model");
  make_out_dir(dir);
  dg::save_params(ckpt.net->store, dir);
  const fs::path root(dir);
  write_text(root / "model.json", model::config_to_json(ckpt.model_config) + "\n");
  write_text(root / "normalizer.json", featureng::normalizer_to_json(ckpt.normalizer) + "\n");
  ordered_json d;
  d["steps"] = ckpt.diffusion_steps;
  d["beta_start"] = ckpt.beta_start;
  d["beta_end"] = ckpt.beta_end;
  d["target_scale"] = ckpt.target_scale;
  d["seed"] = ckpt.seed;
  write_text(root / "diffusion.json", d.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& dir) {
  if (!fs::is_directory(dir)) fail(ErrorKind::io, "checkpoint directory not found: " + dir);
  const fs::path root(dir);
  Checkpoint c;
  c.model_config = model::config_from_json(read_text((root / "model.json").string()));
  c.normalizer = featureng::normalizer_from_json(read_text((root / "normalizer.json").string()));
  if (static_cast<dg::Index>(c.normalizer.features.size()) != c.model_config.feature_dim) {
    fail(ErrorKind::schema, "checkpoint normalizer and model disagree on the feature count");
  }
  try {
    const auto d = nlohmann::json::parse(read_text((root / "diffusion.json").string()));
    c.diffusion_steps = d.at("steps").get<int>();
    c.beta_start = d.at("beta_start").get<double>();
    c.beta_end = d.at("beta_end").get<double>();
    c.target_scale = d.at("target_scale").get<double>();
    c.seed = d.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, std::string("diffusion.json: ") + e.what());
  }
  c.net = std::make_unique<model::CduaModel<float>>(c.model_config, 0);
  dg::load_params(c.net->store, dir);
  return c;
}

std::vector<std::string> cmd_synth(const RunConfig& config, const std::string& out_dir, const Log& log) {
  config.validate();
  make_out_dir(out_dir);
  auto fc = config.synth;
  fc.keep_records = config.synth_write_logs;
  fc.threads = config.threads;
  say(log, "generating " + std::to_string(fc.n_vehicles) + " vehicles x " + std::to_string(fc.weeks) + " weeks");
  const auto fleet = synthfleet::generate_fleet(fc, derive_seed(config.seed, "synth"));
  const fs::path root(out_dir);
  std::vector<std::string> files;
  if (config.synth_write_logs) {
    synthfleet::write_charging_log((root / "charging_log.csv").string(), fleet.records);
    files.push_back("charging_log.csv");
  }
  featureng::write_feature_table((root / "weekly_features.csv").string(), fleet.weekly);
  synthfleet::write_ground_truth((root / "ground_truth.csv").string(), fleet.truth);
  files.insert(files.end(), {"weekly_features.csv", "ground_truth.csv"});
  say(log, std::to_string(fleet.records.size()) + " log records, " + std::to_string(fleet.weekly.size()) +
               " weekly rows");
  return finish("synth", config, {}, files, out_dir);
}

std::vector<std::string> cmd_ingest(const std::string& raw_csv, const RunConfig& config, const std::string& out_dir,
                                    const Log& log) {
  config.validate();
  require_file(raw_csv);
  make_out_dir(out_dir);
  auto parsed = ingest::parse_charging_log(raw_csv);
  say(log, std::to_string(parsed.records.size()) + " records parsed, " + std::to_string(parsed.skipped) + " skipped");
  featureng::TableBuildOptions opts;
  opts.rules = config.rules;
  opts.median_window = config.median_window;
  featureng::TableBuildStats stats;
  std::vector<ingest::VehicleCapacitySeries> labels;
  const auto table = featureng::build_weekly_table(parsed.records, opts, &stats, &labels);

  const fs::path root(out_dir);
  featureng::write_feature_table((root / "weekly_features.csv").string(), table);
  ingest::write_weekly_labels((root / "weekly_capacity.csv").string(), labels);
  ordered_json r;
  r["records"] = parsed.records.size();
  r["skipped_rows"] = parsed.skipped;
  r["row_errors"] = std::vector<std::string>(
      parsed.row_errors.begin(), parsed.row_errors.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(
                                                                 parsed.row_errors.size(), 50)));
  r["segments"] = stats.segments;
  r["valid_segments"] = stats.valid_segments;
  r["rejections"] = stats.rejections;
  r["weekly_rows"] = table.size();
  write_text(root / "ingest_report.json", r.dump(2) + "\n");
  say(log, std::to_string(stats.valid_segments) + " of " + std::to_string(stats.segments) + " segments valid, " +
               std::to_string(table.size()) + " weekly rows");
  return finish("ingest", config, {raw_csv}, {"weekly_features.csv", "weekly_capacity.csv", "ingest_report.json"},
                out_dir);
}

std::vector<std::string> cmd_features(const std::string& weekly_csv, const RunConfig& config,
                                      const std::string& out_dir, const Log& log) {
  config.validate();
  require_file(weekly_csv);
  make_out_dir(out_dir);
  const auto rows = featureng::read_feature_table(weekly_csv);
  const auto sel = featureng::select_features(rows, config.selection);
  const fs::path root(out_dir);
  write_text(root / "selection.json", featureng::selection_to_json(sel) + "\n");
  const auto write_list = [&](const std::string& name, const std::vector<std::string>& names) {
    std::string text;
    for (const auto& n : names) text += n + "\n";
    write_text(root / name, text);
  };
  write_list("f1.txt", sel.f1);
  write_list("f2.txt", sel.f2);
  write_list("f3.txt", sel.f3);
  say(log, "F1 " + std::to_string(sel.f1.size()) + ", F2 " + std::to_string(sel.f2.size()) + ", F3 " +
               std::to_string(sel.f3.size()) + " features");
  return finish("features", config, {weekly_csv}, {"selection.json", "f1.txt", "f2.txt", "f3.txt"}, out_dir);
}

std::vector<std::string> cmd_train(const std::string& features_csv, const RunConfig& config,
                                   const std::string& out_dir, const Log& log) {
  config.validate();
  require_file(features_csv);
  make_out_dir(out_dir);
  const auto rows = featureng::read_feature_table(features_csv);
  if (rows.empty()) fail(ErrorKind::validation, features_csv + ": no rows");
  const auto spec = evalbench::parse_feature_set(config.feature_set);
  const auto features = evalbench::resolve_features(spec, rows, config.selection, {});

  Checkpoint ckpt;
  ckpt.normalizer = featureng::fit_normalizer(rows, features);
  for (const auto& w : ckpt.normalizer.warnings) say(log, "warning: " + w);
  ckpt.model_config = config.model;
  ckpt.model_config.feature_dim = static_cast<dg::Index>(features.size());
  ckpt.diffusion_steps = config.diffusion_steps;
  ckpt.beta_start = config.effective_beta_start();
  ckpt.beta_end = config.effective_beta_end();
  ckpt.seed = config.seed;

  evalbench::WindowOptions wo{config.model.history_len, config.model.horizon, config.stride, config.max_gap_weeks,
                              true};
  std::vector<diffusion::SupervisedWindow> windows;
  for (const auto& [id, vrows] : by_vehicle(rows)) {
    auto ws = evalbench::make_windows(vrows, ckpt.normalizer, ckpt.model_config.condition_on_capacity, wo);
    windows.insert(windows.end(), std::make_move_iterator(ws.begin()), std::make_move_iterator(ws.end()));
  }
  if (windows.empty()) fail(ErrorKind::validation, "no training windows for history length " +
                                                       std::to_string(config.model.history_len));
  ckpt.target_scale = evalbench::fit_target_scale(windows);
  evalbench::scale_targets(windows, ckpt.target_scale);

  ckpt.net = std::make_unique<model::CduaModel<float>>(ckpt.model_config, derive_seed(config.seed, "init"));
  auto tc = config.train;
  tc.seed = derive_seed(config.seed, "train");
  say(log, "training on " + std::to_string(windows.size()) + " windows, " +
               std::to_string(ckpt.net->store.scalar_count()) + " parameters");
  const auto result = diffusion::train(*ckpt.net, windows, config.schedule(), tc, [&](int epoch, double loss) {
    const int e = epoch + 1;
    if (e == 1 || e % 50 == 0 || e == tc.epochs) {
      say(log, "epoch " + std::to_string(e) + " loss " + csv::format_double(loss));
    }
  });

  const fs::path root(out_dir);
  save_checkpoint(ckpt, (root / "checkpoint").string());
  std::ofstream loss(root / "loss.csv", std::ios::binary);
  if (!loss) fail(ErrorKind::io, "cannot write loss.csv");
  csv::write_row(loss, {"epoch", "loss"});
  for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
    csv::write_row(loss, {std::to_string(e + 1), csv::format_double(result.epoch_loss[e])});
  }
  loss.close();
  return finish("train", config, {features_csv},
                {"checkpoint/manifest.json", "checkpoint/weights.bin", "checkpoint/model.json",
                 "checkpoint/normalizer.json", "checkpoint/diffusion.json", "loss.csv"},
                out_dir);
}

std::vector<std::string> cmd_forecast(const std::string& checkpoint_dir, const std::string& history_csv,
                                      const RunConfig& config, const std::string& out_dir, const Log& log) {
  config.validate();
  require_file(history_csv);
  auto ckpt = load_checkpoint(checkpoint_dir);
  const auto rows = featureng::read_feature_table(history_csv);
  if (rows.empty()) fail(ErrorKind::validation, history_csv + ": no rows");
  make_out_dir(out_dir);
  const auto& mc = ckpt.model_config;
  const auto schedule = diffusion::build_schedule(ckpt.diffusion_steps, ckpt.beta_start, ckpt.beta_end);

  evalbench::WindowOptions wo{mc.history_len, mc.horizon, 1, config.max_gap_weeks, true};
  std::vector<diffusion::SupervisedWindow> windows;
  std::vector<std::uint64_t> seeds;
  for (const auto& [id, vrows] : by_vehicle(rows)) {
    windows.push_back(evalbench::latest_window(vrows, ckpt.normalizer, mc.condition_on_capacity, wo));
    seeds.push_back(derive_seed(config.seed, "forecast/" + id + "/" + std::to_string(windows.back().first_week)));
  }
  std::vector<const diffusion::SupervisedWindow*> ptrs;
  for (const auto& w : windows) ptrs.push_back(&w);
  auto sc = config.sampler;
  sc.threads = config.threads;
  say(log, "sampling " + std::to_string(sc.trajectories) + " trajectories for " + std::to_string(windows.size()) +
               " vehicles");
  const auto ensembles = diffusion::sample_ensembles(*ckpt.net, schedule, ptrs, seeds, sc);

  const fs::path root(out_dir);
  std::ofstream out(root / "forecasts.csv", std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write forecasts.csv");
  csv::write_row(out, {"vehicle_id", "origin_week", "week", "mean_ah", "std_ah", "lower95_ah", "upper95_ah"});
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const auto& w = windows[i];
    const auto& e = ensembles[i];
    for (Eigen::Index k = 0; k < w.horizon(); ++k) {
      Eigen::VectorXd traj(e.trajectories.rows());
      for (Eigen::Index r = 0; r < traj.size(); ++r) {
        traj[r] = ckpt.normalizer.invert_capacity(w.anchor + ckpt.target_scale * e.trajectories(r, k));
      }
      const auto s = diffusion::summarize(traj, sc.z);
      csv::write_row(out, {w.vehicle_id, std::to_string(w.first_week + static_cast<int>(w.history_len) - 1),
                           std::to_string(w.target_weeks[static_cast<std::size_t>(k)]),
                           csv::format_double(s.mean[0]), csv::format_double(s.std[0]),
                           csv::format_double(s.lower[0]), csv::format_double(s.upper[0])});
    }
  }
  out.close();
  if (!out) fail(ErrorKind::io, "write failed: forecasts.csv");
  return finish("forecast", config, {checkpoint_dir, history_csv}, {"forecasts.csv"}, out_dir);
}

std::vector<std::string> cmd_evaluate(const std::string& features_csv, const RunConfig& config,
                                      const std::string& out_dir, const Log& log) {
  config.validate();
  require_file(features_csv);
  make_out_dir(out_dir);
  const auto rows = featureng::read_feature_table(features_csv);
  const auto report = evalbench::run_experiment(rows, config.experiment(), log);
  auto files = evalbench::emit_report(report, out_dir);
  for (const auto& row : report.rows) {
    if (row.fold == -1) {
      say(log, row.variant + "/" + row.feature_set + " L=" + std::to_string(row.horizon) +
                   ": rmse " + csv::format_double(row.rmse_rel) + "%, mae " + csv::format_double(row.mae_rel) +
                   "%, ci width " + csv::format_double(row.ci_width_rel) + "%, picp " +
                   csv::format_double(row.picp) + "%");
    }
  }
  return finish("evaluate", config, {features_csv}, files, out_dir);
}

std::vector<std::string> cmd_ablate(const std::string& features_csv, const RunConfig& config, const std::string& mode,
                                    const std::string& out_dir, const Log& log) {
  config.validate();
  if (mode != "features" && mode != "model") fail(ErrorKind::validation, "ablation mode must be features or model");
  require_file(features_csv);
  make_out_dir(out_dir);
  const auto rows = featureng::read_feature_table(features_csv);
  evalbench::MetricsReport report;
  if (mode == "features") {
    std::vector<evalbench::FeatureSetSpec> sets;
    for (const auto& s : config.ablation_feature_sets) sets.push_back(evalbench::parse_feature_set(s));
    report = evalbench::run_feature_ablation(rows, config.experiment(), sets, log);
  } else {
    std::vector<model::Variant> variants;
    for (const auto& v : config.ablation_variants) variants.push_back(model::parse_variant(v));
    report = evalbench::run_model_ablation(rows, config.experiment(), variants, log);
  }
  auto files = evalbench::emit_report(report, out_dir);
  return finish("ablate-" + mode, config, {features_csv}, files, out_dir);
}

}  // namespace cdua::pipeline
