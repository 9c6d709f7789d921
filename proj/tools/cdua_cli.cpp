// cdua: command-line front end for synth, ingest, features, train, forecast,
// evaluate and ablate.

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "cdua/errors.hpp"
#include "cdua/evalbench.hpp"
#include "cdua/pipeline.hpp"
#include "cdua/run_config.hpp"

namespace {

using namespace cdua;

enum Exit : int {
  ok = 0,
  internal = 1,
  usage = 2,
  io = 3,
  schema = 4,
  validation = 5,
  ordering = 6,
  numeric = 7,
  training_abort = 8,
};

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::io: return io;
    case ErrorKind::schema: return schema;
    case ErrorKind::validation: return validation;
    case ErrorKind::ordering: return ordering;
    case ErrorKind::numeric: return numeric;
    case ErrorKind::training_abort: return training_abort;
  }
  return internal;
}

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<long> horizon;
  std::optional<long> history_len;
  std::optional<std::string> variant;
  std::optional<std::string> feature_set;
  std::optional<int> threads;
  std::string out;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON run config (defaults for missing keys)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "master seed");
  cmd->add_option("--horizon", c.horizon, "forecast horizon H in weeks")->check(CLI::PositiveNumber);
  cmd->add_option("--history-len", c.history_len, "history length L in weeks")
      ->check(CLI::IsMember({8L, 16L, 24L, 32L}));
  cmd->add_option("--variant", c.variant, "model variant")
      ->check(CLI::IsMember({"full", "no_self_attn", "no_cross_attn", "backbone"}));
  cmd->add_option("--feature-set", c.feature_set, "f1|f2|f3|reference|custom:PATH");
  cmd->add_option("--threads", c.threads, "worker cap")->check(CLI::PositiveNumber);
  cmd->add_option("--out", c.out, "output directory")->required();
  cmd->add_flag("--quiet", c.quiet, "no progress messages");
}

RunConfig effective_config(const Common& c, bool evaluation) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_run_config(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  if (c.horizon) cfg.model.horizon = *c.horizon;
  if (c.history_len) {
    cfg.model.history_len = *c.history_len;
    if (evaluation) cfg.history_lens = {*c.history_len};
  }
  if (c.variant) cfg.model.variant = model::parse_variant(*c.variant);
  if (c.feature_set) {
    evalbench::parse_feature_set(*c.feature_set);
    cfg.feature_set = *c.feature_set;
  }
  if (c.threads) cfg.threads = *c.threads;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Capacity degradation forecasting with conditional diffusion"};
  app.require_subcommand(0, 1);
  bool emit_default = false;
  app.add_flag("--emit-default-config", emit_default, "print the full default config as JSON and exit");

  Common c;
  std::string input, input2, mode;

  auto* synth = app.add_subcommand("synth", "generate a synthetic fleet");
  add_common(synth, c);

  auto* ingest = app.add_subcommand("ingest", "charging log -> weekly capacities and features");
  ingest->add_option("raw_csv", input, "charging log CSV")->required();
  add_common(ingest, c);

  auto* features = app.add_subcommand("features", "Pearson and importance feature selection");
  features->add_option("weekly_csv", input, "weekly feature table")->required();
  add_common(features, c);

  auto* train = app.add_subcommand("train", "train a model on every vehicle and save a checkpoint");
  train->add_option("features_csv", input, "weekly feature table")->required();
  add_common(train, c);

  auto* forecast = app.add_subcommand("forecast", "forecast the next weeks from a checkpoint");
  forecast->add_option("checkpoint", input, "checkpoint directory")->required();
  forecast->add_option("history_csv", input2, "weekly feature table with recent history")->required();
  add_common(forecast, c);

  auto* evaluate = app.add_subcommand("evaluate", "cross-validated rolling-forecast evaluation");
  evaluate->add_option("features_csv", input, "weekly feature table")->required();
  add_common(evaluate, c);

  auto* ablate = app.add_subcommand("ablate", "feature or model ablation");
  ablate->add_option("features_csv", input, "weekly feature table")->required();
  ablate->add_option("--mode", mode, "features|model")->required()->check(CLI::IsMember({"features", "model"}));
  add_common(ablate, c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : usage;
  }

  if (emit_default) {
    std::cout << run_config_to_json(RunConfig{});
    return ok;
  }
  if (app.get_subcommands().empty()) {
    std::cerr << app.help();
    return usage;
  }

  const pipeline::Log log = [&c](const std::string& msg) {
    if (!c.quiet) std::cerr << msg << "\n";
  };
  try {
    const bool evaluation = evaluate->parsed() || ablate->parsed();
    const RunConfig cfg = effective_config(c, evaluation);
    std::vector<std::string> files;
    if (synth->parsed()) files = pipeline::cmd_synth(cfg, c.out, log);
    else if (ingest->parsed()) files = pipeline::cmd_ingest(input, cfg, c.out, log);
    else if (features->parsed()) files = pipeline::cmd_features(input, cfg, c.out, log);
    else if (train->parsed()) files = pipeline::cmd_train(input, cfg, c.out, log);
    else if (forecast->parsed()) files = pipeline::cmd_forecast(input, input2, cfg, c.out, log);
    else if (evaluate->parsed()) files = pipeline::cmd_evaluate(input, cfg, c.out, log);
    else if (ablate->parsed()) files = pipeline::cmd_ablate(input, cfg, mode, c.out, log);
    log("wrote " + std::to_string(files.size()) + " files to " + c.out);
    return ok;
  } catch (const Error& e) {
    std::cerr << "cdua: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error (internal): " << e.what() << "\n";
    return internal;
  }
}
