#include "cdua/run_config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cdua/errors.hpp"

namespace cdua {

using nlohmann::ordered_json;

namespace {

constexpr int kReferenceSteps = 700;

void bad(const std::string& what) { fail(ErrorKind::validation, "config: " + what); }

ordered_json to_tree(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["threads"] = c.threads;

  auto& in = j["ingest"];
  in["max_gap_s"] = c.rules.max_gap_s;
  in["min_points"] = c.rules.min_points;
  in["min_soc_span"] = c.rules.min_soc_span;
  in["soc_backtrack_tolerance"] = c.rules.soc_backtrack_tolerance;
  in["nominal_interval_s"] = c.rules.nominal_interval_s;
  in["median_window"] = c.median_window;

  const auto& f = c.synth;
  auto& sy = j["synth"];
  sy["n_vehicles"] = f.n_vehicles;
  sy["weeks"] = f.weeks;
  sy["sessions_per_week"] = f.sessions_per_week;
  sy["initial_capacity_min"] = f.initial_capacity_min;
  sy["initial_capacity_max"] = f.initial_capacity_max;
  sy["fade_min"] = f.fade_min;
  sy["fade_max"] = f.fade_max;
  sy["knee_probability"] = f.knee_probability;
  sy["knee_fade_factor"] = f.knee_fade_factor;
  sy["knee_week_min"] = f.knee_week_min;
  sy["knee_week_max"] = f.knee_week_max;
  sy["noise_std"] = f.noise_std;
  sy["missing_week_probability"] = f.missing_week_probability;
  sy["start_time"] = f.start_time;
  sy["write_logs"] = c.synth_write_logs;
  auto& se = sy["session"];
  se["start_soc_min"] = f.session.start_soc_min;
  se["start_soc_max"] = f.session.start_soc_max;
  se["span_min"] = f.session.span_min;
  se["span_max"] = f.session.span_max;
  se["stage_c_rates"] = f.session.stage_c_rates;
  se["stage_fractions"] = f.session.stage_fractions;
  se["sample_interval_s"] = f.session.sample_interval_s;
  se["cells_in_series"] = f.session.cells_in_series;
  se["current_noise_std"] = f.session.current_noise_std;
  se["voltage_noise_std"] = f.session.voltage_noise_std;
  se["temp_noise_std"] = f.session.temp_noise_std;

  auto& fe = j["features"];
  fe["set"] = c.feature_set;
  fe["pearson_threshold"] = c.selection.pearson_threshold;
  fe["importance_threshold"] = c.selection.importance_threshold;
  fe["gbdt"]["rounds"] = c.selection.gbdt.rounds;
  fe["gbdt"]["max_depth"] = c.selection.gbdt.max_depth;
  fe["gbdt"]["learning_rate"] = c.selection.gbdt.learning_rate;
  fe["gbdt"]["min_samples_leaf"] = c.selection.gbdt.min_samples_leaf;

  auto& mo = j["model"];
  mo["history_len"] = c.model.history_len;
  mo["horizon"] = c.model.horizon;
  mo["condition_on_capacity"] = c.model.condition_on_capacity;
  mo["channels"] = c.model.channels;
  mo["heads"] = c.model.heads;
  mo["time_embed_dim"] = c.model.time_embed_dim;
  mo["groups"] = c.model.groups;
  mo["variant"] = model::to_string(c.model.variant);
  mo["upsample"] = model::to_string(c.model.upsample);

  auto& di = j["diffusion"];
  di["steps"] = c.diffusion_steps;
  di["beta_start"] = c.beta_start;
  di["beta_end"] = c.beta_end;
  di["scale_betas_with_steps"] = c.scale_betas_with_steps;

  auto& tr = j["training"];
  tr["optimizer"] = "adam";
  tr["epochs"] = c.train.epochs;
  tr["batch_size"] = c.train.batch_size;
  tr["learning_rate"] = c.train.learning_rate;

  auto& sa = j["sampling"];
  sa["trajectories"] = c.sampler.trajectories;
  sa["z"] = c.sampler.z;
  sa["max_rows"] = c.sampler.max_rows;

  auto& ev = j["evaluation"];
  ev["history_lens"] = c.history_lens;
  ev["folds"] = c.folds;
  ev["max_folds"] = c.max_folds;
  ev["stride"] = c.stride;
  ev["max_gap_weeks"] = c.max_gap_weeks;
  ev["relative_reference"] = c.relative_reference;
  ev["rated_capacity_ah"] = c.rated_capacity;
  ev["shuffle_labels"] = c.shuffle_labels;

  auto& ab = j["ablation"];
  ab["feature_sets"] = c.ablation_feature_sets;
  ab["variants"] = c.ablation_variants;
  return j;
}

void check_keys(const nlohmann::json& user, const nlohmann::json& defaults, const std::string& path) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string where = path.empty() ? it.key() : path + "." + it.key();
    if (!defaults.contains(it.key())) fail(ErrorKind::schema, "config: unknown key '" + where + "'");
    const auto& d = defaults.at(it.key());
    if (d.is_object()) {
      if (!it.value().is_object()) fail(ErrorKind::schema, "config: '" + where + "' must be an object");
      check_keys(it.value(), d, where);
    }
  }
}

RunConfig from_tree(const nlohmann::json& j) {
  RunConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.threads = j.at("threads").get<int>();

  const auto& in = j.at("ingest");
  c.rules.max_gap_s = in.at("max_gap_s").get<double>();
  c.rules.min_points = in.at("min_points").get<std::size_t>();
  c.rules.min_soc_span = in.at("min_soc_span").get<double>();
  c.rules.soc_backtrack_tolerance = in.at("soc_backtrack_tolerance").get<double>();
  c.rules.nominal_interval_s = in.at("nominal_interval_s").get<double>();
  c.median_window = in.at("median_window").get<int>();

  auto& f = c.synth;
  const auto& sy = j.at("synth");
  f.n_vehicles = sy.at("n_vehicles").get<int>();
  f.weeks = sy.at("weeks").get<int>();
  f.sessions_per_week = sy.at("sessions_per_week").get<int>();
  f.initial_capacity_min = sy.at("initial_capacity_min").get<double>();
  f.initial_capacity_max = sy.at("initial_capacity_max").get<double>();
  f.fade_min = sy.at("fade_min").get<double>();
  f.fade_max = sy.at("fade_max").get<double>();
  f.knee_probability = sy.at("knee_probability").get<double>();
  f.knee_fade_factor = sy.at("knee_fade_factor").get<double>();
  f.knee_week_min = sy.at("knee_week_min").get<int>();
  f.knee_week_max = sy.at("knee_week_max").get<int>();
  f.noise_std = sy.at("noise_std").get<double>();
  f.missing_week_probability = sy.at("missing_week_probability").get<double>();
  f.start_time = sy.at("start_time").get<std::int64_t>();
  c.synth_write_logs = sy.at("write_logs").get<bool>();
  const auto& se = sy.at("session");
  f.session.start_soc_min = se.at("start_soc_min").get<double>();
  f.session.start_soc_max = se.at("start_soc_max").get<double>();
  f.session.span_min = se.at("span_min").get<double>();
  f.session.span_max = se.at("span_max").get<double>();
  f.session.stage_c_rates = se.at("stage_c_rates").get<std::vector<double>>();
  f.session.stage_fractions = se.at("stage_fractions").get<std::vector<double>>();
  f.session.sample_interval_s = se.at("sample_interval_s").get<double>();
  f.session.cells_in_series = se.at("cells_in_series").get<int>();
  f.session.current_noise_std = se.at("current_noise_std").get<double>();
  f.session.voltage_noise_std = se.at("voltage_noise_std").get<double>();
  f.session.temp_noise_std = se.at("temp_noise_std").get<double>();

  const auto& fe = j.at("features");
  c.feature_set = fe.at("set").get<std::string>();
  c.selection.pearson_threshold = fe.at("pearson_threshold").get<double>();
  c.selection.importance_threshold = fe.at("importance_threshold").get<double>();
  const auto& gb = fe.at("gbdt");
  c.selection.gbdt.rounds = gb.at("rounds").get<int>();
  c.selection.gbdt.max_depth = gb.at("max_depth").get<int>();
  c.selection.gbdt.learning_rate = gb.at("learning_rate").get<double>();
  c.selection.gbdt.min_samples_leaf = gb.at("min_samples_leaf").get<double>();

  const auto& mo = j.at("model");
  c.model.history_len = mo.at("history_len").get<dg::Index>();
  c.model.horizon = mo.at("horizon").get<dg::Index>();
  c.model.condition_on_capacity = mo.at("condition_on_capacity").get<bool>();
  c.model.channels = mo.at("channels").get<std::vector<dg::Index>>();
  c.model.heads = mo.at("heads").get<dg::Index>();
  c.model.time_embed_dim = mo.at("time_embed_dim").get<dg::Index>();
  c.model.groups = mo.at("groups").get<dg::Index>();
  c.model.variant = model::parse_variant(mo.at("variant").get<std::string>());
  c.model.upsample = model::parse_upsample(mo.at("upsample").get<std::string>());

  const auto& di = j.at("diffusion");
  c.diffusion_steps = di.at("steps").get<int>();
  c.beta_start = di.at("beta_start").get<double>();
  c.beta_end = di.at("beta_end").get<double>();
  c.scale_betas_with_steps = di.at("scale_betas_with_steps").get<bool>();

  const auto& tr = j.at("training");
  if (tr.at("optimizer").get<std::string>() != "adam") bad("only the adam optimizer is supported");
  c.train.epochs = tr.at("epochs").get<int>();
  c.train.batch_size = tr.at("batch_size").get<int>();
  c.train.learning_rate = tr.at("learning_rate").get<double>();

  const auto& sa = j.at("sampling");
  c.sampler.trajectories = sa.at("trajectories").get<int>();
  c.sampler.z = sa.at("z").get<double>();
  c.sampler.max_rows = sa.at("max_rows").get<dg::Index>();

  const auto& ev = j.at("evaluation");
  c.history_lens = ev.at("history_lens").get<std::vector<dg::Index>>();
  c.folds = ev.at("folds").get<int>();
  c.max_folds = ev.at("max_folds").get<int>();
  c.stride = ev.at("stride").get<int>();
  c.max_gap_weeks = ev.at("max_gap_weeks").get<int>();
  c.relative_reference = ev.at("relative_reference").get<std::string>();
  c.rated_capacity = ev.at("rated_capacity_ah").get<double>();
  c.shuffle_labels = ev.at("shuffle_labels").get<bool>();

  const auto& ab = j.at("ablation");
  c.ablation_feature_sets = ab.at("feature_sets").get<std::vector<std::string>>();
  c.ablation_variants = ab.at("variants").get<std::vector<std::string>>();
  return c;
}

bool known_set(const std::string& s) {
  return s == "f1" || s == "f2" || s == "f3" || s == "reference" || s.rfind("custom:", 0) == 0;
}

}  // namespace

void RunConfig::validate() const {
  if (threads < 1) bad("threads must be at least 1");
  if (median_window < 1 || median_window % 2 == 0) bad("median_window must be odd and positive");
  if (!(rules.max_gap_s > 0.0) || !(rules.nominal_interval_s > 0.0)) bad("ingest intervals must be positive");
  if (!known_set(feature_set)) bad("unknown feature set '" + feature_set + "'");
  for (const auto& s : ablation_feature_sets)
    if (!known_set(s)) bad("unknown ablation feature set '" + s + "'");
  for (const auto& v : ablation_variants) model::parse_variant(v);
  if (ablation_feature_sets.empty() || ablation_variants.empty()) bad("ablation lists must not be empty");
  if (selection.pearson_threshold < 0.0 || selection.pearson_threshold > 1.0) bad("pearson_threshold outside [0, 1]");
  if (selection.importance_threshold < 0.0 || selection.importance_threshold > 1.0) {
    bad("importance_threshold outside [0, 1]");
  }
  if (selection.gbdt.rounds < 0 || selection.gbdt.max_depth < 1 || !(selection.gbdt.learning_rate > 0.0)) {
    bad("invalid gbdt settings");
  }
  auto m = model;
  m.feature_dim = 1;
  m.validate();
  if (diffusion_steps < 1) bad("diffusion steps must be at least 1");
  diffusion::build_schedule(diffusion_steps, effective_beta_start(), effective_beta_end());
  if (train.epochs < 0 || train.batch_size < 1 || !(train.learning_rate >= 0.0)) bad("invalid training settings");
  if (sampler.trajectories < 1 || !(sampler.z > 0.0) || sampler.max_rows < 1) bad("invalid sampling settings");
  if (history_lens.empty()) bad("history_lens must not be empty");
  for (const auto l : history_lens)
    if (l < 1) bad("history lengths must be positive");
  if (folds < 1 || max_folds < 0 || stride < 1 || max_gap_weeks < 0) bad("invalid evaluation settings");
  if (relative_reference != "initial" && relative_reference != "rated") {
    bad("relative_reference must be 'initial' or 'rated'");
  }
  if (relative_reference == "rated" && !(rated_capacity > 0.0)) bad("rated_capacity_ah must be positive");
  if (synth.n_vehicles < 1 || synth.weeks < 1 || synth.sessions_per_week < 1) bad("invalid synth fleet shape");
}

double RunConfig::effective_beta_start() const {
  return scale_betas_with_steps ? beta_start * kReferenceSteps / diffusion_steps : beta_start;
}

double RunConfig::effective_beta_end() const {
  return scale_betas_with_steps ? beta_end * kReferenceSteps / diffusion_steps : beta_end;
}

diffusion::NoiseSchedule RunConfig::schedule() const {
  return diffusion::build_schedule(diffusion_steps, effective_beta_start(), effective_beta_end());
}

evalbench::ExperimentConfig RunConfig::experiment() const {
  evalbench::ExperimentConfig e;
  e.history_lens = history_lens;
  e.model = model;
  e.diffusion_steps = diffusion_steps;
  e.beta_start = effective_beta_start();
  e.beta_end = effective_beta_end();
  e.train = train;
  e.sampler = sampler;
  e.sampler.threads = threads;
  e.selection = selection;
  e.features = evalbench::parse_feature_set(feature_set);
  e.folds = folds;
  e.max_folds = max_folds;
  e.stride = stride;
  e.max_gap = max_gap_weeks;
  e.relative_reference = relative_reference;
  e.rated_capacity = rated_capacity;
  e.shuffle_labels = shuffle_labels;
  e.seed = seed;
  return e;
}

std::string run_config_to_json(const RunConfig& config) { return to_tree(config).dump(2) + "\n"; }

RunConfig run_config_from_json(const std::string& text) {
  nlohmann::json user;
  try {
    user = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, std::string("config is not valid JSON: ") + e.what());
  }
  if (!user.is_object()) fail(ErrorKind::schema, "config must be a JSON object");
  const nlohmann::json defaults = to_tree(RunConfig{});
  check_keys(user, defaults, "");
  nlohmann::json merged = defaults;
  merged.merge_patch(user);
  RunConfig c;
  try {
    c = from_tree(merged);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return run_config_from_json(ss.str());
}

}  // namespace cdua
