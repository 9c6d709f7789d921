#include "cdua/evalbench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "cdua/seeding.hpp"

namespace cdua::evalbench {

using diffusion::SupervisedWindow;
using featureng::WeeklyFeatureRow;

namespace {

void check_pair(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const char* what) {
  if (a.size() == 0) fail(ErrorKind::validation, std::string(what) + ": empty input");
  if (a.size() != b.size()) fail(ErrorKind::validation, std::string(what) + ": length mismatch");
}

}  // namespace

double rmse(const Eigen::VectorXd& y, const Eigen::VectorXd& yhat) {
  check_pair(y, yhat, "rmse");
  return std::sqrt((y - yhat).array().square().mean());
}

double mae(const Eigen::VectorXd& y, const Eigen::VectorXd& yhat) {
  check_pair(y, yhat, "mae");
  return (y - yhat).array().abs().mean();
}

double ci_width(const Eigen::VectorXd& lower, const Eigen::VectorXd& upper) {
  check_pair(lower, upper, "ci_width");
  if ((upper.array() < lower.array()).any()) fail(ErrorKind::validation, "ci_width: lower bound above upper bound");
  return (upper - lower).mean();
}

double picp(const Eigen::VectorXd& y, const Eigen::VectorXd& lower, const Eigen::VectorXd& upper) {
  check_pair(y, lower, "picp");
  check_pair(y, upper, "picp");
  if ((upper.array() < lower.array()).any()) fail(ErrorKind::validation, "picp: lower bound above upper bound");
  Eigen::Index inside = 0;
  for (Eigen::Index i = 0; i < y.size(); ++i) inside += (y[i] >= lower[i] && y[i] <= upper[i]) ? 1 : 0;
  return 100.0 * static_cast<double>(inside) / static_cast<double>(y.size());
}

double relativize(double metric_ah, double reference_ah) {
  if (!(reference_ah > 0.0) || !std::isfinite(reference_ah)) {
    fail(ErrorKind::validation, "relativize: reference capacity must be positive");
  }
  return 100.0 * metric_ah / reference_ah;
}

std::vector<VehicleId> FoldPlan::train_ids(int fold) const {
  if (train_equals_test) return folds.at(0);
  std::vector<VehicleId> out;
  for (int f = 0; f < k; ++f)
    if (f != fold) out.insert(out.end(), folds[static_cast<std::size_t>(f)].begin(), folds[static_cast<std::size_t>(f)].end());
  std::sort(out.begin(), out.end());
  return out;
}

FoldPlan make_folds(std::vector<VehicleId> ids, int k, std::uint64_t seed) {
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) fail(ErrorKind::validation, "make_folds: duplicate ids");
  if (k < 1 || static_cast<std::size_t>(k) > ids.size()) {
    fail(ErrorKind::validation, "make_folds: k=" + std::to_string(k) + " with " + std::to_string(ids.size()) +
                                    " vehicles");
  }
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  FoldPlan plan;
  plan.k = k;
  plan.train_equals_test = k == 1;
  const std::size_t n = ids.size();
  for (int f = 0; f < k; ++f) {
    const std::size_t a = n * static_cast<std::size_t>(f) / static_cast<std::size_t>(k);
    const std::size_t b = n * static_cast<std::size_t>(f + 1) / static_cast<std::size_t>(k);
    std::vector<VehicleId> fold(ids.begin() + static_cast<std::ptrdiff_t>(a), ids.begin() + static_cast<std::ptrdiff_t>(b));
    std::sort(fold.begin(), fold.end());
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

namespace {

// Dense week grid for one vehicle; short gaps are interpolated.
struct WeekGrid {
  VehicleId vehicle_id;
  int w0 = 0;
  Eigen::Index n = 0, d = 0;
  Eigen::MatrixXd x;
  Eigen::VectorXd cap;
  std::vector<char> observed, usable;
};

WeekGrid build_grid(const std::vector<WeeklyFeatureRow>& rows, const featureng::Normalizer& norm,
                    bool capacity_channel, int max_gap) {
  WeekGrid g;
  std::vector<const WeeklyFeatureRow*> sorted;
  for (const auto& r : rows) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->week < b->week; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i]->week == sorted[i - 1]->week) fail(ErrorKind::validation, "make_windows: duplicate week");
    if (sorted[i]->vehicle_id != sorted[0]->vehicle_id) fail(ErrorKind::validation, "make_windows: mixed vehicles");
  }
  g.vehicle_id = sorted.front()->vehicle_id;
  g.w0 = sorted.front()->week;
  g.n = sorted.back()->week - g.w0 + 1;
  const Eigen::Index nf = static_cast<Eigen::Index>(norm.features.size());
  g.d = nf + (capacity_channel ? 1 : 0);
  g.x = Eigen::MatrixXd::Zero(g.n, g.d);
  g.cap = Eigen::VectorXd::Zero(g.n);
  g.observed.assign(static_cast<std::size_t>(g.n), 0);
  g.usable.assign(static_cast<std::size_t>(g.n), 0);
  for (const auto* r : sorted) {
    const Eigen::Index k = r->week - g.w0;
    g.cap[k] = norm.apply_capacity(r->capacity);
    if (nf) g.x.row(k).head(nf) = norm.apply_features(*r).transpose();
    if (capacity_channel) g.x(k, nf) = g.cap[k];
    g.observed[static_cast<std::size_t>(k)] = g.usable[static_cast<std::size_t>(k)] = 1;
  }
  // both ends of a gap are observed by construction
  for (Eigen::Index i = 0; i < g.n;) {
    if (g.observed[static_cast<std::size_t>(i)]) {
      ++i;
      continue;
    }
    Eigen::Index j = i;
    while (!g.observed[static_cast<std::size_t>(j)]) ++j;
    if (j - i <= max_gap) {
      for (Eigen::Index k = i; k < j; ++k) {
        const double a = static_cast<double>(k - (i - 1)) / static_cast<double>(j - (i - 1));
        g.x.row(k) = (1.0 - a) * g.x.row(i - 1) + a * g.x.row(j);
        g.cap[k] = (1.0 - a) * g.cap[i - 1] + a * g.cap[j];
        g.usable[static_cast<std::size_t>(k)] = 1;
      }
    }
    i = j;
  }
  return g;
}

SupervisedWindow window_at(const WeekGrid& g, Eigen::Index s, Eigen::Index l, Eigen::Index h) {
  SupervisedWindow w;
  w.vehicle_id = g.vehicle_id;
  w.first_week = g.w0 + static_cast<int>(s);
  w.history_len = l;
  w.input_dim = g.d;
  w.x.resize(l * g.d);
  for (Eigen::Index t = 0; t < l; ++t) w.x.segment(t * g.d, g.d) = g.x.row(s + t).transpose();
  w.anchor = g.cap[s + l - 1];
  w.y0 = Eigen::VectorXd::Constant(h, std::numeric_limits<double>::quiet_NaN());
  w.mask = Eigen::VectorXd::Zero(h);
  for (Eigen::Index k = 0; k < h; ++k) {
    const Eigen::Index i = s + l + k;
    w.target_weeks.push_back(g.w0 + static_cast<int>(i));
    if (i < g.n && g.observed[static_cast<std::size_t>(i)]) {
      w.y0[k] = g.cap[i] - w.anchor;
      w.mask[k] = 1.0;
    }
  }
  return w;
}

void check_options(const WindowOptions& opt) {
  if (opt.history_len < 1 || opt.horizon < 1 || opt.stride < 1 || opt.max_gap < 0) {
    fail(ErrorKind::validation, "make_windows: invalid options");
  }
}

}  // namespace

std::vector<SupervisedWindow> make_windows(const std::vector<WeeklyFeatureRow>& rows,
                                           const featureng::Normalizer& norm, bool capacity_channel,
                                           const WindowOptions& opt) {
  check_options(opt);
  std::vector<SupervisedWindow> out;
  if (rows.empty()) return out;
  const auto g = build_grid(rows, norm, capacity_channel, opt.max_gap);
  const Eigen::Index l = opt.history_len, h = opt.horizon;
  for (Eigen::Index s = 0; s + l < g.n; s += opt.stride) {
    const bool full = s + l + h <= g.n;
    if (!full && !opt.include_partial) continue;
    const Eigen::Index end = std::min(g.n, s + l + h);
    bool ok = true;
    for (Eigen::Index k = s; k < end; ++k) ok = ok && g.usable[static_cast<std::size_t>(k)];
    if (!ok) continue;
    auto w = window_at(g, s, l, h);
    if (w.mask.sum() == 0.0) continue;
    out.push_back(std::move(w));
  }
  return out;
}

SupervisedWindow latest_window(const std::vector<WeeklyFeatureRow>& rows, const featureng::Normalizer& norm,
                               bool capacity_channel, const WindowOptions& opt) {
  check_options(opt);
  if (rows.empty()) fail(ErrorKind::validation, "latest_window: no rows");
  const auto g = build_grid(rows, norm, capacity_channel, opt.max_gap);
  const Eigen::Index l = opt.history_len;
  if (g.n < l) {
    fail(ErrorKind::validation, "vehicle " + g.vehicle_id + " has " + std::to_string(g.n) + " weeks of history, " +
                                    std::to_string(l) + " needed");
  }
  for (Eigen::Index k = g.n - l; k < g.n; ++k) {
    if (!g.usable[static_cast<std::size_t>(k)]) {
      fail(ErrorKind::validation, "vehicle " + g.vehicle_id + ": gap longer than " + std::to_string(opt.max_gap) +
                                      " weeks inside the last " + std::to_string(l) + " weeks");
    }
  }
  return window_at(g, g.n - l, l, opt.horizon);
}

double fit_target_scale(const std::vector<SupervisedWindow>& windows) {
  double sq = 0.0;
  std::size_t n = 0;
  for (const auto& w : windows)
    for (Eigen::Index k = 0; k < w.horizon(); ++k)
      if (w.mask[k] != 0.0) {
        sq += w.y0[k] * w.y0[k];
        ++n;
      }
  if (n == 0 || sq == 0.0) return 1.0;
  return std::sqrt(sq / static_cast<double>(n));
}

void scale_targets(std::vector<SupervisedWindow>& windows, double scale) {
  if (!(scale > 0.0)) fail(ErrorKind::validation, "scale_targets: scale must be positive");
  for (auto& w : windows) w.y0 /= scale;
}

std::string FeatureSetSpec::label() const {
  switch (kind) {
    case FeatureSetKind::f1: return "f1";
    case FeatureSetKind::f2: return "f2";
    case FeatureSetKind::f3: return "f3";
    case FeatureSetKind::reference: return "reference";
    case FeatureSetKind::custom: return "custom";
  }
  return "?";
}

FeatureSetSpec parse_feature_set(const std::string& text) {
  FeatureSetSpec spec;
  if (text == "f1") spec.kind = FeatureSetKind::f1;
  else if (text == "f2") spec.kind = FeatureSetKind::f2;
  else if (text == "f3") spec.kind = FeatureSetKind::f3;
  else if (text == "reference") spec.kind = FeatureSetKind::reference;
  else if (text.rfind("custom:", 0) == 0) {
    spec.kind = FeatureSetKind::custom;
    const std::string path = text.substr(7);
    std::ifstream in(path);
    if (!in) fail(ErrorKind::io, "cannot read feature list " + path);
    std::string line;
    while (std::getline(in, line)) {
      for (std::size_t p; (p = line.find_first_of(",\r")) != std::string::npos;) line[p] = '\n';
      std::size_t start = 0;
      while (start <= line.size()) {
        const std::size_t stop = std::min(line.find('\n', start), line.size());
        std::string name = line.substr(start, stop - start);
        name.erase(0, name.find_first_not_of(" \t"));
        name.erase(name.find_last_not_of(" \t") + 1);
        if (!name.empty()) {
          if (!featureng::is_candidate(name)) fail(ErrorKind::schema, "unknown feature '" + name + "' in " + path);
          spec.custom.push_back(name);
        }
        start = stop + 1;
      }
    }
  } else {
    fail(ErrorKind::validation, "unknown feature set '" + text + "' (f1|f2|f3|reference|custom:PATH)");
  }
  return spec;
}

std::vector<std::string> resolve_features(const FeatureSetSpec& spec, const std::vector<WeeklyFeatureRow>& train_rows,
                                          const featureng::SelectionConfig& selection,
                                          const featureng::FoldGuard& guard) {
  guard.check(train_rows, "feature selection");
  switch (spec.kind) {
    case FeatureSetKind::f1: return featureng::select_by_pearson(train_rows, selection.pearson_threshold);
    case FeatureSetKind::f2:
      return featureng::select_by_importance(train_rows, selection.importance_threshold, selection.gbdt);
    case FeatureSetKind::f3: return featureng::select_features(train_rows, selection).f3;
    case FeatureSetKind::reference: return featureng::reference_feature_set();
    case FeatureSetKind::custom: return spec.custom;
  }
  return {};
}

void MetricsReport::append(const MetricsReport& other) {
  rows.insert(rows.end(), other.rows.begin(), other.rows.end());
  points.insert(points.end(), other.points.begin(), other.points.end());
  logs.insert(logs.end(), other.logs.begin(), other.logs.end());
}

MetricsRow aggregate(const std::vector<const ForecastPoint*>& points) {
  MetricsRow row;
  if (points.empty()) return row;
  row.variant = points.front()->variant;
  row.feature_set = points.front()->feature_set;
  row.horizon = points.front()->horizon;
  row.fold = points.front()->fold;
  std::map<VehicleId, std::vector<const ForecastPoint*>> by_vehicle;
  for (const auto* p : points) by_vehicle[p->vehicle_id].push_back(p);
  double total = 0.0;
  for (const auto& [id, pts] : by_vehicle) {
    const Eigen::Index n = static_cast<Eigen::Index>(pts.size());
    Eigen::VectorXd y(n), m(n), lo(n), hi(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto* p = pts[static_cast<std::size_t>(i)];
      y[i] = p->truth_ah;
      m[i] = p->mean_ah;
      lo[i] = p->lower_ah;
      hi[i] = p->upper_ah;
    }
    const double ref = pts.front()->reference_ah;
    const double wgt = static_cast<double>(n);
    row.rmse_rel += wgt * relativize(rmse(y, m), ref);
    row.mae_rel += wgt * relativize(mae(y, m), ref);
    row.ci_width_rel += wgt * relativize(ci_width(lo, hi), ref);
    row.picp += wgt * picp(y, lo, hi);
    total += wgt;
  }
  row.rmse_rel /= total;
  row.mae_rel /= total;
  row.ci_width_rel /= total;
  row.picp /= total;
  row.n_points = points.size();
  return row;
}

std::vector<MetricsRow> summarize_points(const std::vector<ForecastPoint>& points) {
  using Key = std::tuple<std::string, std::string, dg::Index, int>;
  std::map<Key, std::vector<const ForecastPoint*>> groups;
  std::vector<Key> order;
  for (const auto& p : points) {
    for (const int fold : {p.fold, -1}) {
      const Key key{p.feature_set, p.variant, p.horizon, fold};
      auto [it, inserted] = groups.try_emplace(key);
      if (inserted) order.push_back(key);
      it->second.push_back(&p);
    }
  }
  std::sort(order.begin(), order.end(), [](const Key& a, const Key& b) {
    // pooled rows after the per-fold rows of the same run
    const auto rank = [](const Key& k) {
      return std::make_tuple(std::get<0>(k), std::get<1>(k), std::get<2>(k), std::get<3>(k) < 0, std::get<3>(k));
    };
    return rank(a) < rank(b);
  });
  std::vector<MetricsRow> rows;
  for (const auto& key : order) {
    auto row = aggregate(groups[key]);
    row.fold = std::get<3>(key);
    rows.push_back(row);
  }
  return rows;
}

namespace {

std::string run_label(int fold, dg::Index l) { return "fold" + std::to_string(fold) + "/L" + std::to_string(l); }

}  // namespace

MetricsReport run_experiment(const std::vector<WeeklyFeatureRow>& table, const ExperimentConfig& config,
                             const Progress& progress) {
  if (table.empty()) fail(ErrorKind::validation, "run_experiment: empty feature table");
  if (config.relative_reference != "initial" && config.relative_reference != "rated") {
    fail(ErrorKind::validation, "relative_reference must be 'initial' or 'rated'");
  }
  if (config.relative_reference == "rated" && !(config.rated_capacity > 0.0)) {
    fail(ErrorKind::validation, "rated_capacity must be positive when relative_reference is 'rated'");
  }
  std::map<VehicleId, std::vector<WeeklyFeatureRow>> by_vehicle;
  for (const auto& r : table) by_vehicle[r.vehicle_id].push_back(r);
  std::map<VehicleId, double> reference;
  std::map<std::pair<VehicleId, int>, double> truth;
  std::vector<VehicleId> ids;
  for (auto& [id, rows] : by_vehicle) {
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.week < b.week; });
    reference[id] = config.relative_reference == "rated" ? config.rated_capacity : rows.front().capacity;
    for (const auto& r : rows) truth[{id, r.week}] = r.capacity;
    ids.push_back(id);
  }

  const auto plan = make_folds(ids, config.folds, derive_seed(config.seed, "folds"));
  const int n_folds = config.max_folds > 0 ? std::min(config.max_folds, plan.k) : plan.k;
  const auto schedule = diffusion::build_schedule(config.diffusion_steps, config.beta_start, config.beta_end);
  const std::string variant = model::to_string(config.model.variant);
  const std::string set_label = config.features.label();

  MetricsReport report;
  for (int f = 0; f < n_folds; ++f) {
    const auto& test_ids = plan.folds[static_cast<std::size_t>(f)];
    const auto train_ids = plan.train_ids(f);
    const featureng::FoldGuard guard =
        plan.train_equals_test ? featureng::FoldGuard{} : featureng::FoldGuard({test_ids.begin(), test_ids.end()});

    std::vector<WeeklyFeatureRow> train_rows;
    for (const auto& id : train_ids) train_rows.insert(train_rows.end(), by_vehicle[id].begin(), by_vehicle[id].end());
    if (config.shuffle_labels) {
      std::vector<double> caps;
      for (const auto& r : train_rows) caps.push_back(r.capacity);
      std::mt19937_64 rng(derive_seed(config.seed, "shuffle/fold" + std::to_string(f)));
      std::shuffle(caps.begin(), caps.end(), rng);
      for (std::size_t i = 0; i < caps.size(); ++i) train_rows[i].capacity = caps[i];
    }
    const auto features = resolve_features(config.features, train_rows, config.selection, guard);
    const auto norm = featureng::fit_normalizer(train_rows, features, guard);

    for (const dg::Index l : config.history_lens) {
      const std::string label = run_label(f, l);
      FoldLog log;
      log.fold = f;
      log.horizon = l;
      log.variant = variant;
      log.feature_set = set_label;
      log.test_vehicles = test_ids;
      log.features = features;
      log.warnings = norm.warnings;

      model::CduaConfig mc = config.model;
      mc.history_len = l;
      mc.feature_dim = static_cast<dg::Index>(features.size());
      WindowOptions wo{l, mc.horizon, config.stride, config.max_gap, true};

      std::vector<SupervisedWindow> train_ws;
      std::map<VehicleId, std::vector<WeeklyFeatureRow>> train_by_vehicle;
      for (const auto& r : train_rows) train_by_vehicle[r.vehicle_id].push_back(r);
      for (const auto& [id, rows] : train_by_vehicle) {
        auto ws = make_windows(rows, norm, mc.condition_on_capacity, wo);
        train_ws.insert(train_ws.end(), std::make_move_iterator(ws.begin()), std::make_move_iterator(ws.end()));
      }
      std::vector<SupervisedWindow> test_ws;
      for (const auto& id : test_ids) {
        auto ws = make_windows(by_vehicle[id], norm, mc.condition_on_capacity, wo);
        test_ws.insert(test_ws.end(), std::make_move_iterator(ws.begin()), std::make_move_iterator(ws.end()));
      }
      log.train_windows = train_ws.size();
      log.test_windows = test_ws.size();
      if (train_ws.empty() || test_ws.empty()) {
        log.warnings.push_back("no " + std::string(train_ws.empty() ? "training" : "test") +
                               " windows for history length " + std::to_string(l) + "; skipped");
        report.logs.push_back(std::move(log));
        if (progress) progress(label + ": skipped (no windows)");
        continue;
      }
      log.target_scale = fit_target_scale(train_ws);
      scale_targets(train_ws, log.target_scale);
      scale_targets(test_ws, log.target_scale);

      model::CduaModel<float> net(mc, derive_seed(config.seed, "init/" + label));
      log.parameters = net.store.scalar_count();
      auto tc = config.train;
      tc.seed = derive_seed(config.seed, "train/" + label);
      if (progress) {
        progress(label + ": training " + variant + "/" + set_label + " on " + std::to_string(train_ws.size()) +
                 " windows, " + std::to_string(log.parameters) + " parameters");
      }
      const auto trained = diffusion::train(net, train_ws, schedule, tc);
      log.loss_history = trained.epoch_loss;

      std::vector<const SupervisedWindow*> ptrs;
      std::vector<std::uint64_t> seeds;
      for (const auto& w : test_ws) {
        ptrs.push_back(&w);
        seeds.push_back(derive_seed(config.seed, "sample/" + label + "/" + w.vehicle_id + "/" + std::to_string(w.first_week)));
      }
      if (progress) progress(label + ": sampling " + std::to_string(test_ws.size()) + " test windows");
      const auto ensembles = diffusion::sample_ensembles(net, schedule, ptrs, seeds, config.sampler);

      for (std::size_t i = 0; i < test_ws.size(); ++i) {
        const auto& w = test_ws[i];
        const auto& e = ensembles[i];
        for (Eigen::Index k = 0; k < w.horizon(); ++k) {
          if (w.mask[k] == 0.0) continue;
          ForecastPoint p;
          p.variant = variant;
          p.feature_set = set_label;
          p.horizon = l;
          p.fold = f;
          p.vehicle_id = w.vehicle_id;
          p.origin_week = w.first_week + static_cast<int>(l) - 1;
          p.target_week = w.target_weeks[static_cast<std::size_t>(k)];
          p.truth_ah = truth.at({w.vehicle_id, p.target_week});
          p.reference_ah = reference.at(w.vehicle_id);
          Eigen::VectorXd traj(e.trajectories.rows());
          for (Eigen::Index r = 0; r < traj.size(); ++r) {
            traj[r] = norm.invert_capacity(w.anchor + log.target_scale * e.trajectories(r, k));
          }
          const auto s = diffusion::summarize(traj, config.sampler.z);
          p.mean_ah = s.mean[0];
          p.std_ah = s.std[0];
          p.lower_ah = s.lower[0];
          p.upper_ah = s.upper[0];
          p.trajectories_ah.assign(traj.data(), traj.data() + traj.size());
          report.points.push_back(std::move(p));
        }
      }
      report.logs.push_back(std::move(log));
    }
  }
  report.rows = summarize_points(report.points);
  return report;
}

MetricsReport run_feature_ablation(const std::vector<WeeklyFeatureRow>& table, ExperimentConfig config,
                                   const std::vector<FeatureSetSpec>& sets, const Progress& progress) {
  MetricsReport all;
  for (const auto& set : sets) {
    config.features = set;
    all.append(run_experiment(table, config, progress));
  }
  all.rows = summarize_points(all.points);
  return all;
}

MetricsReport run_model_ablation(const std::vector<WeeklyFeatureRow>& table, ExperimentConfig config,
                                 const std::vector<model::Variant>& variants, const Progress& progress) {
  MetricsReport all;
  for (const auto v : variants) {
    config.model.variant = v;
    all.append(run_experiment(table, config, progress));
  }
  all.rows = summarize_points(all.points);
  return all;
}

}  // namespace cdua::evalbench
