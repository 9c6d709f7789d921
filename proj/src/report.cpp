#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "cdua/csv.hpp"
#include "cdua/evalbench.hpp"

namespace cdua::evalbench {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::string metrics_to_json(const std::vector<MetricsRow>& rows) {
  ordered_json arr = ordered_json::array();
  for (const auto& r : rows) {
    ordered_json j;
    j["variant"] = r.variant;
    j["feature_set"] = r.feature_set;
    j["horizon"] = r.horizon;
    j["fold"] = r.fold;
    j["rmse_rel"] = r.rmse_rel;
    j["mae_rel"] = r.mae_rel;
    j["ci_width_rel"] = r.ci_width_rel;
    j["picp"] = r.picp;
    j["n_points"] = r.n_points;
    arr.push_back(std::move(j));
  }
  return arr.dump(2) + "\n";
}

std::vector<MetricsRow> metrics_from_json(const std::string& text) {
  try {
    const auto arr = nlohmann::json::parse(text);
    if (!arr.is_array()) fail(ErrorKind::schema, "metrics.json must hold an array");
    std::vector<MetricsRow> rows;
    for (const auto& j : arr) {
      MetricsRow r;
      r.variant = j.at("variant").get<std::string>();
      r.feature_set = j.at("feature_set").get<std::string>();
      r.horizon = j.at("horizon").get<dg::Index>();
      r.fold = j.at("fold").get<int>();
      r.rmse_rel = j.at("rmse_rel").get<double>();
      r.mae_rel = j.at("mae_rel").get<double>();
      r.ci_width_rel = j.at("ci_width_rel").get<double>();
      r.picp = j.at("picp").get<double>();
      r.n_points = j.at("n_points").get<std::size_t>();
      rows.push_back(r);
    }
    return rows;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, std::string("metrics.json: ") + e.what());
  }
}

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << text;
}

std::string fold_logs_json(const std::vector<FoldLog>& logs) {
  ordered_json arr = ordered_json::array();
  for (const auto& l : logs) {
    ordered_json j;
    j["variant"] = l.variant;
    j["feature_set"] = l.feature_set;
    j["horizon"] = l.horizon;
    j["fold"] = l.fold;
    j["test_vehicles"] = l.test_vehicles;
    j["features"] = l.features;
    j["train_windows"] = l.train_windows;
    j["test_windows"] = l.test_windows;
    j["parameters"] = l.parameters;
    j["target_scale"] = l.target_scale;
    j["loss_history"] = l.loss_history;
    j["warnings"] = l.warnings;
    arr.push_back(std::move(j));
  }
  return arr.dump(2) + "\n";
}

std::string safe_name(std::string s) {
  for (auto& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  return s;
}

std::string num(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (const char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Minimal plot canvas: data coordinates mapped into a fixed frame with axes.
class Plot {
 public:
  Plot(std::string title, std::string xlabel, std::string ylabel, double x0, double x1, double y0, double y1)
      : x0_(x0), x1_(x1 > x0 ? x1 : x0 + 1), y0_(y0), y1_(y1 > y0 ? y1 : y0 + 1) {
    body_ << "<text x=\"" << kW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
          << "</text>\n";
    body_ << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 8 << "\" text-anchor=\"middle\" font-size=\"12\">"
          << xml_escape(xlabel) << "</text>\n";
    body_ << "<text x=\"14\" y=\"" << kH / 2 << "\" transform=\"rotate(-90 14 " << kH / 2
          << ")\" text-anchor=\"middle\" font-size=\"12\">" << xml_escape(ylabel) << "</text>\n";
    body_ << "<rect x=\"" << kL << "\" y=\"" << kT << "\" width=\"" << kW - kL - kR << "\" height=\"" << kH - kT - kB
          << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double xv = x0_ + (x1_ - x0_) * i / 4.0, yv = y0_ + (y1_ - y0_) * i / 4.0;
      body_ << "<text x=\"" << px(xv) << "\" y=\"" << kH - kB + 14 << "\" text-anchor=\"middle\" font-size=\"10\">"
            << num(xv) << "</text>\n";
      body_ << "<text x=\"" << kL - 4 << "\" y=\"" << py(yv) + 3 << "\" text-anchor=\"end\" font-size=\"10\">" << num(yv)
            << "</text>\n";
    }
  }

  void polyline(const std::vector<double>& xs, const std::vector<double>& ys, const std::string& color,
                double width = 1.5) {
    if (xs.empty()) return;
    body_ << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"" << width << "\" points=\"";
    for (std::size_t i = 0; i < xs.size(); ++i) body_ << px(xs[i]) << "," << py(ys[i]) << " ";
    body_ << "\"/>\n";
  }

  void band(const std::vector<double>& xs, const std::vector<double>& lo, const std::vector<double>& hi,
            const std::string& color) {
    if (xs.empty()) return;
    body_ << "<polygon fill=\"" << color << "\" fill-opacity=\"0.3\" stroke=\"none\" points=\"";
    for (std::size_t i = 0; i < xs.size(); ++i) body_ << px(xs[i]) << "," << py(hi[i]) << " ";
    for (std::size_t i = xs.size(); i-- > 0;) body_ << px(xs[i]) << "," << py(lo[i]) << " ";
    body_ << "\"/>\n";
  }

  void dot(double x, double y, const std::string& color) {
    body_ << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"2\" fill=\"" << color << "\"/>\n";
  }

  void rect(double xa, double xb, double ya, double yb, const std::string& color) {
    body_ << "<rect x=\"" << px(std::min(xa, xb)) << "\" y=\"" << py(std::max(ya, yb)) << "\" width=\""
          << std::abs(px(xb) - px(xa)) << "\" height=\"" << std::abs(py(ya) - py(yb)) << "\" fill=\"" << color
          << "\" stroke=\"#333\" stroke-width=\"0.5\"/>\n";
  }

  void line(double xa, double ya, double xb, double yb, const std::string& color) {
    body_ << "<line x1=\"" << px(xa) << "\" y1=\"" << py(ya) << "\" x2=\"" << px(xb) << "\" y2=\"" << py(yb)
          << "\" stroke=\"" << color << "\"/>\n";
  }

  std::string str() const {
    std::ostringstream os;
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
       << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 "
       << kW << " " << kH << "\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << body_.str() << "</svg>\n";
    return os.str();
  }

 private:
  static constexpr int kW = 640, kH = 400, kL = 60, kR = 20, kT = 30, kB = 40;
  double px(double x) const { return kL + (x - x0_) / (x1_ - x0_) * (kW - kL - kR); }
  double py(double y) const { return kH - kB - (y - y0_) / (y1_ - y0_) * (kH - kT - kB); }

  double x0_, x1_, y0_, y1_;
  std::ostringstream body_;
};

std::pair<double, double> padded_range(double lo, double hi) {
  if (!(hi > lo)) return {lo - 1.0, hi + 1.0};
  const double pad = 0.05 * (hi - lo);
  return {lo - pad, hi + pad};
}

// Forecast band from non-overlapping origins for one vehicle, with the observed series.
std::string band_plot(const std::vector<const ForecastPoint*>& pts, const std::string& title) {
  std::map<int, double> observed;
  std::map<int, std::vector<const ForecastPoint*>> by_origin;
  for (const auto* p : pts) {
    observed[p->target_week] = p->truth_ah;
    by_origin[p->origin_week].push_back(p);
  }
  double lo = 1e300, hi = -1e300;
  for (const auto* p : pts) {
    lo = std::min({lo, p->lower_ah, p->truth_ah});
    hi = std::max({hi, p->upper_ah, p->truth_ah});
  }
  const auto [ylo, yhi] = padded_range(lo, hi);
  Plot plot(title, "week", "capacity (Ah)", observed.begin()->first, observed.rbegin()->first, ylo, yhi);
  std::vector<double> ox, oy;
  for (const auto& [w, c] : observed) {
    ox.push_back(w);
    oy.push_back(c);
  }
  plot.polyline(ox, oy, "#222");
  const int span = pts.front()->horizon > 0 ? static_cast<int>(by_origin.begin()->second.size()) : 1;
  int next = by_origin.begin()->first;
  for (const auto& [origin, list] : by_origin) {
    if (origin < next) continue;
    next = origin + std::max(1, span);
    std::vector<double> xs, m, l, u;
    for (const auto* p : list) {
      xs.push_back(p->target_week);
      m.push_back(p->mean_ah);
      l.push_back(p->lower_ah);
      u.push_back(p->upper_ah);
    }
    plot.band(xs, l, u, "#3b7dd8");
    plot.polyline(xs, m, "#d62728");
  }
  return plot.str();
}

std::string scatter_plot(const std::vector<const ForecastPoint*>& pts, const std::string& title) {
  double lo = 1e300, hi = -1e300;
  for (const auto* p : pts) {
    lo = std::min({lo, p->truth_ah, p->mean_ah});
    hi = std::max({hi, p->truth_ah, p->mean_ah});
  }
  const auto [a, b] = padded_range(lo, hi);
  Plot plot(title, "true capacity (Ah)", "predicted capacity (Ah)", a, b, a, b);
  plot.line(a, a, b, b, "#999");
  for (const auto* p : pts) plot.dot(p->truth_ah, p->mean_ah, "#1f77b4");
  return plot.str();
}

std::string histogram_plot(const std::vector<const ForecastPoint*>& pts, const std::string& title) {
  std::vector<double> err;
  for (const auto* p : pts) err.push_back(p->mean_ah - p->truth_ah);
  const auto [mn, mx] = std::minmax_element(err.begin(), err.end());
  const auto [a, b] = padded_range(*mn, *mx);
  const int bins = 30;
  std::vector<int> counts(bins, 0);
  for (const double e : err) counts[static_cast<std::size_t>(std::clamp(int((e - a) / (b - a) * bins), 0, bins - 1))]++;
  Plot plot(title, "prediction error (Ah)", "count", a, b, 0, *std::max_element(counts.begin(), counts.end()) * 1.1);
  for (int i = 0; i < bins; ++i) {
    plot.rect(a + (b - a) * i / bins, a + (b - a) * (i + 1) / bins, 0, counts[static_cast<std::size_t>(i)], "#8fbc8f");
  }
  return plot.str();
}

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t i = static_cast<std::size_t>(pos);
  const double frac = pos - static_cast<double>(i);
  return i + 1 < v.size() ? v[i] * (1 - frac) + v[i + 1] * frac : v[i];
}

// Absolute-error box plots, one box per history length.
std::string box_plot(const std::map<dg::Index, std::vector<double>>& errors, const std::string& title) {
  double hi = 0.0;
  for (const auto& [l, e] : errors) hi = std::max(hi, *std::max_element(e.begin(), e.end()));
  Plot plot(title, "history length (weeks)", "absolute error (Ah)", 0, static_cast<double>(errors.size()) + 1, 0,
            hi * 1.1 + 1e-9);
  int slot = 1;
  for (const auto& [l, e] : errors) {
    const double q1 = quantile(e, 0.25), q2 = quantile(e, 0.5), q3 = quantile(e, 0.75);
    const double lo = *std::min_element(e.begin(), e.end()), top = *std::max_element(e.begin(), e.end());
    plot.rect(slot - 0.3, slot + 0.3, q1, q3, "#f4a261");
    plot.line(slot - 0.3, q2, slot + 0.3, q2, "#000");
    plot.line(slot, lo, slot, q1, "#000");
    plot.line(slot, q3, slot, top, "#000");
    ++slot;
  }
  return plot.str();
}

}  // namespace

std::vector<std::string> emit_report(const MetricsReport& report, const std::string& out_dir) {
  const fs::path root(out_dir);
  std::error_code ec;
  fs::create_directories(root / "forecasts", ec);
  fs::create_directories(root / "plots", ec);
  if (ec) fail(ErrorKind::io, "cannot create " + out_dir + ": " + ec.message());
  std::vector<std::string> written;

  write_file(root / "metrics.json", metrics_to_json(report.rows));
  written.push_back("metrics.json");
  write_file(root / "fold_logs.json", fold_logs_json(report.logs));
  written.push_back("fold_logs.json");

  {
    std::ofstream out(root / "trajectories.csv", std::ios::binary);
    if (!out) fail(ErrorKind::io, "cannot write trajectories.csv");
    std::vector<std::string> header{"variant", "feature_set", "horizon", "fold", "vehicle_id",
                                    "origin_week", "target_week", "truth_ah", "reference_ah"};
    const std::size_t n = report.points.empty() ? 0 : report.points.front().trajectories_ah.size();
    for (std::size_t i = 0; i < n; ++i) header.push_back("traj_" + std::to_string(i));
    csv::write_row(out, header);
    for (const auto& p : report.points) {
      std::vector<std::string> f{p.variant, p.feature_set, std::to_string(p.horizon), std::to_string(p.fold),
                                 p.vehicle_id, std::to_string(p.origin_week), std::to_string(p.target_week),
                                 csv::format_double(p.truth_ah), csv::format_double(p.reference_ah)};
      for (const double v : p.trajectories_ah) f.push_back(csv::format_double(v));
      csv::write_row(out, f);
    }
    written.push_back("trajectories.csv");
  }

  using RunKey = std::tuple<std::string, std::string, dg::Index>;
  std::map<RunKey, std::map<VehicleId, std::vector<const ForecastPoint*>>> runs;
  std::map<std::pair<std::string, std::string>, std::map<dg::Index, std::vector<double>>> abs_errors;
  for (const auto& p : report.points) {
    runs[{p.feature_set, p.variant, p.horizon}][p.vehicle_id].push_back(&p);
    abs_errors[{p.feature_set, p.variant}][p.horizon].push_back(std::abs(p.mean_ah - p.truth_ah));
  }
  for (const auto& [key, vehicles] : runs) {
    const auto& [set, variant, l] = key;
    const std::string tag = safe_name(set + "_" + variant + "_L" + std::to_string(l));
    std::vector<const ForecastPoint*> all;
    for (const auto& [id, pts] : vehicles) {
      const std::string name = "forecasts/" + tag + "_" + safe_name(id) + ".csv";
      std::ofstream out(root / name, std::ios::binary);
      if (!out) fail(ErrorKind::io, "cannot write " + name);
      csv::write_row(out, {"vehicle_id", "week", "mean_ah", "std_ah", "lower95_ah", "upper95_ah", "origin_week",
                           "true_ah", "fold"});
      for (const auto* p : pts) {
        csv::write_row(out, {p->vehicle_id, std::to_string(p->target_week), csv::format_double(p->mean_ah),
                             csv::format_double(p->std_ah), csv::format_double(p->lower_ah),
                             csv::format_double(p->upper_ah), std::to_string(p->origin_week),
                             csv::format_double(p->truth_ah), std::to_string(p->fold)});
      }
      written.push_back(name);
      const std::string plot = "plots/band_" + tag + "_" + safe_name(id) + ".svg";
      write_file(root / plot, band_plot(pts, id + " (" + set + ", " + variant + ", L=" + std::to_string(l) + ")"));
      written.push_back(plot);
      all.insert(all.end(), pts.begin(), pts.end());
    }
    write_file(root / ("plots/scatter_" + tag + ".svg"), scatter_plot(all, "predicted vs true, " + tag));
    written.push_back("plots/scatter_" + tag + ".svg");
    write_file(root / ("plots/error_hist_" + tag + ".svg"), histogram_plot(all, "prediction error, " + tag));
    written.push_back("plots/error_hist_" + tag + ".svg");
  }
  for (const auto& [key, errors] : abs_errors) {
    const std::string name = "plots/abs_error_box_" + safe_name(key.first + "_" + key.second) + ".svg";
    write_file(root / name, box_plot(errors, "absolute error, " + key.first + " / " + key.second));
    written.push_back(name);
  }
  return written;
}

namespace {

double real_field(const std::string& f, const std::string& path) {
  double v = 0.0;
  if (!csv::parse_double(f, v)) fail(ErrorKind::schema, path + ": bad number '" + f + "'");
  return v;
}

long long int_field(const std::string& f, const std::string& path) {
  long long v = 0;
  if (!csv::parse_int64(f, v)) fail(ErrorKind::schema, path + ": bad integer '" + f + "'");
  return v;
}

}  // namespace

std::vector<MetricsRow> recompute_from_trajectories(const std::string& path, double z) {
  const auto table = csv::read_file(path);
  const std::vector<std::string> fixed{"variant", "feature_set", "horizon", "fold", "vehicle_id",
                                       "origin_week", "target_week", "truth_ah", "reference_ah"};
  if (table.header.size() < fixed.size() ||
      !std::equal(fixed.begin(), fixed.end(), table.header.begin())) {
    fail(ErrorKind::schema, path + ": unexpected trajectory header");
  }
  std::vector<ForecastPoint> points;
  for (const auto& row : table.rows) {
    if (row.size() != table.header.size()) fail(ErrorKind::schema, path + ": ragged row");
    ForecastPoint p;
    p.variant = row[0];
    p.feature_set = row[1];
    p.horizon = int_field(row[2], path);
    p.fold = static_cast<int>(int_field(row[3], path));
    p.vehicle_id = row[4];
    p.origin_week = static_cast<int>(int_field(row[5], path));
    p.target_week = static_cast<int>(int_field(row[6], path));
    p.truth_ah = real_field(row[7], path);
    p.reference_ah = real_field(row[8], path);
    double sum = 0.0;
    for (std::size_t i = fixed.size(); i < row.size(); ++i) {
      p.trajectories_ah.push_back(real_field(row[i], path));
      sum += p.trajectories_ah.back();
    }
    const double n = static_cast<double>(p.trajectories_ah.size());
    p.mean_ah = sum / n;
    double sq = 0.0;
    for (const double v : p.trajectories_ah) sq += (v - p.mean_ah) * (v - p.mean_ah);
    p.std_ah = std::sqrt(sq / n);
    p.lower_ah = p.mean_ah - z * p.std_ah;
    p.upper_ah = p.mean_ah + z * p.std_ah;
    points.push_back(std::move(p));
  }
  return summarize_points(points);
}

}  // namespace cdua::evalbench
