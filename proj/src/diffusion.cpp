#include "cdua/diffusion.hpp"

namespace cdua::diffusion {

void NoiseSchedule::check_step(int t) const {
  if (t < 1 || t > steps) {
    fail(ErrorKind::validation, "timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps) + "]");
  }
}

NoiseSchedule build_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) fail(ErrorKind::validation, "schedule: need at least one step");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || (steps > 1 && !(beta_start < beta_end)) ||
      beta_start > beta_end) {
    fail(ErrorKind::validation, "schedule: need 0 < beta_start < beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta.resize(steps);
  for (int i = 0; i < steps; ++i) {
    s.beta[i] = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (steps - 1.0);
  }
  s.alpha = 1.0 - s.beta.array();
  s.alpha_bar.resize(steps);
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) s.alpha_bar[i] = prod *= s.alpha[i];
  return s;
}

Eigen::VectorXd forward_sample(const NoiseSchedule& s, const Eigen::VectorXd& y0, int t, const Eigen::VectorXd& eps) {
  s.check_step(t);
  if (y0.size() != eps.size()) fail(ErrorKind::validation, "forward_sample: size mismatch");
  if (!y0.allFinite()) fail(ErrorKind::numeric, "forward_sample: non-finite y0");
  return std::sqrt(s.alpha_bar_at(t)) * y0 + std::sqrt(1.0 - s.alpha_bar_at(t)) * eps;
}

Eigen::VectorXd reconstruct_x0(const NoiseSchedule& s, const Eigen::VectorXd& y_t, int t, const Eigen::VectorXd& eps) {
  s.check_step(t);
  return (y_t - std::sqrt(1.0 - s.alpha_bar_at(t)) * eps) / std::sqrt(s.alpha_bar_at(t));
}

Eigen::VectorXd reverse_step(const NoiseSchedule& s, const Eigen::VectorXd& y_t, int t, const Eigen::VectorXd& eps_hat,
                             const Eigen::VectorXd& z) {
  s.check_step(t);
  if (eps_hat.size() != y_t.size() || z.size() != y_t.size()) fail(ErrorKind::validation, "reverse_step: size mismatch");
  const double coef = s.beta_at(t) / std::sqrt(1.0 - s.alpha_bar_at(t));
  Eigen::VectorXd out = (y_t - coef * eps_hat) / std::sqrt(s.alpha_at(t));
  if (t > 1) out += s.sigma_at(t) * z;
  return out;
}

ForecastEnsemble summarize(Eigen::MatrixXd trajectories, double z) {
  if (trajectories.rows() < 1) fail(ErrorKind::validation, "summarize: no trajectories");
  ForecastEnsemble e;
  e.mean = trajectories.colwise().mean().transpose();
  e.std = ((trajectories.rowwise() - e.mean.transpose()).array().square().colwise().mean()).sqrt().transpose();
  e.lower = e.mean - z * e.std;
  e.upper = e.mean + z * e.std;
  e.trajectories = std::move(trajectories);
  return e;
}

}  // namespace cdua::diffusion
