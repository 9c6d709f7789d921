#pragma once

// Denoising diffusion over normalized capacity sequences: schedule, forward
// corruption, epsilon-prediction loss, training loop and reverse sampler.
// Schedule and sampler arithmetic is double precision whatever the network's
// scalar type.

#include <algorithm>
#include <cmath>
#include <exception>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Core>

#include "cdua/diffgraph/ops.hpp"
#include "cdua/diffgraph/optim.hpp"
#include "cdua/diffgraph/tape.hpp"
#include "cdua/errors.hpp"

namespace cdua::diffusion {

using dg::Index;
using dg::Var;
using Rng = std::mt19937_64;

/// Index t runs 1..T; beta(t) is element t-1 of the arrays.
struct NoiseSchedule {
  int steps = 0;
  Eigen::VectorXd beta, alpha, alpha_bar;

  double beta_at(int t) const { return beta[t - 1]; }
  double alpha_at(int t) const { return alpha[t - 1]; }
  double alpha_bar_at(int t) const { return alpha_bar[t - 1]; }
  double sigma_at(int t) const { return std::sqrt(beta[t - 1]); }
  void check_step(int t) const;
};

NoiseSchedule build_schedule(int steps = 700, double beta_start = 1e-4, double beta_end = 2e-2);

/// y_t = sqrt(abar_t) y0 + sqrt(1 - abar_t) eps.
Eigen::VectorXd forward_sample(const NoiseSchedule& s, const Eigen::VectorXd& y0, int t, const Eigen::VectorXd& eps);

/// y0 recovered from y_t and the exact noise.
Eigen::VectorXd reconstruct_x0(const NoiseSchedule& s, const Eigen::VectorXd& y_t, int t, const Eigen::VectorXd& eps);

/// y_{t-1} = (y_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t) + sigma_t z, with z ignored at t = 1.
Eigen::VectorXd reverse_step(const NoiseSchedule& s, const Eigen::VectorXd& y_t, int t, const Eigen::VectorXd& eps_hat,
                             const Eigen::VectorXd& z);

/// One supervised example: a history block and the future to forecast.
struct SupervisedWindow {
  std::string vehicle_id;
  int first_week = 0;         // week of the first history row
  Index history_len = 0;
  Index input_dim = 0;
  Eigen::VectorXd x;          // history_len x input_dim, row-major
  Eigen::VectorXd y0;         // horizon targets; NaN where masked
  Eigen::VectorXd mask;       // 1 valid, 0 masked
  double anchor = 0.0;        // normalized capacity at the last history week
  std::vector<int> target_weeks;

  Index horizon() const { return y0.size(); }
  bool full() const { return mask.size() > 0 && (mask.array() > 0.0).all(); }
};

struct ForecastEnsemble {
  Eigen::MatrixXd trajectories;  // N x H
  Eigen::VectorXd mean, std, lower, upper;
};

/// Mean, population std and mean -/+ z std per column.
ForecastEnsemble summarize(Eigen::MatrixXd trajectories, double z = 1.96);

struct TrainConfig {
  int epochs = 1000;
  int batch_size = 16;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct TrainResult {
  std::vector<double> epoch_loss;  // mean batch loss per epoch
  std::int64_t steps = 0;
};

namespace detail {

template <typename S>
dg::Vec<S> stack_inputs(const std::vector<const SupervisedWindow*>& batch) {
  const Index n = batch.front()->x.size();
  dg::Vec<S> x(static_cast<Index>(batch.size()) * n);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b]->x.size() != n) fail(ErrorKind::validation, "windows in one batch differ in shape");
    x.segment(static_cast<Index>(b) * n, n) = batch[b]->x.cast<S>();
  }
  return x;
}

}  // namespace detail

/// Builds the masked epsilon-prediction loss for one batch on `tape`. Draws,
/// per row, t uniform on [1, T] and then H standard normals. Masked targets
/// are replaced by zero before corruption so they cannot reach the network.
template <typename Model, typename S>
Var diffusion_loss(const Model& model, dg::Tape<S>& tape, const std::vector<const SupervisedWindow*>& batch,
                   const NoiseSchedule& schedule, Rng& rng) {
  if (batch.empty()) fail(ErrorKind::validation, "diffusion_loss: empty batch");
  const Index h = batch.front()->horizon();
  const Index rows = static_cast<Index>(batch.size());
  std::uniform_int_distribution<int> step(1, schedule.steps);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<int> steps(batch.size());
  dg::Vec<S> y_t(rows * h), eps(rows * h), mask(rows * h);
  for (Index b = 0; b < rows; ++b) {
    const auto& w = *batch[static_cast<std::size_t>(b)];
    if (w.horizon() != h) fail(ErrorKind::validation, "diffusion_loss: horizon differs within batch");
    const int t = step(rng);
    steps[static_cast<std::size_t>(b)] = t;
    const double a = std::sqrt(schedule.alpha_bar_at(t)), s = std::sqrt(1.0 - schedule.alpha_bar_at(t));
    for (Index k = 0; k < h; ++k) {
      const double e = normal(rng);
      const bool valid = w.mask[k] != 0.0;
      eps[b * h + k] = static_cast<S>(e);
      mask[b * h + k] = valid ? S(1) : S(0);
      y_t[b * h + k] = static_cast<S>(a * (valid ? w.y0[k] : 0.0) + s * e);
    }
  }
  if (mask.sum() == S(0)) fail(ErrorKind::validation, "diffusion_loss: every target in the batch is masked");
  const Var ctx = model.encode(tape, detail::stack_inputs<S>(batch), rows);
  const Var eps_hat = model.predict_noise(tape, tape.constant({rows, h}, std::move(y_t)), steps, schedule.steps, ctx);
  return dg::masked_mse(tape, eps_hat, eps, mask);
}

/// Zeroes gradients, evaluates the loss and back-propagates into the store.
template <typename Model>
double loss_and_grad(Model& model, const std::vector<const SupervisedWindow*>& batch, const NoiseSchedule& schedule,
                     Rng& rng) {
  using S = typename std::remove_reference_t<decltype(model.store)>::scalar_type;
  model.store.zero_grad();
  dg::Tape<S> tape(true);
  const Var loss = diffusion_loss(model, tape, batch, schedule, rng);
  const double value = static_cast<double>(tape.value(loss)[0]);
  if (!std::isfinite(value)) return value;
  tape.backward(loss);
  return value;
}

/// Adam over shuffled mini-batches. A non-finite loss or gradient restores the
/// parameters of the last completed epoch and throws ErrorKind::training_abort.
template <typename Model>
TrainResult train(Model& model, const std::vector<SupervisedWindow>& windows, const NoiseSchedule& schedule,
                  const TrainConfig& config, const std::function<void(int, double)>& on_epoch = {}) {
  if (windows.empty()) fail(ErrorKind::validation, "train: no windows");
  if (config.batch_size < 1 || config.epochs < 0) fail(ErrorKind::validation, "train: invalid batch size or epochs");
  using S = typename std::remove_reference_t<decltype(model.store)>::scalar_type;
  auto& store = model.store;
  const auto snapshot = [&store] {
    std::vector<dg::Vec<S>> values;
    for (std::size_t i = 0; i < store.size(); ++i) values.push_back(store.at(i).value.data);
    return values;
  };
  auto last_good = snapshot();
  const auto abort = [&](int epoch, const std::string& why) {
    for (std::size_t i = 0; i < store.size(); ++i) store.at(i).value.data = last_good[i];
    fail(ErrorKind::training_abort, "epoch " + std::to_string(epoch) + ": " + why +
                                        "; parameters restored to the end of the previous epoch");
  };

  Rng rng(config.seed);
  const dg::AdamConfig adam{config.learning_rate, 0.9, 0.999, 1e-8};
  std::vector<std::size_t> order(windows.size());
  TrainResult result;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      std::vector<const SupervisedWindow*> batch;
      for (std::size_t k = start; k < std::min(order.size(), start + static_cast<std::size_t>(config.batch_size)); ++k) {
        if (windows[order[k]].mask.sum() > 0.0) batch.push_back(&windows[order[k]]);
      }
      if (batch.empty()) continue;
      const double loss = loss_and_grad(model, batch, schedule, rng);
      if (!std::isfinite(loss)) abort(epoch, "non-finite loss");
      try {
        dg::adam_step(store, adam);
      } catch (const Error& e) {
        abort(epoch, e.what());
      }
      total += loss;
      ++batches;
      ++result.steps;
    }
    if (batches == 0) fail(ErrorKind::validation, "train: every window is fully masked");
    result.epoch_loss.push_back(total / batches);
    last_good = snapshot();
    if (on_epoch) on_epoch(epoch, result.epoch_loss.back());
  }
  return result;
}

struct SamplerConfig {
  int trajectories = 40;
  double z = 1.96;
  int threads = 1;
  Index max_rows = 640;  // trajectories evaluated per network call
};

/// Runs the reverse process for every window. Trajectory i of window w uses
/// its own generator seeded with seeds[w] + i, so results do not depend on how
/// windows are batched or spread over threads.
template <typename Model>
std::vector<ForecastEnsemble> sample_ensembles(const Model& model, const NoiseSchedule& schedule,
                                               const std::vector<const SupervisedWindow*>& windows,
                                               const std::vector<std::uint64_t>& seeds, const SamplerConfig& config) {
  using S = typename std::remove_reference_t<decltype(model.store)>::scalar_type;
  if (seeds.size() != windows.size()) fail(ErrorKind::validation, "sample_ensembles: one seed per window");
  if (config.trajectories < 1) fail(ErrorKind::validation, "sample_ensembles: need at least one trajectory");
  std::vector<ForecastEnsemble> out(windows.size());
  if (windows.empty()) return out;
  const Index n = config.trajectories;
  const Index h = windows.front()->horizon();
  const std::size_t per_chunk = static_cast<std::size_t>(std::max<Index>(1, config.max_rows / n));

  const auto run_chunk = [&](std::size_t first, std::size_t last) {
    std::vector<const SupervisedWindow*> chunk(windows.begin() + static_cast<std::ptrdiff_t>(first),
                                               windows.begin() + static_cast<std::ptrdiff_t>(last));
    const Index w = static_cast<Index>(chunk.size());
    const Index rows = w * n;
    dg::Vec<S> ctx_rows;
    dg::Shape ctx_shape;
    {
      dg::Tape<S> tape(false);
      const Var ctx = model.encode(tape, detail::stack_inputs<S>(chunk), w);
      const auto& cs = tape.shape(ctx);
      const Index per = cs[1] * cs[2];
      ctx_shape = {rows, cs[1], cs[2]};
      ctx_rows.resize(rows * per);
      for (Index i = 0; i < w; ++i)
        for (Index j = 0; j < n; ++j) ctx_rows.segment((i * n + j) * per, per) = tape.value(ctx).segment(i * per, per);
    }
    std::vector<Rng> rngs;
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd y(rows, h);
    for (Index i = 0; i < w; ++i) {
      for (Index j = 0; j < n; ++j) {
        rngs.emplace_back(seeds[first + static_cast<std::size_t>(i)] + static_cast<std::uint64_t>(j));
        for (Index k = 0; k < h; ++k) y(i * n + j, k) = normal(rngs.back());
      }
    }
    Eigen::VectorXd z(h), eps_hat(h);
    for (int t = schedule.steps; t >= 1; --t) {
      dg::Tape<S> tape(false);
      dg::Vec<S> yv(rows * h);
      for (Index r = 0; r < rows; ++r)
        for (Index k = 0; k < h; ++k) yv[r * h + k] = static_cast<S>(y(r, k));
      const Var ctx = tape.constant(ctx_shape, ctx_rows);
      const Var e = model.predict_noise(tape, tape.constant({rows, h}, std::move(yv)),
                                        std::vector<int>(static_cast<std::size_t>(rows), t), schedule.steps, ctx);
      const auto& ev = tape.value(e);
      for (Index r = 0; r < rows; ++r) {
        for (Index k = 0; k < h; ++k) {
          eps_hat[k] = static_cast<double>(ev[r * h + k]);
          z[k] = t > 1 ? normal(rngs[static_cast<std::size_t>(r)]) : 0.0;
        }
        y.row(r) = reverse_step(schedule, y.row(r).transpose(), t, eps_hat, z).transpose();
      }
    }
    for (Index i = 0; i < w; ++i) out[first + static_cast<std::size_t>(i)] = summarize(y.middleRows(i * n, n), config.z);
  };

  std::vector<std::pair<std::size_t, std::size_t>> chunks;
  for (std::size_t s = 0; s < windows.size(); s += per_chunk) chunks.emplace_back(s, std::min(windows.size(), s + per_chunk));
  const std::size_t workers = std::min<std::size_t>(chunks.size(), static_cast<std::size_t>(std::max(1, config.threads)));
  if (workers <= 1) {
    for (const auto& [a, b] : chunks) run_chunk(a, b);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t wkr = 0; wkr < workers; ++wkr) {
    pool.emplace_back([&, wkr] {
      try {
        for (std::size_t c = wkr; c < chunks.size(); c += workers) run_chunk(chunks[c].first, chunks[c].second);
      } catch (...) {
        errors[wkr] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

/// One reverse-process trajectory (H values) for a single window.
template <typename Model>
Eigen::VectorXd sample_trajectory(const Model& model, const NoiseSchedule& schedule, const SupervisedWindow& window,
                                  std::uint64_t seed) {
  SamplerConfig cfg;
  cfg.trajectories = 1;
  return sample_ensembles(model, schedule, {&window}, {seed}, cfg).front().trajectories.row(0).transpose();
}

}  // namespace cdua::diffusion
