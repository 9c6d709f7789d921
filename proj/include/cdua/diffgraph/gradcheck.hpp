#pragma once

// Central finite-difference check of analytic gradients. The checked function
// maps a ParamStore to one output node; the scalar probed is <w, output> for
// a fixed random w, so every output element contributes.

#include <cmath>
#include <random>
#include <string>

#include "cdua/diffgraph/tape.hpp"

namespace cdua::dg {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  Index checked = 0;
};

/// `fn(tape)` must rebuild the computation from parameters obtained through
/// tape.param(store[...]). Relative error per element is
/// |a - n| / max(1, |a|, |n|); the maximum over all elements is reported.
template <typename F>
GradCheckResult finite_diff_check(ParamStore<double>& store, F&& fn, double h = 1e-5, std::uint64_t seed = 7) {
  Vec<double> weights;
  {
    store.zero_grad();
    Tape<double> tape(true);
    const Var out = fn(tape);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    weights.resize(tape.value(out).size());
    for (Index i = 0; i < weights.size(); ++i) weights[i] = dist(rng);
    tape.backward(out, weights);
  }
  const auto probe = [&]() {
    Tape<double> tape(false);
    const Var out = fn(tape);
    return tape.value(out).dot(weights);
  };

  GradCheckResult result;
  for (std::size_t p = 0; p < store.size(); ++p) {
    auto& param = store.at(p);
    for (Index i = 0; i < param.size(); ++i) {
      const double saved = param.value.data[i];
      param.value.data[i] = saved + h;
      const double up = probe();
      param.value.data[i] = saved - h;
      const double down = probe();
      param.value.data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = param.value.grad[i];
      const double err =
          std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
      ++result.checked;
      if (err > result.max_rel_error || result.worst_index < 0) {
        result.max_rel_error = std::max(result.max_rel_error, err);
        result.worst_param = param.name;
        result.worst_index = i;
        result.analytic = analytic;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace cdua::dg
