#pragma once

#include <cmath>

#include "cdua/diffgraph/tape.hpp"

namespace cdua::dg {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update from the gradients held in the store.
/// Throws ErrorKind::numeric, leaving every parameter untouched, when any
/// gradient is non-finite.
template <typename S>
void adam_step(ParamStore<S>& store, const AdamConfig& config) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store.at(i);
    if (!p.value.grad.allFinite()) {
      Index bad = 0;
      while (std::isfinite(static_cast<double>(p.value.grad[bad]))) ++bad;
      fail(ErrorKind::numeric, "non-finite gradient in '" + p.name + "' at element " + std::to_string(bad) +
                                   " (step " + std::to_string(store.step + 1) + ")");
    }
  }
  ++store.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(store.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(store.step));
  const S b1 = static_cast<S>(config.beta1), b2 = static_cast<S>(config.beta2);
  const S lr = static_cast<S>(config.learning_rate);
  const S eps = static_cast<S>(config.epsilon);
  const S inv_c1 = static_cast<S>(1.0 / c1), inv_c2 = static_cast<S>(1.0 / c2);
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& p = store.at(i);
    const auto& g = p.value.grad;
    p.m = b1 * p.m + (S(1) - b1) * g;
    p.v = b2 * p.v + (S(1) - b2) * g.cwiseProduct(g);
    p.value.data.array() -= lr * (p.m.array() * inv_c1) / ((p.v.array() * inv_c2).sqrt() + eps);
  }
}

}  // namespace cdua::dg
