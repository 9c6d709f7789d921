#pragma once

#include <cmath>

#include "cdua/diffgraph/tape.hpp"

namespace cdua::dg {

/// Interleaved sinusoidal encoding of one position: entry 2i is
/// sin(p / 10000^(2i/D)) and entry 2i+1 the matching cosine. D must be even.
template <typename S>
Vec<S> sinusoidal_encoding(double position, Index dim) {
  if (dim <= 0 || dim % 2 != 0) {
    fail(ErrorKind::validation, "sinusoidal_encoding: dimension must be positive and even, got " +
                                    std::to_string(dim));
  }
  Vec<S> out(dim);
  for (Index i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
    out[2 * i] = static_cast<S>(std::sin(position * freq));
    out[2 * i + 1] = static_cast<S>(std::cos(position * freq));
  }
  return out;
}

/// Encodings of positions 0..length-1, row-major length x dim.
template <typename S>
Vec<S> sinusoidal_table(Index length, Index dim) {
  Vec<S> out(length * dim);
  for (Index p = 0; p < length; ++p) out.segment(p * dim, dim) = sinusoidal_encoding<S>(static_cast<double>(p), dim);
  return out;
}

}  // namespace cdua::dg
