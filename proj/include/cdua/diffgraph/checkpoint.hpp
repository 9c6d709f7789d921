#pragma once

// Checkpoint layout: `manifest.json` lists every parameter (name, shape,
// dtype, byte offset, byte length) plus the blob size and checksum;
// `weights.bin` holds the values as little-endian 32-bit floats.

#include <cstdint>
#include <string>
#include <vector>

#include "cdua/diffgraph/tape.hpp"

namespace cdua::dg {

struct TensorRecord {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;  // bytes into weights.bin
  std::uint64_t bytes = 0;
};

struct WeightsFile {
  std::vector<TensorRecord> tensors;
  std::vector<float> values;  // concatenated in manifest order
};

/// Writes manifest.json and weights.bin into `dir` (created if missing).
void write_weights(const std::string& dir, const std::vector<TensorRecord>& tensors,
                   const std::vector<float>& values);

/// Reads and verifies both files. Throws ErrorKind::io for missing files and
/// ErrorKind::schema for length or checksum mismatches.
WeightsFile read_weights(const std::string& dir);

template <typename S>
void save_params(const ParamStore<S>& store, const std::string& dir) {
  std::vector<TensorRecord> tensors;
  std::vector<float> values;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store.at(i);
    TensorRecord rec{p.name, p.shape(), values.size() * sizeof(float),
                     static_cast<std::uint64_t>(p.size()) * sizeof(float)};
    for (Index k = 0; k < p.size(); ++k) values.push_back(static_cast<float>(p.value.data[k]));
    tensors.push_back(std::move(rec));
  }
  write_weights(dir, tensors, values);
}

/// Loads values into an already-built store; names and shapes must match.
template <typename S>
void load_params(ParamStore<S>& store, const std::string& dir) {
  const auto file = read_weights(dir);
  if (file.tensors.size() != store.size()) {
    fail(ErrorKind::schema, "checkpoint holds " + std::to_string(file.tensors.size()) + " tensors, model expects " +
                                std::to_string(store.size()));
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& p = store.at(i);
    const auto& rec = file.tensors[i];
    if (rec.name != p.name || rec.shape != p.shape()) {
      fail(ErrorKind::schema, "checkpoint tensor '" + rec.name + "' " + shape_string(rec.shape) +
                                  " does not match model parameter '" + p.name + "' " + shape_string(p.shape()));
    }
    const std::size_t first = rec.offset / sizeof(float);
    for (Index k = 0; k < p.size(); ++k) p.value.data[k] = static_cast<S>(file.values[first + static_cast<std::size_t>(k)]);
  }
}

/// Rounds every parameter to the 32-bit values a checkpoint would store.
template <typename S>
void round_to_storage(ParamStore<S>& store) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& d = store.at(i).value.data;
    for (Index k = 0; k < d.size(); ++k) d[k] = static_cast<S>(static_cast<float>(d[k]));
  }
}

}  // namespace cdua::dg
