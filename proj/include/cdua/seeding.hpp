#pragma once

#include <cstdint>
#include <string_view>

namespace cdua {

/// Stable 64-bit seed for a named purpose under one master seed.
/// Identical (master, label) pairs map to identical seeds on every platform.
std::uint64_t derive_seed(std::uint64_t master, std::string_view label);

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace cdua
