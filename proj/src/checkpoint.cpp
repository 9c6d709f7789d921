#include "cdua/diffgraph/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace cdua::dg {

namespace {

std::uint64_t fnv1a(const std::vector<unsigned char>& bytes) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::vector<unsigned char> to_le_bytes(const std::vector<float>& values) {
  std::vector<unsigned char> out(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) out[4 * i + static_cast<std::size_t>(b)] = static_cast<unsigned char>(bits >> (8 * b));
  }
  return out;
}

}  // namespace

void write_weights(const std::string& dir, const std::vector<TensorRecord>& tensors,
                   const std::vector<float>& values) {
  std::filesystem::create_directories(dir);
  const auto bytes = to_le_bytes(values);
  nlohmann::json manifest;
  manifest["format"] = "cdua-weights";
  manifest["version"] = 1;
  manifest["dtype"] = "float32";
  manifest["byte_order"] = "little";
  manifest["total_bytes"] = bytes.size();
  manifest["fnv1a64"] = fnv1a(bytes);
  auto& list = manifest["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors) {
    list.push_back({{"name", t.name}, {"shape", t.shape}, {"dtype", "float32"}, {"offset", t.offset}, {"bytes", t.bytes}});
  }
  std::ofstream m(dir + "/manifest.json");
  if (!m) fail(ErrorKind::io, "cannot write " + dir + "/manifest.json");
  m << manifest.dump(2) << '\n';
  std::ofstream w(dir + "/weights.bin", std::ios::binary);
  if (!w) fail(ErrorKind::io, "cannot write " + dir + "/weights.bin");
  w.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

WeightsFile read_weights(const std::string& dir) {
  std::ifstream m(dir + "/manifest.json");
  if (!m) fail(ErrorKind::io, "missing " + dir + "/manifest.json");
  std::ifstream w(dir + "/weights.bin", std::ios::binary);
  if (!w) fail(ErrorKind::io, "missing " + dir + "/weights.bin");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(w)), std::istreambuf_iterator<char>());

  WeightsFile file;
  try {
    const auto manifest = nlohmann::json::parse(m);
    if (manifest.at("dtype") != "float32") fail(ErrorKind::schema, "unsupported dtype");
    const auto total = manifest.at("total_bytes").get<std::uint64_t>();
    if (total != bytes.size()) {
      fail(ErrorKind::schema, "weights.bin has " + std::to_string(bytes.size()) + " bytes, manifest declares " +
                                  std::to_string(total));
    }
    if (manifest.at("fnv1a64").get<std::uint64_t>() != fnv1a(bytes)) {
      fail(ErrorKind::schema, "weights.bin checksum mismatch");
    }
    std::uint64_t expected_offset = 0;
    for (const auto& t : manifest.at("tensors")) {
      TensorRecord rec;
      rec.name = t.at("name").get<std::string>();
      rec.shape = t.at("shape").get<Shape>();
      rec.offset = t.at("offset").get<std::uint64_t>();
      rec.bytes = t.at("bytes").get<std::uint64_t>();
      if (rec.offset != expected_offset || rec.bytes != static_cast<std::uint64_t>(numel(rec.shape)) * 4 ||
          rec.offset + rec.bytes > total) {
        fail(ErrorKind::schema, "manifest entry '" + rec.name + "' has inconsistent offset or length");
      }
      expected_offset += rec.bytes;
      file.tensors.push_back(std::move(rec));
    }
    if (expected_offset != total) fail(ErrorKind::schema, "manifest tensors do not cover weights.bin");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, std::string("manifest.json: ") + e.what());
  }
  file.values.resize(bytes.size() / 4);
  for (std::size_t i = 0; i < file.values.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[4 * i + static_cast<std::size_t>(b)]) << (8 * b);
    file.values[i] = std::bit_cast<float>(bits);
  }
  return file;
}

}  // namespace cdua::dg
