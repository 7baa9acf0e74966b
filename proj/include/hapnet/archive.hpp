#pragma once

// Single-file named-array archive.
//
// Layout (all integers little-endian):
//   "HAPNETAR"                       8-byte magic
//   u32 version                      currently 1
//   u64 meta_len, meta bytes         UTF-8 JSON document (config, counters)
//   u64 count                        number of arrays
//   count x {
//     u32 name_len, name bytes
//     u8  dtype                      1 = float64
//     u32 ndim, u64 dims[ndim]
//     float64 data[prod(dims)]       row-major, little-endian
//   }
// Arrays are written in name order, so equal contents give equal bytes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hapnet/autograd.hpp"

namespace hapnet {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedArray {
  ag::Shape shape;
  std::vector<double> data;
  bool operator==(const NamedArray&) const = default;
};

using NamedArrays = std::map<std::string, NamedArray>;

struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  NamedArrays arrays;
};

std::vector<std::uint8_t> encode_archive(const Archive& archive);
Archive decode_archive(const std::vector<std::uint8_t>& bytes);
void save_archive(const Archive& archive, const std::filesystem::path& path);
Archive load_archive(const std::filesystem::path& path);

}  // namespace hapnet
