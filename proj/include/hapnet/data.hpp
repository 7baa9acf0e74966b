#pragma once

// Dataset ingestion (MFNet-style directory tree) and the synthetic RGB-T
// scene generator.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hapnet/autograd.hpp"

namespace hapnet {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RgbThermalSample {
  ag::Tensor rgb;      // [H, W, 3] in [0, 1]
  ag::Tensor thermal;  // [H, W, 3] in [0, 1]
  std::vector<std::uint8_t> labels;  // H*W, values < classes or 255
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::string id;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::map<std::string, std::vector<std::string>> splits;  // "train", "val", "test"
  std::vector<std::string> class_names;
  int class_count = 0;
  // Resize target (rows, cols); unset keeps native resolution.
  std::optional<std::pair<int, int>> target_size;

  const std::vector<std::string>& split(const std::string& name) const;
};

std::vector<std::string> mfnet_class_names();

// Layout: root/{rgb,thermal,labels}/<id>.png and root/splits/{train,val,test}.txt.
// Every listed id is checked for all three files. class_count = 9 for MFNet.
DatasetManifest load_mfnet(const std::filesystem::path& root, int class_count = 9,
                           std::optional<std::pair<int, int>> target_size = std::nullopt);

RgbThermalSample load_sample(const DatasetManifest& manifest, const std::string& id);
std::vector<RgbThermalSample> load_split(const DatasetManifest& manifest, const std::string& split);

struct SynthConfig {
  int rows = 64;
  int cols = 64;
  int classes = 4;  // K, including background class 0
};

// Deterministic in (seed, cfg): background class 0 plus 1-4 rectangles or
// ellipses of classes 1..K-1, drawn on a 4-pixel block grid. Pixel values are
// multiples of 1/255 so the PNG round trip is lossless.
RgbThermalSample synth_scene(std::uint64_t seed, const SynthConfig& cfg);

// Scene i uses seed derive(seed, i); ids are "synth_%05d".
std::vector<RgbThermalSample> synth_set(std::uint64_t seed, const SynthConfig& cfg, std::size_t count,
                                        std::size_t first_index = 0);

// Writes an MFNet-layout tree: train/val/test take consecutive scenes.
DatasetManifest write_synthetic_dataset(const std::filesystem::path& root, std::uint64_t seed,
                                        const SynthConfig& cfg, std::size_t train, std::size_t val,
                                        std::size_t test);

// Color per class; class 0 is black.
std::array<std::uint8_t, 3> palette_color(int cls);

// Image helpers (8-bit PNG).
void write_rgb_png(const std::filesystem::path& path, const ag::Tensor& image);
void write_label_png(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels, std::size_t rows,
                     std::size_t cols);
// Side by side: input RGB | ground-truth colors | prediction colors.
void write_overlay_png(const std::filesystem::path& path, const RgbThermalSample& sample,
                       const std::vector<std::uint8_t>& prediction);

}  // namespace hapnet
