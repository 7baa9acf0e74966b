#include "hapnet/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "hapnet/rng.hpp"

namespace fs = std::filesystem;

namespace hapnet {

namespace {

const std::array<const char*, 3> kSplits{"train", "val", "test"};

std::vector<std::string> read_ids(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open split list " + file.string());
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.pop_back();
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

cv::Mat read_image(const fs::path& path, const std::string& id) {
  if (!fs::exists(path)) throw DataError("sample " + id + ": missing file " + path.string());
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw DataError("sample " + id + ": unreadable image " + path.string());
  if (m.depth() != CV_8U) throw DataError("sample " + id + ": " + path.string() + " is not 8-bit");
  return m;
}

// 8-bit image with 1, 3 or 4 channels -> [H, W, 3] tensor in RGB order.
ag::Tensor to_rgb_tensor(cv::Mat m) {
  if (m.channels() == 1) {
    cv::cvtColor(m, m, cv::COLOR_GRAY2RGB);
  } else if (m.channels() == 3) {
    cv::cvtColor(m, m, cv::COLOR_BGR2RGB);
  } else if (m.channels() == 4) {
    cv::cvtColor(m, m, cv::COLOR_BGRA2RGB);
  } else {
    throw DataError("unsupported channel count " + std::to_string(m.channels()));
  }
  const auto rows = static_cast<std::size_t>(m.rows), cols = static_cast<std::size_t>(m.cols);
  std::vector<double> v(rows * cols * 3);
  for (std::size_t y = 0; y < rows; ++y) {
    const auto* p = m.ptr<std::uint8_t>(static_cast<int>(y));
    for (std::size_t i = 0; i < cols * 3; ++i) v[y * cols * 3 + i] = p[i] / 255.0;
  }
  return ag::Tensor::from({rows, cols, 3}, std::move(v));
}

cv::Mat to_bgr_mat(const ag::Tensor& image) {
  const int rows = static_cast<int>(image.dim(0)), cols = static_cast<int>(image.dim(1));
  cv::Mat m(rows, cols, CV_8UC3);
  const auto d = image.data();
  for (int y = 0; y < rows; ++y) {
    auto* p = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < cols; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = d[(static_cast<std::size_t>(y) * cols + x) * 3 + c];
        p[x * 3 + (2 - c)] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  }
  return m;
}

void write_png(const fs::path& path, const cv::Mat& m) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m)) throw DataError("cannot write " + path.string());
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

const std::vector<std::string>& DatasetManifest::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) throw DataError("unknown split " + name);
  return it->second;
}

std::vector<std::string> mfnet_class_names() {
  return {"unlabeled", "car", "person", "bike", "curve", "car_stop", "guardrail", "color_cone", "bump"};
}

DatasetManifest load_mfnet(const fs::path& root, int class_count, std::optional<std::pair<int, int>> target_size) {
  if (class_count < 1 || class_count > 255) throw DataError("class count must be in [1, 255]");
  DatasetManifest m;
  m.root = root;
  m.class_count = class_count;
  m.target_size = target_size;
  if (class_count == 9) {
    m.class_names = mfnet_class_names();
  } else {
    for (int c = 0; c < class_count; ++c) m.class_names.push_back("class" + std::to_string(c));
  }
  std::set<std::string> seen;
  for (const char* s : kSplits) {
    const fs::path list = root / "splits" / (std::string(s) + ".txt");
    auto ids = fs::exists(list) ? read_ids(list) : std::vector<std::string>{};
    for (const auto& id : ids) {
      if (!seen.insert(id).second) throw DataError("id " + id + " appears in more than one split");
      for (const char* dir : {"rgb", "thermal", "labels"}) {
        const fs::path p = root / dir / (id + ".png");
        if (!fs::exists(p)) throw DataError("sample " + id + ": missing file " + p.string());
      }
    }
    m.splits[s] = std::move(ids);
  }
  if (seen.empty()) throw DataError("no split lists found under " + (root / "splits").string());
  return m;
}

RgbThermalSample load_sample(const DatasetManifest& manifest, const std::string& id) {
  cv::Mat rgb = read_image(manifest.root / "rgb" / (id + ".png"), id);
  cv::Mat th = read_image(manifest.root / "thermal" / (id + ".png"), id);
  cv::Mat lab = read_image(manifest.root / "labels" / (id + ".png"), id);
  if (lab.channels() != 1) throw DataError("sample " + id + ": label image must be single-channel");
  if (rgb.size() != th.size() || rgb.size() != lab.size()) {
    throw DataError("sample " + id + ": rgb, thermal and label sizes differ");
  }
  if (manifest.target_size) {
    const cv::Size size(manifest.target_size->second, manifest.target_size->first);
    cv::resize(rgb, rgb, size, 0, 0, cv::INTER_LINEAR);
    cv::resize(th, th, size, 0, 0, cv::INTER_LINEAR);
    cv::resize(lab, lab, size, 0, 0, cv::INTER_NEAREST);
  }
  RgbThermalSample s;
  s.id = id;
  s.rows = static_cast<std::size_t>(lab.rows);
  s.cols = static_cast<std::size_t>(lab.cols);
  s.rgb = to_rgb_tensor(rgb);
  s.thermal = to_rgb_tensor(th);
  s.labels.resize(s.rows * s.cols);
  for (std::size_t y = 0; y < s.rows; ++y) {
    const auto* p = lab.ptr<std::uint8_t>(static_cast<int>(y));
    for (std::size_t x = 0; x < s.cols; ++x) {
      const auto v = p[x];
      if (v != 255 && v >= manifest.class_count) {
        throw DataError("sample " + id + ": label value " + std::to_string(v) + " at (" + std::to_string(y) + ", " +
                        std::to_string(x) + ") with " + std::to_string(manifest.class_count) + " classes");
      }
      s.labels[y * s.cols + x] = v;
    }
  }
  return s;
}

std::vector<RgbThermalSample> load_split(const DatasetManifest& manifest, const std::string& split) {
  std::vector<RgbThermalSample> out;
  for (const auto& id : manifest.split(split)) out.push_back(load_sample(manifest, id));
  return out;
}

RgbThermalSample synth_scene(std::uint64_t seed, const SynthConfig& cfg) {
  if (cfg.classes < 1 || cfg.classes > 255) throw DataError("synthetic class count must be in [1, 255]");
  if (cfg.rows < 8 || cfg.cols < 8 || cfg.rows % 4 != 0 || cfg.cols % 4 != 0) {
    throw DataError("synthetic size must be a multiple of 4 and at least 8");
  }
  Rng rng(splitmix64(seed));
  const int br = cfg.rows / 4, bc = cfg.cols / 4;  // block grid
  std::vector<std::uint8_t> blocks(static_cast<std::size_t>(br * bc), 0);
  if (cfg.classes > 1) {
    const int shapes = 1 + static_cast<int>(rng.below(4));
    const int min_side = std::max(2, std::min(br, bc) / 5);
    const int max_side = std::max(min_side, std::min(br, bc) / 2);
    for (int s = 0; s < shapes; ++s) {
      const auto cls = static_cast<std::uint8_t>(1 + rng.below(static_cast<std::size_t>(cfg.classes - 1)));
      const bool ellipse = rng.bernoulli(0.5);
      const int h = min_side + static_cast<int>(rng.below(static_cast<std::size_t>(max_side - min_side + 1)));
      const int w = min_side + static_cast<int>(rng.below(static_cast<std::size_t>(max_side - min_side + 1)));
      const int y0 = static_cast<int>(rng.below(static_cast<std::size_t>(br - h + 1)));
      const int x0 = static_cast<int>(rng.below(static_cast<std::size_t>(bc - w + 1)));
      const double cy = y0 + h / 2.0, cx = x0 + w / 2.0;
      for (int y = y0; y < y0 + h; ++y) {
        for (int x = x0; x < x0 + w; ++x) {
          if (ellipse) {
            const double dy = (y + 0.5 - cy) / (h / 2.0), dx = (x + 0.5 - cx) / (w / 2.0);
            if (dy * dy + dx * dx > 1.0) continue;
          }
          blocks[static_cast<std::size_t>(y * bc + x)] = cls;
        }
      }
    }
  }

  const auto rows = static_cast<std::size_t>(cfg.rows), cols = static_cast<std::size_t>(cfg.cols);
  RgbThermalSample s;
  s.rows = rows;
  s.cols = cols;
  s.id = "synth";
  s.labels.resize(rows * cols);
  std::vector<double> rgb(rows * cols * 3), th(rows * cols * 3);
  const double denom = std::max(1, cfg.classes - 1);
  for (std::size_t y = 0; y < rows; ++y) {
    for (std::size_t x = 0; x < cols; ++x) {
      const auto cls = blocks[(y / 4) * static_cast<std::size_t>(bc) + x / 4];
      const std::size_t i = y * cols + x;
      s.labels[i] = cls;
      const auto color = palette_color(cls == 0 ? 255 : cls);
      for (std::size_t c = 0; c < 3; ++c) rgb[i * 3 + c] = quantize(color[c] / 255.0 + 0.05 * rng.normal());
      const double t = quantize(0.1 + 0.8 * cls / denom + 0.05 * rng.normal());
      for (std::size_t c = 0; c < 3; ++c) th[i * 3 + c] = t;
    }
  }
  s.rgb = ag::Tensor::from({rows, cols, 3}, std::move(rgb));
  s.thermal = ag::Tensor::from({rows, cols, 3}, std::move(th));
  return s;
}

std::vector<RgbThermalSample> synth_set(std::uint64_t seed, const SynthConfig& cfg, std::size_t count,
                                        std::size_t first_index) {
  std::vector<RgbThermalSample> out;
  for (std::size_t i = first_index; i < first_index + count; ++i) {
    auto s = synth_scene(splitmix64(seed) ^ splitmix64(i + 1), cfg);
    char id[32];
    std::snprintf(id, sizeof id, "synth_%05zu", i);
    s.id = id;
    out.push_back(std::move(s));
  }
  return out;
}

DatasetManifest write_synthetic_dataset(const fs::path& root, std::uint64_t seed, const SynthConfig& cfg,
                                        std::size_t train, std::size_t val, std::size_t test) {
  fs::create_directories(root / "splits");
  const std::array<std::size_t, 3> counts{train, val, test};
  std::size_t next = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    std::ofstream list(root / "splits" / (std::string(kSplits[k]) + ".txt"));
    for (const auto& s : synth_set(seed, cfg, counts[k], next)) {
      write_rgb_png(root / "rgb" / (s.id + ".png"), s.rgb);
      // Thermal is stored single-channel; the loader replicates it.
      cv::Mat t(static_cast<int>(s.rows), static_cast<int>(s.cols), CV_8UC1);
      const auto d = s.thermal.data();
      for (std::size_t i = 0; i < s.rows * s.cols; ++i) {
        t.data[i] = static_cast<std::uint8_t>(std::lround(d[i * 3] * 255.0));
      }
      write_png(root / "thermal" / (s.id + ".png"), t);
      write_label_png(root / "labels" / (s.id + ".png"), s.labels, s.rows, s.cols);
      list << s.id << "\n";
    }
    next += counts[k];
  }
  return load_mfnet(root, cfg.classes);
}

std::array<std::uint8_t, 3> palette_color(int cls) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 10> kBase{{
      {0, 0, 0},
      {230, 25, 75},
      {60, 180, 75},
      {0, 130, 200},
      {255, 225, 25},
      {245, 130, 48},
      {145, 30, 180},
      {70, 240, 240},
      {240, 50, 230},
      {128, 128, 128},
  }};
  if (cls >= 0 && cls < static_cast<int>(kBase.size())) return kBase[static_cast<std::size_t>(cls)];
  if (cls == 255) return {96, 96, 96};
  // Deterministic spread for larger label sets.
  const std::uint64_t h = splitmix64(static_cast<std::uint64_t>(cls));
  return {static_cast<std::uint8_t>(64 + h % 192), static_cast<std::uint8_t>(64 + (h >> 8) % 192),
          static_cast<std::uint8_t>(64 + (h >> 16) % 192)};
}

void write_rgb_png(const fs::path& path, const ag::Tensor& image) { write_png(path, to_bgr_mat(image)); }

void write_label_png(const fs::path& path, const std::vector<std::uint8_t>& labels, std::size_t rows,
                     std::size_t cols) {
  if (labels.size() != rows * cols) throw DataError("label map size mismatch for " + path.string());
  cv::Mat m(static_cast<int>(rows), static_cast<int>(cols), CV_8UC1);
  std::copy(labels.begin(), labels.end(), m.data);
  write_png(path, m);
}

void write_overlay_png(const fs::path& path, const RgbThermalSample& sample, const std::vector<std::uint8_t>& pred) {
  const int rows = static_cast<int>(sample.rows), cols = static_cast<int>(sample.cols);
  if (pred.size() != sample.labels.size()) throw DataError("overlay: prediction size mismatch for " + sample.id);
  cv::Mat out(rows, cols * 3, CV_8UC3);
  to_bgr_mat(sample.rgb).copyTo(out(cv::Rect(0, 0, cols, rows)));
  for (int y = 0; y < rows; ++y) {
    auto* p = out.ptr<std::uint8_t>(y);
    for (int x = 0; x < cols; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * cols + x;
      const auto g = palette_color(sample.labels[i]);
      const auto q = palette_color(pred[i]);
      for (int c = 0; c < 3; ++c) {
        p[(cols + x) * 3 + (2 - c)] = g[static_cast<std::size_t>(c)];
        p[(2 * cols + x) * 3 + (2 - c)] = q[static_cast<std::size_t>(c)];
      }
    }
  }
  write_png(path, out);
}

}  // namespace hapnet
