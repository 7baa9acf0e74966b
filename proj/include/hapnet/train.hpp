#pragma once

// Run configuration, optimizer, training loop, evaluation and ablation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "hapnet/archive.hpp"
#include "hapnet/data.hpp"
#include "hapnet/losses.hpp"
#include "hapnet/metrics.hpp"
#include "hapnet/model.hpp"

namespace hapnet {

struct TrainConfig {
  double lr = 2e-4;
  double weight_decay = 5e-2;
  double layer_decay = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs = 200;
  // Samples per optimizer step; gradients are accumulated one sample at a time.
  int batch_size = 2;
  // Stop after this many optimizer steps (0 = run all epochs).
  int max_steps = 0;
  // Global gradient-norm clip before each update (0 = off).
  double grad_clip = 1.0;
  bool aux_loss = true;
  bool hflip = false;
  // Write a checkpoint every N epochs (0 = only at the end).
  int checkpoint_every = 0;
  LossWeights weights;
};

struct DataConfig {
  // Dataset root; empty falls back to HAPNET_DATA_ROOT, then to an
  // in-memory synthetic set. "synthetic" forces the synthetic set.
  std::string root;
  int synth_train = 16;
  int synth_val = 4;
  // Classes of the synthetic set; 0 means num_classes - 1.
  int synth_classes = 0;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
};

nlohmann::json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// Learning-rate multiplier for a parameter name: trunk stage i (1..4) gets
// layer_decay^(4 - i), the patch and positional embeddings layer_decay^4,
// everything else 1.
double lr_multiplier(const std::string& name, double layer_decay);

class AdamW {
 public:
  AdamW() = default;
  AdamW(const nn::ParamSet& params, const TrainConfig& cfg);

  // Rescales all gradients so their global L2 norm is at most max_norm;
  // returns the norm before clipping.
  double clip_grad_norm(double max_norm);
  void step();
  std::uint64_t steps() const { return t_; }
  double lr_of(const std::string& name) const;

  void export_state(NamedArrays& out) const;
  void import_state(const NamedArrays& in, std::uint64_t steps);

 private:
  struct Slot {
    std::string name;
    Tensor param;
    std::vector<double> m, v;
    double lr = 0.0;
    bool decay = false;
  };
  std::vector<Slot> slots_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, wd_ = 0.0;
  std::uint64_t t_ = 0;
};

struct StepLog {
  double total = 0.0, bce = 0.0, dice = 0.0, cls = 0.0, ce = 0.0;
  std::vector<std::string> ids;
};

// One sample's forward pass, matching and weighted loss (graph attached).
struct SampleLoss {
  Tensor total;
  LossParts parts;
  bool aux_all_ignored = false;
};
SampleLoss sample_loss(const HapNet& model, const RgbThermalSample& sample, const TrainConfig& cfg);

class Trainer {
 public:
  Trainer(const RunConfig& cfg, std::vector<RgbThermalSample> train_set);

  std::size_t steps_per_epoch() const;
  std::uint64_t step() const { return step_; }
  std::uint64_t total_steps() const;
  // Sample indices consumed by optimizer step s.
  std::vector<std::size_t> batch_indices(std::uint64_t s) const;

  StepLog train_step();
  // Runs until `total_steps()` (or `until` when smaller), writing one log line
  // per epoch. on_epoch is called after each completed epoch.
  void run(std::ostream* log, const std::function<void(int epoch)>& on_epoch = {}, std::uint64_t until = 0);

  Archive checkpoint() const;
  void restore(const Archive& archive);

  HapNet& model() { return model_; }
  const HapNet& model() const { return model_; }
  const RunConfig& config() const { return cfg_; }

 private:
  RunConfig cfg_;
  HapNet model_;
  nn::ParamSet params_;
  AdamW opt_;
  std::vector<RgbThermalSample> data_;
  std::uint64_t step_ = 0;
  StepLog epoch_acc_;
  std::size_t epoch_count_ = 0;
};

// Parameters plus config; used by eval.
Archive model_archive(const HapNet& model, const RunConfig& cfg);
void load_parameters(HapNet& model, const NamedArrays& arrays);
RunConfig checkpoint_config(const Archive& archive);

struct EvalResult {
  ConfusionMatrix cm;
  ClassMetrics per_class;
  MeanMetrics mean;
  std::string csv;
};

// overlay_dir empty = no overlays.
EvalResult evaluate(const HapNet& model, const std::vector<RgbThermalSample>& samples,
                    const std::vector<std::string>& class_names, const std::filesystem::path& overlay_dir = {});

// Data resolution shared by the CLI and the checks.
struct DataSource {
  std::vector<RgbThermalSample> train;
  std::vector<RgbThermalSample> eval;
  std::vector<std::string> class_names;
  std::string description;
};
DataSource resolve_data(const RunConfig& cfg, const std::string& eval_split = "val");

// Applies a named ablation variant: routing "A".."I", "both", "glca", "ccg",
// "summation", "standard", "deformable". Throws ConfigError otherwise.
ModelConfig apply_variant(ModelConfig cfg, const std::string& variant);
std::string variant_label(const std::string& variant);

struct AblationRow {
  std::string variant;
  std::size_t params = 0;
  MeanMetrics mean;
};
std::vector<AblationRow> ablate(const RunConfig& cfg, const std::vector<std::string>& variants, const DataSource& data,
                                std::ostream* log);
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace hapnet
