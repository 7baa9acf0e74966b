#pragma once

// Command implementations behind the hapnet executable.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "hapnet/train.hpp"

namespace hapnet::cli {

struct CommonOptions {
  std::string config;  // JSON run config; empty = defaults
  std::optional<std::uint64_t> seed;
  std::string out = "runs/latest";
  std::optional<int> epochs;
  bool overlays = false;
};

// Loads the config file (if any) and applies --seed / --epochs.
RunConfig resolve_run_config(const CommonOptions& opts);

// Trains, checkpointing into opts.out (checkpoint_epochNNNN.hapnet every
// checkpoint_every epochs, final.hapnet at the end), logging to train.log and
// `log`, then writes metrics.csv for the validation split.
int cmd_train(const CommonOptions& opts, const std::string& resume, std::ostream& log);

// Evaluates a checkpoint; writes metrics.csv (and overlays/ when requested).
int cmd_eval(const CommonOptions& opts, const std::string& checkpoint, const std::string& split, std::ostream& log);

// Trains and evaluates every variant; writes ablation.csv.
int cmd_ablate(const CommonOptions& opts, const std::vector<std::string>& variants, const std::string& split,
               std::ostream& log);

struct SynthOptions {
  std::size_t train = 16;
  std::size_t val = 4;
  std::size_t test = 4;
  int classes = 4;
  int rows = 64;
  int cols = 64;
};
int cmd_synth(const CommonOptions& opts, const SynthOptions& synth, std::ostream& log);

// Runs the fast oracle suites; with `all`, the training-based ones as well.
int cmd_check(const CommonOptions& opts, bool all, std::ostream& log);

}  // namespace hapnet::cli
