// Command-line entry point: train, eval, ablate, synth, check.

#include <cstdlib>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hapnet/cli.hpp"

namespace {

void add_common(CLI::App* cmd, hapnet::cli::CommonOptions& o, std::optional<std::uint64_t>& seed,
                std::optional<int>& epochs) {
  cmd->add_option("--config", o.config, "JSON run config");
  cmd->add_option("--seed", seed, "Seed for parameters, data order and synthetic scenes");
  cmd->add_option("--out", o.out, "Output directory")->capture_default_str();
  cmd->add_option("--epochs", epochs, "Override the number of training epochs");
  cmd->add_flag("--overlays", o.overlays, "Write label-color overlay images");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RGB-thermal scene parsing: training, evaluation and oracle checks"};
  app.require_subcommand(1);

  hapnet::cli::CommonOptions opts;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::string resume, checkpoint, split = "val";
  std::vector<std::string> variants{"both", "summation"};
  hapnet::cli::SynthOptions synth;
  bool all = false;

  auto* train = app.add_subcommand("train", "Train a model");
  add_common(train, opts, seed, epochs);
  train->add_option("--resume", resume, "Checkpoint to resume from");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(eval, opts, seed, epochs);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--split", split, "Split to evaluate")->capture_default_str();

  auto* ablate = app.add_subcommand("ablate", "Train and compare model variants");
  add_common(ablate, opts, seed, epochs);
  ablate->add_option("--variants", variants, "Routing A-I, both, glca, ccg, summation, standard, deformable")
      ->delimiter(',')
      ->capture_default_str();
  ablate->add_option("--split", split, "Split to evaluate")->capture_default_str();

  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset in the MFNet layout");
  add_common(synth_cmd, opts, seed, epochs);
  synth_cmd->add_option("--train", synth.train)->capture_default_str();
  synth_cmd->add_option("--val", synth.val)->capture_default_str();
  synth_cmd->add_option("--test", synth.test)->capture_default_str();
  synth_cmd->add_option("--classes", synth.classes, "Classes including background")->capture_default_str();
  synth_cmd->add_option("--height", synth.rows)->capture_default_str();
  synth_cmd->add_option("--width", synth.cols)->capture_default_str();

  auto* check = app.add_subcommand("check", "Run the invariant and oracle suites");
  add_common(check, opts, seed, epochs);
  check->add_flag("--all", all, "Include the training-based suites");

  CLI11_PARSE(app, argc, argv);
  opts.seed = seed;
  opts.epochs = epochs;

  try {
    if (*train) return hapnet::cli::cmd_train(opts, resume, std::cout);
    if (*eval) return hapnet::cli::cmd_eval(opts, checkpoint, split, std::cout);
    if (*ablate) return hapnet::cli::cmd_ablate(opts, variants, split, std::cout);
    if (*synth_cmd) return hapnet::cli::cmd_synth(opts, synth, std::cout);
    if (*check) return hapnet::cli::cmd_check(opts, all, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
