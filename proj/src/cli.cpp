#include "hapnet/cli.hpp"

#include <cstdio>
#include <fstream>
#include <ostream>

#include "hapnet/checks.hpp"

namespace fs = std::filesystem;

namespace hapnet::cli {

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// Mirrors every write to the console stream and the run's log file.
class TeeBuf : public std::streambuf {
 public:
  TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

 protected:
  int overflow(int c) override {
    if (c == EOF) return !EOF;
    const bool ok = a_->sputc(static_cast<char>(c)) != EOF && b_->sputc(static_cast<char>(c)) != EOF;
    return ok ? c : EOF;
  }
  int sync() override { return (a_->pubsync() == 0 && b_->pubsync() == 0) ? 0 : -1; }

 private:
  std::streambuf* a_;
  std::streambuf* b_;
};

std::string checkpoint_name(int epoch) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "checkpoint_epoch%04d.hapnet", epoch);
  return buf;
}

}  // namespace

RunConfig resolve_run_config(const CommonOptions& opts) {
  RunConfig cfg = opts.config.empty() ? run_config_from_json(nlohmann::json::object()) : load_run_config(opts.config);
  if (opts.seed) cfg.model.seed = *opts.seed;
  if (opts.epochs) {
    if (*opts.epochs < 0) throw ConfigError("--epochs must be >= 0");
    cfg.train.epochs = *opts.epochs;
  }
  return cfg;
}

int cmd_train(const CommonOptions& opts, const std::string& resume, std::ostream& console) {
  const RunConfig cfg = resolve_run_config(opts);
  const fs::path out = opts.out;
  fs::create_directories(out);
  std::ofstream logfile(out / "train.log", resume.empty() ? std::ios::trunc : std::ios::app);
  TeeBuf tee(console.rdbuf(), logfile.rdbuf());
  std::ostream log(&tee);

  const auto data = resolve_data(cfg, "val");
  write_text(out / "config.json", to_json(cfg).dump(2) + "\n");
  log << "data: " << data.description << ", " << data.train.size() << " train / " << data.eval.size()
      << " eval samples\n";

  Trainer trainer(cfg, data.train);
  if (!resume.empty()) {
    trainer.restore(load_archive(resume));
    log << "resumed from " << resume << " at step " << trainer.step() << "\n";
  }
  log << "params " << trainer.model().parameters(false).numel() << " (inference) + aux, steps "
      << trainer.total_steps() << "\n";
  const int every = cfg.train.checkpoint_every;
  trainer.run(&log, [&](int epoch) {
    if (every > 0 && epoch % every == 0) save_archive(trainer.checkpoint(), out / checkpoint_name(epoch));
  });
  save_archive(trainer.checkpoint(), out / "final.hapnet");
  if (!data.eval.empty()) {
    const auto res = evaluate(trainer.model(), data.eval, data.class_names,
                              opts.overlays ? out / "overlays" : fs::path{});
    write_text(out / "metrics.csv", res.csv);
    log << res.csv;
  }
  log.flush();
  return 0;
}

int cmd_eval(const CommonOptions& opts, const std::string& checkpoint, const std::string& split,
             std::ostream& log) {
  const Archive archive = load_archive(checkpoint);
  RunConfig cfg = checkpoint_config(archive);
  if (!opts.config.empty()) {
    // A config given on the command line must describe the same model.
    const RunConfig given = resolve_run_config(opts);
    if (given.model != cfg.model) throw CheckpointError("checkpoint/config mismatch: model settings differ");
    cfg.data = given.data;
  }
  HapNet model(cfg.model);
  load_parameters(model, archive.arrays);
  const auto data = resolve_data(cfg, split);
  const fs::path out = opts.out;
  const auto res = evaluate(model, data.eval, data.class_names, opts.overlays ? out / "overlays" : fs::path{});
  write_text(out / "metrics.csv", res.csv);
  log << "evaluated " << data.eval.size() << " samples (" << data.description << ", split " << split << ")\n"
      << res.csv;
  return 0;
}

int cmd_ablate(const CommonOptions& opts, const std::vector<std::string>& variants, const std::string& split,
               std::ostream& log) {
  const RunConfig cfg = resolve_run_config(opts);
  const auto data = resolve_data(cfg, split);
  const auto rows = ablate(cfg, variants, data, &log);
  const auto csv = ablation_csv(rows);
  write_text(fs::path(opts.out) / "ablation.csv", csv);
  log << csv;
  return 0;
}

int cmd_synth(const CommonOptions& opts, const SynthOptions& synth, std::ostream& log) {
  const std::uint64_t seed = opts.seed.value_or(0);
  const auto manifest = write_synthetic_dataset(opts.out, seed, SynthConfig{synth.rows, synth.cols, synth.classes},
                                                synth.train, synth.val, synth.test);
  log << "wrote " << synth.train + synth.val + synth.test << " samples (" << synth.classes << " classes, "
      << synth.rows << "x" << synth.cols << ") to " << manifest.root.string() << "\n";
  return 0;
}

int cmd_check(const CommonOptions& opts, bool all, std::ostream& log) {
  auto results = checks::run_fast_suites();
  if (all) {
    const std::string work = opts.out;
    results.push_back(checks::overfit_trainability(work));
    results.push_back(checks::ablation_direction(work));
    results.push_back(checks::determinism(work));
  }
  bool ok = true;
  for (const auto& r : results) {
    log << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

}  // namespace hapnet::cli
