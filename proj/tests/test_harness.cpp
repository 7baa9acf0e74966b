#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>

#include "hapnet/cli.hpp"
#include "hapnet/train.hpp"
#include "test_util.hpp"

namespace hapnet {
namespace {

namespace fs = std::filesystem;
using testing::rand_t;

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("hapnet_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig tiny_run(int epochs) {
  RunConfig cfg;
  cfg.model = testing::small_config();
  cfg.model.seed = 3;
  cfg.train.epochs = epochs;
  cfg.data.root = "synthetic";
  cfg.data.synth_train = 4;
  cfg.data.synth_val = 2;
  return cfg;
}

std::vector<RgbThermalSample> tiny_data(const RunConfig& cfg) { return resolve_data(cfg).train; }

TEST(Optimizer, LayerDecaySchedule) {
  EXPECT_EQ(lr_multiplier("trunk.stage4.block0.attn.q.weight", 0.9), 1.0);
  EXPECT_NEAR(lr_multiplier("trunk.stage3.block1.mlp.fc1.bias", 0.9), 0.9, 1e-15);
  EXPECT_NEAR(lr_multiplier("trunk.stage1.block0.norm1.weight", 0.9), 0.9 * 0.9 * 0.9, 1e-15);
  EXPECT_NEAR(lr_multiplier("trunk.pos_embed", 0.9), std::pow(0.9, 4), 1e-15);
  EXPECT_EQ(lr_multiplier("decoder.class_head.weight", 0.9), 1.0);

  const auto cfg = tiny_run(1);
  HapNet model(cfg.model);
  AdamW opt(model.parameters(), cfg.train);
  EXPECT_NEAR(opt.lr_of("trunk.stage4.block0.attn.q.weight"), 2e-4, 1e-18);
  EXPECT_NEAR(opt.lr_of("trunk.stage3.block0.attn.q.weight"), 1.8e-4, 1e-18);
  EXPECT_NEAR(opt.lr_of("trunk.stage1.block0.attn.q.weight"), 2e-4 * 0.729, 1e-18);
}

TEST(Optimizer, ClipRescalesToMaxNorm) {
  auto a = Tensor::from({2}, {0.0, 0.0}, true);
  nn::ParamSet ps;
  ps.add("a", a);
  AdamW opt(ps, TrainConfig{});
  a.mutable_grad()[0] = 3.0;
  a.mutable_grad()[1] = 4.0;
  EXPECT_NEAR(opt.clip_grad_norm(1.0), 5.0, 1e-15);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(a.grad()[1], 0.8, 1e-15);
}

TEST(Optimizer, FirstStepMovesByLearningRate) {
  // Bias-corrected Adam moves each coordinate by lr * sign(g) on step one;
  // vectors are exempt from weight decay.
  auto w = Tensor::from({1}, {1.0}, true);
  nn::ParamSet ps;
  ps.add("w", w);
  TrainConfig tc;
  tc.lr = 0.01;
  AdamW opt(ps, tc);
  w.mutable_grad()[0] = -2.0;
  opt.step();
  EXPECT_NEAR(w.at(0), 1.01, 1e-9);
}

TEST(Trainer, ZeroEpochsCheckpointEqualsInit) {
  const auto cfg = tiny_run(0);
  Trainer t(cfg, tiny_data(cfg));
  t.run(nullptr);
  EXPECT_EQ(t.step(), 0u);
  const HapNet fresh(cfg.model);
  const auto ck = t.checkpoint();
  const auto fresh_params = fresh.parameters(true);
  for (const auto& [name, p] : fresh_params.items()) {
    const auto& a = ck.arrays.at("param/" + name);
    ASSERT_EQ(a.data, std::vector<double>(p.data().begin(), p.data().end())) << name;
  }
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
  const auto cfg = tiny_run(2);
  const auto data = tiny_data(cfg);
  Trainer full(cfg, data);
  full.run(nullptr);
  ASSERT_EQ(full.step(), 4u);

  Trainer first(cfg, data);
  first.run(nullptr, {}, 3);
  ASSERT_EQ(first.step(), 3u);
  const auto bytes = encode_archive(first.checkpoint());
  Trainer second(cfg, data);
  second.restore(decode_archive(bytes));
  second.run(nullptr);
  EXPECT_EQ(second.step(), 4u);
  EXPECT_EQ(encode_archive(second.checkpoint()), encode_archive(full.checkpoint()));
}

TEST(Trainer, BatchOrderIsAPermutationPerEpoch) {
  const auto cfg = tiny_run(3);
  Trainer t(cfg, tiny_data(cfg));
  for (std::uint64_t e = 0; e < 3; ++e) {
    std::multiset<std::size_t> seen;
    for (std::uint64_t s = 0; s < t.steps_per_epoch(); ++s) {
      for (auto i : t.batch_indices(e * t.steps_per_epoch() + s)) seen.insert(i);
    }
    EXPECT_EQ(seen, (std::multiset<std::size_t>{0, 1, 2, 3}));
  }
}

TEST(Trainer, NonFiniteLossNamesTheSample) {
  const auto cfg = tiny_run(1);
  Trainer t(cfg, tiny_data(cfg));
  testing::fill(t.model().decoder.class_head.bias, std::numeric_limits<double>::quiet_NaN());
  try {
    t.train_step();
    FAIL() << "expected NonFiniteLoss";
  } catch (const NonFiniteLoss& e) {
    EXPECT_NE(std::string(e.what()).find("synth_"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, ByteRoundTripAndConfigCheck) {
  const auto cfg = tiny_run(1);
  Trainer t(cfg, tiny_data(cfg));
  t.train_step();
  const auto dir = scratch("ckpt");
  const auto bytes = encode_archive(t.checkpoint());
  save_archive(decode_archive(bytes), dir / "a.hapnet");
  const auto reloaded = load_archive(dir / "a.hapnet");
  EXPECT_EQ(encode_archive(reloaded), bytes);
  EXPECT_EQ(checkpoint_config(reloaded).model, cfg.model);

  auto other = cfg;
  other.model.num_queries = 5;
  Trainer mismatch(other, tiny_data(other));
  EXPECT_THROW(mismatch.restore(reloaded), CheckpointError);
  HapNet wrong(other.model);
  EXPECT_THROW(load_parameters(wrong, reloaded.arrays), CheckpointError);

  auto corrupt = bytes;
  corrupt.resize(corrupt.size() / 2);
  EXPECT_THROW(decode_archive(corrupt), CheckpointError);
}

TEST(Synthetic, DeterministicAndDegenerate) {
  const SynthConfig sc{32, 48, 4};
  const auto a = synth_scene(11, sc), b = synth_scene(11, sc), c = synth_scene(12, sc);
  testing::expect_bitwise(a.rgb, b.rgb);
  testing::expect_bitwise(a.thermal, b.thermal);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.labels, c.labels);
  EXPECT_EQ(a.rgb.shape(), (ag::Shape{32, 48, 3}));

  const auto bg = synth_scene(5, SynthConfig{32, 32, 1});
  EXPECT_EQ(bg.labels, std::vector<std::uint8_t>(32 * 32, 0));
  EXPECT_THROW(synth_scene(1, SynthConfig{32, 32, 0}), DataError);
}

TEST(Synthetic, EveryClassAppearsAcrossSeeds) {
  std::vector<int> census(4, 0);
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const auto sc = synth_scene(s, SynthConfig{64, 64, 4});
    std::vector<bool> present(4, false);
    for (auto l : sc.labels) {
      ASSERT_LT(l, 4);
      present[l] = true;
    }
    for (int k = 0; k < 4; ++k) census[k] += present[k] ? 1 : 0;
  }
  for (int k = 0; k < 4; ++k) EXPECT_GE(census[k], 1) << "class " << k;
}

TEST(Loader, ReadsWrittenTreeAndReplicatesThermal) {
  const auto root = scratch("tree");
  const SynthConfig sc{32, 32, 4};
  const auto manifest = write_synthetic_dataset(root, 9, sc, 3, 1, 1);
  const auto loaded = load_mfnet(root, 4);
  EXPECT_EQ(loaded.split("train").size(), 3u);
  EXPECT_EQ(loaded.split("val").size(), 1u);
  const auto s = load_sample(loaded, loaded.split("train")[0]);
  const auto ref = synth_set(9, sc, 1)[0];
  EXPECT_EQ(s.labels, ref.labels);
  testing::expect_near(s.rgb, ref.rgb, 1e-12);
  testing::expect_near(s.thermal, ref.thermal, 1e-12);
  // Thermal is stored single-channel on disk.
  EXPECT_EQ(cv::imread((root / "thermal" / (s.id + ".png")).string(), cv::IMREAD_UNCHANGED).channels(), 1);

  auto resized = loaded;
  resized.target_size = std::make_pair(16, 24);
  const auto r = load_sample(resized, s.id);
  EXPECT_EQ(r.rows, 16u);
  EXPECT_EQ(r.cols, 24u);
  EXPECT_EQ(r.rgb.shape(), (ag::Shape{16, 24, 3}));
}

TEST(Loader, MissingFileNamesIdAndPath) {
  const auto root = scratch("missing");
  write_synthetic_dataset(root, 1, SynthConfig{32, 32, 3}, 2, 1, 1);
  const auto victim = root / "thermal" / "synth_00001.png";
  fs::remove(victim);
  try {
    load_mfnet(root, 3);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("synth_00001"), std::string::npos) << msg;
    EXPECT_NE(msg.find(victim.string()), std::string::npos) << msg;
  }
}

TEST(Loader, RejectsOutOfContractLabels) {
  const auto root = scratch("badlabel");
  write_synthetic_dataset(root, 1, SynthConfig{32, 32, 3}, 1, 1, 1);
  std::vector<std::uint8_t> labels(32 * 32, 0);
  labels[5] = 200;
  write_label_png(root / "labels" / "synth_00000.png", labels, 32, 32);
  const auto m = load_mfnet(root, 9);
  EXPECT_THROW(load_sample(m, "synth_00000"), DataError);
  labels[5] = 255;  // ignore is allowed
  write_label_png(root / "labels" / "synth_00000.png", labels, 32, 32);
  EXPECT_EQ(load_sample(m, "synth_00000").labels[5], 255);
}

TEST(Loader, SplitsMustBeDisjoint) {
  const auto root = scratch("overlap");
  write_synthetic_dataset(root, 1, SynthConfig{32, 32, 3}, 2, 1, 1);
  std::ofstream(root / "splits" / "val.txt") << "synth_00000\n";
  EXPECT_THROW(load_mfnet(root, 3), DataError);
}

TEST(Evaluate, UntrainedSmokeWithOverlays) {
  const auto cfg = tiny_run(0);
  const auto data = resolve_data(cfg);
  const HapNet model(cfg.model);
  const auto dir = scratch("overlays");
  const auto r = evaluate(model, data.eval, data.class_names, dir);
  EXPECT_EQ(r.csv.rfind("class,acc,iou\n", 0), 0u);
  EXPECT_EQ(r.cm.total(), data.eval.size() * 32 * 32);
  for (const auto& s : data.eval) {
    const auto img = cv::imread((dir / (s.id + ".png")).string());
    ASSERT_FALSE(img.empty());
    EXPECT_EQ(img.cols, 3 * 32);
  }
  EXPECT_EQ(palette_color(0), (std::array<std::uint8_t, 3>{0, 0, 0}));
}

TEST(Ablation, RowsAndRoutingPerturbation) {
  auto cfg = tiny_run(0);
  const auto data = resolve_data(cfg);
  const auto rows = ablate(cfg, {"D", "E", "I"}, data, nullptr);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1].variant, "E");

  const auto pair = ablate(cfg, {"both", "summation"}, data, nullptr);
  ASSERT_EQ(pair.size(), 2u);
  EXPECT_NE(pair[0].params, pair[1].params);
  const auto csv = ablation_csv(pair);
  EXPECT_EQ(csv.rfind("variant,params,macc,miou\n", 0), 0u);
  EXPECT_NE(csv.find("summation (element-wise sum after resolution alignment)"), std::string::npos);

  EXPECT_THROW(ablate(cfg, {"both", "nonsense"}, data, nullptr), ConfigError);

  Rng rng(4);
  const auto rgb = rand_t({32, 32, 3}, rng), th = rand_t({32, 32, 3}, rng), other = rand_t({32, 32, 3}, rng);
  const HapNet e(apply_variant(cfg.model, "E"));
  testing::expect_bitwise(e.forward(rgb, th).mask_logits, e.forward(rgb, other).mask_logits);
  const HapNet i(apply_variant(cfg.model, "I"));
  testing::expect_bitwise(i.forward(rgb, th).mask_logits, i.forward(other, th).mask_logits);
  const HapNet d(apply_variant(cfg.model, "D"));
  EXPECT_NE(d.forward(rgb, th).mask_logits.at(0), d.forward(rgb, other).mask_logits.at(0));
}

TEST(RunConfigJson, RoundTripAndUnknownKeys) {
  auto cfg = tiny_run(7);
  cfg.train.grad_clip = 1.5;
  cfg.train.weights.ce = 0.0;
  const auto back = run_config_from_json(to_json(cfg));
  EXPECT_EQ(to_json(back), to_json(cfg));
  auto j = to_json(cfg);
  j["no_such_key"] = 1;
  EXPECT_THROW(run_config_from_json(j), ConfigError);
  j = to_json(cfg);
  j["lr"] = -1.0;
  EXPECT_THROW(run_config_from_json(j), ConfigError);
}

TEST(Cli, TrainThenEvalReproducesMetrics) {
  const auto dir = scratch("cli");
  auto cfg = tiny_run(1);
  std::ofstream(dir / "config.json") << to_json(cfg).dump(2);
  cli::CommonOptions opts;
  opts.config = (dir / "config.json").string();
  opts.out = (dir / "run").string();
  opts.seed = 5;
  std::ostringstream log;
  ASSERT_EQ(cli::cmd_train(opts, "", log), 0) << log.str();
  ASSERT_TRUE(fs::exists(dir / "run" / "final.hapnet"));
  ASSERT_TRUE(fs::exists(dir / "run" / "train.log"));
  std::ifstream in(dir / "run" / "metrics.csv");
  const std::string trained((std::istreambuf_iterator<char>(in)), {});

  cli::CommonOptions eval_opts = opts;
  eval_opts.out = (dir / "eval").string();
  eval_opts.overlays = true;
  ASSERT_EQ(cli::cmd_eval(eval_opts, (dir / "run" / "final.hapnet").string(), "val", log), 0) << log.str();
  std::ifstream in2(dir / "eval" / "metrics.csv");
  const std::string evaluated((std::istreambuf_iterator<char>(in2)), {});
  EXPECT_EQ(evaluated, trained);
  EXPECT_TRUE(fs::exists(dir / "eval" / "overlays"));
}

TEST(Cli, SynthWritesMfnetLayout) {
  const auto dir = scratch("synth_cli");
  cli::CommonOptions opts;
  opts.out = dir.string();
  cli::SynthOptions so;
  so.train = 2;
  so.val = 1;
  so.test = 1;
  so.rows = so.cols = 32;
  std::ostringstream log;
  ASSERT_EQ(cli::cmd_synth(opts, so, log), 0);
  const auto m = load_mfnet(dir, 4);
  EXPECT_EQ(m.split("test").size(), 1u);
}

}  // namespace
}  // namespace hapnet
