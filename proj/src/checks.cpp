#include "hapnet/checks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <sstream>

#include "hapnet/cli.hpp"
#include "hapnet/metrics.hpp"
#include "hapnet/model.hpp"
#include "hapnet/train.hpp"

namespace fs = std::filesystem;

namespace hapnet::checks {

using ag::Tensor;

namespace {

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

std::vector<Tensor> tensors_of(const nn::ParamSet& ps) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : ps.items()) out.push_back(t);
  return out;
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Default desk model on the 4-class synthetic set, as used by the
// training-based criteria.
RunConfig desk_run_config() {
  RunConfig cfg;
  cfg.model.num_classes = 5;
  cfg.data.root = "synthetic";
  cfg.data.synth_train = 16;
  cfg.train.max_steps = 500;
  cfg.train.epochs = 63;  // 8 steps per epoch at batch 2
  return cfg;
}

}  // namespace

Tensor random_tensor(ag::Shape shape, Rng& rng, double scale) {
  std::vector<double> v(ag::shape_numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor random_projection(const Tensor& x, Rng& rng) {
  return ag::sum(ag::mul(x, random_tensor(x.shape(), rng)));
}

GradCheckReport grad_check(const std::function<Tensor()>& loss, const std::vector<Tensor>& params, std::size_t samples,
                           Rng& rng, double h, double floor) {
  GradCheckReport rep;
  if (params.empty()) return rep;
  for (auto t : params) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  ag::backward(loss());
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t ti = rng.below(params.size());
    Tensor t = params[ti];
    const std::size_t ei = rng.below(t.numel());
    const double analytic = t.has_grad() ? t.grad()[ei] : 0.0;
    const double orig = t.data()[ei];
    double plus = 0.0, minus = 0.0;
    {
      ag::NoGradGuard no_grad;
      t.mutable_data()[ei] = orig + h;
      plus = loss().item();
      t.mutable_data()[ei] = orig - h;
      minus = loss().item();
      t.mutable_data()[ei] = orig;
    }
    const double numeric = (plus - minus) / (2.0 * h);
    const double err = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
    ++rep.checked;
    if (err >= rep.max_rel_error) {
      rep.max_rel_error = err;
      std::ostringstream w;
      w << "tensor " << ti << "[" << ei << "]: " << analytic << " vs " << numeric;
      rep.worst = w.str();
    }
  }
  return rep;
}

std::vector<double> naive_attention(const MultiHeadAttention& attn, const Tensor& query, const Tensor& kv) {
  const std::size_t tq = query.dim(0), tk = kv.dim(0), d = query.dim(1), heads = attn.heads, dh = d / heads;
  auto project = [d](const nn::Linear& lin, const Tensor& x) {
    const std::size_t rows = x.dim(0);
    std::vector<double> out(rows * d, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t o = 0; o < d; ++o) {
        double s = lin.bias.defined() ? lin.bias.data()[o] : 0.0;
        for (std::size_t i = 0; i < d; ++i) s += x.data()[r * d + i] * lin.weight.data()[i * d + o];
        out[r * d + o] = s;
      }
    }
    return out;
  };
  const auto q = project(attn.q, query), k = project(attn.k, kv), v = project(attn.v, kv);
  std::vector<double> mixed(tq * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < tq; ++i) {
      std::vector<double> score(tk);
      for (std::size_t j = 0; j < tk; ++j) {
        double s = 0.0;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) s += q[i * d + c] * k[j * d + c];
        score[j] = s / std::sqrt(static_cast<double>(dh));
      }
      const double mx = *std::max_element(score.begin(), score.end());
      double z = 0.0;
      for (auto& s : score) z += (s = std::exp(s - mx));
      for (std::size_t j = 0; j < tk; ++j) {
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) mixed[i * d + c] += score[j] / z * v[j * d + c];
      }
    }
  }
  return project(attn.out, Tensor::from({tq, d}, mixed));
}

std::vector<double> naive_bilinear(const Tensor& map, double x, double y) {
  const auto rows = static_cast<long>(map.dim(0)), cols = static_cast<long>(map.dim(1));
  const std::size_t c = map.dim(2);
  const double px = x * static_cast<double>(cols) - 0.5, py = y * static_cast<double>(rows) - 0.5;
  const long x0 = static_cast<long>(std::floor(px)), y0 = static_cast<long>(std::floor(py));
  std::vector<double> out(c, 0.0);
  for (long yy : {y0, y0 + 1}) {
    for (long xx : {x0, x0 + 1}) {
      if (yy < 0 || yy >= rows || xx < 0 || xx >= cols) continue;
      const double w = (1.0 - std::abs(px - static_cast<double>(xx))) * (1.0 - std::abs(py - static_cast<double>(yy)));
      for (std::size_t k = 0; k < c; ++k) out[k] += w * map.data()[(static_cast<std::size_t>(yy * cols + xx)) * c + k];
    }
  }
  return out;
}

double brute_force_assignment(const std::vector<double>& costs, std::size_t queries, std::size_t gts) {
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> pick(gts);
  std::vector<char> used(queries, 0);
  std::function<void(std::size_t)> rec = [&](std::size_t g) {
    if (g == gts) {
      double total = 0.0;
      for (std::size_t j = 0; j < gts; ++j) total += costs[pick[j] * gts + j];
      best = std::min(best, total);
      return;
    }
    for (std::size_t q = 0; q < queries; ++q) {
      if (used[q]) continue;
      used[q] = 1;
      pick[g] = q;
      rec(g + 1);
      used[q] = 0;
    }
  };
  rec(0);
  return gts == 0 ? 0.0 : best;
}

CheckResult shape_suite() {
  CheckResult r{"shape suite", true, ""};
  const std::vector<std::pair<int, int>> sizes{{32, 32}, {64, 64}, {64, 96}, {480, 640}};
  std::ostringstream detail;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) {
      r.passed = false;
      detail << " [" << what << "]";
    }
  };
  for (const auto& [h, w] : sizes) {
    ModelConfig cfg;
    cfg.height = h;
    cfg.width = w;
    const auto layout = token_layout(validate_config(cfg));
    const auto hw = static_cast<std::size_t>(h * w);
    const std::string tag = std::to_string(h) + "x" + std::to_string(w) + " ";
    expect(layout.vit_tokens == hw / 256, tag + "vit tokens");
    expect(layout.prior_tokens_per_scale == std::array<std::size_t, 3>{hw / 64, hw / 256, hw / 1024},
           tag + "prior tokens");
    expect(layout.prior_total == hw / 64 + hw / 256 + hw / 1024, tag + "prior total");
    expect(layout.scale_offsets[0] == 0 && layout.scale_offsets[1] == hw / 64 &&
               layout.scale_offsets[2] + layout.prior_tokens_per_scale[2] == layout.prior_total,
           tag + "offsets");

    HapNet model(cfg);
    Rng rng(static_cast<std::uint64_t>(h * 1000 + w));
    const auto hs = static_cast<std::size_t>(h), ws = static_cast<std::size_t>(w);
    const auto d = static_cast<std::size_t>(cfg.embed_dim), c = static_cast<std::size_t>(cfg.decoder_dim);
    const auto q = static_cast<std::size_t>(cfg.num_queries), n = static_cast<std::size_t>(cfg.num_classes);
    Tensor rgb = random_tensor({hs, ws, 3}, rng, 0.5), th = random_tensor({hs, ws, 3}, rng, 0.5);
    ag::NoGradGuard no_grad;
    EncoderTrace trace;
    const auto out = model.forward(rgb, th, true, &trace);
    expect(trace.trunk.size() == 5 && trace.prior.size() == 5, tag + "trace length");
    for (const auto& t : trace.trunk) expect(t.shape() == ag::Shape{layout.vit_tokens, d}, tag + "F^V shape");
    for (const auto& t : trace.prior) expect(t.shape() == ag::Shape{layout.prior_total, d}, tag + "F^P shape");
    expect(out.pyramid.f4.shape() == ag::Shape{hs / 4, ws / 4, d}, tag + "f4");
    expect(out.pyramid.f8.shape() == ag::Shape{hs / 8, ws / 8, d}, tag + "f8");
    expect(out.pyramid.f16.shape() == ag::Shape{hs / 16, ws / 16, d}, tag + "f16");
    expect(out.pyramid.f32.shape() == ag::Shape{hs / 32, ws / 32, d}, tag + "f32");
    expect(out.pixel_embedding.shape() == ag::Shape{hs / 4, ws / 4, c}, tag + "E^P");
    expect(out.queries.mask_embed.shape() == ag::Shape{q, c}, tag + "E^M");
    expect(out.queries.class_logits.shape() == ag::Shape{q, n}, tag + "E^C");
    expect(out.mask_logits.shape() == ag::Shape{q, (hs / 4) * (ws / 4)}, tag + "M^M");
    expect(out.aux_logits.shape() == ag::Shape{hs / 4, ws / 4, n - 1}, tag + "aux logits");
    const auto sem = assemble_semantic(out.queries.class_logits, out.mask_logits, out.mask_rows, out.mask_cols, hs, ws);
    expect(sem.rows == hs && sem.cols == ws && sem.labels.size() == hs * ws, tag + "M^P size");
    expect(std::all_of(sem.labels.begin(), sem.labels.end(), [n](std::uint8_t l) { return static_cast<std::size_t>(l) + 2 <= n; }),
           tag + "M^P range");
  }
  r.detail = r.passed ? "4 resolutions, all layouts and tensor shapes as specified" : "mismatch:" + detail.str();
  return r;
}

CheckResult identity_at_init() {
  CheckResult r{"identity at init", true, ""};
  ModelConfig cfg;
  cfg.kappa_init = 0.0;
  cfg.ccg_enabled = false;
  cfg.glca_enabled = true;
  HapNet model(cfg);
  Rng rng(11);
  const Tensor rgb = random_tensor({64, 64, 3}, rng, 0.5), th = random_tensor({64, 64, 3}, rng, 0.5);
  ag::NoGradGuard no_grad;
  EncoderTrace trace;
  model.encoder.encode(rgb, th, &trace);
  // Prior-free reference: the trunk alone.
  const auto& trunk = model.encoder.trunk;
  auto fv = trunk.route_vfm_input(rgb, th, trunk_modality(cfg.input_routing));
  std::vector<Tensor> ref{fv.tokens};
  for (std::size_t i = 0; i < 4; ++i) {
    fv = trunk.run_stage(i, fv);
    ref.push_back(fv.tokens);
  }
  std::size_t same = 0;
  for (std::size_t i = 0; i < 5; ++i) same += bitwise_equal(ref[i], trace.trunk[i]) ? 1 : 0;
  const bool prior_same = bitwise_equal(trace.prior[0], trace.prior[4]);
  r.passed = same == 5 && prior_same;
  r.detail = std::to_string(same) + "/5 trunk states bitwise equal to the prior-free run; F^P_5 " +
             (prior_same ? "==" : "!=") + " F^P_1";
  return r;
}

CheckResult gradient_suite() {
  CheckResult r{"gradient checks", true, ""};
  constexpr std::size_t kSamples = 24;
  constexpr double kTol = 1e-4;
  std::ostringstream detail;
  Rng rng(2024);
  auto record = [&](const std::string& name, const GradCheckReport& rep) {
    const bool ok = rep.checked >= 20 && rep.max_rel_error <= kTol;
    r.passed = r.passed && ok;
    detail << name << "=" << fmt("%.1e", rep.max_rel_error) << (ok ? "" : " (FAIL " + rep.worst + ")") << " ";
  };

  ModelConfig cfg;
  cfg.height = cfg.width = 32;
  cfg.embed_dim = 16;
  cfg.trunk_heads = 2;
  cfg.num_classes = 5;
  cfg.decoder_dim = 16;
  cfg.decoder_heads = 2;
  const auto layout = token_layout(validate_config(cfg));
  const std::size_t d = 16;
  // Unit-scale projections keep the loss O(1), so rounding noise in the
  // finite differences stays far below the tolerance.
  auto proj_like = [&rng](ag::Shape shape) {
    const double n = static_cast<double>(ag::shape_numel(shape));
    return random_tensor(std::move(shape), rng, 1.0 / std::sqrt(n));
  };

  {
    GlcaParams p(cfg, rng);
    p.kappa.mutable_data()[0] = 0.7;
    const TokenSequence fv{random_tensor({layout.vit_tokens, d}, rng), 2, 2};
    const SpatialPrior fp{random_tensor({layout.prior_total, d}, rng), layout};
    const Tensor proj = proj_like({layout.vit_tokens, d});
    nn::ParamSet ps;
    p.collect(ps, "");
    record("glca", grad_check([&] { return ag::sum(ag::mul(glca(fv, fp, p).tokens, proj)); }, tensors_of(ps),
                              kSamples, rng));
  }
  {
    CcgParams p(cfg, rng);
    const SpatialPrior fp{random_tensor({layout.prior_total, d}, rng), layout};
    const TokenSequence fv{random_tensor({layout.vit_tokens, d}, rng), 2, 2};
    const Tensor proj = proj_like({layout.prior_total, d});
    nn::ParamSet ps;
    p.collect(ps, "");
    record("ccg", grad_check([&] { return ag::sum(ag::mul(ccg(fp, fv, p).tokens, proj)); }, tensors_of(ps), kSamples,
                             rng));
  }
  {
    TransformerBlock block(d, 2, rng);
    const Tensor x = random_tensor({5, d}, rng), proj = proj_like({5, d});
    nn::ParamSet ps;
    block.collect(ps, "");
    record("trunk_block", grad_check([&] { return ag::sum(ag::mul(block(x), proj)); }, tensors_of(ps), kSamples, rng));
  }
  {
    DecoderLayer layer(d, 2, rng);
    const Tensor q = random_tensor({4, d}, rng), pos = random_tensor({4, d}, rng), kv = random_tensor({6, d}, rng);
    const Tensor proj = proj_like({4, d});
    nn::ParamSet ps;
    layer.collect(ps, "");
    record("decoder_layer", grad_check([&] { return ag::sum(ag::mul(layer(q, pos, kv, kv), proj)); }, tensors_of(ps),
                                       kSamples, rng));
  }
  {
    const Tensor em = random_tensor({3, 8}, rng), ep = random_tensor({4, 4, 8}, rng);
    const Tensor proj = proj_like({3, 16});
    record("predict_masks",
           grad_check([&] { return ag::sum(ag::mul(predict_masks(em, ep), proj)); }, {em, ep}, kSamples, rng));
  }
  {
    AuxHead head(cfg, rng);
    const Tensor f4 = random_tensor({8, 8, d}, rng), proj = proj_like({8, 8, 4});
    nn::ParamSet ps;
    head.collect(ps, "");
    record("aux_head", grad_check([&] { return ag::sum(ag::mul(head(f4), proj)); }, tensors_of(ps), kSamples, rng));
  }
  {
    const Tensor logits = random_tensor({30}, rng, 1.5);
    std::vector<double> gt(30);
    for (auto& g : gt) g = rng.bernoulli(0.4) ? 1.0 : 0.0;
    record("dice", grad_check([&] { return dice_mask_loss(logits, gt); }, {logits}, kSamples, rng));
    record("bce", grad_check([&] { return bce_mask_loss(logits, gt); }, {logits}, kSamples, rng));
  }
  {
    const Tensor logits = random_tensor({6, 5}, rng, 1.5);
    GroundTruthSegments gt{1, 1, {{0, {1.0}}, {2, {1.0}}, {3, {0.0}}}};
    Assignment match{{4, 1, 2}, 0.0};
    const LossWeights w;
    record("cls", grad_check([&] { return cls_loss(logits, match, gt, w); }, {logits}, kSamples, rng));
  }
  r.detail = "max rel. error " + detail.str();
  return r;
}

CheckResult matching_oracle() {
  CheckResult r{"matching oracle", true, ""};
  Rng rng(77);
  std::size_t agree = 0;
  constexpr std::size_t kCases = 200;
  for (std::size_t i = 0; i < kCases; ++i) {
    const std::size_t q = 1 + rng.below(7);
    const std::size_t g = 1 + rng.below(q);
    std::vector<double> costs(q * g);
    // Every fourth case uses small integers to exercise ties.
    const bool ints = i % 4 == 0;
    for (auto& c : costs) c = ints ? static_cast<double>(rng.below(4)) : rng.uniform(-3.0, 3.0);
    const auto a = hungarian(costs, q, g);
    if (a.total_cost == brute_force_assignment(costs, q, g)) ++agree;
  }
  r.passed = agree == kCases;
  r.detail = std::to_string(agree) + "/" + std::to_string(kCases) + " random cost matrices match exhaustive search";
  return r;
}

CheckResult attention_oracle() {
  CheckResult r{"attention oracle", true, ""};
  Rng rng(5);
  double worst_std = 0.0, worst_def = 0.0;
  for (int i = 0; i < 50; ++i) {
    const std::size_t heads = 1 + rng.below(3), d = heads * (1 + rng.below(4));
    const std::size_t tq = 1 + rng.below(6), tk = 1 + rng.below(8);
    MultiHeadAttention attn(d, heads, rng);
    for (auto* lin : {&attn.q, &attn.k, &attn.v, &attn.out}) {
      for (auto& b : lin->bias.mutable_data()) b = 0.3 * rng.normal();
    }
    const Tensor query = random_tensor({tq, d}, rng), kv = random_tensor({tk, d}, rng);
    const auto got = attn(query, kv);
    const auto want = naive_attention(attn, query, kv);
    for (std::size_t k = 0; k < want.size(); ++k) worst_std = std::max(worst_std, std::abs(got.data()[k] - want[k]));
  }
  for (int i = 0; i < 50; ++i) {
    const std::size_t heads = 1 + rng.below(2), d = heads * (1 + rng.below(3));
    const std::size_t rows = 1 + rng.below(5), cols = 1 + rng.below(5), tq = 1 + rng.below(5);
    DeformableAttention attn(d, heads, 1, 1, rng);
    for (auto& b : attn.offsets.bias.mutable_data()) b = 0.0;
    const Tensor query = random_tensor({tq, d}, rng), values = random_tensor({rows * cols, d}, rng);
    std::vector<RefPoint> refs(tq);
    for (auto& p : refs) p = {rng.uniform(), rng.uniform()};
    const auto got = attn(query, refs, KeyValueSet{values, {{rows, cols, 0}}});
    ag::NoGradGuard no_grad;
    const Tensor vmap = nn::to_map(attn.value_proj(values), rows, cols);
    for (std::size_t qi = 0; qi < tq; ++qi) {
      const auto read = naive_bilinear(vmap, refs[qi][0], refs[qi][1]);
      const auto want = attn.out(Tensor::from({1, d}, read));
      for (std::size_t k = 0; k < d; ++k) {
        worst_def = std::max(worst_def, std::abs(got.data()[qi * d + k] - want.data()[k]));
      }
    }
  }
  r.passed = worst_std <= 1e-6 && worst_def <= 1e-6;
  r.detail = "standard max |diff| " + fmt("%.2e", worst_std) + " (50 cases), deformable zero-offset max |diff| " +
             fmt("%.2e", worst_def) + " (50 cases)";
  return r;
}

CheckResult metrics_oracle() {
  CheckResult r{"metrics oracle", true, ""};
  Rng rng(9);
  std::size_t exact = 0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t k = 2 + rng.below(7), n = 1 + rng.below(400);
    std::vector<std::uint8_t> gt(n), pred(n);
    for (std::size_t p = 0; p < n; ++p) {
      gt[p] = rng.bernoulli(0.1) ? std::uint8_t{255} : static_cast<std::uint8_t>(rng.below(k));
      pred[p] = static_cast<std::uint8_t>(rng.below(k));
    }
    ConfusionMatrix cm(k);
    cm.accumulate(gt, pred);
    std::map<std::pair<int, int>, std::uint64_t> ref;
    for (std::size_t p = 0; p < n; ++p) {
      if (gt[p] != 255) ++ref[{gt[p], pred[p]}];
    }
    bool same = true;
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = 0; b < k; ++b) {
        const auto it = ref.find({static_cast<int>(a), static_cast<int>(b)});
        same = same && cm.at(a, b) == (it == ref.end() ? 0 : it->second);
      }
    }
    exact += same ? 1 : 0;
  }
  ConfusionMatrix hand(2);
  hand.accumulate(std::vector<std::uint8_t>{0, 0, 1, 1}, std::vector<std::uint8_t>{0, 1, 1, 1});
  const auto mean = reduce(per_class(hand));
  const double want_macc = (0.5 + 1.0) / 2.0, want_miou = (0.5 + 2.0 / 3.0) / 2.0;
  const bool hand_ok = hand.at(0, 0) == 1 && hand.at(0, 1) == 1 && hand.at(1, 0) == 0 && hand.at(1, 1) == 2 &&
                       std::abs(mean.macc - want_macc) <= 1e-9 && std::abs(mean.miou - want_miou) <= 1e-9;
  r.passed = exact == 100 && hand_ok;
  r.detail = std::to_string(exact) + "/100 random pairs exact; hand case mAcc " + fmt("%.4f", mean.macc) + " mIoU " +
             fmt("%.4f", mean.miou);
  return r;
}

CheckResult loss_arithmetic() {
  CheckResult r{"loss arithmetic", true, ""};
  const LossWeights w;
  const double total = total_loss(0.1, 0.1, 0.1, 0.1, w);
  const double d1 = dice_value(std::vector<double>{1, 1, 1, 1}, std::vector<double>{1, 1, 1, 1});
  const double d2 = dice_value(std::vector<double>{1, 0}, std::vector<double>{0, 1});
  const double d3 = dice_value(std::vector<double>{0.5, 0.5}, std::vector<double>{1, 0});
  const bool dice_ok =
      std::abs(d1 - 0.0) <= 1e-9 && std::abs(d2 - (1.0 - 1.0 / 3.0)) <= 1e-9 && std::abs(d3 - (1.0 - 2.0 / 3.0)) <= 1e-9;
  r.passed = total == 1.24 && dice_ok;
  r.detail = "total(0.1 x4) = " + fmt("%.17g", total) + "; dice cases " + fmt("%.6f", d1) + ", " + fmt("%.6f", d2) +
             ", " + fmt("%.6f", d3);
  return r;
}

CheckResult overfit_trainability(const std::string& work_dir) {
  CheckResult r{"overfit trainability", false, ""};
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig cfg = desk_run_config();
  const auto data = resolve_data(cfg, "train");
  fs::create_directories(work_dir);
  std::ofstream log(fs::path(work_dir) / "overfit.log");
  Trainer trainer(cfg, data.train);
  trainer.run(&log);
  const auto res = evaluate(trainer.model(), data.train, data.class_names);
  log << res.csv;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.passed = res.mean.miou >= 0.90 && trainer.step() <= 500;
  r.detail = "train-split mIoU " + fmt("%.4f", res.mean.miou) + " after " + std::to_string(trainer.step()) +
             " steps (" + fmt("%.0f", secs) + " s)";
  return r;
}

CheckResult ablation_direction(const std::string& work_dir) {
  CheckResult r{"ablation direction", false, ""};
  const RunConfig cfg = desk_run_config();
  const auto data = resolve_data(cfg, "train");
  fs::create_directories(work_dir);
  std::ofstream log(fs::path(work_dir) / "ablation.log");
  const auto rows = ablate(cfg, {"both", "summation"}, data, &log);
  log << ablation_csv(rows);
  const double full = rows[0].mean.miou, base = rows[1].mean.miou;
  r.passed = full >= base - 0.02 && rows[0].params != rows[1].params;
  r.detail = "glca+ccg mIoU " + fmt("%.4f", full) + " vs summation " + fmt("%.4f", base) + " (params " +
             std::to_string(rows[0].params) + " vs " + std::to_string(rows[1].params) + ")";
  return r;
}

CheckResult determinism(const std::string& work_dir) {
  CheckResult r{"determinism", false, ""};
  const fs::path root = fs::path(work_dir) / "determinism";
  fs::create_directories(root);
  // The synthetic source is pinned so an exported dataset root cannot leak in.
  const fs::path cfg_path = root / "config.json";
  {
    std::ofstream(cfg_path) << R"({"data_root": "synthetic"})";
  }
  std::ostringstream sink;
  for (const char* run : {"run_a", "run_b"}) {
    cli::CommonOptions opts;
    opts.config = cfg_path.string();
    opts.seed = 7;
    opts.epochs = 1;
    opts.out = (root / run).string();
    cli::cmd_train(opts, "", sink);
  }
  const bool metrics_same = read_text(root / "run_a" / "metrics.csv") == read_text(root / "run_b" / "metrics.csv") &&
                            !read_text(root / "run_a" / "metrics.csv").empty();
  const auto ca = read_bytes(root / "run_a" / "final.hapnet"), cb = read_bytes(root / "run_b" / "final.hapnet");
  const bool ckpt_same = !ca.empty() && ca == cb;
  r.passed = metrics_same && ckpt_same;
  r.detail = std::string("metrics tables ") + (metrics_same ? "identical" : "differ") + ", checkpoints " +
             (ckpt_same ? "byte-identical" : "differ") + " (" + std::to_string(ca.size()) + " bytes)";
  return r;
}

std::vector<CheckResult> run_fast_suites() {
  std::vector<CheckResult> out;
  for (auto* fn : {&shape_suite, &identity_at_init, &gradient_suite, &matching_oracle, &attention_oracle,
                   &metrics_oracle, &loss_arithmetic}) {
    try {
      out.push_back(fn());
    } catch (const std::exception& e) {
      out.push_back({"suite", false, std::string("threw: ") + e.what()});
    }
  }
  return out;
}

}  // namespace hapnet::checks
