#include "hapnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace hapnet {

namespace {

const std::set<std::string>& train_keys() {
  static const std::set<std::string> keys{
      "lr",         "grad_clip",    "weight_decay", "layer_decay",   "beta1",         "beta2",       "adam_eps",
      "epochs",     "batch_size",   "max_steps",     "aux_loss",      "hflip",       "checkpoint_every",
      "lambda_bce", "lambda_dice",  "lambda_cls",    "lambda_ce",     "no_object_weight",
      "data_root",  "synth_train",  "synth_val",     "synth_classes"};
  return keys;
}

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& field) {
  if (auto it = j.find(key); it != j.end()) {
    try {
      it->get_to(field);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad value for ") + key + ": " + e.what());
    }
  }
}

// Sample order of one epoch: Fisher-Yates on the epoch's data stream.
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = seed_all(seed).data(epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

RgbThermalSample flipped(const RgbThermalSample& s) {
  RgbThermalSample f = s;
  f.rgb = ag::flip_horizontal(s.rgb);
  f.thermal = ag::flip_horizontal(s.thermal);
  for (std::size_t y = 0; y < s.rows; ++y) {
    std::reverse(f.labels.begin() + static_cast<std::ptrdiff_t>(y * s.cols),
                 f.labels.begin() + static_cast<std::ptrdiff_t>((y + 1) * s.cols));
  }
  return f;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

nlohmann::json to_json(const RunConfig& cfg) {
  auto j = to_json(cfg.model);
  const auto& t = cfg.train;
  j["lr"] = t.lr;
  j["weight_decay"] = t.weight_decay;
  j["layer_decay"] = t.layer_decay;
  j["beta1"] = t.beta1;
  j["beta2"] = t.beta2;
  j["adam_eps"] = t.adam_eps;
  j["epochs"] = t.epochs;
  j["batch_size"] = t.batch_size;
  j["max_steps"] = t.max_steps;
  j["grad_clip"] = t.grad_clip;
  j["aux_loss"] = t.aux_loss;
  j["hflip"] = t.hflip;
  j["checkpoint_every"] = t.checkpoint_every;
  j["lambda_bce"] = t.weights.bce;
  j["lambda_dice"] = t.weights.dice;
  j["lambda_cls"] = t.weights.cls;
  j["lambda_ce"] = t.weights.ce;
  j["no_object_weight"] = t.weights.no_object;
  j["data_root"] = cfg.data.root;
  j["synth_train"] = cfg.data.synth_train;
  j["synth_val"] = cfg.data.synth_val;
  j["synth_classes"] = cfg.data.synth_classes;
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig cfg;
  cfg.model = model_config_from_json(j);
  const auto model_keys = to_json(ModelConfig{});
  for (const auto& [key, value] : j.items()) {
    if (!model_keys.contains(key) && !train_keys().contains(key)) throw ConfigError("unknown config key: " + key);
  }
  auto& t = cfg.train;
  read_key(j, "lr", t.lr);
  read_key(j, "weight_decay", t.weight_decay);
  read_key(j, "layer_decay", t.layer_decay);
  read_key(j, "beta1", t.beta1);
  read_key(j, "beta2", t.beta2);
  read_key(j, "adam_eps", t.adam_eps);
  read_key(j, "epochs", t.epochs);
  read_key(j, "batch_size", t.batch_size);
  read_key(j, "max_steps", t.max_steps);
  read_key(j, "grad_clip", t.grad_clip);
  read_key(j, "aux_loss", t.aux_loss);
  read_key(j, "hflip", t.hflip);
  read_key(j, "checkpoint_every", t.checkpoint_every);
  read_key(j, "lambda_bce", t.weights.bce);
  read_key(j, "lambda_dice", t.weights.dice);
  read_key(j, "lambda_cls", t.weights.cls);
  read_key(j, "lambda_ce", t.weights.ce);
  read_key(j, "no_object_weight", t.weights.no_object);
  read_key(j, "data_root", cfg.data.root);
  read_key(j, "synth_train", cfg.data.synth_train);
  read_key(j, "synth_val", cfg.data.synth_val);
  read_key(j, "synth_classes", cfg.data.synth_classes);
  if (t.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (t.batch_size < 1) throw ConfigError("batch_size must be positive");
  if (t.max_steps < 0) throw ConfigError("max_steps must be >= 0");
  if (t.grad_clip < 0.0) throw ConfigError("grad_clip must be >= 0");
  if (t.lr <= 0.0) throw ConfigError("lr must be positive");
  for (double w : {t.weights.bce, t.weights.dice, t.weights.cls, t.weights.ce, t.weights.no_object}) {
    if (!(w >= 0.0)) throw ConfigError("loss weights must be non-negative");
  }
  cfg.model = validate_config(cfg.model);
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

double lr_multiplier(const std::string& name, double layer_decay) {
  if (name.rfind("trunk.stage", 0) == 0 && name.size() > 11) {
    const int stage = name[11] - '0';
    if (stage >= 1 && stage <= 4) return std::pow(layer_decay, 4 - stage);
  }
  if (name.rfind("trunk.patch_embed", 0) == 0 || name == "trunk.pos_embed") return std::pow(layer_decay, 4);
  return 1.0;
}

AdamW::AdamW(const nn::ParamSet& params, const TrainConfig& cfg)
    : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.adam_eps), wd_(cfg.weight_decay) {
  for (const auto& [name, p] : params.items()) {
    Slot s;
    s.name = name;
    s.param = p;
    s.m.assign(p.numel(), 0.0);
    s.v.assign(p.numel(), 0.0);
    s.lr = cfg.lr * lr_multiplier(name, cfg.layer_decay);
    // Vectors (biases, norms, scalar gates) are not decayed.
    s.decay = p.rank() >= 2;
    slots_.push_back(std::move(s));
  }
}

double AdamW::lr_of(const std::string& name) const {
  for (const auto& s : slots_) {
    if (s.name == name) return s.lr;
  }
  throw std::out_of_range("no parameter named " + name);
}

double AdamW::clip_grad_norm(double max_norm) {
  double sq = 0.0;
  for (const auto& s : slots_) {
    if (!s.param.has_grad()) continue;
    for (double g : s.param.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double k = max_norm / norm;
    for (auto& s : slots_) {
      if (!s.param.has_grad()) continue;
      Tensor p = s.param;
      for (double& g : p.mutable_grad()) g *= k;
    }
  }
  return norm;
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& s : slots_) {
    if (!s.param.has_grad()) continue;
    auto p = s.param.mutable_data();
    const auto g = s.param.grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
      s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
      if (s.decay) p[i] -= s.lr * wd_ * p[i];
      p[i] -= s.lr * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + eps_);
    }
  }
}

void AdamW::export_state(NamedArrays& out) const {
  for (const auto& s : slots_) {
    out["adam_m/" + s.name] = NamedArray{s.param.shape(), s.m};
    out["adam_v/" + s.name] = NamedArray{s.param.shape(), s.v};
  }
}

void AdamW::import_state(const NamedArrays& in, std::uint64_t steps) {
  for (auto& s : slots_) {
    for (const char* kind : {"adam_m/", "adam_v/"}) {
      auto it = in.find(kind + s.name);
      if (it == in.end()) throw CheckpointError("checkpoint lacks optimizer state " + std::string(kind) + s.name);
      if (it->second.data.size() != s.param.numel()) {
        throw CheckpointError("optimizer state " + std::string(kind) + s.name + " has the wrong size");
      }
      (kind[5] == 'm' ? s.m : s.v) = it->second.data;
    }
  }
  t_ = steps;
}

SampleLoss sample_loss(const HapNet& model, const RgbThermalSample& sample, const TrainConfig& cfg) {
  const auto out = model.forward(sample.rgb, sample.thermal, cfg.aux_loss);
  const auto small = downsample_labels(sample.labels, sample.rows, sample.cols, 4);
  const auto gt = segments_from_labels(small, out.mask_rows, out.mask_cols, model.config().real_classes());
  SampleLoss res;
  res.parts = matched_losses(out.queries.class_logits, out.mask_logits, gt, cfg.weights);
  if (cfg.aux_loss) {
    auto aux = aux_ce_loss(out.aux_logits, small);
    res.parts.ce = aux.value;
    res.aux_all_ignored = aux.all_ignored;
  }
  res.total = total_loss(res.parts, cfg.weights);
  return res;
}

Trainer::Trainer(const RunConfig& cfg, std::vector<RgbThermalSample> train_set)
    : cfg_(cfg), model_(cfg.model), params_(model_.parameters(cfg.train.aux_loss)), data_(std::move(train_set)) {
  if (data_.empty()) throw DataError("training set is empty");
  for (const auto& s : data_) {
    if (s.rows != static_cast<std::size_t>(cfg.model.height) || s.cols != static_cast<std::size_t>(cfg.model.width)) {
      throw DataError("sample " + s.id + " is " + std::to_string(s.rows) + "x" + std::to_string(s.cols) +
                      " but the model expects " + std::to_string(cfg.model.height) + "x" +
                      std::to_string(cfg.model.width));
    }
  }
  opt_ = AdamW(params_, cfg.train);
}

std::size_t Trainer::steps_per_epoch() const {
  const auto b = static_cast<std::size_t>(cfg_.train.batch_size);
  return (data_.size() + b - 1) / b;
}

std::uint64_t Trainer::total_steps() const {
  const std::uint64_t all = static_cast<std::uint64_t>(cfg_.train.epochs) * steps_per_epoch();
  if (cfg_.train.max_steps > 0) return std::min<std::uint64_t>(all, static_cast<std::uint64_t>(cfg_.train.max_steps));
  return all;
}

std::vector<std::size_t> Trainer::batch_indices(std::uint64_t s) const {
  const std::size_t spe = steps_per_epoch();
  const std::uint64_t epoch = s / spe;
  const std::size_t k = static_cast<std::size_t>(s % spe);
  const auto order = epoch_order(cfg_.model.seed, epoch, data_.size());
  const auto b = static_cast<std::size_t>(cfg_.train.batch_size);
  const std::size_t lo = k * b, hi = std::min(order.size(), lo + b);
  return {order.begin() + static_cast<std::ptrdiff_t>(lo), order.begin() + static_cast<std::ptrdiff_t>(hi)};
}

StepLog Trainer::train_step() {
  const auto batch = batch_indices(step_);
  const double inv = 1.0 / static_cast<double>(batch.size());
  params_.zero_grad();
  StepLog log;
  Rng aug = seed_all(cfg_.model.seed).augment(step_);
  for (std::size_t idx : batch) {
    const RgbThermalSample* s = &data_[idx];
    RgbThermalSample tmp;
    if (cfg_.train.hflip && aug.bernoulli(0.5)) {
      tmp = flipped(*s);
      s = &tmp;
    }
    SampleLoss l;
    try {
      l = sample_loss(model_, *s, cfg_.train);
    } catch (const NonFiniteLoss& e) {
      throw NonFiniteLoss(std::string(e.what()) + " (step " + std::to_string(step_) + ", sample " + s->id + ")");
    }
    ag::backward(ag::scale(l.total, inv));
    log.total += l.total.item() * inv;
    log.bce += l.parts.bce.item() * inv;
    log.dice += l.parts.dice.item() * inv;
    log.cls += l.parts.cls.item() * inv;
    if (l.parts.ce.defined()) log.ce += l.parts.ce.item() * inv;
    log.ids.push_back(s->id);
  }
  if (cfg_.train.grad_clip > 0.0) opt_.clip_grad_norm(cfg_.train.grad_clip);
  opt_.step();
  ++step_;
  return log;
}

void Trainer::run(std::ostream* log, const std::function<void(int)>& on_epoch, std::uint64_t until) {
  const std::uint64_t end = until == 0 ? total_steps() : std::min(until, total_steps());
  const std::size_t spe = steps_per_epoch();
  while (step_ < end) {
    const auto l = train_step();
    epoch_acc_.total += l.total;
    epoch_acc_.bce += l.bce;
    epoch_acc_.dice += l.dice;
    epoch_acc_.cls += l.cls;
    epoch_acc_.ce += l.ce;
    ++epoch_count_;
    const bool epoch_done = step_ % spe == 0;
    if (epoch_done || step_ == end) {
      const auto n = static_cast<double>(epoch_count_);
      const int epoch = static_cast<int>((step_ + spe - 1) / spe);
      if (log != nullptr) {
        *log << "epoch " << epoch << " step " << step_ << " loss " << fmt(epoch_acc_.total / n) << " bce "
             << fmt(epoch_acc_.bce / n) << " dice " << fmt(epoch_acc_.dice / n) << " cls " << fmt(epoch_acc_.cls / n)
             << " ce " << fmt(epoch_acc_.ce / n) << (epoch_done ? "" : " (partial)") << "\n";
        log->flush();
      }
      epoch_acc_ = StepLog{};
      epoch_count_ = 0;
      if (epoch_done && on_epoch) on_epoch(epoch);
    }
  }
}

Archive model_archive(const HapNet& model, const RunConfig& cfg) {
  Archive a;
  a.meta["format"] = "hapnet-checkpoint";
  a.meta["config"] = to_json(cfg);
  const auto params = model.parameters(true);
  for (const auto& [name, p] : params.items()) {
    a.arrays["param/" + name] = NamedArray{p.shape(), {p.data().begin(), p.data().end()}};
  }
  return a;
}

Archive Trainer::checkpoint() const {
  Archive a = model_archive(model_, cfg_);
  a.meta["step"] = step_;
  a.meta["steps_per_epoch"] = steps_per_epoch();
  opt_.export_state(a.arrays);
  return a;
}

void load_parameters(HapNet& model, const NamedArrays& arrays) {
  const auto params = model.parameters(true);
  for (const auto& [name, p] : params.items()) {
    auto it = arrays.find("param/" + name);
    if (it == arrays.end()) throw CheckpointError("checkpoint lacks parameter " + name);
    if (it->second.shape != p.shape()) {
      throw CheckpointError("parameter " + name + ": checkpoint shape " + ag::shape_str(it->second.shape) +
                            " vs model " + ag::shape_str(p.shape()));
    }
    Tensor t = p;
    std::copy(it->second.data.begin(), it->second.data.end(), t.mutable_data().begin());
  }
}

RunConfig checkpoint_config(const Archive& archive) {
  if (!archive.meta.contains("config")) throw CheckpointError("checkpoint has no embedded config");
  try {
    return run_config_from_json(archive.meta.at("config"));
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("embedded config is invalid: ") + e.what());
  }
}

void Trainer::restore(const Archive& archive) {
  if (checkpoint_config(archive).model != cfg_.model) throw CheckpointError("checkpoint model config differs");
  load_parameters(model_, archive.arrays);
  const auto steps = archive.meta.value("step", std::uint64_t{0});
  opt_.import_state(archive.arrays, steps);
  step_ = steps;
  epoch_acc_ = StepLog{};
  epoch_count_ = 0;
}

EvalResult evaluate(const HapNet& model, const std::vector<RgbThermalSample>& samples,
                    const std::vector<std::string>& class_names, const fs::path& overlay_dir) {
  EvalResult r{ConfusionMatrix(static_cast<std::size_t>(model.config().real_classes())), {}, {}, {}};
  for (const auto& s : samples) {
    const auto pred = model.predict(s.rgb, s.thermal);
    r.cm.accumulate(s.labels, pred.labels);
    if (!overlay_dir.empty()) write_overlay_png(overlay_dir / (s.id + ".png"), s, pred.labels);
  }
  r.per_class = per_class(r.cm);
  r.mean = reduce(r.per_class);
  r.csv = metrics_csv(r.per_class, class_names);
  return r;
}

DataSource resolve_data(const RunConfig& cfg, const std::string& eval_split) {
  DataSource d;
  std::string root = cfg.data.root == "synthetic" ? std::string() : cfg.data.root;
  if (cfg.data.root.empty()) {
    if (const char* env = std::getenv("HAPNET_DATA_ROOT"); env != nullptr) root = env;
  }
  const int real = cfg.model.real_classes();
  if (!root.empty()) {
    std::optional<std::pair<int, int>> size;
    auto manifest = load_mfnet(root, real);
    // Resize only when the tree's resolution differs from the model's.
    if (const auto& ids = manifest.split("train"); !ids.empty()) {
      const auto probe = load_sample(manifest, ids.front());
      if (probe.rows != static_cast<std::size_t>(cfg.model.height) ||
          probe.cols != static_cast<std::size_t>(cfg.model.width)) {
        manifest.target_size = std::make_pair(cfg.model.height, cfg.model.width);
      }
    }
    d.train = load_split(manifest, "train");
    d.eval = load_split(manifest, eval_split);
    d.class_names = manifest.class_names;
    d.description = "dataset " + root;
    return d;
  }
  const int k = cfg.data.synth_classes == 0 ? real : cfg.data.synth_classes;
  if (k > real) {
    throw ConfigError("synth_classes " + std::to_string(k) + " exceeds num_classes - 1 = " + std::to_string(real));
  }
  const SynthConfig sc{cfg.model.height, cfg.model.width, k};
  const auto ntrain = static_cast<std::size_t>(cfg.data.synth_train);
  d.train = synth_set(cfg.model.seed, sc, ntrain, 0);
  d.eval = eval_split == "train" ? d.train
                                 : synth_set(cfg.model.seed, sc, static_cast<std::size_t>(cfg.data.synth_val), ntrain);
  for (int c = 0; c < real; ++c) d.class_names.push_back("class" + std::to_string(c));
  d.description = "synthetic (" + std::to_string(k) + " classes)";
  return d;
}

ModelConfig apply_variant(ModelConfig cfg, const std::string& v) {
  if (v.size() == 1 && v[0] >= 'A' && v[0] <= 'I') {
    cfg.input_routing = parse_routing(v);
  } else if (v == "both") {
    cfg.glca_enabled = cfg.ccg_enabled = true;
  } else if (v == "glca") {
    cfg.glca_enabled = true;
    cfg.ccg_enabled = false;
  } else if (v == "ccg") {
    cfg.glca_enabled = false;
    cfg.ccg_enabled = true;
  } else if (v == "summation") {
    cfg.glca_enabled = cfg.ccg_enabled = false;
  } else if (v == "standard" || v == "deformable") {
    cfg.attention_kind = parse_attention_kind(v);
  } else {
    throw ConfigError("unknown ablation variant: " + v);
  }
  return cfg;
}

std::string variant_label(const std::string& v) {
  if (v.size() == 1 && v[0] >= 'A' && v[0] <= 'I') {
    const auto r = parse_routing(v);
    return v + " (vfm=" + std::string(to_string(trunk_modality(r))) + " cspd=" +
           std::string(to_string(prior_modality(r))) + ")";
  }
  if (v == "summation") return "summation (element-wise sum after resolution alignment)";
  if (v == "both") return "glca+ccg";
  if (v == "glca") return "glca only";
  if (v == "ccg") return "ccg only";
  return v + " attention";
}

std::vector<AblationRow> ablate(const RunConfig& cfg, const std::vector<std::string>& variants, const DataSource& data,
                                std::ostream* log) {
  for (const auto& v : variants) apply_variant(cfg.model, v);  // reject unknown names before training
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    RunConfig run = cfg;
    run.model = validate_config(apply_variant(cfg.model, v));
    if (log != nullptr) *log << "variant " << v << "\n";
    Trainer trainer(run, data.train);
    trainer.run(log);
    const auto res = evaluate(trainer.model(), data.eval, data.class_names);
    rows.push_back({v, trainer.model().parameters(false).numel(), res.mean});
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,params,macc,miou\n";
  for (const auto& r : rows) {
    out += variant_label(r.variant) + "," + std::to_string(r.params) + "," + fmt(r.mean.macc) + "," +
           fmt(r.mean.miou) + "\n";
  }
  return out;
}

}  // namespace hapnet
