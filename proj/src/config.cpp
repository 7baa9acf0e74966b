#include "hapnet/config.hpp"

#include <sstream>

namespace hapnet {

namespace {

void require_positive(int value, const char* field) {
  if (value < 1) {
    throw ConfigError(std::string(field) + " must be positive, got " + std::to_string(value));
  }
}

constexpr std::array<std::string_view, 9> kRoutingNames{"A", "B", "C", "D", "E",
                                                        "F", "G", "H", "I"};

}  // namespace

Modality trunk_modality(InputRouting r) {
  switch (r) {
    case InputRouting::A:
    case InputRouting::B:
    case InputRouting::C:
      return Modality::kRgbThermal;
    case InputRouting::D:
    case InputRouting::E:
    case InputRouting::F:
      return Modality::kRgb;
    default:
      return Modality::kThermal;
  }
}

Modality prior_modality(InputRouting r) {
  switch (static_cast<int>(r) % 3) {
    case 0:
      return Modality::kRgbThermal;
    case 1:
      return Modality::kRgb;
    default:
      return Modality::kThermal;
  }
}

std::string_view to_string(InputRouting r) { return kRoutingNames[static_cast<int>(r)]; }

InputRouting parse_routing(std::string_view name) {
  for (std::size_t i = 0; i < kRoutingNames.size(); ++i) {
    if (kRoutingNames[i] == name) return static_cast<InputRouting>(i);
  }
  throw ConfigError("unknown input routing '" + std::string(name) + "' (expected A..I)");
}

std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::kRgbThermal:
      return "RGB+T";
    case Modality::kRgb:
      return "RGB";
    default:
      return "T";
  }
}

std::string_view to_string(AttentionKind k) {
  return k == AttentionKind::kStandard ? "standard" : "deformable";
}

AttentionKind parse_attention_kind(std::string_view name) {
  if (name == "standard") return AttentionKind::kStandard;
  if (name == "deformable") return AttentionKind::kDeformable;
  throw ConfigError("unknown attention kind '" + std::string(name) + "'");
}

ModelConfig validate_config(const ModelConfig& cfg) {
  require_positive(cfg.height, "H");
  require_positive(cfg.width, "W");
  if (cfg.height % 32 != 0) throw ConfigError("H not divisible by 32");
  if (cfg.width % 32 != 0) throw ConfigError("W not divisible by 32");
  require_positive(cfg.embed_dim, "D");
  for (int d : cfg.trunk_depth) {
    if (d < 0) throw ConfigError("trunk_depth entries must be non-negative");
  }
  require_positive(cfg.trunk_heads, "trunk_heads");
  if (cfg.embed_dim % cfg.trunk_heads != 0) {
    throw ConfigError("D not divisible by trunk_heads");
  }
  for (int c : cfg.cspd_channels) require_positive(c, "cspd_channels");
  for (int d : cfg.cspd_depth) {
    if (d < 0) throw ConfigError("cspd_depth entries must be non-negative");
  }
  require_positive(cfg.num_queries, "Q");
  require_positive(cfg.decoder_dim, "C");
  if (cfg.decoder_layers < 0) throw ConfigError("decoder_layers must be non-negative");
  require_positive(cfg.decoder_heads, "decoder_heads");
  if (cfg.decoder_dim % cfg.decoder_heads != 0) {
    throw ConfigError("C not divisible by decoder_heads");
  }
  require_positive(cfg.num_classes, "N");
  if (cfg.num_classes < 2) throw ConfigError("N must be at least 2 (one class plus no-object)");
  if (cfg.num_classes > 256) throw ConfigError("N must fit 8-bit label images");
  require_positive(cfg.deform_points, "deform_points");
  require_positive(cfg.ccg_ffn_ratio, "ccg_ffn_ratio");
  return cfg;
}

TokenLayout token_layout(const ModelConfig& cfg) {
  TokenLayout layout;
  const auto h = static_cast<std::size_t>(cfg.height);
  const auto w = static_cast<std::size_t>(cfg.width);
  layout.vit_grid = {h / kPatchSize, w / kPatchSize};
  layout.vit_tokens = layout.vit_grid[0] * layout.vit_grid[1];
  std::size_t offset = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    const auto stride = static_cast<std::size_t>(kPriorStrides[s]);
    layout.prior_grid[s] = {h / stride, w / stride};
    layout.prior_tokens_per_scale[s] = layout.prior_grid[s][0] * layout.prior_grid[s][1];
    layout.scale_offsets[s] = offset;
    offset += layout.prior_tokens_per_scale[s];
  }
  layout.prior_total = offset;
  return layout;
}

nlohmann::json to_json(const ModelConfig& cfg) {
  return nlohmann::json{
      {"height", cfg.height},
      {"width", cfg.width},
      {"embed_dim", cfg.embed_dim},
      {"trunk_depth", cfg.trunk_depth},
      {"trunk_heads", cfg.trunk_heads},
      {"cspd_channels", cfg.cspd_channels},
      {"cspd_depth", cfg.cspd_depth},
      {"num_queries", cfg.num_queries},
      {"decoder_dim", cfg.decoder_dim},
      {"decoder_layers", cfg.decoder_layers},
      {"decoder_heads", cfg.decoder_heads},
      {"num_classes", cfg.num_classes},
      {"attention_kind", std::string(to_string(cfg.attention_kind))},
      {"deform_points", cfg.deform_points},
      {"ccg_ffn_ratio", cfg.ccg_ffn_ratio},
      {"kappa_init", cfg.kappa_init},
      {"input_routing", std::string(to_string(cfg.input_routing))},
      {"glca_enabled", cfg.glca_enabled},
      {"ccg_enabled", cfg.ccg_enabled},
      {"fallback_fusion", "summation"},
      {"seed", cfg.seed},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config document must be a JSON object");
  ModelConfig cfg;
  auto read = [&j](const char* key, auto& field) {
    if (auto it = j.find(key); it != j.end()) {
      try {
        it->get_to(field);
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad value for ") + key + ": " + e.what());
      }
    }
  };
  read("height", cfg.height);
  read("width", cfg.width);
  read("embed_dim", cfg.embed_dim);
  read("trunk_depth", cfg.trunk_depth);
  read("trunk_heads", cfg.trunk_heads);
  read("cspd_channels", cfg.cspd_channels);
  read("cspd_depth", cfg.cspd_depth);
  read("num_queries", cfg.num_queries);
  read("decoder_dim", cfg.decoder_dim);
  read("decoder_layers", cfg.decoder_layers);
  read("decoder_heads", cfg.decoder_heads);
  read("num_classes", cfg.num_classes);
  read("deform_points", cfg.deform_points);
  read("ccg_ffn_ratio", cfg.ccg_ffn_ratio);
  read("kappa_init", cfg.kappa_init);
  read("glca_enabled", cfg.glca_enabled);
  read("ccg_enabled", cfg.ccg_enabled);
  read("seed", cfg.seed);
  if (auto it = j.find("attention_kind"); it != j.end()) {
    cfg.attention_kind = parse_attention_kind(it->get<std::string>());
  }
  if (auto it = j.find("input_routing"); it != j.end()) {
    cfg.input_routing = parse_routing(it->get<std::string>());
  }
  if (auto it = j.find("fallback_fusion"); it != j.end()) {
    if (it->get<std::string>() != "summation") {
      throw ConfigError("fallback_fusion must be 'summation'");
    }
  }
  return cfg;
}

}  // namespace hapnet
