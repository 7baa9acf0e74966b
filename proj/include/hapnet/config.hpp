#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include <json.hpp>

namespace hapnet {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class AttentionKind { kStandard, kDeformable };
enum class FallbackFusion { kSummation };

// Which modalities feed the trunk (VFM side) and the spatial prior branch.
enum class Modality { kRgbThermal, kRgb, kThermal };

// Rows A..I of the input-strategy grid: trunk modality x prior modality.
enum class InputRouting { A, B, C, D, E, F, G, H, I };

Modality trunk_modality(InputRouting r);
Modality prior_modality(InputRouting r);
std::string_view to_string(InputRouting r);
InputRouting parse_routing(std::string_view name);
std::string_view to_string(Modality m);
std::string_view to_string(AttentionKind k);
AttentionKind parse_attention_kind(std::string_view name);

struct ModelConfig {
  int height = 64;
  int width = 64;
  int embed_dim = 64;
  std::array<int, 4> trunk_depth{2, 2, 2, 2};
  int trunk_heads = 4;
  std::array<int, 3> cspd_channels{32, 64, 128};
  std::array<int, 3> cspd_depth{1, 1, 1};
  int num_queries = 16;
  int decoder_dim = 64;
  int decoder_layers = 3;
  int decoder_heads = 4;
  // Includes the trailing "no object" class.
  int num_classes = 10;
  AttentionKind attention_kind = AttentionKind::kStandard;
  int deform_points = 4;
  int ccg_ffn_ratio = 2;
  double kappa_init = 0.0;
  InputRouting input_routing = InputRouting::D;
  bool glca_enabled = true;
  bool ccg_enabled = true;
  FallbackFusion fallback_fusion = FallbackFusion::kSummation;
  std::uint64_t seed = 0;

  int real_classes() const { return num_classes - 1; }
  int no_object() const { return num_classes - 1; }
  bool operator==(const ModelConfig&) const = default;
};

struct TokenLayout {
  std::size_t vit_tokens = 0;
  std::array<std::size_t, 3> prior_tokens_per_scale{};
  std::size_t prior_total = 0;
  std::array<std::size_t, 3> scale_offsets{};
  // Spatial grids (rows, cols) for strides 8/16/32.
  std::array<std::array<std::size_t, 2>, 3> prior_grid{};
  std::array<std::size_t, 2> vit_grid{};

  bool operator==(const TokenLayout&) const = default;
};

inline constexpr std::array<int, 3> kPriorStrides{8, 16, 32};
inline constexpr int kPatchSize = 16;

ModelConfig validate_config(const ModelConfig& cfg);
TokenLayout token_layout(const ModelConfig& cfg);

nlohmann::json to_json(const ModelConfig& cfg);
// Missing keys keep their defaults; keys that are not model fields are ignored
// (run documents also carry training keys, see harness).
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace hapnet
