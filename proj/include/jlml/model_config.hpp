#pragma once

#include <array>
#include <cstddef>
#include <string>

#include "jlml/kv.hpp"

namespace jlml {

enum class LossMode { multi, uni };

std::string loss_mode_name(LossMode mode);
LossMode parse_loss_mode(std::string_view text);

// 1x1 reduce -> 3x3 spatial -> 1x1 expand.
struct BottleneckWidths {
  std::size_t reduce = 0;
  std::size_t spatial = 0;
  std::size_t expand = 0;
  bool operator==(const BottleneckWidths&) const = default;
};

inline constexpr std::size_t kStages = 4;
using StageWidths = std::array<BottleneckWidths, kStages>;

struct ModelConfig {
  std::size_t input_height = 224;
  std::size_t input_width = 224;
  std::size_t stem_channels = 32;
  StageWidths global_stages{};
  StageWidths local_stages{};
  std::size_t blocks_per_stage = 3;
  std::size_t stripes = 4;
  std::size_t global_feature_dim = 512;
  std::size_t local_feature_dim = 512;
  std::size_t num_identities = 751;
  bool share_stem = true;
  bool sfl_enabled = true;
  LossMode loss_mode = LossMode::multi;
  double lambda_global = 5e-4;
  double lambda_local = 5e-4;
  bool batch_norm = true;

  static ModelConfig paper();
  static ModelConfig toy();

  // Throws ConfigError on zero sizes, indivisible stripes or a plan whose
  // windows do not fit.
  void validate() const;

  // Effective regulariser weights (zero with SFL disabled).
  double effective_lambda_global() const { return sfl_enabled ? lambda_global : 0.0; }
  double effective_lambda_local() const { return sfl_enabled ? lambda_local : 0.0; }

  std::size_t global_channels() const { return global_stages.back().expand; }  // d_g
  std::size_t local_channels() const { return local_stages.back().expand; }    // d_l
  std::size_t stem_height() const;
  std::size_t stem_width() const;

  KeyValues to_key_values() const;
  // Starts from `base` and applies every pair; unknown keys throw ConfigError.
  static ModelConfig from_key_values(const KeyValues& kv, const ModelConfig& base = paper());
  // Applies one key; returns false when the key is not a model key.
  bool apply(std::string_view key, std::string_view value);

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace jlml
