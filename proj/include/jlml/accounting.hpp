#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "jlml/model_config.hpp"

namespace jlml {

// One weight layer (or a pooling step) of the layer plan.
struct LayerRow {
  std::string name;
  std::string kind;  // conv, pool, fc
  std::size_t kernel = 0;
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t out_h = 1;
  std::size_t out_w = 1;
  std::size_t copies = 1;  // identical instances, e.g. one per stripe
  std::size_t params = 0;  // summed over copies, including bias / batch-norm affine
  std::size_t macs = 0;    // per image, summed over copies
  bool head = false;
};

struct StageSize {
  std::string stage;
  std::size_t global_h = 0, global_w = 0;
  std::size_t local_h = 0, local_w = 0;  // per stripe
};

struct Accounting {
  std::vector<LayerRow> layers;
  std::vector<StageSize> stages;  // conv1, conv2_x .. conv5_x
  std::size_t params_total = 0;
  std::size_t params_heads = 0;
  std::size_t flops = 0;        // excluding heads; one multiply-accumulate = 2
  std::size_t flops_heads = 0;
  std::size_t depth = 0;        // weight layers on the longest input-to-logit path
  std::size_t streams = 0;      // global stream plus one per stripe

  std::size_t params_without_heads() const { return params_total - params_heads; }
};

// Closed-form accounting from the layer plan; no tensors are allocated.
Accounting account(const ModelConfig& config);

inline std::size_t count_params(const ModelConfig& config) { return account(config).params_total; }
inline std::size_t count_head_params(const ModelConfig& config) { return account(config).params_heads; }
inline std::size_t count_flops(const ModelConfig& config) { return account(config).flops; }

}  // namespace jlml
