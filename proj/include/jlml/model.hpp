#pragma once

#include <cstdint>
#include <memory>
#include <string_view>
#include <vector>

#include "jlml/model_config.hpp"
#include "jlml/ops.hpp"
#include "jlml/tensor.hpp"

namespace jlml {

struct ForwardOutput {
  Tensor global_feature;  // N x c_g
  Tensor local_feature;   // N x c_l
  // Per-branch heads (multi-loss mode).
  Tensor global_logits;   // N x n_id
  Tensor local_logits;    // N x n_id
  // Single head over concat(global, local) (uni-loss mode).
  Tensor fused_logits;    // N x n_id
};

// Two-branch network: shared stem, a global residual branch over the whole
// map, and a local branch with one residual stream per horizontal stripe.
// Copies share parameter storage, like Tensor.
class JlmlModel {
 public:
  JlmlModel() = default;

  static JlmlModel build(const ModelConfig& config, std::uint64_t seed, DType dtype = DType::f32);

  const ModelConfig& config() const;
  DType dtype() const;

  // In train mode batch-norm running statistics are updated in place.
  ForwardOutput forward(const Tensor& batch, Mode mode) const;

  // Learnable tensors in a fixed order.
  const std::vector<NamedTensor>& parameters() const;
  // Batch-norm running statistics.
  const std::vector<NamedTensor>& buffers() const;
  // Parameters followed by buffers.
  std::vector<NamedTensor> state() const;
  std::size_t parameter_count() const;
  // Tensor by name among parameters and buffers; throws ConfigError.
  const Tensor& tensor(std::string_view name) const;

  const Tensor& global_feature_weight() const;  // W_G, c_g x d_g
  const Tensor& local_feature_weight() const;   // W_L, c_l x (m * d_l)

  // Deep copy, optionally converting precision.
  JlmlModel clone(DType dtype) const;
  JlmlModel clone() const { return clone(dtype()); }
  // Copies values by name; throws DimensionError when the layouts disagree.
  void copy_state_from(const JlmlModel& other);

  void zero_grad() const;

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
};

}  // namespace jlml
