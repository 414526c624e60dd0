#pragma once

#include <cstddef>
#include <span>

#include "jlml/model.hpp"
#include "jlml/tensor.hpp"

namespace jlml {

// Smoothing constant that gives the non-smooth norms a gradient at zero.
inline constexpr double kNormSmoothing = 1e-8;

// Mean over the batch of -log softmax(logits)[label]; labels are 0-based
// class indices. Returns a one-element tensor. Throws ConfigError for an
// out-of-range label and DimensionError for a length mismatch.
Tensor softmax_xent(const Tensor& logits, std::span<const std::size_t> labels);

// Sum of column l2 norms of w (c_g x d_g).
// The value is exact; the gradient uses sqrt(|v|^2 + eps).
Tensor group_lasso_21(const Tensor& w);

// Sum over rows i and stripes j of ||w[i, j*d : (j+1)*d]||_1^2 for
// w of shape c_l x (m*d). The value is exact; the gradient uses the smoothed
// sign x / sqrt(x^2 + eps).
Tensor exclusive_group_lasso_12(const Tensor& w, std::size_t stripes, std::size_t segment);

struct LossBreakdown {
  double ce_global = 0;
  double ce_local = 0;
  double reg_global = 0;
  double reg_local = 0;
  double l_global = 0;  // ce_global + lambda_global * reg_global
  double l_local = 0;   // ce_local + lambda_local * reg_local
  double lambda_global = 0;
  double lambda_local = 0;
  double total = 0;     // the optimised objective
};

struct LossResult {
  LossBreakdown breakdown;
  Tensor total;  // differentiable
};

// Multi-loss: total = l_global + l_local with one cross-entropy per branch
// head. Uni-loss: total = ce(fused head) + lambda_g reg_g + lambda_l reg_l,
// and that single cross-entropy is reported in both ce fields.
LossResult combined_losses(const ForwardOutput& out, std::span<const std::size_t> labels, const JlmlModel& model,
                           double lambda_global, double lambda_local, LossMode mode);

// Uses the model's loss mode and effective (SFL-aware) weights.
LossResult combined_losses(const ForwardOutput& out, std::span<const std::size_t> labels, const JlmlModel& model);

}  // namespace jlml
