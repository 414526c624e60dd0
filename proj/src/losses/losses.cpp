#include "jlml/losses.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "jlml/errors.hpp"
#include "jlml/ops.hpp"

namespace jlml {

namespace {

// Scalar output holding `value` whose backward adds d * seed to x's gradient.
Tensor scalar_op(const char* op, const Tensor& x, double value, std::vector<double> d) {
  Tensor out = Tensor::scalar(value, x.dtype());
  if (tracking({&x})) {
    out.set_requires_grad(true);
    Graph::active()->record(op, [x = x, out, d = std::move(d), op]() mutable {
      if (!out.has_grad()) return;
      const double seed = out.grad_at(0) * fault::sign(op);
      visit_dtype(x.dtype(), [&](auto zero) {
        using T = decltype(zero);
        auto g = x.grad<T>();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<T>(seed * d[i]);
      });
    });
  }
  return out;
}

}  // namespace

Tensor softmax_xent(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2) throw DimensionError("softmax_xent: logits must be N x classes");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError("softmax_xent: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                         " rows");
  }
  if (n == 0) throw DimensionError("softmax_xent: empty batch");
  const std::vector<double> z = logits.to_doubles();
  std::vector<double> d(z.size());
  double loss = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] >= k) {
      throw ConfigError("softmax_xent: label " + std::to_string(labels[r]) + " outside [0, " + std::to_string(k) +
                        ")");
    }
    const double* row = z.data() + r * k;
    double mx = row[0];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, row[c]);
    double sum = 0;
    for (std::size_t c = 0; c < k; ++c) sum += std::exp(row[c] - mx);
    const double lse = mx + std::log(sum);
    loss += lse - row[labels[r]];
    for (std::size_t c = 0; c < k; ++c) {
      const double p = std::exp(row[c] - lse);
      d[r * k + c] = (p - (c == labels[r] ? 1.0 : 0.0)) / static_cast<double>(n);
    }
  }
  return scalar_op("softmax_xent", logits, loss / static_cast<double>(n), std::move(d));
}

Tensor group_lasso_21(const Tensor& w) {
  if (w.rank() != 2) throw DimensionError("group_lasso_21: expected a matrix, got " + shape_str(w.shape()));
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  const std::vector<double> v = w.to_doubles();
  std::vector<double> d(v.size());
  double total = 0;
  for (std::size_t c = 0; c < cols; ++c) {
    // Scale by the largest entry so tiny columns do not underflow to zero.
    double big = 0;
    for (std::size_t r = 0; r < rows; ++r) big = std::max(big, std::abs(v[r * cols + c]));
    double sq = 0;
    if (big > 0) {
      for (std::size_t r = 0; r < rows; ++r) sq += (v[r * cols + c] / big) * (v[r * cols + c] / big);
    }
    const double norm = big * std::sqrt(sq);
    total += norm;
    const double inv = 1.0 / std::sqrt(norm * norm + kNormSmoothing);
    for (std::size_t r = 0; r < rows; ++r) d[r * cols + c] = v[r * cols + c] * inv;
  }
  return scalar_op("group_lasso_21", w, total, std::move(d));
}

Tensor exclusive_group_lasso_12(const Tensor& w, std::size_t stripes, std::size_t segment) {
  if (w.rank() != 2) throw DimensionError("exclusive_group_lasso_12: expected a matrix, got " + shape_str(w.shape()));
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  if (stripes == 0 || segment == 0 || cols != stripes * segment) {
    throw DimensionError("exclusive_group_lasso_12: " + std::to_string(cols) + " columns do not split into " +
                         std::to_string(stripes) + " segments of " + std::to_string(segment));
  }
  const std::vector<double> v = w.to_doubles();
  std::vector<double> d(v.size());
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < stripes; ++j) {
      const std::size_t base = r * cols + j * segment;
      double l1 = 0;
      for (std::size_t k = 0; k < segment; ++k) l1 += std::abs(v[base + k]);
      total += l1 * l1;
      for (std::size_t k = 0; k < segment; ++k) {
        const double x = v[base + k];
        d[base + k] = 2.0 * l1 * x / std::sqrt(x * x + kNormSmoothing);
      }
    }
  }
  return scalar_op("exclusive_group_lasso_12", w, total, std::move(d));
}

LossResult combined_losses(const ForwardOutput& out, std::span<const std::size_t> labels, const JlmlModel& model,
                           double lambda_global, double lambda_local, LossMode mode) {
  if (lambda_global < 0 || lambda_local < 0) throw ConfigError("regulariser weights must be non-negative");
  const ModelConfig& c = model.config();
  const Tensor reg_g = group_lasso_21(model.global_feature_weight());
  const Tensor reg_l = exclusive_group_lasso_12(model.local_feature_weight(), c.stripes, c.local_channels());
  const Tensor penalty = add(scale(reg_g, lambda_global), scale(reg_l, lambda_local));

  LossResult r;
  LossBreakdown& b = r.breakdown;
  b.lambda_global = lambda_global;
  b.lambda_local = lambda_local;
  b.reg_global = reg_g.item();
  b.reg_local = reg_l.item();
  if (mode == LossMode::multi) {
    if (!out.global_logits.defined() || !out.local_logits.defined()) {
      throw ConfigError("multi-loss needs per-branch heads; the model was built for uni-loss");
    }
    const Tensor ce_g = softmax_xent(out.global_logits, labels);
    const Tensor ce_l = softmax_xent(out.local_logits, labels);
    b.ce_global = ce_g.item();
    b.ce_local = ce_l.item();
    r.total = add(add(ce_g, ce_l), penalty);
  } else {
    if (!out.fused_logits.defined()) {
      throw ConfigError("uni-loss needs the fused head; the model was built for multi-loss");
    }
    const Tensor ce = softmax_xent(out.fused_logits, labels);
    b.ce_global = b.ce_local = ce.item();
    r.total = add(ce, penalty);
  }
  b.l_global = b.ce_global + lambda_global * b.reg_global;
  b.l_local = b.ce_local + lambda_local * b.reg_local;
  b.total = r.total.item();
  return r;
}

LossResult combined_losses(const ForwardOutput& out, std::span<const std::size_t> labels, const JlmlModel& model) {
  const ModelConfig& c = model.config();
  return combined_losses(out, labels, model, c.effective_lambda_global(), c.effective_lambda_local(), c.loss_mode);
}

}  // namespace jlml
