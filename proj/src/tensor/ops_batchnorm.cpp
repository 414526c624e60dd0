#include <cmath>

#include "jlml/ops.hpp"
#include "op_util.hpp"

namespace jlml {

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, const BatchNormState& bn, Mode mode) {
  BatchNormState state = bn;
  detail::require_rank(x, 4, "batchnorm2d", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), area = x.dim(2) * x.dim(3);
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &state.running_mean, &state.running_var}) {
    if (!t->defined() || t->shape() != Shape{c}) {
      throw DimensionError("batchnorm2d: per-channel tensors must have shape [" + std::to_string(c) + "]");
    }
    detail::require_same_dtype(x, *t, "batchnorm2d");
  }
  const std::size_t count = n * area;
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  // Normalised input and 1/sqrt(var + eps), saved for backward.
  auto xhat = std::make_shared<Tensor>(Tensor::zeros(x.shape(), x.dtype()));
  auto inv_std = std::make_shared<std::vector<double>>(c);

  visit_dtype(x.dtype(), [&](auto zero) {
    using T = decltype(zero);
    auto px = x.data<T>();
    auto py = out.data<T>();
    auto ph = xhat->data<T>();
    auto g = gamma.data<T>();
    auto b = beta.data<T>();
    auto rm = state.running_mean.data<T>();
    auto rv = state.running_var.data<T>();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double mean, var;
      if (mode == Mode::train) {
        double sum = 0;
        for (std::size_t s = 0; s < n; ++s) {
          const T* p = px.data() + (s * c + ch) * area;
          for (std::size_t i = 0; i < area; ++i) sum += p[i];
        }
        mean = sum / static_cast<double>(count);
        double sq = 0;
        for (std::size_t s = 0; s < n; ++s) {
          const T* p = px.data() + (s * c + ch) * area;
          for (std::size_t i = 0; i < area; ++i) {
            const double d = p[i] - mean;
            sq += d * d;
          }
        }
        var = sq / static_cast<double>(count);
        const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
        rm[ch] = static_cast<T>(state.momentum * rm[ch] + (1.0 - state.momentum) * mean);
        rv[ch] = static_cast<T>(state.momentum * rv[ch] + (1.0 - state.momentum) * unbiased);
      } else {
        mean = rm[ch];
        var = rv[ch];
      }
      const double istd = 1.0 / std::sqrt(var + state.eps);
      (*inv_std)[ch] = istd;
      for (std::size_t s = 0; s < n; ++s) {
        const std::size_t off = (s * c + ch) * area;
        for (std::size_t i = 0; i < area; ++i) {
          const T h = static_cast<T>((px[off + i] - mean) * istd);
          ph[off + i] = h;
          py[off + i] = g[ch] * h + b[ch];
        }
      }
    }
  });

  if (tracking({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    Graph::active()->record("batchnorm2d", [x = x, gamma = gamma, beta = beta, out, xhat, inv_std, mode, n, c, area]() mutable {
      if (!out.has_grad()) return;
      visit_dtype(out.dtype(), [&](auto zero) {
        using T = decltype(zero);
        const double s = fault::sign("batchnorm2d");
        auto dy = out.grad<T>();
        auto ph = xhat->data<T>();
        auto g = gamma.data<T>();
        const double m = static_cast<double>(n * area);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0, sum_dy_h = 0;
          for (std::size_t smp = 0; smp < n; ++smp) {
            const std::size_t off = (smp * c + ch) * area;
            for (std::size_t i = 0; i < area; ++i) {
              sum_dy += dy[off + i];
              sum_dy_h += static_cast<double>(dy[off + i]) * ph[off + i];
            }
          }
          if (gamma.requires_grad()) gamma.grad<T>()[ch] += static_cast<T>(s * sum_dy_h);
          if (beta.requires_grad()) beta.grad<T>()[ch] += static_cast<T>(s * sum_dy);
          if (!x.requires_grad()) continue;
          auto dx = x.grad<T>();
          const double k = s * g[ch] * (*inv_std)[ch];
          for (std::size_t smp = 0; smp < n; ++smp) {
            const std::size_t off = (smp * c + ch) * area;
            for (std::size_t i = 0; i < area; ++i) {
              if (mode == Mode::train) {
                dx[off + i] += static_cast<T>(k * (dy[off + i] - sum_dy / m - ph[off + i] * sum_dy_h / m));
              } else {
                dx[off + i] += static_cast<T>(k * dy[off + i]);
              }
            }
          }
        }
      });
    });
  }
  return out;
}

}  // namespace jlml
