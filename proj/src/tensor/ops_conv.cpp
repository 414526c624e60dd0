#include <algorithm>

#include "jlml/ops.hpp"
#include "op_util.hpp"

namespace jlml {

using detail::ConstMatrixMap;
using detail::MatrixMap;
using detail::RowMatrix;

std::size_t window_output(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t pad_begin,
                          std::size_t pad_end) {
  if (kernel == 0 || stride == 0) throw DimensionError("window kernel and stride must be positive");
  const std::size_t padded = input + pad_begin + pad_end;
  if (kernel > padded) {
    throw DimensionError("window of " + std::to_string(kernel) + " exceeds padded extent " + std::to_string(padded));
  }
  return (padded - kernel) / stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w;
  std::size_t f, kh, kw;
  std::size_t sh, sw, ph, pw;
  std::size_t oh, ow;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return oh * ow; }

};

// Columns [patch x (count * positions)] for samples [first, first + count).
template <class T>
void im2col(const T* x, const ConvGeometry& g, std::size_t first, std::size_t count, RowMatrix<T>& cols) {
  const std::size_t P = g.positions();
  const std::size_t width = count * P;
  cols.resize(static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(width));
  for (std::size_t s = 0; s < count; ++s) {
    const T* xs = x + (first + s) * g.c * g.h * g.w;
    for (std::size_t ch = 0; ch < g.c; ++ch) {
      const T* plane = xs + ch * g.h * g.w;
      for (std::size_t ki = 0; ki < g.kh; ++ki) {
        for (std::size_t kj = 0; kj < g.kw; ++kj) {
          T* row = cols.data() + ((ch * g.kh + ki) * g.kw + kj) * width + s * P;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.sh + ki) - static_cast<std::ptrdiff_t>(g.ph);
            T* dst = row + oy * g.ow;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
              std::fill(dst, dst + g.ow, T(0));
              continue;
            }
            const T* src = plane + static_cast<std::size_t>(iy) * g.w;
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * g.sw + kj) - static_cast<std::ptrdiff_t>(g.pw);
              dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T(0) : src[ix];
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const RowMatrix<T>& cols, const ConvGeometry& g, std::size_t first, std::size_t count, T* dx) {
  const std::size_t P = g.positions();
  const std::size_t width = count * P;
  for (std::size_t s = 0; s < count; ++s) {
    T* xs = dx + (first + s) * g.c * g.h * g.w;
    for (std::size_t ch = 0; ch < g.c; ++ch) {
      T* plane = xs + ch * g.h * g.w;
      for (std::size_t ki = 0; ki < g.kh; ++ki) {
        for (std::size_t kj = 0; kj < g.kw; ++kj) {
          const T* row = cols.data() + ((ch * g.kh + ki) * g.kw + kj) * width + s * P;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.sh + ki) - static_cast<std::ptrdiff_t>(g.ph);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            T* dst = plane + static_cast<std::size_t>(iy) * g.w;
            const T* src = row + oy * g.ow;
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * g.sw + kj) - static_cast<std::ptrdiff_t>(g.pw);
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

std::size_t chunk_samples(const ConvGeometry& g) {
  constexpr std::size_t kMaxColumnElements = std::size_t{1} << 22;
  const std::size_t per_sample = std::max<std::size_t>(1, g.patch() * g.positions());
  return std::clamp<std::size_t>(kMaxColumnElements / per_sample, 1, g.n);
}

template <class T>
void conv_forward(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvGeometry& g, Tensor& out) {
  const T* px = x.data<T>().data();
  T* py = out.data<T>().data();
  ConstMatrixMap<T> W(weight.data<T>().data(), g.f, g.patch());
  const std::size_t P = g.positions();
  const std::size_t step = chunk_samples(g);
  RowMatrix<T> cols, result;
  for (std::size_t first = 0; first < g.n; first += step) {
    const std::size_t count = std::min(step, g.n - first);
    im2col(px, g, first, count, cols);
    result.noalias() = W * cols;
    for (std::size_t s = 0; s < count; ++s) {
      for (std::size_t f = 0; f < g.f; ++f) {
        const T* src = result.data() + f * count * P + s * P;
        T* dst = py + ((first + s) * g.f + f) * P;
        std::copy(src, src + P, dst);
      }
    }
  }
  if (bias.defined()) {
    auto pb = bias.data<T>();
    for (std::size_t s = 0; s < g.n; ++s)
      for (std::size_t f = 0; f < g.f; ++f) {
        T* dst = py + (s * g.f + f) * P;
        for (std::size_t p = 0; p < P; ++p) dst[p] += pb[f];
      }
  }
}

template <class T>
void conv_backward(Tensor& x, Tensor& weight, Tensor& bias, Tensor& out, const ConvGeometry& g) {
  const T s = static_cast<T>(fault::sign("conv2d"));
  const std::size_t P = g.positions();
  const T* dy = out.grad<T>().data();
  const T* px = x.data<T>().data();
  ConstMatrixMap<T> W(weight.data<T>().data(), g.f, g.patch());
  const bool want_dx = x.requires_grad();
  const bool want_dw = weight.requires_grad();
  T* dx = want_dx ? x.grad<T>().data() : nullptr;
  std::optional<MatrixMap<T>> dW;
  if (want_dw) dW.emplace(weight.grad<T>().data(), g.f, g.patch());

  const std::size_t step = chunk_samples(g);
  RowMatrix<T> cols, dy_mat, dcols;
  for (std::size_t first = 0; first < g.n; first += step) {
    const std::size_t count = std::min(step, g.n - first);
    dy_mat.resize(static_cast<Eigen::Index>(g.f), static_cast<Eigen::Index>(count * P));
    for (std::size_t smp = 0; smp < count; ++smp)
      for (std::size_t f = 0; f < g.f; ++f) {
        const T* src = dy + ((first + smp) * g.f + f) * P;
        std::copy(src, src + P, dy_mat.data() + f * count * P + smp * P);
      }
    if (want_dw) {
      im2col(px, g, first, count, cols);
      dW->noalias() += s * (dy_mat * cols.transpose());
    }
    if (want_dx) {
      dcols.noalias() = s * (W.transpose() * dy_mat);
      col2im_add(dcols, g, first, count, dx);
    }
  }
  if (bias.defined() && bias.requires_grad()) {
    auto db = bias.grad<T>();
    for (std::size_t smp = 0; smp < g.n; ++smp)
      for (std::size_t f = 0; f < g.f; ++f) {
        const T* src = dy + (smp * g.f + f) * P;
        T acc = 0;
        for (std::size_t p = 0; p < P; ++p) acc += src[p];
        db[f] += s * acc;
      }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dOptions& options) {
  detail::require_rank(x, 4, "conv2d", "input");
  detail::require_rank(weight, 4, "conv2d", "weight");
  detail::require_same_dtype(x, weight, "conv2d");
  if (weight.dim(1) != x.dim(1)) {
    throw DimensionError("conv2d: input channels " + std::to_string(x.dim(1)) + " do not match weight " +
                         shape_str(weight.shape()));
  }
  ConvGeometry g{};
  g.n = x.dim(0);
  g.c = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.f = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.sh = options.stride[0];
  g.sw = options.stride[1];
  g.ph = options.pad[0];
  g.pw = options.pad[1];
  g.oh = window_output(g.h, g.kh, g.sh, g.ph, g.ph);
  g.ow = window_output(g.w, g.kw, g.sw, g.pw, g.pw);
  if (bias.defined()) {
    detail::require_same_dtype(x, bias, "conv2d");
    if (bias.shape() != Shape{g.f}) throw DimensionError("conv2d: bias must have shape [F]");
  }

  Tensor out = Tensor::zeros({g.n, g.f, g.oh, g.ow}, x.dtype());
  visit_dtype(x.dtype(), [&](auto zero) { conv_forward<decltype(zero)>(x, weight, bias, g, out); });

  if (tracking({&x, &weight, &bias})) {
    out.set_requires_grad(true);
    Graph::active()->record("conv2d", [x = x, weight = weight, bias = bias, out, g]() mutable {
      if (!out.has_grad()) return;
      visit_dtype(out.dtype(), [&](auto zero) { conv_backward<decltype(zero)>(x, weight, bias, out, g); });
    });
  }
  return out;
}

}  // namespace jlml
