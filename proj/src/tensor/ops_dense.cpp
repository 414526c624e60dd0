#include <cstring>

#include "jlml/ops.hpp"
#include "op_util.hpp"

namespace jlml {

using detail::ConstMatrixMap;
using detail::MatrixMap;

Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul", "lhs");
  detail::require_rank(b, 2, "matmul", "rhs");
  detail::require_same_dtype(a, b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n}, a.dtype());
  visit_dtype(a.dtype(), [&](auto zero) {
    using T = decltype(zero);
    ConstMatrixMap<T> A(a.data<T>().data(), m, k);
    ConstMatrixMap<T> B(b.data<T>().data(), k, n);
    MatrixMap<T> C(out.data<T>().data(), m, n);
    C.noalias() = A * B;
  });
  if (tracking({&a, &b})) {
    out.set_requires_grad(true);
    Graph::active()->record("matmul", [a = a, b = b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      visit_dtype(out.dtype(), [&](auto zero) {
        using T = decltype(zero);
        const T s = static_cast<T>(fault::sign("matmul"));
        ConstMatrixMap<T> dC(out.grad<T>().data(), m, n);
        if (a.requires_grad()) {
          MatrixMap<T> dA(a.grad<T>().data(), m, k);
          ConstMatrixMap<T> B(b.data<T>().data(), k, n);
          dA.noalias() += s * (dC * B.transpose());
        }
        if (b.requires_grad()) {
          MatrixMap<T> dB(b.grad<T>().data(), k, n);
          ConstMatrixMap<T> A(a.data<T>().data(), m, k);
          dB.noalias() += s * (A.transpose() * dC);
        }
      });
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::require_rank(x, 2, "linear", "input");
  detail::require_rank(weight, 2, "linear", "weight");
  detail::require_same_dtype(x, weight, "linear");
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  if (bias.defined()) {
    detail::require_same_dtype(x, bias, "linear");
    if (bias.shape() != Shape{out_dim}) throw DimensionError("linear: bias must have shape [out]");
  }
  Tensor out = Tensor::zeros({n, out_dim}, x.dtype());
  visit_dtype(x.dtype(), [&](auto zero) {
    using T = decltype(zero);
    ConstMatrixMap<T> X(x.data<T>().data(), n, in);
    ConstMatrixMap<T> W(weight.data<T>().data(), out_dim, in);
    MatrixMap<T> Y(out.data<T>().data(), n, out_dim);
    Y.noalias() = X * W.transpose();
    if (bias.defined()) {
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.data<T>().data(), out_dim);
      Y.rowwise() += b;
    }
  });
  if (tracking({&x, &weight, &bias})) {
    out.set_requires_grad(true);
    Graph::active()->record("linear", [x = x, weight = weight, bias = bias, out, n, in, out_dim]() mutable {
      if (!out.has_grad()) return;
      visit_dtype(out.dtype(), [&](auto zero) {
        using T = decltype(zero);
        const T s = static_cast<T>(fault::sign("linear"));
        ConstMatrixMap<T> dY(out.grad<T>().data(), n, out_dim);
        if (x.requires_grad()) {
          MatrixMap<T> dX(x.grad<T>().data(), n, in);
          ConstMatrixMap<T> W(weight.data<T>().data(), out_dim, in);
          dX.noalias() += s * (dY * W);
        }
        if (weight.requires_grad()) {
          MatrixMap<T> dW(weight.grad<T>().data(), out_dim, in);
          ConstMatrixMap<T> X(x.data<T>().data(), n, in);
          dW.noalias() += s * (dY.transpose() * X);
        }
        if (bias.defined() && bias.requires_grad()) {
          // Plain loop: Eigen's vectorised reductions pick their summation
          // order from the buffer address, which breaks bit-reproducibility.
          auto db = bias.grad<T>();
          auto dy = out.grad<T>();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < out_dim; ++c) db[c] += s * dy[r * out_dim + c];
        }
      });
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_dtype(a, b, "add");
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  visit_dtype(a.dtype(), [&](auto zero) {
    using T = decltype(zero);
    auto pa = a.data<T>();
    auto pb = b.data<T>();
    auto po = out.data<T>();
    for (std::size_t i = 0; i < po.size(); ++i) po[i] = pa[i] + pb[i];
  });
  if (tracking({&a, &b})) {
    out.set_requires_grad(true);
    Graph::active()->record("add", [a = a, b = b, out]() mutable {
      if (!out.has_grad()) return;
      visit_dtype(out.dtype(), [&](auto zero) {
        using T = decltype(zero);
        const double s = fault::sign("add");
        std::span<const T> g = out.grad<T>();
        if (a.requires_grad()) detail::accumulate<T>(a.grad<T>(), g, s);
        if (b.requires_grad()) detail::accumulate<T>(b.grad<T>(), g, s);
      });
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  visit_dtype(x.dtype(), [&](auto zero) {
    using T = decltype(zero);
    auto px = x.data<T>();
    auto po = out.data<T>();
    const T f = static_cast<T>(factor);
    for (std::size_t i = 0; i < po.size(); ++i) po[i] = f * px[i];
  });
  if (tracking({&x})) {
    out.set_requires_grad(true);
    Graph::active()->record("scale", [x = x, out, factor]() mutable {
      if (!out.has_grad()) return;
      visit_dtype(out.dtype(), [&](auto zero) {
        using T = decltype(zero);
        std::span<const T> g = out.grad<T>();
        detail::accumulate<T>(x.grad<T>(), g, factor * fault::sign("scale"));
      });
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  visit_dtype(x.dtype(), [&](auto zero) {
    using T = decltype(zero);
    auto px = x.data<T>();
    auto po = out.data<T>();
    for (std::size_t i = 0; i < po.size(); ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
    if (auto* rec = kinks::active()) {
      std::uint64_t word = 0;
      for (std::size_t i = 0; i < px.size(); ++i) {
        word = (word << 1) | (px[i] > T(0) ? 1u : 0u);
        if (i % 64 == 63) {
          rec->mix(word);
          word = 0;
        }
      }
      rec->mix(word);
    }
  });
  if (tracking({&x})) {
    out.set_requires_grad(true);
    Graph::active()->record("relu", [x = x, out]() mutable {
      if (!out.has_grad()) return;
      visit_dtype(out.dtype(), [&](auto zero) {
        using T = decltype(zero);
        const T s = static_cast<T>(fault::sign("relu"));
        auto px = x.data<T>();
        auto g = out.grad<T>();
        auto dx = x.grad<T>();
        // Subgradient at exactly zero is zero.
        for (std::size_t i = 0; i < dx.size(); ++i)
          if (px[i] > T(0)) dx[i] += s * g[i];
      });
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  }
  Tensor out = Tensor::zeros(shape, x.dtype());
  visit_dtype(x.dtype(), [&](auto zero) {
    using T = decltype(zero);
    auto src = x.data<T>();
    std::memcpy(out.data<T>().data(), src.data(), src.size() * sizeof(T));
  });
  if (tracking({&x})) {
    out.set_requires_grad(true);
    Graph::active()->record("reshape", [x = x, out]() mutable {
      if (!out.has_grad()) return;
      visit_dtype(out.dtype(), [&](auto zero) {
        using T = decltype(zero);
        std::span<const T> g = out.grad<T>();
        detail::accumulate<T>(x.grad<T>(), g, fault::sign("reshape"));
      });
    });
  }
  return out;
}

}  // namespace jlml
