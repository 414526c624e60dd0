#include <algorithm>
#include <numeric>

#include "jlml/ops.hpp"
#include "op_util.hpp"

namespace jlml {

namespace {

struct AxisView {
  std::size_t outer, extent, inner;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

}  // namespace

std::vector<Tensor> split(const Tensor& x, std::size_t axis, std::size_t parts) {
  if (axis >= x.rank()) throw DimensionError("split: axis out of range for " + shape_str(x.shape()));
  if (parts == 0 || x.dim(axis) % parts != 0) {
    throw DimensionError("split: extent " + std::to_string(x.dim(axis)) + " is not divisible into " +
                         std::to_string(parts) + " parts");
  }
  const AxisView v = axis_view(x.shape(), axis);
  const std::size_t piece = v.extent / parts;
  Shape part_shape = x.shape();
  part_shape[axis] = piece;

  std::vector<Tensor> outs;
  outs.reserve(parts);
  const bool track = tracking({&x});
  for (std::size_t j = 0; j < parts; ++j) {
    Tensor out = Tensor::zeros(part_shape, x.dtype());
    visit_dtype(x.dtype(), [&](auto zero) {
      using T = decltype(zero);
      auto px = x.data<T>();
      auto po = out.data<T>();
      const std::size_t block = piece * v.inner;
      for (std::size_t o = 0; o < v.outer; ++o) {
        const T* src = px.data() + (o * v.extent + j * piece) * v.inner;
        std::copy(src, src + block, po.data() + o * block);
      }
    });
    if (track) {
      out.set_requires_grad(true);
      Graph::active()->record("split", [x = x, out, v, piece, j]() mutable {
        if (!out.has_grad()) return;
        visit_dtype(out.dtype(), [&](auto zero) {
          using T = decltype(zero);
          const T s = static_cast<T>(fault::sign("split"));
          auto g = out.grad<T>();
          auto dx = x.grad<T>();
          const std::size_t block = piece * v.inner;
          for (std::size_t o = 0; o < v.outer; ++o) {
            T* dst = dx.data() + (o * v.extent + j * piece) * v.inner;
            const T* src = g.data() + o * block;
            for (std::size_t i = 0; i < block; ++i) dst[i] += s * src[i];
          }
        });
      });
    }
    outs.push_back(std::move(out));
  }
  return outs;
}

std::vector<Tensor> slice_h(const Tensor& x, std::size_t stripes) {
  detail::require_rank(x, 4, "slice_h", "input");
  if (stripes == 0 || x.dim(2) % stripes != 0) {
    throw ConfigError("slice_h: height " + std::to_string(x.dim(2)) + " is not divisible by stripe count " +
                      std::to_string(stripes));
  }
  return split(x, 2, stripes);
}

Tensor concat(std::span<const Tensor> xs, std::size_t axis) {
  if (xs.empty()) throw DimensionError("concat: no inputs");
  const Tensor& first = xs.front();
  if (axis >= first.rank()) throw DimensionError("concat: axis out of range for " + shape_str(first.shape()));
  Shape out_shape = first.shape();
  out_shape[axis] = 0;
  std::vector<std::size_t> offsets;
  for (const auto& t : xs) {
    detail::require_same_dtype(first, t, "concat");
    if (t.rank() != first.rank()) throw DimensionError("concat: rank mismatch");
    for (std::size_t a = 0; a < t.rank(); ++a) {
      if (a != axis && t.dim(a) != first.dim(a)) {
        throw DimensionError("concat: extent mismatch " + shape_str(first.shape()) + " vs " + shape_str(t.shape()));
      }
    }
    offsets.push_back(out_shape[axis]);
    out_shape[axis] += t.dim(axis);
  }
  Tensor out = Tensor::zeros(out_shape, first.dtype());
  const AxisView ov = axis_view(out_shape, axis);
  visit_dtype(first.dtype(), [&](auto zero) {
    using T = decltype(zero);
    auto po = out.data<T>();
    for (std::size_t k = 0; k < xs.size(); ++k) {
      auto px = xs[k].data<T>();
      const std::size_t block = xs[k].dim(axis) * ov.inner;
      for (std::size_t o = 0; o < ov.outer; ++o) {
        std::copy(px.data() + o * block, px.data() + (o + 1) * block,
                  po.data() + (o * ov.extent + offsets[k]) * ov.inner);
      }
    }
  });
  if (tracking(xs)) {
    out.set_requires_grad(true);
    std::vector<Tensor> inputs(xs.begin(), xs.end());
    Graph::active()->record("concat", [inputs, out, ov, offsets, axis]() mutable {
      if (!out.has_grad()) return;
      visit_dtype(out.dtype(), [&](auto zero) {
        using T = decltype(zero);
        const T s = static_cast<T>(fault::sign("concat"));
        auto g = out.grad<T>();
        for (std::size_t k = 0; k < inputs.size(); ++k) {
          if (!inputs[k].requires_grad()) continue;
          auto dx = inputs[k].grad<T>();
          const std::size_t block = inputs[k].dim(axis) * ov.inner;
          for (std::size_t o = 0; o < ov.outer; ++o) {
            const T* src = g.data() + (o * ov.extent + offsets[k]) * ov.inner;
            T* dst = dx.data() + o * block;
            for (std::size_t i = 0; i < block; ++i) dst[i] += s * src[i];
          }
        }
      });
    });
  }
  return out;
}

}  // namespace jlml
