#include <algorithm>
#include <limits>

#include "jlml/ops.hpp"
#include "op_util.hpp"

namespace jlml {

Pool2dOptions Pool2dOptions::same(Extent2 kernel, Extent2 stride, std::size_t in_h, std::size_t in_w) {
  Pool2dOptions o{kernel, stride, {0, 0}, {0, 0}};
  const Extent2 in{in_h, in_w};
  for (int a = 0; a < 2; ++a) {
    const std::size_t out = (in[a] + stride[a] - 1) / stride[a];
    const std::size_t needed = (out - 1) * stride[a] + kernel[a];
    o.pad_end[a] = needed > in[a] ? needed - in[a] : 0;
  }
  return o;
}

namespace {

struct PoolGeometry {
  std::size_t planes, h, w, oh, ow;
  Pool2dOptions o;

  // In-bounds row/column range of window (oy, ox).
  void window(std::size_t oy, std::size_t ox, std::size_t& y0, std::size_t& y1, std::size_t& x0,
              std::size_t& x1) const {
    const auto clampi = [](std::ptrdiff_t v, std::size_t hi) {
      return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(hi)));
    };
    const std::ptrdiff_t ys = static_cast<std::ptrdiff_t>(oy * o.stride[0]) - static_cast<std::ptrdiff_t>(o.pad_begin[0]);
    const std::ptrdiff_t xs = static_cast<std::ptrdiff_t>(ox * o.stride[1]) - static_cast<std::ptrdiff_t>(o.pad_begin[1]);
    y0 = clampi(ys, h);
    y1 = clampi(ys + static_cast<std::ptrdiff_t>(o.kernel[0]), h);
    x0 = clampi(xs, w);
    x1 = clampi(xs + static_cast<std::ptrdiff_t>(o.kernel[1]), w);
  }
};

PoolGeometry pool_geometry(const Tensor& x, const Pool2dOptions& o, const char* op) {
  detail::require_rank(x, 4, op, "input");
  PoolGeometry g{};
  g.planes = x.dim(0) * x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.o = o;
  g.oh = window_output(g.h, o.kernel[0], o.stride[0], o.pad_begin[0], o.pad_end[0]);
  g.ow = window_output(g.w, o.kernel[1], o.stride[1], o.pad_begin[1], o.pad_end[1]);
  // A window lying entirely in padding has no defined max or mean.
  for (std::size_t oy = 0; oy < g.oh; ++oy)
    for (std::size_t ox = 0; ox < g.ow; ++ox) {
      std::size_t y0, y1, x0, x1;
      g.window(oy, ox, y0, y1, x0, x1);
      if (y0 >= y1 || x0 >= x1) throw DimensionError(std::string(op) + ": window lies entirely in padding");
    }
  return g;
}

}  // namespace

Tensor maxpool2d(const Tensor& x, const Pool2dOptions& options) {
  const PoolGeometry g = pool_geometry(x, options, "maxpool2d");
  Tensor out = Tensor::zeros({x.dim(0), x.dim(1), g.oh, g.ow}, x.dtype());
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.numel());
  visit_dtype(x.dtype(), [&](auto zero) {
    using T = decltype(zero);
    auto px = x.data<T>();
    auto po = out.data<T>();
    std::size_t k = 0;
    for (std::size_t p = 0; p < g.planes; ++p) {
      const T* plane = px.data() + p * g.h * g.w;
      for (std::size_t oy = 0; oy < g.oh; ++oy)
        for (std::size_t ox = 0; ox < g.ow; ++ox, ++k) {
          std::size_t y0, y1, x0, x1;
          g.window(oy, ox, y0, y1, x0, x1);
          std::size_t best = y0 * g.w + x0;
          T best_v = plane[best];
          for (std::size_t yy = y0; yy < y1; ++yy)
            for (std::size_t xx = x0; xx < x1; ++xx)
              if (plane[yy * g.w + xx] > best_v) {
                best_v = plane[yy * g.w + xx];
                best = yy * g.w + xx;
              }
          po[k] = best_v;
          (*argmax)[k] = static_cast<std::uint32_t>(best);
        }
    }
  });
  if (auto* rec = kinks::active())
    for (auto idx : *argmax) rec->mix(idx);
  if (tracking({&x})) {
    out.set_requires_grad(true);
    Graph::active()->record("maxpool2d", [x = x, out, argmax, g]() mutable {
      if (!out.has_grad()) return;
      visit_dtype(out.dtype(), [&](auto zero) {
        using T = decltype(zero);
        const T s = static_cast<T>(fault::sign("maxpool2d"));
        auto dy = out.grad<T>();
        auto dx = x.grad<T>();
        const std::size_t per_plane = g.oh * g.ow;
        for (std::size_t k = 0; k < dy.size(); ++k) {
          const std::size_t plane = k / per_plane;
          dx[plane * g.h * g.w + (*argmax)[k]] += s * dy[k];
        }
      });
    });
  }
  return out;
}

Tensor avgpool2d(const Tensor& x, const Pool2dOptions& options) {
  const PoolGeometry g = pool_geometry(x, options, "avgpool2d");
  Tensor out = Tensor::zeros({x.dim(0), x.dim(1), g.oh, g.ow}, x.dtype());
  visit_dtype(x.dtype(), [&](auto zero) {
    using T = decltype(zero);
    auto px = x.data<T>();
    auto po = out.data<T>();
    std::size_t k = 0;
    for (std::size_t p = 0; p < g.planes; ++p) {
      const T* plane = px.data() + p * g.h * g.w;
      for (std::size_t oy = 0; oy < g.oh; ++oy)
        for (std::size_t ox = 0; ox < g.ow; ++ox, ++k) {
          std::size_t y0, y1, x0, x1;
          g.window(oy, ox, y0, y1, x0, x1);
          T acc = 0;
          for (std::size_t yy = y0; yy < y1; ++yy)
            for (std::size_t xx = x0; xx < x1; ++xx) acc += plane[yy * g.w + xx];
          po[k] = acc / static_cast<T>((y1 - y0) * (x1 - x0));
        }
    }
  });
  if (tracking({&x})) {
    out.set_requires_grad(true);
    Graph::active()->record("avgpool2d", [x = x, out, g]() mutable {
      if (!out.has_grad()) return;
      visit_dtype(out.dtype(), [&](auto zero) {
        using T = decltype(zero);
        const T s = static_cast<T>(fault::sign("avgpool2d"));
        auto dy = out.grad<T>();
        auto dx = x.grad<T>();
        std::size_t k = 0;
        for (std::size_t p = 0; p < g.planes; ++p) {
          T* plane = dx.data() + p * g.h * g.w;
          for (std::size_t oy = 0; oy < g.oh; ++oy)
            for (std::size_t ox = 0; ox < g.ow; ++ox, ++k) {
              std::size_t y0, y1, x0, x1;
              g.window(oy, ox, y0, y1, x0, x1);
              const T share = s * dy[k] / static_cast<T>((y1 - y0) * (x1 - x0));
              for (std::size_t yy = y0; yy < y1; ++yy)
                for (std::size_t xx = x0; xx < x1; ++xx) plane[yy * g.w + xx] += share;
            }
        }
      });
    });
  }
  return out;
}

Tensor global_avgpool(const Tensor& x) {
  detail::require_rank(x, 4, "global_avgpool", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), area = x.dim(2) * x.dim(3);
  Tensor out = Tensor::zeros({n, c}, x.dtype());
  visit_dtype(x.dtype(), [&](auto zero) {
    using T = decltype(zero);
    auto px = x.data<T>();
    auto po = out.data<T>();
    for (std::size_t p = 0; p < n * c; ++p) {
      T acc = 0;
      for (std::size_t i = 0; i < area; ++i) acc += px[p * area + i];
      po[p] = acc / static_cast<T>(area);
    }
  });
  if (tracking({&x})) {
    out.set_requires_grad(true);
    Graph::active()->record("global_avgpool", [x = x, out, area]() mutable {
      if (!out.has_grad()) return;
      visit_dtype(out.dtype(), [&](auto zero) {
        using T = decltype(zero);
        const T s = static_cast<T>(fault::sign("global_avgpool"));
        auto dy = out.grad<T>();
        auto dx = x.grad<T>();
        for (std::size_t p = 0; p < dy.size(); ++p) {
          const T share = s * dy[p] / static_cast<T>(area);
          for (std::size_t i = 0; i < area; ++i) dx[p * area + i] += share;
        }
      });
    });
  }
  return out;
}

}  // namespace jlml
