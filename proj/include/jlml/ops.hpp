#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "jlml/graph.hpp"
#include "jlml/tensor.hpp"

namespace jlml {

enum class Mode { train, eval };

using Extent2 = std::array<std::size_t, 2>;

// ---- dense ----------------------------------------------------------------

// [m x k] * [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// x [N x in], weight [out x in], optional bias [out] -> x * weight^T + bias
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor relu(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

// ---- convolution and pooling (N x C x H x W) ------------------------------

struct Conv2dOptions {
  Extent2 stride{1, 1};
  Extent2 pad{0, 0};
};

// Output extent of a sliding window; throws DimensionError when the window
// does not fit the padded input.
std::size_t window_output(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t pad_begin,
                          std::size_t pad_end);

// weight [F x C x kh x kw], optional bias [F].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dOptions& options);

struct Pool2dOptions {
  Extent2 kernel{2, 2};
  Extent2 stride{2, 2};
  Extent2 pad_begin{0, 0};
  Extent2 pad_end{0, 0};

  static Pool2dOptions square(std::size_t k, std::size_t s, std::size_t pad = 0) {
    return {{k, k}, {s, s}, {pad, pad}, {pad, pad}};
  }
  // Zero-offset windows padded only at the far edge so that the output is
  // ceil(input / stride) along each axis.
  static Pool2dOptions same(Extent2 kernel, Extent2 stride, std::size_t in_h, std::size_t in_w);
};

// Padding cells never win the max.
Tensor maxpool2d(const Tensor& x, const Pool2dOptions& options);
// Averages over the in-bounds cells of each window.
Tensor avgpool2d(const Tensor& x, const Pool2dOptions& options);
// Mean over the full spatial extent, flattened to N x C.
Tensor global_avgpool(const Tensor& x);

// ---- structure --------------------------------------------------------------

std::vector<Tensor> split(const Tensor& x, std::size_t axis, std::size_t parts);
// Horizontal stripes, top to bottom. Throws ConfigError when H % m != 0.
std::vector<Tensor> slice_h(const Tensor& x, std::size_t stripes);
Tensor concat(std::span<const Tensor> xs, std::size_t axis);
inline Tensor concat(std::initializer_list<Tensor> xs, std::size_t axis) {
  return concat(std::span<const Tensor>(xs.begin(), xs.size()), axis);
}

// ---- normalisation ----------------------------------------------------------

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.9;  // running <- momentum * running + (1 - momentum) * batch
  double eps = 1e-5;
};

// Train mode normalises with batch statistics and updates the running
// statistics in place (the state holds tensor handles); eval mode uses them.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, const BatchNormState& state, Mode mode);

}  // namespace jlml
