#include "jlml/tensor.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <sstream>

namespace jlml {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

const char* dtype_name(DType dtype) { return dtype == DType::f64 ? "f64" : "f32"; }

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
  for (auto extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
}

detail::Buffer make_buffer(DType dtype, std::size_t n, double value = 0.0) {
  if (dtype == DType::f64) return std::vector<double>(n, value);
  return std::vector<float>(n, static_cast<float>(value));
}

std::size_t buffer_size(const detail::Buffer& b) {
  return std::visit([](const auto& v) { return v.size(); }, b);
}

}  // namespace

detail::TensorImpl& Tensor::impl() const {
  if (!impl_) throw GraphError("use of an undefined tensor");
  return *impl_;
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return full(std::move(shape), 0.0, dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  check_shape(shape);
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data = make_buffer(dtype, shape_numel(shape), value);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::from_vector(Shape shape, std::vector<float> values) {
  check_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                         " values");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values) {
  check_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                         " values");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, DType dtype) { return full({1}, value, dtype); }

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return buffer_size(impl().data); }

DType Tensor::dtype() const {
  return std::holds_alternative<std::vector<double>>(impl().data) ? DType::f64 : DType::f32;
}

template <class T>
std::span<T> Tensor::data() {
  auto* v = std::get_if<std::vector<T>>(&impl().data);
  if (!v) throw DimensionError(std::string("tensor dtype is ") + dtype_name(dtype()));
  return {v->data(), v->size()};
}

template <class T>
std::span<const T> Tensor::data() const {
  const auto* v = std::get_if<std::vector<T>>(&impl().data);
  if (!v) throw DimensionError(std::string("tensor dtype is ") + dtype_name(dtype()));
  return {v->data(), v->size()};
}

template std::span<float> Tensor::data<float>();
template std::span<double> Tensor::data<double>();
template std::span<const float> Tensor::data<float>() const;
template std::span<const double> Tensor::data<double>() const;

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return value_at(0);
}

double Tensor::value_at(std::size_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v.at(i)); }, impl().data);
}

void Tensor::set_value_at(std::size_t i, double value) {
  std::visit([i, value](auto& v) { v.at(i) = static_cast<typename std::decay_t<decltype(v)>::value_type>(value); },
             impl().data);
}

std::vector<double> Tensor::to_doubles() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); }, impl().data);
}

bool Tensor::requires_grad() const { return impl().requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  impl().requires_grad = value;
  return *this;
}

bool Tensor::has_grad() const { return impl().grad.has_value(); }

template <class T>
std::span<T> Tensor::grad() {
  auto& im = impl();
  if (!im.grad) im.grad = make_buffer(dtype_of<T>(), numel());
  auto* v = std::get_if<std::vector<T>>(&*im.grad);
  if (!v) throw DimensionError(std::string("gradient dtype mismatch for ") + dtype_name(dtype()) + " tensor");
  return {v->data(), v->size()};
}

template <class T>
std::span<const T> Tensor::grad() const {
  const auto& im = impl();
  if (!im.grad) throw GraphError("tensor has no gradient");
  const auto* v = std::get_if<std::vector<T>>(&*im.grad);
  if (!v) throw DimensionError(std::string("gradient dtype mismatch for ") + dtype_name(dtype()) + " tensor");
  return {v->data(), v->size()};
}

template std::span<float> Tensor::grad<float>();
template std::span<double> Tensor::grad<double>();
template std::span<const float> Tensor::grad<float>() const;
template std::span<const double> Tensor::grad<double>() const;

double Tensor::grad_at(std::size_t i) const {
  const auto& im = impl();
  if (!im.grad) return 0.0;
  return std::visit([i](const auto& v) { return static_cast<double>(v.at(i)); }, *im.grad);
}

Tensor Tensor::grad_tensor() const {
  const auto& im = impl();
  auto out = std::make_shared<detail::TensorImpl>();
  out->shape = im.shape;
  out->data = im.grad ? *im.grad : make_buffer(dtype(), numel());
  return Tensor(std::move(out));
}

void Tensor::zero_grad() {
  auto& im = impl();
  if (!im.grad) return;
  std::visit([](auto& v) { std::fill(v.begin(), v.end(), 0); }, *im.grad);
}

void Tensor::clear_grad() { impl().grad.reset(); }

Tensor Tensor::clone() const {
  const auto& im = impl();
  auto out = std::make_shared<detail::TensorImpl>();
  out->shape = im.shape;
  out->data = im.data;
  out->requires_grad = im.requires_grad;
  return Tensor(std::move(out));
}

Tensor Tensor::to(DType target) const {
  const auto& im = impl();
  auto out = std::make_shared<detail::TensorImpl>();
  out->shape = im.shape;
  out->requires_grad = im.requires_grad;
  out->data = std::visit(
      [target](const auto& v) -> detail::Buffer {
        if (target == DType::f64) return std::vector<double>(v.begin(), v.end());
        std::vector<float> r(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) r[i] = static_cast<float>(v[i]);
        return r;
      },
      im.data);
  return Tensor(std::move(out));
}

void Tensor::copy_from(const Tensor& other) {
  if (other.shape() != shape()) {
    throw DimensionError("copy_from shape mismatch: " + shape_str(other.shape()) + " vs " + shape_str(shape()));
  }
  std::visit(
      [](auto& dst, const auto& src) {
        using D = typename std::decay_t<decltype(dst)>::value_type;
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<D>(src[i]);
      },
      impl().data, other.impl().data);
}

namespace {
bool finite_buffer(const detail::Buffer& b) {
  return std::visit(
      [](const auto& v) {
        for (auto x : v)
          if (!std::isfinite(x)) return false;
        return true;
      },
      b);
}
}  // namespace

bool Tensor::all_finite() const { return finite_buffer(impl().data); }

bool Tensor::grad_all_finite() const {
  const auto& im = impl();
  return !im.grad || finite_buffer(*im.grad);
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (shape() != other.shape() || dtype() != other.dtype()) return false;
  return std::visit(
      [](const auto& a, const auto& b) {
        if (sizeof(a[0]) != sizeof(b[0])) return false;
        return std::memcmp(a.data(), b.data(), a.size() * sizeof(a[0])) == 0;
      },
      impl().data, other.impl().data);
}

}  // namespace jlml
