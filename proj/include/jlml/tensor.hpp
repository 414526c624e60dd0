#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "jlml/errors.hpp"

namespace jlml {

enum class DType : std::uint8_t { f32, f64 };

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
const char* dtype_name(DType dtype);

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

// Calls fn with a value-initialised float or double matching dtype, so kernels
// can be written once as templates.
template <class Fn>
decltype(auto) visit_dtype(DType dtype, Fn&& fn) {
  if (dtype == DType::f64) return fn(double{});
  return fn(float{});
}

namespace detail {

using Buffer = std::variant<std::vector<float>, std::vector<double>>;

struct TensorImpl {
  Shape shape;
  Buffer data;
  std::optional<Buffer> grad;
  bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major array with an optional gradient slot.
///
/// Tensor is a shared handle: copies alias the same storage, which is what lets
/// graph nodes write gradients back into parameters owned elsewhere. Use
/// clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dtype = DType::f32);
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor from_vector(Shape shape, std::vector<float> values);
  static Tensor from_vector(Shape shape, std::vector<double> values);
  static Tensor scalar(double value, DType dtype = DType::f32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<T> data();
  template <class T>
  std::span<const T> data() const;

  double item() const;
  double value_at(std::size_t flat_index) const;
  void set_value_at(std::size_t flat_index, double value);
  std::vector<double> to_doubles() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);

  bool has_grad() const;
  // Allocates a zero gradient buffer on first use.
  template <class T>
  std::span<T> grad();
  template <class T>
  std::span<const T> grad() const;
  double grad_at(std::size_t flat_index) const;
  Tensor grad_tensor() const;
  void zero_grad();
  void clear_grad();

  Tensor clone() const;
  Tensor to(DType dtype) const;
  // Overwrites values from another tensor of equal shape (any dtype).
  void copy_from(const Tensor& other);

  bool all_finite() const;
  bool grad_all_finite() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  bool bit_equal(const Tensor& other) const;

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  detail::TensorImpl& impl() const;

  std::shared_ptr<detail::TensorImpl> impl_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

}  // namespace jlml
