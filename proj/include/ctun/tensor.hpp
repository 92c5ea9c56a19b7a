#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "ctun/error.hpp"

namespace ctun {

enum class DType : std::uint8_t { f32, f64 };

std::size_t dtype_size(DType dt);
const char* dtype_name(DType dt);

// Calls f.template operator()<T>() with T matching the dtype.
template <class F>
decltype(auto) dispatch(DType dt, F&& f) {
  if (dt == DType::f32) return f.template operator()<float>();
  return f.template operator()<double>();
}

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

/// NCHW extent. All dims are at least 1.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

// Throws DimensionError if any dim is < 1.
void validate_shape(const Shape& s);

/// Typed, zero-initialized payload whose size is reported to the
/// AllocationMeter for as long as it lives.
class Buffer {
 public:
  Buffer() = default;
  Buffer(DType dt, std::size_t count);
  Buffer(const Buffer& other);
  Buffer(Buffer&& other) noexcept;
  Buffer& operator=(const Buffer& other);
  Buffer& operator=(Buffer&& other) noexcept;
  ~Buffer();

  DType dtype() const { return dtype_; }
  std::size_t size() const { return count_; }
  std::size_t bytes() const { return count_ * dtype_size(dtype_); }
  bool empty() const { return count_ == 0; }

  template <class T>
  std::span<T> span() {
    check<T>();
    return {std::get<std::vector<T>>(storage_).data(), count_};
  }
  template <class T>
  std::span<const T> span() const {
    check<T>();
    return {std::get<std::vector<T>>(storage_).data(), count_};
  }

  // Elementwise this += other.
  void accumulate(const Buffer& other);

 private:
  template <class T>
  void check() const {
    if (dtype_ != dtype_of<T>()) throw ValueError("buffer dtype mismatch");
  }
  void release();

  DType dtype_ = DType::f32;
  std::size_t count_ = 0;
  std::variant<std::vector<float>, std::vector<double>> storage_;
};

struct Node;

struct TensorImpl {
  Shape shape;
  std::shared_ptr<Buffer> data;
  bool requires_grad = false;
  std::optional<Buffer> grad;
  std::shared_ptr<Node> grad_fn;
};

/// Shared handle to a rank-4 dense tensor.
///
/// Copies of a Tensor alias the same payload. Operations never mutate their
/// inputs; the optimizer writes parameters in place through mutable_data().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& s, DType dt = DType::f32);
  static Tensor full(const Shape& s, double value, DType dt = DType::f32);
  static Tensor ones(const Shape& s, DType dt = DType::f32) { return full(s, 1.0, dt); }
  static Tensor from_values(const Shape& s, std::span<const double> values,
                            DType dt = DType::f32);
  static Tensor from_buffer(const Shape& s, Buffer data);
  static Tensor uniform(const Shape& s, std::mt19937_64& rng, double lo, double hi,
                        DType dt = DType::f32);
  static Tensor normal(const Shape& s, std::mt19937_64& rng, double stddev,
                       DType dt = DType::f32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  DType dtype() const { return impl().data->dtype(); }
  std::size_t numel() const { return shape().numel(); }

  template <class T>
  std::span<const T> data() const {
    return std::as_const(*impl().data).template span<T>();
  }
  // In-place writes; only legal on tensors outside any live graph
  // (parameters between optimizer steps, freshly built inputs).
  template <class T>
  std::span<T> mutable_data() {
    return impl().data->template span<T>();
  }
  const Buffer& buffer() const { return *impl().data; }
  const std::shared_ptr<Buffer>& shared_buffer() const { return impl().data; }

  double at(int n, int c, int h, int w) const;
  double item() const;
  std::vector<double> to_vector() const;

  bool requires_grad() const { return impl().requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return impl().grad_fn == nullptr; }
  bool has_grad() const { return impl().grad.has_value(); }
  // Gradient as a detached tensor; throws if none has been populated.
  Tensor grad() const;
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;
  Tensor to(DType dt) const;

  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }
  TensorImpl& impl() const;

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Max |a-b| over all elements; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace ctun
