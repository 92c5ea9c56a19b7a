#include "ctun/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ctun/alloc_meter.hpp"

namespace ctun {

AllocationMeter& AllocationMeter::global() {
  static AllocationMeter meter;
  return meter;
}

void AllocationMeter::on_alloc(std::size_t bytes) {
  const std::size_t now = live_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
  std::size_t peak = peak_.load(std::memory_order_relaxed);
  while (now > peak && !peak_.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
  }
}

void AllocationMeter::on_free(std::size_t bytes) {
  live_.fetch_sub(bytes, std::memory_order_relaxed);
}

void AllocationMeter::reset_peak() {
  peak_.store(live_.load(std::memory_order_relaxed), std::memory_order_relaxed);
}

MacCounter& MacCounter::global() {
  static MacCounter counter;
  return counter;
}

std::size_t dtype_size(DType dt) { return dt == DType::f32 ? 4 : 8; }

const char* dtype_name(DType dt) { return dt == DType::f32 ? "float32" : "float64"; }

std::string Shape::str() const {
  std::ostringstream os;
  os << "[" << n << ", " << c << ", " << h << ", " << w << "]";
  return os.str();
}

void validate_shape(const Shape& s) {
  if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1)
    throw DimensionError("tensor dims must be >= 1, got " + s.str());
}

// ---------------------------------------------------------------------------
// Buffer

Buffer::Buffer(DType dt, std::size_t count) : dtype_(dt), count_(count) {
  if (dt == DType::f32)
    storage_ = std::vector<float>(count, 0.0f);
  else
    storage_ = std::vector<double>(count, 0.0);
  AllocationMeter::global().on_alloc(bytes());
}

Buffer::Buffer(const Buffer& other)
    : dtype_(other.dtype_), count_(other.count_), storage_(other.storage_) {
  AllocationMeter::global().on_alloc(bytes());
}

Buffer::Buffer(Buffer&& other) noexcept
    : dtype_(other.dtype_), count_(other.count_), storage_(std::move(other.storage_)) {
  other.count_ = 0;
}

Buffer& Buffer::operator=(const Buffer& other) {
  if (this != &other) {
    release();
    dtype_ = other.dtype_;
    count_ = other.count_;
    storage_ = other.storage_;
    AllocationMeter::global().on_alloc(bytes());
  }
  return *this;
}

Buffer& Buffer::operator=(Buffer&& other) noexcept {
  if (this != &other) {
    release();
    dtype_ = other.dtype_;
    count_ = other.count_;
    storage_ = std::move(other.storage_);
    other.count_ = 0;
  }
  return *this;
}

Buffer::~Buffer() { release(); }

void Buffer::release() {
  if (count_ != 0) AllocationMeter::global().on_free(bytes());
  count_ = 0;
}

void Buffer::accumulate(const Buffer& other) {
  if (other.dtype_ != dtype_ || other.count_ != count_)
    throw DimensionError("gradient accumulation between mismatched buffers");
  dispatch(dtype_, [&]<class T>() {
    auto dst = span<T>();
    auto src = other.span<T>();
    for (std::size_t i = 0; i < count_; ++i) dst[i] += src[i];
  });
}

// ---------------------------------------------------------------------------
// Tensor

TensorImpl& Tensor::impl() const {
  if (!impl_) throw ValueError("use of an undefined tensor");
  return *impl_;
}

Tensor Tensor::from_buffer(const Shape& s, Buffer data) {
  validate_shape(s);
  if (data.size() != s.numel())
    throw DimensionError("buffer of " + std::to_string(data.size()) +
                         " elements does not match shape " + s.str());
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = s;
  impl->data = std::make_shared<Buffer>(std::move(data));
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(const Shape& s, DType dt) {
  validate_shape(s);
  return from_buffer(s, Buffer(dt, s.numel()));
}

Tensor Tensor::full(const Shape& s, double value, DType dt) {
  Tensor t = zeros(s, dt);
  dispatch(dt, [&]<class T>() {
    auto d = t.mutable_data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::from_values(const Shape& s, std::span<const double> values, DType dt) {
  validate_shape(s);
  if (values.size() != s.numel())
    throw DimensionError("got " + std::to_string(values.size()) + " values for shape " + s.str());
  Tensor t = zeros(s, dt);
  dispatch(dt, [&]<class T>() {
    auto d = t.mutable_data<T>();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::uniform(const Shape& s, std::mt19937_64& rng, double lo, double hi, DType dt) {
  Tensor t = zeros(s, dt);
  std::uniform_real_distribution<double> dist(lo, hi);
  dispatch(dt, [&]<class T>() {
    for (auto& v : t.mutable_data<T>()) v = static_cast<T>(dist(rng));
  });
  return t;
}

Tensor Tensor::normal(const Shape& s, std::mt19937_64& rng, double stddev, DType dt) {
  Tensor t = zeros(s, dt);
  std::normal_distribution<double> dist(0.0, stddev);
  dispatch(dt, [&]<class T>() {
    for (auto& v : t.mutable_data<T>()) v = static_cast<T>(dist(rng));
  });
  return t;
}

double Tensor::at(int n, int c, int h, int w) const {
  const Shape& s = shape();
  if (n < 0 || n >= s.n || c < 0 || c >= s.c || h < 0 || h >= s.h || w < 0 || w >= s.w)
    throw DimensionError("index out of range for shape " + s.str());
  const std::size_t idx = ((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w;
  return dispatch(dtype(), [&]<class T>() { return static_cast<double>(data<T>()[idx]); });
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape().str());
  return at(0, 0, 0, 0);
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&]<class T>() {
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw ValueError("requires_grad can only be set on leaf tensors");
  impl().requires_grad = on;
  return *this;
}

Tensor Tensor::grad() const {
  if (!impl().grad) throw ValueError("tensor has no gradient");
  return from_buffer(shape(), *impl().grad);
}

void Tensor::zero_grad() { impl().grad.reset(); }

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape();
  impl->data = this->impl().data;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const { return from_buffer(shape(), buffer()); }

Tensor Tensor::to(DType dt) const {
  if (dt == dtype()) return clone();
  const auto values = to_vector();
  return from_values(shape(), values, dt);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("max_abs_diff shape mismatch: " + a.shape().str() + " vs " +
                         b.shape().str());
  const auto av = a.to_vector();
  const auto bv = b.to_vector();
  double worst = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = std::abs(av[i] - bv[i]);
    if (std::isnan(d)) return d;
    worst = std::max(worst, d);
  }
  return worst;
}

}  // namespace ctun
