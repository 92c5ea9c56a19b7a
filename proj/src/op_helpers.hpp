#pragma once

#include <string>

#include "ctun/autograd.hpp"
#include "ctun/tensor.hpp"

namespace ctun::detail {

inline void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype())
    throw ValueError(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) + " vs " +
                     dtype_name(b.dtype()) + ")");
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                         b.shape().str());
  require_same_dtype(a, b, op);
}

// Installs the backward closure on an op result that records a node.
inline void attach_backward(Tensor& out, BackwardFn fn) {
  if (out.defined() && out.impl().grad_fn) out.impl().grad_fn->backward = std::move(fn);
}

inline std::size_t index4(const Shape& s, int n, int c, int h, int w) {
  return ((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w;
}

}  // namespace ctun::detail
