#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "ctun/tensor.hpp"

namespace ctun {

// Gradients for each node input, in input order. An empty Buffer means
// "no contribution".
using BackwardFn = std::function<std::vector<Buffer>(const Buffer& grad_out)>;

struct Node {
  std::string name;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

/// Thread-local switch for graph recording.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// True when recording is on and some input requires grad.
bool needs_grad(std::initializer_list<const Tensor*> inputs);
bool needs_grad(const std::vector<Tensor>& inputs);

// Wraps an op output. When needs_grad(inputs) the result carries a node
// whose backward is `fn`; otherwise `fn` is dropped.
Tensor make_result(const Shape& shape, Buffer data, const std::vector<Tensor>& inputs,
                   BackwardFn fn, std::string name);

/// Reverse-mode sweep from a single-element loss. Leaf gradients accumulate
/// across calls until zero_grad().
void backward(const Tensor& loss);

}  // namespace ctun
