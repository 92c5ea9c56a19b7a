#include "ctun/autograd.hpp"

#include <unordered_map>
#include <unordered_set>

namespace ctun {

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

bool needs_grad(const std::vector<Tensor>& inputs) {
  if (!g_grad_enabled) return false;
  for (const Tensor& t : inputs)
    if (t.defined() && t.requires_grad()) return true;
  return false;
}

Tensor make_result(const Shape& shape, Buffer data, const std::vector<Tensor>& inputs,
                   BackwardFn fn, std::string name) {
  Tensor out = Tensor::from_buffer(shape, std::move(data));
  if (!needs_grad(inputs)) return out;
  auto node = std::make_shared<Node>();
  node->name = std::move(name);
  node->backward = std::move(fn);
  node->inputs.reserve(inputs.size());
  for (const Tensor& t : inputs) node->inputs.push_back(t.defined() ? t.impl_ptr() : nullptr);
  out.impl().requires_grad = true;
  out.impl().grad_fn = std::move(node);
  return out;
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw DimensionError("backward() needs a single-element loss, got " + loss.shape().str());
  if (!loss.requires_grad()) throw ValueError("loss does not require grad");

  // Iterative post-order DFS gives a topological order of interior nodes.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  TensorImpl* root = loss.impl_ptr().get();
  if (root->grad_fn) {
    stack.emplace_back(root, 0);
    seen.insert(root);
  }
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const auto& ins = impl->grad_fn->inputs;
    if (next < ins.size()) {
      TensorImpl* child = ins[next++].get();
      if (child && child->grad_fn && child->requires_grad && seen.insert(child).second)
        stack.emplace_back(child, 0);
    } else {
      order.push_back(impl);
      stack.pop_back();
    }
  }

  std::unordered_map<TensorImpl*, Buffer> pending;
  Buffer seed(loss.dtype(), 1);
  dispatch(loss.dtype(), [&]<class T>() { seed.span<T>()[0] = T(1); });

  auto deliver = [&](TensorImpl* target, Buffer g) {
    if (!target->grad_fn) {
      if (target->grad)
        target->grad->accumulate(g);
      else
        target->grad = std::move(g);
      return;
    }
    auto it = pending.find(target);
    if (it == pending.end())
      pending.emplace(target, std::move(g));
    else
      it->second.accumulate(g);
  };

  if (!root->grad_fn) {
    deliver(root, std::move(seed));
    return;
  }
  pending.emplace(root, std::move(seed));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* impl = *it;
    auto found = pending.find(impl);
    if (found == pending.end()) continue;
    Buffer gout = std::move(found->second);
    pending.erase(found);
    const Node& node = *impl->grad_fn;
    std::vector<Buffer> grads = node.backward(gout);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      TensorImpl* in = node.inputs[i].get();
      if (!in || !in->requires_grad) continue;
      if (i < grads.size() && !grads[i].empty()) {
        deliver(in, std::move(grads[i]));
      } else if (!in->grad_fn && !in->grad) {
        in->grad = Buffer(in->data->dtype(), in->shape.numel());
      }
    }
  }
}

}  // namespace ctun
