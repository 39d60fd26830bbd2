#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dualsr/tensor.hpp"

// Tape-free reverse-mode differentiation over Tensor<T>. Every op returns a
// Var whose node remembers its inputs and a closure that pushes the node's
// gradient back into them. backward() walks the graph in reverse topological
// order from a scalar root.
namespace dualsr::ag {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  // Same value, cut from the graph.
  Var detach() const { return Var(node_->value, false); }

  // Scalar read-out for 1-element results.
  T item() const {
    if (node_->value.size() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds a node for `value` computed from `inputs`. The backward closure is
// attached only when some input needs a gradient.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> bwd) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  for (const auto& in : inputs) {
    if (in.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(bwd);
  }
  return Var<T>(std::move(node));
}

// Accumulates d(root)/d(node) into every reachable node that requires grad.
template <typename T>
void backward(const Var<T>& root);

// ---- elementwise -----------------------------------------------------------
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> add_scalar(const Var<T>& a, T s);
template <typename T> Var<T> square(const Var<T>& a);
template <typename T> Var<T> gelu(const Var<T>& a);
template <typename T> Var<T> sigmoid(const Var<T>& a);
template <typename T> Var<T> silu(const Var<T>& a);
template <typename T> Var<T> leaky_relu(const Var<T>& a, T slope);
template <typename T> Var<T> clamp(const Var<T>& a, T lo, T hi);
// log(max(a, eps)); gradient is zero where the guard is active.
template <typename T> Var<T> log_guarded(const Var<T>& a, T eps);

// ---- broadcasting over NCHW --------------------------------------------------
// g has shape [N or 1, C, 1, 1].
template <typename T> Var<T> mul_channel(const Var<T>& x, const Var<T>& g);
template <typename T> Var<T> add_channel(const Var<T>& x, const Var<T>& b);

// ---- reductions --------------------------------------------------------------
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
// [N,C,H,W] -> [N,C,1,1]
template <typename T> Var<T> global_avg_pool(const Var<T>& x);
// Divides each spatial feature vector by its L2 norm: x / sqrt(sum_c x^2 + eps).
template <typename T> Var<T> normalize_channels(const Var<T>& x, T eps);

// ---- shape -------------------------------------------------------------------
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
template <typename T> Var<T> concat_channels(const std::vector<Var<T>>& xs);
template <typename T> Var<T> pixel_unshuffle(const Var<T>& x, int factor);
template <typename T> Var<T> pixel_shuffle(const Var<T>& x, int factor);
template <typename T> Var<T> upsample_nearest(const Var<T>& x, int factor);

// ---- linear algebra ----------------------------------------------------------
// [M,K] x [K,N] -> [M,N]
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
// x [N,I], w [O,I], optional b [O] -> [N,O]
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
// x [N,C,H,W], w [O,C,k,k], optional b [O]; zero padding.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad);

}  // namespace dualsr::ag

namespace dualsr {
using ag::Var;
}  // namespace dualsr
