#pragma once

// Reverse-mode differentiation over Tensor values.
//
// Every op returns a Var whose node remembers its inputs and a closure that
// pushes the output gradient back to them. Nodes carry a per-thread sequence
// number in execution order; GradTape collects the nodes reachable from a
// loss, sorts them by that number and replays them backwards, which gives a
// deterministic gradient for a fixed program.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ccl/tensor.hpp"

namespace ccl {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something flows in
  bool requires_grad = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  // Zero-initialised on first use.
  Tensor<T>& grad_buffer();
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value);
  static Var parameter(Tensor<T> value);

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  // Parameter updates only; never call while a graph referencing it is live.
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(Index axis) const { return node_->value.dim(axis); }
  Index numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  bool has_grad() const {
    return node_->grad.numel() == node_->value.numel() && node_->grad.shape() == node_->value.shape();
  }
  // Zeros when no gradient reached this node.
  Tensor<T> grad() const;
  void zero_grad() { node_->grad = Tensor<T>(); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

bool grad_enabled();

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
class GradTape {
 public:
  // Collects every node reachable from `loss` in execution order.
  static GradTape record(const Var<T>& loss);

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Leaf
  // gradients accumulate into Var::grad().
  void backward();

  std::size_t size() const { return nodes_.size(); }
  std::vector<std::string> op_names() const;

 private:
  std::vector<std::shared_ptr<Node<T>>> nodes_;
};

// Shorthand for GradTape::record(loss).backward(); the loss must be scalar.
template <typename T>
void backward(const Var<T>& loss);

// Precomputed rotation angles for rotary embeddings: `len` positions by
// `head_dim / 2` channel pairs.
template <typename T>
struct RopeTable {
  Index len = 0;
  Index head_dim = 0;
  std::vector<T> cos;
  std::vector<T> sin;
  std::vector<double> angle;  // kept for exact comparisons in tests
};

// ---- ops -----------------------------------------------------------------

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
// x: [B, ..., D], y: [B, D]; y broadcast over the middle axes.
template <typename T> Var<T> add_per_batch(const Var<T>& x, const Var<T>& y);

// a: [..., m, k]; b: [k, n] shared, or [..., k, n] with the same batch dims.
// With trans_b, b holds [..., n, k] (or [n, k]).
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_b = false);

template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
// mean((pred - target)^2) with target held constant.
template <typename T> Var<T> mse(const Var<T>& pred, const Tensor<T>& target);

template <typename T> Var<T> softmax_lastdim(const Var<T>& x);
template <typename T> Var<T> layer_norm(const Var<T>& x, T eps = T(1e-6));
template <typename T> Var<T> gelu(const Var<T>& x);
template <typename T> Var<T> silu(const Var<T>& x);

template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);
// [R, L, H*dh] -> [R*H, L, dh]
template <typename T> Var<T> split_heads(const Var<T>& x, Index heads);
// [R*H, L, dh] -> [R, L, H*dh]
template <typename T> Var<T> merge_heads(const Var<T>& x, Index heads);

// Views x as rows of its last extent and picks rows by index; the result
// has shape out_shape (whose last extent must equal x's).
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const Index> rows, Shape out_shape);
// [R, S1, D] ++ [R, S2, D] -> [R, S1+S2, D]
template <typename T> Var<T> concat_seq(const Var<T>& a, const Var<T>& b);

// Rotates channel pairs (2i, 2i+1) of every head of x: [R, L, H*dh].
template <typename T> Var<T> apply_rope(const Var<T>& x, const RopeTable<T>& table);

// Multi-head softmax(q k^T / sqrt(d_head)) v where every row r of q [R, Lq, D]
// attends to its own keys k [R, Lk, D] / values v [R, Lk, Dv] followed by
// keys kb [n, D] / values vb [n, Dv] shared by all rows. Either pair may be
// undefined (not both). When probs is non-null it receives the head-averaged
// probabilities [R, Lq, Lk + n]. A defined qb (same shape as q) replaces q
// when scoring the shared keys.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& kb, const Var<T>& vb,
                 Index heads, std::vector<float>* probs = nullptr, const Var<T>& qb = Var<T>());

// Same value, cut from the graph.
template <typename T> Var<T> detach(const Var<T>& x);

}  // namespace ccl
