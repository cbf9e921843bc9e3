#include "ccl/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "ccl/kernels.hpp"

namespace ccl {

namespace {

thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_seq = 0;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_op(const char* name, Tensor<T> value, std::vector<NodePtr<T>> parents,
               std::function<void(Node<T>&)> bw) {
  if (!value.all_finite()) {
    throw NumericalError(std::string("non-finite value produced by ") + name + " " +
                         shape_str(value.shape()));
  }
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = name;
  node->seq = ++t_seq;
  bool req = false;
  if (t_grad_enabled) {
    for (const auto& p : parents) req = req || p->requires_grad;
  }
  if (req) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(bw);
  }
  return Var<T>(std::move(node));
}

template <typename T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Accumulate g (same numel) into p's gradient if p takes gradients.
template <typename T, typename F>
void accumulate(Node<T>& p, Index n, F&& contribution) {
  if (!p.requires_grad) return;
  T* g = p.grad_buffer().ptr();
  for (Index i = 0; i < n; ++i) g[i] += contribution(i);
}

}  // namespace

template <typename T>
Tensor<T>& Node<T>::grad_buffer() {
  if (grad.numel() != value.numel() || grad.shape() != value.shape()) grad = Tensor<T>(value.shape(), T(0));
  return grad;
}

template <typename T>
Var<T> Var<T>::constant(Tensor<T> value) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->seq = ++t_seq;
  return Var<T>(std::move(node));
}

template <typename T>
Var<T> Var<T>::parameter(Tensor<T> value) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->op = "param";
  node->seq = ++t_seq;
  return Var<T>(std::move(node));
}

template <typename T>
Tensor<T> Var<T>::grad() const {
  if (has_grad()) return node_->grad;
  return Tensor<T>(node_->value.shape(), T(0));
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

template <typename T>
GradTape<T> GradTape<T>::record(const Var<T>& loss) {
  GradTape tape;
  std::unordered_set<Node<T>*> seen;
  std::vector<NodePtr<T>> stack{loss.node_ptr()};
  while (!stack.empty()) {
    NodePtr<T> n = std::move(stack.back());
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n.get()).second) continue;
    for (const auto& p : n->parents) stack.push_back(p);
    tape.nodes_.push_back(std::move(n));
  }
  std::sort(tape.nodes_.begin(), tape.nodes_.end(),
            [](const NodePtr<T>& a, const NodePtr<T>& b) { return a->seq < b->seq; });
  return tape;
}

template <typename T>
void GradTape<T>::backward() {
  if (nodes_.empty()) return;
  Node<T>& loss = *nodes_.back();
  if (loss.value.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got " + shape_str(loss.value.shape()));
  }
  loss.grad_buffer()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node<T>& n = **it;
    if (n.backward && n.grad.numel() == n.value.numel() && n.grad.shape() == n.value.shape()) {
      n.backward(n);
    }
  }
}

template <typename T>
std::vector<std::string> GradTape<T>::op_names() const {
  std::vector<std::string> out;
  out.reserve(nodes_.size());
  for (const auto& n : nodes_) out.emplace_back(n->op);
  return out;
}

template <typename T>
void backward(const Var<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  GradTape<T>::record(loss).backward();
}

// ---- elementwise -----------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape("add", a, b);
  Tensor<T> out(a.shape());
  const Index n = out.numel();
  const T* x = a.value().ptr();
  const T* y = b.value().ptr();
  T* o = out.ptr();
  for (Index i = 0; i < n; ++i) o[i] = x[i] + y[i];
  return make_op<T>("add", std::move(out), {a.node_ptr(), b.node_ptr()}, [n](Node<T>& self) {
    const T* g = self.grad.ptr();
    accumulate(*self.parents[0], n, [g](Index i) { return g[i]; });
    accumulate(*self.parents[1], n, [g](Index i) { return g[i]; });
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape("sub", a, b);
  Tensor<T> out(a.shape());
  const Index n = out.numel();
  for (Index i = 0; i < n; ++i) out[i] = a.value()[i] - b.value()[i];
  return make_op<T>("sub", std::move(out), {a.node_ptr(), b.node_ptr()}, [n](Node<T>& self) {
    const T* g = self.grad.ptr();
    accumulate(*self.parents[0], n, [g](Index i) { return g[i]; });
    accumulate(*self.parents[1], n, [g](Index i) { return -g[i]; });
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape("mul", a, b);
  Tensor<T> out(a.shape());
  const Index n = out.numel();
  for (Index i = 0; i < n; ++i) out[i] = a.value()[i] * b.value()[i];
  return make_op<T>("mul", std::move(out), {a.node_ptr(), b.node_ptr()}, [n](Node<T>& self) {
    const T* g = self.grad.ptr();
    const T* av = self.parents[0]->value.ptr();
    const T* bv = self.parents[1]->value.ptr();
    accumulate(*self.parents[0], n, [g, bv](Index i) { return g[i] * bv[i]; });
    accumulate(*self.parents[1], n, [g, av](Index i) { return g[i] * av[i]; });
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  const Index n = out.numel();
  for (Index i = 0; i < n; ++i) out[i] = a.value()[i] * s;
  return make_op<T>("scale", std::move(out), {a.node_ptr()}, [n, s](Node<T>& self) {
    const T* g = self.grad.ptr();
    accumulate(*self.parents[0], n, [g, s](Index i) { return g[i] * s; });
  });
}

template <typename T>
Var<T> add_per_batch(const Var<T>& x, const Var<T>& y) {
  if (y.value().rank() != 2 || x.value().rank() < 2 || x.dim(0) != y.dim(0) || x.dim(-1) != y.dim(-1)) {
    throw DimensionError("add_per_batch: " + shape_str(x.shape()) + " with " + shape_str(y.shape()));
  }
  const Index batch = x.dim(0), d = x.dim(-1);
  const Index inner = x.numel() / (batch * d);
  Tensor<T> out(x.shape());
  for (Index b = 0; b < batch; ++b) {
    for (Index r = 0; r < inner; ++r) {
      const Index base = (b * inner + r) * d;
      for (Index j = 0; j < d; ++j) out[base + j] = x.value()[base + j] + y.value()[b * d + j];
    }
  }
  return make_op<T>("add_per_batch", std::move(out), {x.node_ptr(), y.node_ptr()},
                    [batch, inner, d](Node<T>& self) {
                      const T* g = self.grad.ptr();
                      accumulate(*self.parents[0], batch * inner * d, [g](Index i) { return g[i]; });
                      Node<T>& yp = *self.parents[1];
                      if (!yp.requires_grad) return;
                      T* gy = yp.grad_buffer().ptr();
                      for (Index b = 0; b < batch; ++b) {
                        for (Index r = 0; r < inner; ++r) {
                          const Index base = (b * inner + r) * d;
                          for (Index j = 0; j < d; ++j) gy[b * d + j] += g[base + j];
                        }
                      }
                    });
}

// ---- matmul ---------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.rank() < 2 || bv.rank() < 2) {
    throw DimensionError("matmul: operands need rank >= 2, got " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()));
  }
  const Index m = av.dim(-2), k = av.dim(-1);
  const Index bk = trans_b ? bv.dim(-1) : bv.dim(-2);
  const Index n = trans_b ? bv.dim(-2) : bv.dim(-1);
  if (bk != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()) + (trans_b ? "^T" : ""));
  }
  const Index batch = av.numel() / (m * k);
  const bool shared = bv.rank() == 2;
  if (!shared) {
    Shape ab(av.shape().begin(), av.shape().end() - 2);
    Shape bb(bv.shape().begin(), bv.shape().end() - 2);
    if (ab != bb) {
      throw DimensionError("matmul: batch dimensions differ, " + shape_str(av.shape()) + " x " +
                           shape_str(bv.shape()));
    }
  }
  Shape out_shape(av.shape().begin(), av.shape().end() - 1);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);

  kernels::GemmShape g;
  g.batch = batch;
  g.m = m;
  g.n = n;
  g.k = k;
  g.trans_b = trans_b;
  g.stride_b = shared ? 0 : -1;
  kernels::gemm(g, av.ptr(), bv.ptr(), out.ptr());

  return make_op<T>("matmul", std::move(out), {a.node_ptr(), b.node_ptr()},
                    [batch, m, n, k, trans_b, shared](Node<T>& self) {
                      const T* gc = self.grad.ptr();
                      Node<T>& pa = *self.parents[0];
                      Node<T>& pb = *self.parents[1];
                      if (pa.requires_grad) {
                        // dA = dC * op(B)^T
                        kernels::GemmShape ga;
                        ga.batch = batch;
                        ga.m = m;
                        ga.n = k;
                        ga.k = n;
                        ga.trans_b = !trans_b;
                        ga.stride_b = shared ? 0 : -1;
                        ga.accumulate = true;
                        kernels::gemm(ga, gc, pb.value.ptr(), pa.grad_buffer().ptr());
                      }
                      if (pb.requires_grad) {
                        kernels::GemmShape gb;
                        gb.trans_a = true;
                        gb.accumulate = true;
                        if (shared) {
                          gb.batch = 1;
                          gb.k = batch * m;
                        } else {
                          gb.batch = batch;
                          gb.k = m;
                        }
                        if (!trans_b) {
                          // dB = A^T * dC
                          gb.m = k;
                          gb.n = n;
                          kernels::gemm(gb, pa.value.ptr(), gc, pb.grad_buffer().ptr());
                        } else {
                          // dB = dC^T * A
                          gb.m = n;
                          gb.n = k;
                          kernels::gemm(gb, gc, pa.value.ptr(), pb.grad_buffer().ptr());
                        }
                      }
                    });
}

// ---- reductions -----------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (Index i = 0; i < a.numel(); ++i) s += a.value()[i];
  const Index n = a.numel();
  return make_op<T>("sum", Tensor<T>::scalar(s), {a.node_ptr()}, [n](Node<T>& self) {
    const T g = self.grad[0];
    accumulate(*self.parents[0], n, [g](Index) { return g; });
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  T s = 0;
  const Index n = a.numel();
  for (Index i = 0; i < n; ++i) s += a.value()[i];
  return make_op<T>("mean", Tensor<T>::scalar(s / static_cast<T>(n)), {a.node_ptr()}, [n](Node<T>& self) {
    const T g = self.grad[0] / static_cast<T>(n);
    accumulate(*self.parents[0], n, [g](Index) { return g; });
  });
}

template <typename T>
Var<T> mse(const Var<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mse: prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
  }
  const Index n = pred.numel();
  T s = 0;
  for (Index i = 0; i < n; ++i) {
    const T d = pred.value()[i] - target[i];
    s += d * d;
  }
  return make_op<T>("mse", Tensor<T>::scalar(s / static_cast<T>(n)), {pred.node_ptr()},
                    [n, target](Node<T>& self) {
                      const T g = self.grad[0] * T(2) / static_cast<T>(n);
                      const T* p = self.parents[0]->value.ptr();
                      const T* t = target.ptr();
                      accumulate(*self.parents[0], n, [g, p, t](Index i) { return g * (p[i] - t[i]); });
                    });
}

// ---- row-wise nonlinearities ------------------------------------------------

template <typename T>
Var<T> softmax_lastdim(const Var<T>& x) {
  if (x.value().rank() < 1 || x.dim(-1) < 1) {
    throw DimensionError("softmax_lastdim: empty last dimension in " + shape_str(x.shape()));
  }
  const Index cols = x.dim(-1);
  const Index rows = x.numel() / cols;
  Tensor<T> out(x.shape());
  kernels::softmax_rows(x.value().ptr(), out.ptr(), rows, cols);
  return make_op<T>("softmax", std::move(out), {x.node_ptr()}, [rows, cols](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    if (!p.requires_grad) return;
    const T* y = self.value.ptr();
    const T* g = self.grad.ptr();
    T* gx = p.grad_buffer().ptr();
    for (Index r = 0; r < rows; ++r) {
      T dot = 0;
      for (Index j = 0; j < cols; ++j) dot += g[r * cols + j] * y[r * cols + j];
      for (Index j = 0; j < cols; ++j) gx[r * cols + j] += y[r * cols + j] * (g[r * cols + j] - dot);
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, T eps) {
  const Index cols = x.dim(-1);
  const Index rows = x.numel() / cols;
  Tensor<T> out(x.shape());
  auto stats = std::make_shared<std::vector<T>>(static_cast<std::size_t>(2 * rows));
  kernels::layer_norm_rows(x.value().ptr(), out.ptr(), stats->data(), stats->data() + rows, rows, cols, eps);
  return make_op<T>("layer_norm", std::move(out), {x.node_ptr()}, [rows, cols, stats](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    if (!p.requires_grad) return;
    const T* y = self.value.ptr();
    const T* g = self.grad.ptr();
    const T* rstd = stats->data() + rows;
    T* gx = p.grad_buffer().ptr();
    const T inv_n = T(1) / static_cast<T>(cols);
    for (Index r = 0; r < rows; ++r) {
      T mg = 0, mgy = 0;
      for (Index j = 0; j < cols; ++j) {
        mg += g[r * cols + j];
        mgy += g[r * cols + j] * y[r * cols + j];
      }
      mg *= inv_n;
      mgy *= inv_n;
      for (Index j = 0; j < cols; ++j) {
        gx[r * cols + j] += rstd[r] * (g[r * cols + j] - mg - y[r * cols + j] * mgy);
      }
    }
  });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T a3 = T(0.044715);
  const Index n = x.numel();
  Tensor<T> out(x.shape());
  const T* xv = x.value().ptr();
  T* o = out.ptr();
#pragma omp simd
  for (Index i = 0; i < n; ++i) {
    const T v = xv[i];
    o[i] = T(0.5) * v * (T(1) + kernels::vtanh(c * (v + a3 * v * v * v)));
  }
  return make_op<T>("gelu", std::move(out), {x.node_ptr()}, [n](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    if (!p.requires_grad) return;
    const T* xv = p.value.ptr();
    const T* g = self.grad.ptr();
    T* gx = p.grad_buffer().ptr();
#pragma omp simd
    for (Index i = 0; i < n; ++i) {
      const T v = xv[i];
      const T th = kernels::vtanh(c * (v + a3 * v * v * v));
      gx[i] += g[i] * (T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * c * (T(1) + T(3) * a3 * v * v));
    }
  });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  const Index n = x.numel();
  Tensor<T> out(x.shape());
  for (Index i = 0; i < n; ++i) {
    const T v = x.value()[i];
    out[i] = v / (T(1) + std::exp(-v));
  }
  return make_op<T>("silu", std::move(out), {x.node_ptr()}, [n](Node<T>& self) {
    const T* xv = self.parents[0]->value.ptr();
    const T* g = self.grad.ptr();
    accumulate(*self.parents[0], n, [xv, g](Index i) {
      const T s = T(1) / (T(1) + std::exp(-xv[i]));
      return g[i] * s * (T(1) + xv[i] * (T(1) - s));
    });
  });
}

// ---- layout ----------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshape(std::move(shape));
  const Index n = x.numel();
  return make_op<T>("reshape", std::move(out), {x.node_ptr()}, [n](Node<T>& self) {
    const T* g = self.grad.ptr();
    accumulate(*self.parents[0], n, [g](Index i) { return g[i]; });
  });
}

template <typename T>
Var<T> split_heads(const Var<T>& x, Index heads) {
  if (x.value().rank() != 3 || heads < 1 || x.dim(2) % heads != 0) {
    throw ContractError("split_heads: " + shape_str(x.shape()) + " not divisible into " +
                        std::to_string(heads) + " heads");
  }
  const Index rows = x.dim(0), len = x.dim(1), dh = x.dim(2) / heads;
  Tensor<T> out({rows * heads, len, dh});
  const T* xv = x.value().ptr();
  for (Index r = 0; r < rows; ++r)
    for (Index l = 0; l < len; ++l)
      for (Index h = 0; h < heads; ++h)
        for (Index e = 0; e < dh; ++e)
          out[((r * heads + h) * len + l) * dh + e] = xv[(r * len + l) * heads * dh + h * dh + e];
  return make_op<T>("split_heads", std::move(out), {x.node_ptr()}, [rows, len, heads, dh](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    if (!p.requires_grad) return;
    const T* g = self.grad.ptr();
    T* gx = p.grad_buffer().ptr();
    for (Index r = 0; r < rows; ++r)
      for (Index l = 0; l < len; ++l)
        for (Index h = 0; h < heads; ++h)
          for (Index e = 0; e < dh; ++e)
            gx[(r * len + l) * heads * dh + h * dh + e] += g[((r * heads + h) * len + l) * dh + e];
  });
}

template <typename T>
Var<T> merge_heads(const Var<T>& x, Index heads) {
  if (x.value().rank() != 3 || heads < 1 || x.dim(0) % heads != 0) {
    throw ContractError("merge_heads: " + shape_str(x.shape()) + " not divisible into " +
                        std::to_string(heads) + " heads");
  }
  const Index rows = x.dim(0) / heads, len = x.dim(1), dh = x.dim(2);
  Tensor<T> out({rows, len, heads * dh});
  const T* xv = x.value().ptr();
  for (Index r = 0; r < rows; ++r)
    for (Index h = 0; h < heads; ++h)
      for (Index l = 0; l < len; ++l)
        for (Index e = 0; e < dh; ++e)
          out[(r * len + l) * heads * dh + h * dh + e] = xv[((r * heads + h) * len + l) * dh + e];
  return make_op<T>("merge_heads", std::move(out), {x.node_ptr()}, [rows, len, heads, dh](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    if (!p.requires_grad) return;
    const T* g = self.grad.ptr();
    T* gx = p.grad_buffer().ptr();
    for (Index r = 0; r < rows; ++r)
      for (Index h = 0; h < heads; ++h)
        for (Index l = 0; l < len; ++l)
          for (Index e = 0; e < dh; ++e)
            gx[((r * heads + h) * len + l) * dh + e] += g[(r * len + l) * heads * dh + h * dh + e];
  });
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const Index> rows, Shape out_shape) {
  const Index d = x.dim(-1);
  const Index src_rows = x.numel() / d;
  if (out_shape.empty() || out_shape.back() != d ||
      shape_numel(out_shape) != static_cast<Index>(rows.size()) * d) {
    throw DimensionError("gather_rows: output shape " + shape_str(out_shape) + " incompatible with " +
                         std::to_string(rows.size()) + " rows of " + shape_str(x.shape()));
  }
  for (Index r : rows) {
    if (r < 0 || r >= src_rows) {
      throw DimensionError("gather_rows: row " + std::to_string(r) + " outside " + shape_str(x.shape()));
    }
  }
  Tensor<T> out(std::move(out_shape));
  const T* xv = x.value().ptr();
  const Index nrows = static_cast<Index>(rows.size());
  for (Index i = 0; i < nrows; ++i) {
    std::copy_n(xv + rows[static_cast<std::size_t>(i)] * d, d, out.ptr() + i * d);
  }
  auto idx = std::make_shared<std::vector<Index>>(rows.begin(), rows.end());
  return make_op<T>("gather_rows", std::move(out), {x.node_ptr()}, [idx, d](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    if (!p.requires_grad) return;
    const T* g = self.grad.ptr();
    T* gx = p.grad_buffer().ptr();
    const Index nrows = static_cast<Index>(idx->size());
    for (Index i = 0; i < nrows; ++i) {
      T* dst = gx + (*idx)[static_cast<std::size_t>(i)] * d;
      const T* src = g + i * d;
      for (Index j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
Var<T> concat_seq(const Var<T>& a, const Var<T>& b) {
  if (a.value().rank() != 3 || b.value().rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2)) {
    throw DimensionError("concat_seq: " + shape_str(a.shape()) + " ++ " + shape_str(b.shape()));
  }
  const Index rows = a.dim(0), s1 = a.dim(1), s2 = b.dim(1), d = a.dim(2);
  Tensor<T> out({rows, s1 + s2, d});
  for (Index r = 0; r < rows; ++r) {
    std::copy_n(a.value().ptr() + r * s1 * d, s1 * d, out.ptr() + r * (s1 + s2) * d);
    std::copy_n(b.value().ptr() + r * s2 * d, s2 * d, out.ptr() + r * (s1 + s2) * d + s1 * d);
  }
  return make_op<T>("concat_seq", std::move(out), {a.node_ptr(), b.node_ptr()},
                    [rows, s1, s2, d](Node<T>& self) {
                      const T* g = self.grad.ptr();
                      Node<T>& pa = *self.parents[0];
                      Node<T>& pb = *self.parents[1];
                      for (Index r = 0; r < rows; ++r) {
                        const T* gr = g + r * (s1 + s2) * d;
                        if (pa.requires_grad) {
                          T* ga = pa.grad_buffer().ptr() + r * s1 * d;
                          for (Index j = 0; j < s1 * d; ++j) ga[j] += gr[j];
                        }
                        if (pb.requires_grad) {
                          T* gb = pb.grad_buffer().ptr() + r * s2 * d;
                          for (Index j = 0; j < s2 * d; ++j) gb[j] += gr[s1 * d + j];
                        }
                      }
                    });
}

template <typename T>
Var<T> apply_rope(const Var<T>& x, const RopeTable<T>& table) {
  if (x.value().rank() != 3 || x.dim(1) != table.len || table.head_dim < 2 || table.head_dim % 2 != 0 ||
      x.dim(2) % table.head_dim != 0) {
    throw DimensionError("apply_rope: input " + shape_str(x.shape()) + " vs table of " +
                         std::to_string(table.len) + " positions, head_dim " + std::to_string(table.head_dim));
  }
  const Index rows = x.dim(0), len = x.dim(1), ch = x.dim(2), half = table.head_dim / 2;
  const Index heads = ch / table.head_dim;
  auto cs = std::make_shared<std::pair<std::vector<T>, std::vector<T>>>(table.cos, table.sin);
  Tensor<T> out(x.shape());
  const T* xv = x.value().ptr();
  for (Index r = 0; r < rows; ++r)
    for (Index l = 0; l < len; ++l)
      for (Index h = 0; h < heads; ++h)
        for (Index i = 0; i < half; ++i) {
          const Index o = (r * len + l) * ch + h * table.head_dim + 2 * i;
          const T c = cs->first[l * half + i], s = cs->second[l * half + i];
          out[o] = xv[o] * c - xv[o + 1] * s;
          out[o + 1] = xv[o] * s + xv[o + 1] * c;
        }
  const Index hd = table.head_dim;
  return make_op<T>("rope", std::move(out), {x.node_ptr()}, [rows, len, ch, half, heads, hd, cs](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    if (!p.requires_grad) return;
    const T* g = self.grad.ptr();
    T* gx = p.grad_buffer().ptr();
    for (Index r = 0; r < rows; ++r)
      for (Index l = 0; l < len; ++l)
        for (Index h = 0; h < heads; ++h)
          for (Index i = 0; i < half; ++i) {
            const Index o = (r * len + l) * ch + h * hd + 2 * i;
            const T c = cs->first[l * half + i], s = cs->second[l * half + i];
            gx[o] += g[o] * c + g[o + 1] * s;
            gx[o + 1] += -g[o] * s + g[o + 1] * c;
          }
  });
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& kb, const Var<T>& vb,
                 Index heads, std::vector<float>* probs, const Var<T>& qb) {
  const bool own = k.defined(), shared = kb.defined() && kb.dim(0) > 0;
  const bool sep = shared && qb.defined();
  if (sep && qb.shape() != q.shape()) {
    throw DimensionError("attention: bank query " + shape_str(qb.shape()) + " vs q " + shape_str(q.shape()));
  }
  if (q.value().rank() != 3 || own != v.defined() || (kb.defined() != vb.defined())) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + " must be [R, Lq, D] with matching k/v pairs");
  }
  if (!own && !shared) throw ContractError("attention: no keys to attend to");
  kernels::AttnShape s;
  s.rows = q.dim(0);
  s.lq = q.dim(1);
  s.d = q.dim(2);
  s.heads = heads;
  s.dv = own ? v.dim(2) : vb.dim(1);
  if (own) {
    if (k.value().rank() != 3 || v.value().rank() != 3 || k.dim(0) != s.rows || v.dim(0) != s.rows ||
        k.dim(2) != s.d || v.dim(1) != k.dim(1)) {
      throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                           shape_str(v.shape()));
    }
    s.lk = k.dim(1);
  }
  if (shared) {
    if (kb.value().rank() != 2 || vb.value().rank() != 2 || kb.dim(1) != s.d || vb.dim(1) != s.dv ||
        vb.dim(0) != kb.dim(0)) {
      throw DimensionError("attention: shared k " + shape_str(kb.shape()) + ", v " + shape_str(vb.shape()) +
                           " do not fit q " + shape_str(q.shape()));
    }
    s.n_shared = kb.dim(0);
  }
  if (heads < 1 || s.d % heads != 0 || s.dv % heads != 0) {
    throw ContractError("attention: width " + std::to_string(s.d) + " not divisible into " + std::to_string(heads) +
                        " heads");
  }
  s.scale = 1.0 / std::sqrt(static_cast<double>(s.d / heads));
  const Index lt = s.lk + s.n_shared;
  auto p = std::make_shared<std::vector<T>>(static_cast<std::size_t>(s.rows * heads * s.lq * lt));
  Tensor<T> out({s.rows, s.lq, s.dv});
  const T* kp = own ? k.value().ptr() : nullptr;
  const T* vp = own ? v.value().ptr() : nullptr;
  const T* kbp = shared ? kb.value().ptr() : nullptr;
  const T* vbp = shared ? vb.value().ptr() : nullptr;
  kernels::attention_forward(s, q.value().ptr(), sep ? qb.value().ptr() : nullptr, kp, vp, kbp, vbp, p->data(),
                             out.ptr());

  if (probs != nullptr) {
    probs->assign(static_cast<std::size_t>(s.rows * s.lq * lt), 0.0F);
    for (Index r = 0; r < s.rows; ++r)
      for (Index h = 0; h < heads; ++h)
        for (Index i = 0; i < s.lq * lt; ++i)
          (*probs)[static_cast<std::size_t>(r * s.lq * lt + i)] +=
              static_cast<float>((*p)[static_cast<std::size_t>((r * heads + h) * s.lq * lt + i)] / static_cast<T>(heads));
  }

  std::vector<NodePtr<T>> parents{q.node_ptr()};
  if (own) {
    parents.push_back(k.node_ptr());
    parents.push_back(v.node_ptr());
  }
  if (shared) {
    parents.push_back(kb.node_ptr());
    parents.push_back(vb.node_ptr());
  }
  if (sep) parents.push_back(qb.node_ptr());
  return make_op<T>("attention", std::move(out), std::move(parents), [s, own, shared, sep, p](Node<T>& self) {
    Node<T>& nq = *self.parents[0];
    Node<T>* nk = own ? self.parents[1].get() : nullptr;
    Node<T>* nv = own ? self.parents[2].get() : nullptr;
    Node<T>* nkb = shared ? self.parents[own ? 3 : 1].get() : nullptr;
    Node<T>* nvb = shared ? self.parents[own ? 4 : 2].get() : nullptr;
    auto grad_of = [](Node<T>* n) { return (n != nullptr && n->requires_grad) ? n->grad_buffer().ptr() : nullptr; };
    Node<T>* nqb = sep ? self.parents.back().get() : nullptr;
    T* dkb = grad_of(nkb);
    T* dvb = grad_of(nvb);
    std::vector<T> scratch;
    if (dkb != nullptr || dvb != nullptr) scratch.resize(static_cast<std::size_t>(s.rows * s.heads * s.lq * s.n_shared));
    kernels::attention_backward(s, nq.value.ptr(), nqb ? nqb->value.ptr() : nullptr, nk ? nk->value.ptr() : nullptr,
                                nv ? nv->value.ptr() : nullptr, nkb ? nkb->value.ptr() : nullptr,
                                nvb ? nvb->value.ptr() : nullptr, p->data(), self.grad.ptr(), grad_of(&nq),
                                grad_of(nqb), grad_of(nk), grad_of(nv), dkb, dvb, scratch.data());
  });
}

template <typename T>
Var<T> detach(const Var<T>& x) {
  return Var<T>::constant(x.value());
}

#define CCL_INSTANTIATE(T)                                                                 \
  template struct Node<T>;                                                                \
  template class Var<T>;                                                                  \
  template class GradTape<T>;                                                             \
  template void backward(const Var<T>&);                                                  \
  template Var<T> add(const Var<T>&, const Var<T>&);                                      \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                      \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                      \
  template Var<T> scale(const Var<T>&, T);                                                \
  template Var<T> add_per_batch(const Var<T>&, const Var<T>&);                            \
  template Var<T> matmul(const Var<T>&, const Var<T>&, bool);                             \
  template Var<T> sum(const Var<T>&);                                                     \
  template Var<T> mean(const Var<T>&);                                                    \
  template Var<T> mse(const Var<T>&, const Tensor<T>&);                                   \
  template Var<T> softmax_lastdim(const Var<T>&);                                         \
  template Var<T> layer_norm(const Var<T>&, T);                                           \
  template Var<T> gelu(const Var<T>&);                                                    \
  template Var<T> silu(const Var<T>&);                                                    \
  template Var<T> reshape(const Var<T>&, Shape);                                          \
  template Var<T> split_heads(const Var<T>&, Index);                                      \
  template Var<T> merge_heads(const Var<T>&, Index);                                      \
  template Var<T> gather_rows(const Var<T>&, std::span<const Index>, Shape);              \
  template Var<T> concat_seq(const Var<T>&, const Var<T>&);                               \
  template Var<T> apply_rope(const Var<T>&, const RopeTable<T>&);                         \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, \
                            Index, std::vector<float>*, const Var<T>&);                          \
  template Var<T> detach(const Var<T>&);

CCL_INSTANTIATE(float)
CCL_INSTANTIATE(double)

#undef CCL_INSTANTIATE

}  // namespace ccl
