#pragma once

// Dense compute kernels. Every kernel has an OpenMP implementation used by
// the autograd ops and a plain serial reference in `serial::` that tests and
// benchmarks compare against. Parallel loops only split independent output
// rows, so each output element is produced by one thread in a fixed order
// and results do not depend on the thread count.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>

#include "ccl/tensor.hpp"

namespace ccl::kernels {

// exp used by softmax and the activations. The float version is a
// branch-free polynomial (relative error below 3e-7, inputs clamped to
// [-87, 88]) that the compiler can vectorize; double uses std::exp so
// 64-bit gradient checks see the exact function.
inline float vexp(float x) {
  x = x < -87.0F ? -87.0F : x;
  x = x > 88.0F ? 88.0F : x;
  // Round-to-nearest via the 1.5 * 2^23 trick; the low mantissa bits of t
  // then hold n as an integer.
  const float t = x * 1.44269504088896341F + 12582912.0F;
  const float n = t - 12582912.0F;
  const float r = x - n * 0.693359375F + n * 2.12194440e-4F;
  float p = 1.9875691500e-4F;
  p = p * r + 1.3981999507e-3F;
  p = p * r + 8.3334519073e-3F;
  p = p * r + 4.1665795894e-2F;
  p = p * r + 1.6666665459e-1F;
  p = p * r + 5.0000001201e-1F;
  p = p * r * r + r + 1.0F;
  const std::int32_t e = std::bit_cast<std::int32_t>(t) - 0x4B400000;
  return p * std::bit_cast<float>((e + 127) << 23);
}
inline double vexp(double x) { return std::exp(x); }

inline float vtanh(float x) { return 1.0F - 2.0F / (vexp(2.0F * x) + 1.0F); }
inline double vtanh(double x) { return std::tanh(x); }

// C[b] = op(A[b]) * op(B[b])  (or C[b] += ... when accumulate is set).
// op(A) is m x k; when trans_a, A[b] is stored k x m. op(B) is k x n; when
// trans_b, B[b] is stored n x k. A stride of 0 shares one matrix across the
// batch.
struct GemmShape {
  Index batch = 1;
  Index m = 0;
  Index n = 0;
  Index k = 0;
  bool trans_a = false;
  bool trans_b = false;
  Index stride_a = -1;  // -1: dense (m*k)
  Index stride_b = -1;  // -1: dense (k*n)
  bool accumulate = false;
};

template <typename T>
void gemm(const GemmShape& g, const T* a, const T* b, T* c);

// Row-wise numerically stabilized softmax over the trailing `cols` values.
template <typename T>
void softmax_rows(const T* x, T* y, Index rows, Index cols);

// Row-wise layer normalization without affine terms; writes per-row mean and
// reciprocal standard deviation for the backward pass.
template <typename T>
void layer_norm_rows(const T* x, T* y, T* mean, T* rstd, Index rows, Index cols, T eps);

// Multi-head softmax attention in which each of `rows` rows has its own lk
// keys/values and all rows additionally share n_shared keys/values (shared
// ones come last in the key order). Layouts, with heads interleaved in the
// channel axis:
//   q [rows, lq, d], k [rows, lk, d], v [rows, lk, dv], kb [n_shared, d],
//   vb [n_shared, dv], probs [rows, heads, lq, lk + n_shared], out [rows, lq, dv].
// qb, when non-null, is a second query [rows, lq, d] used only against the
// shared keys; otherwise q scores both.
struct AttnShape {
  Index rows = 0;
  Index heads = 1;
  Index lq = 0;
  Index lk = 0;
  Index n_shared = 0;
  Index d = 0;
  Index dv = 0;
  double scale = 1.0;
};

template <typename T>
void attention_forward(const AttnShape& s, const T* q, const T* qb, const T* k, const T* v, const T* kb, const T* vb, T* probs,
                       T* out);

// Accumulates into every non-null gradient pointer; without qb the
// shared-key part of dq goes to dq and dqb is ignored. `scratch` must hold
// rows * heads * lq * n_shared values when dkb or dvb is requested.
template <typename T>
void attention_backward(const AttnShape& s, const T* q, const T* qb, const T* k, const T* v, const T* kb, const T* vb,
                        const T* probs, const T* dout, T* dq, T* dqb, T* dk, T* dv, T* dkb, T* dvb, T* scratch);

// Number of OpenMP threads the kernels will use (1 when built without OpenMP).
int max_threads();
void set_threads(int n);

namespace serial {

template <typename T>
void gemm(const GemmShape& g, const T* a, const T* b, T* c);

template <typename T>
void softmax_rows(const T* x, T* y, Index rows, Index cols);

template <typename T>
void layer_norm_rows(const T* x, T* y, T* mean, T* rstd, Index rows, Index cols, T eps);

template <typename T>
void attention_forward(const AttnShape& s, const T* q, const T* qb, const T* k, const T* v, const T* kb, const T* vb, T* probs,
                       T* out);

template <typename T>
void attention_backward(const AttnShape& s, const T* q, const T* qb, const T* k, const T* v, const T* kb, const T* vb,
                        const T* probs, const T* dout, T* dq, T* dqb, T* dk, T* dv, T* dkb, T* dvb, T* scratch);

}  // namespace serial

}  // namespace ccl::kernels
