#include "ccl/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ccl::kernels {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr Index kParallelWork = 1 << 15;

constexpr Index kRowTile = 8;
constexpr Index kColTile = 32;

// dst (cols x rows, dense) = src^T where src has `rows` rows of stride ld.
template <typename T>
void transpose_into(const T* src, Index ld, T* dst, Index rows, Index cols) {
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) dst[c * rows + r] = src[r * ld + c];
  }
}

// NR rows of C from A and row-major B (k x n, row stride ldb). Element
// (r, kk) of A sits at a[r * ar + kk * ak], which covers both A and A^T
// storage.
template <typename T, int NR>
void gemm_rows(const T* __restrict a, Index ar, Index ak, const T* __restrict b, Index ldb, T* __restrict c,
               Index ldc, Index n, Index k, bool accumulate) {
  alignas(64) T acc[NR][kColTile];
  for (Index j0 = 0; j0 < n; j0 += kColTile) {
    const Index nc = std::min(kColTile, n - j0);
    for (int r = 0; r < NR; ++r) {
      for (Index jj = 0; jj < kColTile; ++jj) acc[r][jj] = T(0);
      if (accumulate) {
        for (Index jj = 0; jj < nc; ++jj) acc[r][jj] = c[r * ldc + j0 + jj];
      }
    }
    if (nc == kColTile) {
      for (Index kk = 0; kk < k; ++kk) {
        const T* brow = b + kk * ldb + j0;
        T av[NR];
        for (int r = 0; r < NR; ++r) av[r] = a[r * ar + kk * ak];
#pragma omp simd
        for (Index jj = 0; jj < kColTile; ++jj) {
          const T bv = brow[jj];
          for (int r = 0; r < NR; ++r) acc[r][jj] += av[r] * bv;
        }
      }
    } else {
      for (Index kk = 0; kk < k; ++kk) {
        const T* brow = b + kk * ldb + j0;
        T av[NR];
        for (int r = 0; r < NR; ++r) av[r] = a[r * ar + kk * ak];
#pragma omp simd
        for (Index jj = 0; jj < nc; ++jj) {
          const T bv = brow[jj];
          for (int r = 0; r < NR; ++r) acc[r][jj] += av[r] * bv;
        }
      }
    }
    for (int r = 0; r < NR; ++r) {
      for (Index jj = 0; jj < nc; ++jj) c[r * ldc + j0 + jj] = acc[r][jj];
    }
  }
}

template <typename T>
void gemm_block(Index nr, const T* a, Index ar, Index ak, const T* b, Index ldb, T* c, Index ldc, Index n, Index k,
                bool accumulate) {
  switch (nr) {
    case 8: return gemm_rows<T, 8>(a, ar, ak, b, ldb, c, ldc, n, k, accumulate);
    case 7: return gemm_rows<T, 7>(a, ar, ak, b, ldb, c, ldc, n, k, accumulate);
    case 6: return gemm_rows<T, 6>(a, ar, ak, b, ldb, c, ldc, n, k, accumulate);
    case 5: return gemm_rows<T, 5>(a, ar, ak, b, ldb, c, ldc, n, k, accumulate);
    case 4: return gemm_rows<T, 4>(a, ar, ak, b, ldb, c, ldc, n, k, accumulate);
    case 3: return gemm_rows<T, 3>(a, ar, ak, b, ldb, c, ldc, n, k, accumulate);
    case 2: return gemm_rows<T, 2>(a, ar, ak, b, ldb, c, ldc, n, k, accumulate);
    default: return gemm_rows<T, 1>(a, ar, ak, b, ldb, c, ldc, n, k, accumulate);
  }
}

// Single-threaded strided GEMM used inside parallel regions:
// C (m x n, stride ldc) (+)= op(A) op(B). A is m x k with row stride lda, or
// k x m with row stride lda when trans_a. B is k x n with stride ldb, or
// n x k with stride ldb when trans_b (packed into `pack`).
template <typename T>
void gemm_local(Index m, Index n, Index k, const T* a, Index lda, bool trans_a, const T* b, Index ldb, bool trans_b,
                T* c, Index ldc, bool accumulate, std::vector<T>& pack) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate)
      for (Index i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, T(0));
    return;
  }
  if (trans_b) {
    pack.resize(static_cast<std::size_t>(k * n));
    transpose_into(b, ldb, pack.data(), n, k);
    b = pack.data();
    ldb = n;
  }
  const Index ar = trans_a ? 1 : lda;
  const Index ak = trans_a ? lda : 1;
  for (Index i0 = 0; i0 < m; i0 += kRowTile) {
    gemm_block(std::min(kRowTile, m - i0), a + i0 * ar, ar, ak, b, ldb, c + i0 * ldc, ldc, n, k, accumulate);
  }
}

// y = softmax(x) for one row; x and y may alias.
template <typename T>
void softmax_inplace(const T* x, T* y, Index n) {
  T mx = -std::numeric_limits<T>::infinity();
  for (Index j = 0; j < n; ++j) mx = std::max(mx, x[j]);
#pragma omp simd
  for (Index j = 0; j < n; ++j) y[j] = vexp(x[j] - mx);
  T sum = 0;
  for (Index j = 0; j < n; ++j) sum += y[j];
  const T inv = T(1) / sum;
#pragma omp simd
  for (Index j = 0; j < n; ++j) y[j] *= inv;
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
  omp_set_num_threads(std::max(1, n));
#else
  (void)n;
#endif
}

template <typename T>
void gemm(const GemmShape& g, const T* a, const T* b, T* c) {
  const Index m = g.m, n = g.n, k = g.k;
  const Index sa = g.stride_a < 0 ? m * k : g.stride_a;
  const Index sb = g.stride_b < 0 ? k * n : g.stride_b;
  const Index nbb = sb == 0 ? 1 : g.batch;
  const bool par = g.batch * m * n * k >= kParallelWork;
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!g.accumulate) std::fill(c, c + g.batch * m * n, T(0));
    return;
  }

  // B is brought to row-major k x n; A^T is read in place.
  std::vector<T> pb;
  const T* bp = b;
  Index psb = sb;
  if (g.trans_b) {
    pb.resize(static_cast<std::size_t>(nbb * k * n));
#pragma omp parallel for if (par && nbb > 1)
    for (Index bi = 0; bi < nbb; ++bi) transpose_into(b + bi * sb, k, pb.data() + bi * k * n, n, k);
    bp = pb.data();
    psb = nbb == 1 ? 0 : k * n;
  }
  const Index ar = g.trans_a ? 1 : k;
  const Index ak = g.trans_a ? m : 1;

  const Index row_blocks = (m + kRowTile - 1) / kRowTile;
  const Index tasks = g.batch * row_blocks;
#pragma omp parallel for schedule(static) if (par)
  for (Index t = 0; t < tasks; ++t) {
    const Index bi = t / row_blocks;
    const Index i0 = (t % row_blocks) * kRowTile;
    const Index nr = std::min(kRowTile, m - i0);
    gemm_block(nr, a + bi * sa + i0 * ar, ar, ak, bp + bi * psb, n, c + bi * m * n + i0 * n, n, n, k, g.accumulate);
  }
}

template <typename T>
void softmax_rows(const T* x, T* y, Index rows, Index cols) {
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelWork)
  for (Index r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    softmax_inplace(xr, yr, cols);
  }
}

template <typename T>
void layer_norm_rows(const T* x, T* y, T* mean, T* rstd, Index rows, Index cols, T eps) {
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelWork)
  for (Index r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    T mu = 0;
    for (Index j = 0; j < cols; ++j) mu += xr[j];
    mu /= static_cast<T>(cols);
    T var = 0;
    for (Index j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(cols);
    const T rs = T(1) / std::sqrt(var + eps);
    for (Index j = 0; j < cols; ++j) yr[j] = (xr[j] - mu) * rs;
    mean[r] = mu;
    rstd[r] = rs;
  }
}

// Attention runs one (row, head) pair per task. Each task does its own small
// strided GEMMs; only the shared-key gradients need a second pass, which
// sums over rows per head in a fixed order.
template <typename T>
void attention_forward(const AttnShape& s, const T* q, const T* qb, const T* k, const T* v, const T* kb, const T* vb, T* probs,
                       T* out) {
  const Index lt = s.lk + s.n_shared;
  const Index dh = s.d / s.heads, dvh = s.dv / s.heads;
  const T scale = static_cast<T>(s.scale);
  const Index tasks = s.rows * s.heads;
  const bool par = tasks * s.lq * lt * (dh + dvh) >= kParallelWork;
  // Shared keys are transposed once per head: kbt[h] is dh x n_shared.
  std::vector<T> kbt(static_cast<std::size_t>(s.heads * dh * s.n_shared));
  for (Index h = 0; h < s.heads && s.n_shared > 0; ++h) {
    transpose_into(kb + h * dh, s.d, kbt.data() + h * dh * s.n_shared, s.n_shared, dh);
  }
#pragma omp parallel for schedule(static) if (par)
  for (Index t = 0; t < tasks; ++t) {
    const Index r = t / s.heads, h = t % s.heads;
    std::vector<T> pack;
    const T* qh = q + r * s.lq * s.d + h * dh;
    const T* qbh = (qb != nullptr ? qb : q) + r * s.lq * s.d + h * dh;
    T* p = probs + (r * s.heads + h) * s.lq * lt;
    T* o = out + r * s.lq * s.dv + h * dvh;
    const T* kr = k != nullptr ? k + r * s.lk * s.d + h * dh : nullptr;
    const T* vr = v != nullptr ? v + r * s.lk * s.dv + h * dvh : nullptr;
    const T* vbh = vb != nullptr ? vb + h * dvh : nullptr;
    gemm_local(s.lq, s.lk, dh, qh, s.d, false, kr, s.d, true, p, lt, false, pack);
    gemm_local(s.lq, s.n_shared, dh, qbh, s.d, false, kbt.data() + h * dh * s.n_shared, s.n_shared, false, p + s.lk,
               lt, false, pack);
    for (Index i = 0; i < s.lq; ++i) {
      T* pr = p + i * lt;
      for (Index j = 0; j < lt; ++j) pr[j] *= scale;
      softmax_inplace(pr, pr, lt);
    }
    gemm_local(s.lq, dvh, s.lk, p, lt, false, vr, s.dv, false, o, s.dv, false, pack);
    gemm_local(s.lq, dvh, s.n_shared, p + s.lk, lt, false, vbh, s.dv, false, o, s.dv, s.lk > 0, pack);
  }
}

template <typename T>
void attention_backward(const AttnShape& s, const T* q, const T* qb, const T* k, const T* v, const T* kb, const T* vb,
                        const T* probs, const T* dout, T* dq, T* dqb, T* dk, T* dv, T* dkb, T* dvb, T* scratch) {
  const Index lt = s.lk + s.n_shared;
  const Index dh = s.d / s.heads, dvh = s.dv / s.heads;
  const T scale = static_cast<T>(s.scale);
  const Index tasks = s.rows * s.heads;
  const bool par = tasks * s.lq * lt * (dh + dvh) >= kParallelWork;
  const bool shared_grad = s.n_shared > 0 && (dkb != nullptr || dvb != nullptr);
  std::vector<T> vbt(static_cast<std::size_t>(s.heads * dvh * s.n_shared));
  for (Index h = 0; h < s.heads && s.n_shared > 0; ++h) {
    transpose_into(vb + h * dvh, s.dv, vbt.data() + h * dvh * s.n_shared, s.n_shared, dvh);
  }
  // scratch layout: [heads, rows * lq, n_shared] for the shared-key score
  // gradients, so each head's block is one contiguous matrix.
#pragma omp parallel for schedule(static) if (par)
  for (Index t = 0; t < tasks; ++t) {
    const Index r = t / s.heads, h = t % s.heads;
    std::vector<T> pack;
    std::vector<T> ds(static_cast<std::size_t>(s.lq * lt));
    const T* qh = q + r * s.lq * s.d + h * dh;
    const T* go = dout + r * s.lq * s.dv + h * dvh;
    const T* p = probs + (r * s.heads + h) * s.lq * lt;
    const T* kr = k != nullptr ? k + r * s.lk * s.d + h * dh : nullptr;
    const T* vr = v != nullptr ? v + r * s.lk * s.dv + h * dvh : nullptr;
    const T* kbh = kb != nullptr ? kb + h * dh : nullptr;
    // dP = dO V^T
    gemm_local(s.lq, s.lk, dvh, go, s.dv, false, vr, s.dv, true, ds.data(), lt, false, pack);
    gemm_local(s.lq, s.n_shared, dvh, go, s.dv, false, vbt.data() + h * dvh * s.n_shared, s.n_shared, false,
               ds.data() + s.lk, lt, false, pack);
    for (Index i = 0; i < s.lq; ++i) {
      const T* pr = p + i * lt;
      T* dr = ds.data() + i * lt;
      T acc = 0;
      for (Index j = 0; j < lt; ++j) acc += pr[j] * dr[j];
      for (Index j = 0; j < lt; ++j) dr[j] = scale * pr[j] * (dr[j] - acc);
    }
    if (dq != nullptr) {
      gemm_local(s.lq, dh, s.lk, ds.data(), lt, false, kr, s.d, false, dq + r * s.lq * s.d + h * dh, s.d, true, pack);
    }
    if (T* gb = qb != nullptr ? dqb : dq; gb != nullptr) {
      gemm_local(s.lq, dh, s.n_shared, ds.data() + s.lk, lt, false, kbh, s.d, false, gb + r * s.lq * s.d + h * dh, s.d,
                 true, pack);
    }
    if (dk != nullptr) {
      gemm_local(s.lk, dh, s.lq, ds.data(), lt, true, qh, s.d, false, dk + r * s.lk * s.d + h * dh, s.d, true, pack);
    }
    if (dv != nullptr) {
      gemm_local(s.lk, dvh, s.lq, p, lt, true, go, s.dv, false, dv + r * s.lk * s.dv + h * dvh, s.dv, true, pack);
    }
    if (shared_grad) {
      for (Index i = 0; i < s.lq; ++i) {
        std::copy(ds.data() + i * lt + s.lk, ds.data() + (i + 1) * lt,
                  scratch + (h * s.rows * s.lq + r * s.lq + i) * s.n_shared);
      }
    }
  }
  if (!shared_grad) return;
#pragma omp parallel for schedule(static) if (par)
  for (Index h = 0; h < s.heads; ++h) {
    std::vector<T> pack;
    const Index rq = s.rows * s.lq;
    if (dkb != nullptr) {
      // dKb_h = S_h^T Q_h with Q_h the h-th head slice of all query rows.
      gemm_local(s.n_shared, dh, rq, scratch + h * rq * s.n_shared, s.n_shared, true, (qb != nullptr ? qb : q) + h * dh, s.d, false,
                 dkb + h * dh, s.d, true, pack);
    }
    if (dvb != nullptr) {
      std::vector<T> ph(static_cast<std::size_t>(rq * s.n_shared));
      for (Index r = 0; r < s.rows; ++r)
        for (Index i = 0; i < s.lq; ++i)
          std::copy(probs + ((r * s.heads + h) * s.lq + i) * lt + s.lk, probs + ((r * s.heads + h) * s.lq + i + 1) * lt,
                    ph.data() + (r * s.lq + i) * s.n_shared);
      gemm_local(s.n_shared, dvh, rq, ph.data(), s.n_shared, true, dout + h * dvh, s.dv, false, dvb + h * dvh, s.dv,
                 true, pack);
    }
  }
}

namespace serial {

template <typename T>
void gemm(const GemmShape& g, const T* a, const T* b, T* c) {
  const Index m = g.m, n = g.n, k = g.k;
  const Index sa = g.stride_a < 0 ? m * k : g.stride_a;
  const Index sb = g.stride_b < 0 ? k * n : g.stride_b;
  for (Index bi = 0; bi < g.batch; ++bi) {
    const T* ab = a + bi * sa;
    const T* bb = b + bi * sb;
    T* cb = c + bi * m * n;
    for (Index i = 0; i < m; ++i) {
      for (Index j = 0; j < n; ++j) {
        T s = 0;
        for (Index kk = 0; kk < k; ++kk) {
          const T av = g.trans_a ? ab[kk * m + i] : ab[i * k + kk];
          const T bv = g.trans_b ? bb[j * k + kk] : bb[kk * n + j];
          s += av * bv;
        }
        cb[i * n + j] = g.accumulate ? cb[i * n + j] + s : s;
      }
    }
  }
}

template <typename T>
void softmax_rows(const T* x, T* y, Index rows, Index cols) {
  for (Index r = 0; r < rows; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (Index j = 0; j < cols; ++j) mx = std::max(mx, x[r * cols + j]);
    T sum = 0;
    for (Index j = 0; j < cols; ++j) sum += std::exp(x[r * cols + j] - mx);
    for (Index j = 0; j < cols; ++j) y[r * cols + j] = std::exp(x[r * cols + j] - mx) / sum;
  }
}

template <typename T>
void layer_norm_rows(const T* x, T* y, T* mean, T* rstd, Index rows, Index cols, T eps) {
  for (Index r = 0; r < rows; ++r) {
    T mu = 0;
    for (Index j = 0; j < cols; ++j) mu += x[r * cols + j];
    mu /= static_cast<T>(cols);
    T var = 0;
    for (Index j = 0; j < cols; ++j) var += (x[r * cols + j] - mu) * (x[r * cols + j] - mu);
    var /= static_cast<T>(cols);
    mean[r] = mu;
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (Index j = 0; j < cols; ++j) y[r * cols + j] = (x[r * cols + j] - mu) * rstd[r];
  }
}

template <typename T>
void attention_forward(const AttnShape& s, const T* q, const T* qb, const T* k, const T* v, const T* kb, const T* vb, T* probs,
                       T* out) {
  const Index lt = s.lk + s.n_shared;
  const Index dh = s.d / s.heads, dvh = s.dv / s.heads;
  auto key = [&](Index r, Index h, Index j, Index c) {
    return j < s.lk ? k[(r * s.lk + j) * s.d + h * dh + c] : kb[(j - s.lk) * s.d + h * dh + c];
  };
  auto val = [&](Index r, Index h, Index j, Index c) {
    return j < s.lk ? v[(r * s.lk + j) * s.dv + h * dvh + c] : vb[(j - s.lk) * s.dv + h * dvh + c];
  };
  for (Index r = 0; r < s.rows; ++r)
    for (Index h = 0; h < s.heads; ++h)
      for (Index i = 0; i < s.lq; ++i) {
        T* pr = probs + ((r * s.heads + h) * s.lq + i) * lt;
        for (Index j = 0; j < lt; ++j) {
          T acc = 0;
          const T* qi = (j < s.lk || qb == nullptr ? q : qb) + (r * s.lq + i) * s.d + h * dh;
          for (Index c = 0; c < dh; ++c) acc += qi[c] * key(r, h, j, c);
          pr[j] = acc * static_cast<T>(s.scale);
        }
        softmax_rows(pr, pr, 1, lt);
        for (Index c = 0; c < dvh; ++c) {
          T acc = 0;
          for (Index j = 0; j < lt; ++j) acc += pr[j] * val(r, h, j, c);
          out[(r * s.lq + i) * s.dv + h * dvh + c] = acc;
        }
      }
}

template <typename T>
void attention_backward(const AttnShape& s, const T* q, const T* qb, const T* k, const T* v, const T* kb, const T* vb,
                        const T* probs, const T* dout, T* dq, T* dqb, T* dk, T* dv, T* dkb, T* dvb, T* /*scratch*/) {
  const Index lt = s.lk + s.n_shared;
  const Index dh = s.d / s.heads, dvh = s.dv / s.heads;
  for (Index r = 0; r < s.rows; ++r)
    for (Index h = 0; h < s.heads; ++h)
      for (Index i = 0; i < s.lq; ++i) {
        const T* pr = probs + ((r * s.heads + h) * s.lq + i) * lt;
        const T* go = dout + (r * s.lq + i) * s.dv + h * dvh;
        const T* qi = q + (r * s.lq + i) * s.d + h * dh;
        std::vector<T> dp(static_cast<std::size_t>(lt));
        for (Index j = 0; j < lt; ++j) {
          const T* vj = j < s.lk ? v + (r * s.lk + j) * s.dv + h * dvh : vb + (j - s.lk) * s.dv + h * dvh;
          T acc = 0;
          for (Index c = 0; c < dvh; ++c) acc += go[c] * vj[c];
          dp[static_cast<std::size_t>(j)] = acc;
        }
        T dot_pp = 0;
        for (Index j = 0; j < lt; ++j) dot_pp += pr[j] * dp[static_cast<std::size_t>(j)];
        for (Index j = 0; j < lt; ++j) {
          const T dsj = static_cast<T>(s.scale) * pr[j] * (dp[static_cast<std::size_t>(j)] - dot_pp);
          const bool own = j < s.lk;
          const T* kj = own ? k + (r * s.lk + j) * s.d + h * dh : kb + (j - s.lk) * s.d + h * dh;
          T* gk = own ? (dk ? dk + (r * s.lk + j) * s.d + h * dh : nullptr) : (dkb ? dkb + (j - s.lk) * s.d + h * dh : nullptr);
          T* gv = own ? (dv ? dv + (r * s.lk + j) * s.dv + h * dvh : nullptr)
                      : (dvb ? dvb + (j - s.lk) * s.dv + h * dvh : nullptr);
          const bool sep = !own && qb != nullptr;
          const T* qj = sep ? qb + (r * s.lq + i) * s.d + h * dh : qi;
          T* gq = sep ? dqb : dq;
          for (Index c = 0; c < dh; ++c) {
            if (gq) gq[(r * s.lq + i) * s.d + h * dh + c] += dsj * kj[c];
            if (gk) gk[c] += dsj * qj[c];
          }
          if (gv)
            for (Index c = 0; c < dvh; ++c) gv[c] += pr[j] * go[c];
        }
      }
}

}  // namespace serial

#define CCL_INSTANTIATE(T)                                                              \
  template void gemm<T>(const GemmShape&, const T*, const T*, T*);                     \
  template void softmax_rows<T>(const T*, T*, Index, Index);                           \
  template void layer_norm_rows<T>(const T*, T*, T*, T*, Index, Index, T);             \
  template void serial::gemm<T>(const GemmShape&, const T*, const T*, T*);             \
  template void serial::softmax_rows<T>(const T*, T*, Index, Index);                   \
  template void serial::layer_norm_rows<T>(const T*, T*, T*, T*, Index, Index, T);             \
  template void attention_forward<T>(const AttnShape&, const T*, const T*, const T*, const T*, const T*, const T*, T*, T*); \
  template void attention_backward<T>(const AttnShape&, const T*, const T*, const T*, const T*, const T*,       \
                                      const T*, const T*, const T*, T*, T*, T*, T*, T*, T*, T*);                          \
  template void serial::attention_forward<T>(const AttnShape&, const T*, const T*, const T*, const T*, const T*, \
                                             const T*, T*, T*);                                                       \
  template void serial::attention_backward<T>(const AttnShape&, const T*, const T*, const T*, const T*,       \
                                              const T*, const T*, const T*, const T*, T*, T*, T*, T*, T*, T*, T*);

CCL_INSTANTIATE(float)
CCL_INSTANTIATE(double)

#undef CCL_INSTANTIATE

}  // namespace ccl::kernels
