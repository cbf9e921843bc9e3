#pragma once

// Independent reference computations for the tests. Everything here works
// on plain std::vector<double> with explicit loops and shares no code with
// the library beyond reading parameter values.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "ccl/cca.hpp"
#include "ccl/dcr.hpp"
#include "ccl/tarp.hpp"

namespace oracle {

using ccl::Index;
using Vec = std::vector<double>;

inline Vec values(const ccl::Tensor<double>& t) { return Vec(t.data().begin(), t.data().end()); }
inline Vec values(const ccl::Tensor<float>& t) { return Vec(t.data().begin(), t.data().end()); }

// [m, k] x [k, n]
inline Vec matmul(const Vec& a, const Vec& b, Index m, Index k, Index n) {
  Vec c(static_cast<std::size_t>(m * n), 0.0);
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < n; ++j) {
      double s = 0;
      for (Index p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

// Window of video frame i, straight from the formulas:
// c = floor(t_a / t_v), m_i = floor(c/2 + c*i), s = 3c,
// index k = clamp(m_i - floor(s/2) + k, 0, t_a - 1).
inline std::vector<Index> window(Index t_a, Index t_v, Index i) {
  const Index c = t_a / t_v;
  const Index s = 3 * c;
  const Index m = static_cast<Index>(std::floor(static_cast<double>(c) / 2.0 + static_cast<double>(c * i)));
  std::vector<Index> w;
  for (Index k = 0; k < s; ++k) w.push_back(std::clamp<Index>(m - s / 2 + k, 0, t_a - 1));
  return w;
}

inline Index frame_of_audio(Index t_a, Index t_v, Index j) {
  return std::min<Index>(static_cast<Index>(std::floor(static_cast<double>(j) * t_v / t_a)), t_v - 1);
}

// Rotates pairs (2p, 2p+1) of one head in place by pos * base^(-2p/dh).
inline void rotate(double* x, Index dh, double pos, double base) {
  for (Index p = 0; p < dh / 2; ++p) {
    const double ang = pos * std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(dh));
    const double c = std::cos(ang), s = std::sin(ang);
    const double a = x[2 * p], b = x[2 * p + 1];
    x[2 * p] = a * c - b * s;
    x[2 * p + 1] = a * s + b * c;
  }
}

// Multi-head attention of one query over keys with multiplicities `mult`
// (0 masks a key out, 2 counts a duplicated key twice). The last `n_tail`
// keys are scored against q_tail instead of q.
inline Vec attend(const double* q, const std::vector<const double*>& keys, const std::vector<const double*>& vals,
                  const std::vector<double>& mult, Index d, Index dv, Index heads, const double* q_tail = nullptr,
                  std::size_t n_tail = 0) {
  const Index dh = d / heads, dvh = dv / heads;
  Vec out(static_cast<std::size_t>(dv), 0.0);
  for (Index h = 0; h < heads; ++h) {
    std::vector<double> logit(keys.size());
    double mx = -1e300;
    for (std::size_t j = 0; j < keys.size(); ++j) {
      if (mult[j] == 0) continue;
      double s = 0;
      const double* qq = j + n_tail >= keys.size() && q_tail != nullptr ? q_tail : q;
      for (Index e = 0; e < dh; ++e) s += qq[h * dh + e] * keys[j][h * dh + e];
      logit[j] = s / std::sqrt(static_cast<double>(dh));
      mx = std::max(mx, logit[j]);
    }
    double z = 0;
    for (std::size_t j = 0; j < keys.size(); ++j)
      if (mult[j] != 0) z += mult[j] * std::exp(logit[j] - mx);
    for (std::size_t j = 0; j < keys.size(); ++j) {
      if (mult[j] == 0) continue;
      const double p = mult[j] * std::exp(logit[j] - mx) / z;
      for (Index e = 0; e < dvh; ++e) out[h * dvh + e] += p * vals[j][h * dvh + e];
    }
  }
  return out;
}

struct CcaResult {
  Vec delta_a;  // empty when nothing was attended
  Vec delta_v;
};

// Dense cross-modal attention: every query scores every opposing latent
// token (masked by the window multiplicities, or fully masked when the plan
// routes no latents) plus the context bank. Latent logits use rotated q/k,
// bank logits the unrotated q.
inline CcaResult dense_cca(const Vec& x_a, const Vec& x_v, Index b, const ccl::tarp::GridMeta& g,
                           const ccl::cca::CCAParams<double>& p, const ccl::cca::CCADims& dims,
                           const ccl::dcr::RoutingPlan& plan, bool full_span = false, double base = 10000.0) {
  const Index da = dims.d_a, dv = dims.d_v, ta = g.t_a, sv = g.s_v(), hw = g.frame_tokens();
  auto W = [](const ccl::Var<double>& v) { return values(v.value()); };
  CcaResult r;

  if (plan.video.active) {
    const Vec q = matmul(x_v, W(p.wq_v), b * sv, dv, dv);
    const Vec k = matmul(x_a, W(p.wk_a), b * ta, da, dv);
    const Vec v = matmul(x_a, W(p.wv_a), b * ta, da, dv);
    const Index nb = plan.video.use_lct && p.lct.audio_bank.defined() ? p.lct.audio_bank.dim(0) : 0;
    Vec kb, vb;
    if (nb > 0) {
      kb = matmul(W(p.lct.audio_bank), W(p.wk_la), nb, dv, dv);
      vb = matmul(W(p.lct.audio_bank), W(p.wv_la), nb, dv, dv);
    }
    const Index dh = dv / dims.heads_v;
    Vec qr = q, kr = k;
    for (Index i = 0; i < b * sv; ++i)
      for (Index h = 0; h < dims.heads_v; ++h)
        rotate(&qr[i * dv + h * dh], dh, static_cast<double>((i % sv) / hw), base);
    for (Index j = 0; j < b * ta; ++j)
      for (Index h = 0; h < dims.heads_v; ++h)
        rotate(&kr[j * dv + h * dh], dh, static_cast<double>((j % ta) * g.t_v) / static_cast<double>(ta), base);
    if (plan.video.use_cross_latent || nb > 0) {
      const Vec wo = W(p.wo_v);
      r.delta_v.assign(static_cast<std::size_t>(b * sv * dv), 0.0);
      for (Index bi = 0; bi < b; ++bi)
        for (Index i = 0; i < sv; ++i) {
          std::vector<const double*> keys, vals;
          std::vector<double> mult;
          const Index f = i / hw;
          std::vector<double> count(static_cast<std::size_t>(ta), 0.0);
          if (plan.video.use_cross_latent) {
            if (full_span) {
              std::fill(count.begin(), count.end(), 1.0);
            } else {
              for (Index j : window(ta, g.t_v, f)) count[j] += 1.0;
            }
          }
          for (Index j = 0; j < ta; ++j) {
            keys.push_back(&kr[(bi * ta + j) * dv]);
            vals.push_back(&v[(bi * ta + j) * dv]);
            mult.push_back(count[j]);
          }
          for (Index n = 0; n < nb; ++n) {
            keys.push_back(&kb[n * dv]);
            vals.push_back(&vb[n * dv]);
            mult.push_back(1.0);
          }
          const Vec o = attend(&qr[(bi * sv + i) * dv], keys, vals, mult, dv, dv, dims.heads_v, &q[(bi * sv + i) * dv],
                               static_cast<std::size_t>(nb));
          for (Index e = 0; e < dv; ++e) {
            double s = 0;
            for (Index c = 0; c < dv; ++c) s += o[c] * wo[c * dv + e];
            r.delta_v[(bi * sv + i) * dv + e] = s;
          }
        }
    }
  }

  if (plan.audio.active) {
    const Vec q = matmul(x_a, W(p.wq_a), b * ta, da, da);
    const Vec k = matmul(x_v, W(p.wk_v), b * sv, dv, da);
    const Vec v = matmul(x_v, W(p.wv_v), b * sv, dv, da);
    const Index nb = plan.audio.use_lct && p.lct.video_bank.defined() ? p.lct.video_bank.dim(0) : 0;
    Vec kb, vb;
    if (nb > 0) {
      kb = matmul(W(p.lct.video_bank), W(p.wk_lv), nb, da, da);
      vb = matmul(W(p.lct.video_bank), W(p.wv_lv), nb, da, da);
    }
    const Index dh = da / dims.heads_a;
    Vec qr = q, kr = k;
    for (Index j = 0; j < b * ta; ++j)
      for (Index h = 0; h < dims.heads_a; ++h)
        rotate(&qr[j * da + h * dh], dh, static_cast<double>((j % ta) * g.t_v) / static_cast<double>(ta), base);
    for (Index i = 0; i < b * sv; ++i)
      for (Index h = 0; h < dims.heads_a; ++h)
        rotate(&kr[i * da + h * dh], dh, static_cast<double>((i % sv) / hw), base);
    if (plan.audio.use_cross_latent || nb > 0) {
      const Vec wo = W(p.wo_a);
      r.delta_a.assign(static_cast<std::size_t>(b * ta * da), 0.0);
      for (Index bi = 0; bi < b; ++bi)
        for (Index j = 0; j < ta; ++j) {
          std::vector<const double*> keys, vals;
          std::vector<double> mult;
          const Index f = frame_of_audio(ta, g.t_v, j);
          for (Index i = 0; i < sv; ++i) {
            keys.push_back(&kr[(bi * sv + i) * da]);
            vals.push_back(&v[(bi * sv + i) * da]);
            const bool visible = full_span || i / hw == f;
            mult.push_back(plan.audio.use_cross_latent && visible ? 1.0 : 0.0);
          }
          for (Index n = 0; n < nb; ++n) {
            keys.push_back(&kb[n * da]);
            vals.push_back(&vb[n * da]);
            mult.push_back(1.0);
          }
          const Vec o = attend(&qr[(bi * ta + j) * da], keys, vals, mult, da, da, dims.heads_a, &q[(bi * ta + j) * da],
                               static_cast<std::size_t>(nb));
          for (Index e = 0; e < da; ++e) {
            double s = 0;
            for (Index c = 0; c < da; ++c) s += o[c] * wo[c * da + e];
            r.delta_a[(bi * ta + j) * da + e] = s;
          }
        }
    }
  }
  return r;
}

inline ccl::Tensor<double> random_tensor(ccl::Shape s, std::mt19937_64& rng, double std = 1.0) {
  ccl::Tensor<double> t(std::move(s));
  std::normal_distribution<double> n(0.0, std);
  for (double& v : t.data()) v = n(rng);
  return t;
}

inline double max_abs(const Vec& a, const Vec& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace oracle
