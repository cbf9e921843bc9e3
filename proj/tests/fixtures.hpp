#pragma once

// Random parameter and config builders shared by the unit tests and the
// acceptance binary.

#include <random>

#include "ccl/cca.hpp"
#include "ccl/model.hpp"
#include "ccl/synthdata.hpp"
#include "oracle.hpp"

namespace fixtures {

using ccl::Index;
using ccl::Shape;

// Nonzero everywhere (the model init zeroes the output projections, which
// would hide most of the attention path).
inline ccl::cca::CCAParams<double> random_cca(const ccl::cca::CCADims& d, std::mt19937_64& rng, double std = 0.4) {
  auto P = [&](Shape s) { return ccl::Var<double>::parameter(oracle::random_tensor(std::move(s), rng, std)); };
  ccl::cca::CCAParams<double> p;
  p.wq_a = P({d.d_a, d.d_a});
  p.wk_a = P({d.d_a, d.d_v});
  p.wv_a = P({d.d_a, d.d_v});
  p.wq_v = P({d.d_v, d.d_v});
  p.wk_v = P({d.d_v, d.d_a});
  p.wv_v = P({d.d_v, d.d_a});
  p.wk_la = P({d.d_v, d.d_v});
  p.wv_la = P({d.d_v, d.d_v});
  p.wk_lv = P({d.d_a, d.d_a});
  p.wv_lv = P({d.d_a, d.d_a});
  p.wo_a = P({d.d_a, d.d_a});
  p.wo_v = P({d.d_v, d.d_v});
  if (d.n_a > 0) p.lct.audio_bank = P({d.n_a, d.d_v});
  if (d.n_v > 0) p.lct.video_bank = P({d.n_v, d.d_a});
  return p;
}

struct CcaCase {
  ccl::tarp::GridMeta grid;
  ccl::cca::CCADims dims;
  Index batch = 1;
};

// Random grid with t_v <= t_a (including non-divisible ratios and t_a == t_v),
// random head counts and bank sizes.
inline CcaCase random_case(std::mt19937_64& rng) {
  auto U = [&](Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); };
  CcaCase c;
  c.grid.t_v = U(1, 6);
  c.grid.t_a = c.grid.t_v + U(0, 13);
  c.grid.h = U(1, 3);
  c.grid.w = U(1, 3);
  c.dims.heads_a = U(1, 2);
  c.dims.heads_v = U(1, 3);
  c.dims.d_a = 2 * c.dims.heads_a * U(1, 3);
  c.dims.d_v = 2 * c.dims.heads_v * U(1, 3);
  c.dims.n_a = U(0, 4);
  c.dims.n_v = U(0, 6);
  c.batch = U(1, 2);
  return c;
}

// Small 64-bit model for gradient and routing checks.
inline ccl::model::ModelConfig tiny_config(ccl::model::Variant v = ccl::model::Variant::CCL) {
  ccl::model::ModelConfig c;
  c.audio = {.depth = 2, .dim = 8, .heads = 2, .ffn_mult = 2, .text_dim = 4, .n_lct = 3};
  c.video = {.depth = 2, .dim = 16, .heads = 2, .ffn_mult = 2, .text_dim = 4, .n_lct = 2};
  c.grid = {.t_a = 4, .t_v = 2, .h = 2, .w = 2};
  c.signal_channels = 2;
  c.n_classes = 2;
  c.text_tokens = 2;
  c.variant = v;
  return c;
}

// Replaces every parameter with Gaussian noise so that no path is hidden
// behind a zero-initialised projection.
template <typename T>
void randomise(ccl::model::ModelParams<T>& p, std::uint64_t seed, double std = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, std);
  for (auto& e : p.registry) {
    T* w = e.var.mutable_value().ptr();
    for (Index i = 0; i < e.var.numel(); ++i) w[i] = static_cast<T>(n(rng));
  }
}

inline ccl::synth::DatasetSpec data_for(const ccl::model::ModelConfig& c, std::uint64_t seed = 0) {
  ccl::synth::DatasetSpec d;
  d.grid = c.grid;
  d.channels = c.signal_channels;
  d.n_classes = c.n_classes;
  d.seed = seed;
  return d;
}

// Joint-style inputs with a shared random timestep per sample.
inline ccl::model::ForwardInputs<double> random_inputs(const ccl::model::ModelConfig& c, Index b, std::mt19937_64& rng) {
  ccl::model::ForwardInputs<double> in;
  in.audio = oracle::random_tensor({b, c.grid.t_a, c.signal_channels}, rng);
  in.video = oracle::random_tensor({b, c.grid.s_v(), c.signal_channels}, rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Index i = 0; i < b; ++i) {
    const double t = u(rng);
    in.t_audio.push_back(t);
    in.t_video.push_back(t);
    in.text_audio.push_back(i % c.n_classes);
    in.text_video.push_back((i + 1) % c.n_classes);
  }
  return in;
}

// The block stack with the cross-modal term deleted.
inline ccl::Tensor<double> without_cross(const ccl::model::DualStreamModel<double>& m, ccl::model::StreamId s,
                                         const ccl::model::ForwardInputs<double>& in) {
  const bool audio = s == ccl::model::StreamId::Audio;
  ccl::Var<double> h = m.embed(s, audio ? in.audio : in.video, audio ? in.t_audio : in.t_video, ccl::Tensor<double>());
  const ccl::Var<double> text = m.text_tokens(s, audio ? in.text_audio : in.text_video);
  for (Index b = 0; b < m.config().audio.depth; ++b) h = m.post_cross(s, b, m.pre_cross(s, b, h, text));
  return m.head(s, h).value();
}

}  // namespace fixtures
