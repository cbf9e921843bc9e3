#pragma once

// Cross-modal context attention: cross-dimensional projections, learnable
// context-token banks, windowed key/value assembly and multi-head attention
// in both directions.

#include <vector>

#include "ccl/autograd.hpp"
#include "ccl/dcr.hpp"
#include "ccl/tarp.hpp"

namespace ccl::cca {

// AudioToVideo: video queries over audio keys plus the audio bank L_a.
// VideoToAudio: audio queries over video keys plus the video bank L_v.
enum class Direction { AudioToVideo = 0, VideoToAudio = 1 };

const char* direction_name(Direction d);

// Head-averaged attention probabilities of one CCA call.
struct AttnMap {
  Index block = 0;
  Direction direction = Direction::AudioToVideo;
  Index rows = 0;
  Index q_len = 0;
  Index kv_len = 0;
  Index n_lct = 0;  // trailing kv columns that belong to the context bank
  std::vector<float> data;  // rows x q_len x kv_len

  // Per-query attention mass on the trailing n_lct columns (rows x q_len).
  std::vector<double> lct_mass() const;
};

struct AttnCapture {
  Index block = 0;
  std::vector<AttnMap> maps;
};

struct CCADims {
  Index d_a = 0;
  Index d_v = 0;
  Index heads_a = 4;  // audio-query direction, head dim d_a / heads_a
  Index heads_v = 4;  // video-query direction, head dim d_v / heads_v
  Index n_a = 8;      // audio-context bank size (used by video queries)
  Index n_v = 128;    // video-context bank size (used by audio queries)
};

template <typename T>
struct LearnableContextTokens {
  Var<T> audio_bank;  // L_a: n_a x d_v
  Var<T> video_bank;  // L_v: n_v x d_a
};

// All projections are bias-free and stored [in, out].
template <typename T>
struct CCAParams {
  Var<T> wq_a;   // d_a -> d_a
  Var<T> wk_a;   // d_a -> d_v
  Var<T> wv_a;   // d_a -> d_v
  Var<T> wq_v;   // d_v -> d_v
  Var<T> wk_v;   // d_v -> d_a
  Var<T> wv_v;   // d_v -> d_a
  Var<T> wk_la;  // d_v -> d_v, keys of L_a
  Var<T> wv_la;  // d_v -> d_v
  Var<T> wk_lv;  // d_a -> d_a, keys of L_v
  Var<T> wv_lv;  // d_a -> d_a
  Var<T> wo_a;   // d_a -> d_a, zero at init
  Var<T> wo_v;   // d_v -> d_v, zero at init
  LearnableContextTokens<T> lct;
};

template <typename T>
struct CrossQKV {
  Var<T> q_a, k_a, v_a;  // [b, t_a, d_a], [b, t_a, d_v], [b, t_a, d_v]
  Var<T> q_v, k_v, v_v;  // [b, s_v, d_v], [b, s_v, d_a], [b, s_v, d_a]
};

// Rotary tables for the temporal-only cross-modal embedding.
template <typename T>
struct CrossRope {
  RopeTable<T> q_v;  // video frame index, head dim d_v/heads_v
  RopeTable<T> k_a;  // rescaled audio position, head dim d_v/heads_v
  RopeTable<T> q_a;  // rescaled audio position, head dim d_a/heads_a
  RopeTable<T> k_v;  // video frame index, head dim d_a/heads_a
};

template <typename T>
CrossRope<T> make_cross_rope(const tarp::GridMeta& meta, const CCADims& dims, double base = tarp::kRopeBase);

template <typename T>
CrossQKV<T> project_cross_qkv(const Var<T>& x_a, const Var<T>& x_v, const CCAParams<T>& params);

// Concatenates latent keys/values (either may be undefined) with the bank
// projected through (wk, wv) and repeated over `rows`. Latent tokens come
// first, bank tokens last. Returns undefined Vars when both are absent.
template <typename T>
std::pair<Var<T>, Var<T>> assemble_context_kv(const Var<T>& k_latent, const Var<T>& v_latent, const Var<T>& bank,
                                              const Var<T>& wk, const Var<T>& wv, Index rows);

// softmax(q k^T / sqrt(d_head)) v per head, composed from primitive ops.
// q: [R, Lq, D], k: [R, Lk, D], v: [R, Lk, Dv]. When probs is non-null it
// receives the head-averaged attention [R, Lq, Lk]. Together with
// assemble_context_kv this is the unfused form of the fused attention op
// (single query).
template <typename T>
Var<T> scaled_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, Index heads,
                        std::vector<float>* probs = nullptr);

template <typename T>
struct CCAOutput {
  Var<T> delta_a;  // [b, t_a, d_a]; undefined when nothing was attended
  Var<T> delta_v;  // [b, s_v, d_v]
};

// One bidirectional CCA call on the (normalised) stream states. Sources are
// selected by `plan`; a reference stream's latents enter the other stream's
// attention detached. Latent queries and keys are rotated; bank keys are not,
// and they are scored against the unrotated queries so that query-bank logits
// do not depend on position. Maps are appended to `capture` when it is
// non-null.
template <typename T>
CCAOutput<T> cca_block_forward(const Var<T>& x_a, const Var<T>& x_v, const CCAParams<T>& params,
                               const CCADims& dims, const tarp::CrossIndex& index, const CrossRope<T>& rope,
                               const dcr::RoutingPlan& plan, AttnCapture* capture = nullptr);

}  // namespace ccl::cca
