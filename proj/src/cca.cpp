#include "ccl/cca.hpp"

#include <cmath>
#include <string>

namespace ccl::cca {

const char* direction_name(Direction d) { return d == Direction::AudioToVideo ? "a2v" : "v2a"; }

std::vector<double> AttnMap::lct_mass() const {
  std::vector<double> mass(static_cast<std::size_t>(rows * q_len), 0.0);
  for (Index r = 0; r < rows * q_len; ++r) {
    double s = 0;
    for (Index j = kv_len - n_lct; j < kv_len; ++j) s += data[static_cast<std::size_t>(r * kv_len + j)];
    mass[static_cast<std::size_t>(r)] = s;
  }
  return mass;
}

template <typename T>
CrossRope<T> make_cross_rope(const tarp::GridMeta& meta, const CCADims& dims, double base) {
  const auto audio_pos = tarp::audio_rope_positions(meta);
  const auto video_pos = tarp::video_frame_positions(meta);
  const Index dh_v = dims.d_v / dims.heads_v;
  const Index dh_a = dims.d_a / dims.heads_a;
  CrossRope<T> r;
  r.q_v = tarp::rope_table<T>(video_pos, dh_v, base);
  r.k_a = tarp::rope_table<T>(audio_pos, dh_v, base);
  r.q_a = tarp::rope_table<T>(audio_pos, dh_a, base);
  r.k_v = tarp::rope_table<T>(video_pos, dh_a, base);
  return r;
}

template <typename T>
CrossQKV<T> project_cross_qkv(const Var<T>& x_a, const Var<T>& x_v, const CCAParams<T>& p) {
  CrossQKV<T> out;
  if (x_a.defined()) {
    out.q_a = matmul(x_a, p.wq_a);
    out.k_a = matmul(x_a, p.wk_a);
    out.v_a = matmul(x_a, p.wv_a);
  }
  if (x_v.defined()) {
    out.q_v = matmul(x_v, p.wq_v);
    out.k_v = matmul(x_v, p.wk_v);
    out.v_v = matmul(x_v, p.wv_v);
  }
  return out;
}

template <typename T>
std::pair<Var<T>, Var<T>> assemble_context_kv(const Var<T>& k_latent, const Var<T>& v_latent, const Var<T>& bank,
                                              const Var<T>& wk, const Var<T>& wv, Index rows) {
  const bool has_latent = k_latent.defined();
  const bool has_bank = bank.defined() && bank.dim(0) > 0;
  if (has_latent && k_latent.dim(0) != rows) {
    throw DimensionError("assemble_context_kv: latent keys have " + std::to_string(k_latent.dim(0)) +
                         " rows, expected " + std::to_string(rows));
  }
  if (!has_bank) return {k_latent, v_latent};

  const Index n = bank.dim(0);
  const Var<T> kb = matmul(bank, wk);  // [n, d]
  const Var<T> vb = matmul(bank, wv);
  std::vector<Index> rep(static_cast<std::size_t>(rows * n));
  for (Index r = 0; r < rows; ++r)
    for (Index i = 0; i < n; ++i) rep[static_cast<std::size_t>(r * n + i)] = i;
  const Var<T> kr = gather_rows(kb, std::span<const Index>(rep), Shape{rows, n, kb.dim(1)});
  const Var<T> vr = gather_rows(vb, std::span<const Index>(rep), Shape{rows, n, vb.dim(1)});
  if (!has_latent) return {kr, vr};
  return {concat_seq(k_latent, kr), concat_seq(v_latent, vr)};
}

template <typename T>
Var<T> scaled_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, Index heads, std::vector<float>* probs) {
  if (q.value().rank() != 3 || k.value().rank() != 3 || v.value().rank() != 3 || q.dim(0) != k.dim(0) ||
      k.dim(0) != v.dim(0) || k.dim(1) != v.dim(1) || q.dim(2) != k.dim(2)) {
    throw DimensionError("scaled_attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                         shape_str(v.shape()));
  }
  if (heads < 1 || q.dim(2) % heads != 0 || v.dim(2) % heads != 0) {
    throw ContractError("scaled_attention: width " + std::to_string(q.dim(2)) + " not divisible into " +
                        std::to_string(heads) + " heads");
  }
  const Index dh = q.dim(2) / heads;
  const Var<T> qh = split_heads(q, heads);
  const Var<T> kh = split_heads(k, heads);
  const Var<T> vh = split_heads(v, heads);
  const Var<T> logits = scale(matmul(qh, kh, /*trans_b=*/true), T(1) / std::sqrt(static_cast<T>(dh)));
  const Var<T> p = softmax_lastdim(logits);
  if (probs != nullptr) {
    const Index rows = q.dim(0), lq = q.dim(1), lk = k.dim(1);
    probs->assign(static_cast<std::size_t>(rows * lq * lk), 0.0F);
    const T* pv = p.value().ptr();
    for (Index r = 0; r < rows; ++r)
      for (Index h = 0; h < heads; ++h)
        for (Index i = 0; i < lq * lk; ++i)
          (*probs)[static_cast<std::size_t>(r * lq * lk + i)] +=
              static_cast<float>(pv[(r * heads + h) * lq * lk + i] / static_cast<T>(heads));
  }
  return merge_heads(matmul(p, vh), heads);
}

template <typename T>
CCAOutput<T> cca_block_forward(const Var<T>& x_a, const Var<T>& x_v, const CCAParams<T>& p, const CCADims& dims,
                               const tarp::CrossIndex& ix, const CrossRope<T>& rope, const dcr::RoutingPlan& plan,
                               AttnCapture* capture) {
  CCAOutput<T> out;
  const Index hw = ix.frame_tokens;

  if (plan.video.active) {
    if (!x_v.defined()) throw ContractError("cca: video stream active but its state is missing");
    const Index b = x_v.dim(0);
    const Index rows = b * ix.t_v;
    const Var<T> q_plain = matmul(x_v, p.wq_v);
    const Var<T> q = reshape(apply_rope(q_plain, rope.q_v), Shape{rows, hw, dims.d_v});
    Var<T> k_lat, v_lat;
    if (plan.video.use_cross_latent) {
      if (!x_a.defined()) throw ContractError("cca: video routing needs audio latents that are missing");
      const Var<T> src = plan.audio.is_reference ? detach(x_a) : x_a;
      k_lat = tarp::gather_audio_windows(apply_rope(matmul(src, p.wk_a), rope.k_a), ix);
      v_lat = tarp::gather_audio_windows(matmul(src, p.wv_a), ix);
    }
    const bool bank = plan.video.use_lct && p.lct.audio_bank.defined() && p.lct.audio_bank.dim(0) > 0;
    const Var<T> kb = bank ? matmul(p.lct.audio_bank, p.wk_la) : Var<T>();
    const Var<T> vb = bank ? matmul(p.lct.audio_bank, p.wv_la) : Var<T>();
    if (k_lat.defined() || bank) {
      AttnMap map;
      const Var<T> qb = bank ? reshape(q_plain, Shape{rows, hw, dims.d_v}) : Var<T>();
      const Var<T> o = attention(q, k_lat, v_lat, kb, vb, dims.heads_v, capture ? &map.data : nullptr, qb);
      out.delta_v = matmul(reshape(o, Shape{b, ix.t_v * hw, dims.d_v}), p.wo_v);
      if (capture) {
        map.block = capture->block;
        map.direction = Direction::AudioToVideo;
        map.rows = rows;
        map.q_len = hw;
        map.n_lct = bank ? kb.dim(0) : 0;
        map.kv_len = (k_lat.defined() ? k_lat.dim(1) : 0) + map.n_lct;
        capture->maps.push_back(std::move(map));
      }
    }
  }

  if (plan.audio.active) {
    if (!x_a.defined()) throw ContractError("cca: audio stream active but its state is missing");
    const Index b = x_a.dim(0);
    const Index rows = b * ix.t_a;
    const Var<T> q_plain = matmul(x_a, p.wq_a);
    const Var<T> q = reshape(apply_rope(q_plain, rope.q_a), Shape{rows, 1, dims.d_a});
    Var<T> k_lat, v_lat;
    if (plan.audio.use_cross_latent) {
      if (!x_v.defined()) throw ContractError("cca: audio routing needs video latents that are missing");
      const Var<T> src = plan.video.is_reference ? detach(x_v) : x_v;
      k_lat = tarp::gather_video_frames(apply_rope(matmul(src, p.wk_v), rope.k_v), ix);
      v_lat = tarp::gather_video_frames(matmul(src, p.wv_v), ix);
    }
    const bool bank = plan.audio.use_lct && p.lct.video_bank.defined() && p.lct.video_bank.dim(0) > 0;
    const Var<T> kb = bank ? matmul(p.lct.video_bank, p.wk_lv) : Var<T>();
    const Var<T> vb = bank ? matmul(p.lct.video_bank, p.wv_lv) : Var<T>();
    if (k_lat.defined() || bank) {
      AttnMap map;
      const Var<T> qb = bank ? reshape(q_plain, Shape{rows, 1, dims.d_a}) : Var<T>();
      const Var<T> o = attention(q, k_lat, v_lat, kb, vb, dims.heads_a, capture ? &map.data : nullptr, qb);
      out.delta_a = matmul(reshape(o, Shape{b, ix.t_a, dims.d_a}), p.wo_a);
      if (capture) {
        map.block = capture->block;
        map.direction = Direction::VideoToAudio;
        map.rows = rows;
        map.q_len = 1;
        map.n_lct = bank ? kb.dim(0) : 0;
        map.kv_len = (k_lat.defined() ? k_lat.dim(1) : 0) + map.n_lct;
        capture->maps.push_back(std::move(map));
      }
    }
  }
  return out;
}

#define CCL_INSTANTIATE(T)                                                                                      \
  template CrossRope<T> make_cross_rope<T>(const tarp::GridMeta&, const CCADims&, double);                     \
  template CrossQKV<T> project_cross_qkv(const Var<T>&, const Var<T>&, const CCAParams<T>&);                   \
  template std::pair<Var<T>, Var<T>> assemble_context_kv(const Var<T>&, const Var<T>&, const Var<T>&,          \
                                                         const Var<T>&, const Var<T>&, Index);                 \
  template Var<T> scaled_attention(const Var<T>&, const Var<T>&, const Var<T>&, Index, std::vector<float>*);   \
  template CCAOutput<T> cca_block_forward(const Var<T>&, const Var<T>&, const CCAParams<T>&, const CCADims&,   \
                                          const tarp::CrossIndex&, const CrossRope<T>&, const dcr::RoutingPlan&, \
                                          AttnCapture*);

CCL_INSTANTIATE(float)
CCL_INSTANTIATE(double)

#undef CCL_INSTANTIATE

}  // namespace ccl::cca
