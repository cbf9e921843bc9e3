#include "ccl/model.hpp"

#include <cmath>
#include <random>

namespace ccl::model {

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Each parameter draws from its own stream keyed by (seed, name) so adding
// or removing parameters never shifts the values of the others.
template <typename T>
class Initializer {
 public:
  Initializer(ModelParams<T>& params, std::uint64_t seed) : params_(params), seed_(seed) {}

  Var<T> normal(const std::string& name, Shape shape, double std, StreamId stream, ParamGroup group) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(fnv1a(name)), static_cast<std::uint32_t>(fnv1a(name) >> 32)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> dist(0.0, 1.0);
    Tensor<T> t(std::move(shape));
    for (Index i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(std * dist(rng));
    return add(name, std::move(t), stream, group);
  }

  Var<T> zeros(const std::string& name, Shape shape, StreamId stream, ParamGroup group) {
    return add(name, Tensor<T>(std::move(shape)), stream, group);
  }

  Var<T> linear(const std::string& name, Index in, Index out, StreamId stream, ParamGroup group) {
    return normal(name, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)), stream, group);
  }

 private:
  Var<T> add(const std::string& name, Tensor<T> t, StreamId stream, ParamGroup group) {
    Var<T> v = Var<T>::parameter(std::move(t));
    params_.registry.push_back({name, v, stream, group});
    return v;
  }

  ModelParams<T>& params_;
  std::uint64_t seed_;
};

template <typename T>
void init_stream(Initializer<T>& init, StreamParams<T>& sp, const ModelConfig& cfg, StreamId id) {
  const StreamConfig& sc = id == StreamId::Audio ? cfg.audio : cfg.video;
  const std::string p = id == StreamId::Audio ? "audio." : "video.";
  const Index d = sc.dim;
  const Index in_ch =
      (id == StreamId::Video && cfg.image_conditioning) ? 2 * cfg.signal_channels : cfg.signal_channels;
  const auto base = ParamGroup::Base;
  sp.patch_in = init.linear(p + "patch_in", in_ch, d, id, base);
  sp.time_w1 = init.linear(p + "time_w1", d, d, id, base);
  sp.time_w2 = init.linear(p + "time_w2", d, d, id, base);
  sp.text_table = init.normal(p + "text_table", {(cfg.n_classes + 1) * cfg.text_tokens, sc.text_dim}, 1.0, id, base);
  sp.blocks.resize(static_cast<std::size_t>(sc.depth));
  for (Index b = 0; b < sc.depth; ++b) {
    const std::string bp = p + "block" + std::to_string(b) + ".";
    StreamBlock<T>& blk = sp.blocks[static_cast<std::size_t>(b)];
    blk.self_attn.wq = init.linear(bp + "sa.wq", d, d, id, base);
    blk.self_attn.wk = init.linear(bp + "sa.wk", d, d, id, base);
    blk.self_attn.wv = init.linear(bp + "sa.wv", d, d, id, base);
    blk.self_attn.wo = init.linear(bp + "sa.wo", d, d, id, base);
    blk.text_attn.wq = init.linear(bp + "ca.wq", d, d, id, base);
    blk.text_attn.wk = init.linear(bp + "ca.wk", sc.text_dim, d, id, base);
    blk.text_attn.wv = init.linear(bp + "ca.wv", sc.text_dim, d, id, base);
    blk.text_attn.wo = init.linear(bp + "ca.wo", d, d, id, base);
    blk.ffn_in = init.linear(bp + "ffn.in", d, sc.ffn_mult * d, id, base);
    blk.ffn_out = init.linear(bp + "ffn.out", sc.ffn_mult * d, d, id, base);
  }
  sp.patch_out = init.linear(p + "patch_out", d, cfg.signal_channels, id, base);
}

template <typename T>
Var<T> attention_layer(const AttnWeights<T>& w, const Var<T>& x, const Var<T>& ctx, Index heads,
                       const RopeTable<T>* rope) {
  Var<T> q = matmul(x, w.wq);
  Var<T> k = matmul(ctx, w.wk);
  const Var<T> v = matmul(ctx, w.wv);
  if (rope != nullptr) {
    q = apply_rope(q, *rope);
    k = apply_rope(k, *rope);
  }
  return matmul(attention(q, k, v, Var<T>(), Var<T>(), heads), w.wo);
}

void check_batch(const char* what, std::size_t got, Index batch) {
  if (static_cast<Index>(got) != batch) {
    throw ContractError(std::string("forward: ") + what + " has " + std::to_string(got) + " entries for batch " +
                        std::to_string(batch));
  }
}

}  // namespace

const char* variant_name(Variant v) { return v == Variant::CCL ? "ccl" : "gated"; }

std::optional<Variant> parse_variant(const std::string& s) {
  if (s == "ccl") return Variant::CCL;
  if (s == "gated") return Variant::Gated;
  return std::nullopt;
}

void ModelConfig::validate() const {
  grid.validate();
  if (audio.depth != video.depth || audio.depth < 1) {
    throw ContractError("audio and video streams must share the same positive depth");
  }
  for (const StreamConfig* s : {&audio, &video}) {
    if (s->dim < 2 || s->heads < 1 || s->dim % s->heads != 0 || (s->dim / s->heads) % 2 != 0) {
      throw ContractError("stream dim " + std::to_string(s->dim) + " must split into " + std::to_string(s->heads) +
                          " heads of even width");
    }
    if (s->ffn_mult < 1 || s->text_dim < 1 || s->n_lct < 0) throw ContractError("invalid stream config");
  }
  if (signal_channels < 1 || n_classes < 1 || text_tokens < 1) throw ContractError("invalid signal/text config");
}

cca::CCADims ModelConfig::cca_dims() const {
  cca::CCADims d;
  d.d_a = audio.dim;
  d.d_v = video.dim;
  d.heads_a = audio.heads;
  d.heads_v = video.heads;
  const bool banks = variant == Variant::CCL;
  d.n_a = banks ? video.n_lct : 0;
  d.n_v = banks ? audio.n_lct : 0;
  return d;
}

template <typename T>
Index ModelParams<T>::parameter_count() const {
  Index n = 0;
  for (const auto& e : registry) n += e.var.numel();
  return n;
}

template <typename T>
const ParamEntry<T>* ModelParams<T>::find(const std::string& name) const {
  for (const auto& e : registry) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

Index expected_parameter_count(const ModelConfig& c) {
  auto stream = [&](const StreamConfig& s, Index in_ch) {
    const Index d = s.dim;
    Index n = in_ch * d + d * c.signal_channels + 2 * d * d + (c.n_classes + 1) * c.text_tokens * s.text_dim;
    n += s.depth * (4 * d * d + 2 * d * d + 2 * s.text_dim * d + 2 * s.ffn_mult * d * d);
    return n;
  };
  const Index da = c.audio.dim, dv = c.video.dim;
  Index n = stream(c.audio, c.signal_channels) +
            stream(c.video, c.image_conditioning ? 2 * c.signal_channels : c.signal_channels);
  Index cross = 2 * da * da + 2 * dv * dv + 4 * da * dv;
  const cca::CCADims dims = c.cca_dims();
  if (dims.n_a > 0) cross += dims.n_a * dv + 2 * dv * dv;
  if (dims.n_v > 0) cross += dims.n_v * da + 2 * da * da;
  return n + c.audio.depth * cross;
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams<T> p;
  p.config = config;
  Initializer<T> init(p, seed);
  init_stream(init, p.audio, config, StreamId::Audio);
  init_stream(init, p.video, config, StreamId::Video);
  const cca::CCADims dims = config.cca_dims();
  const Index da = dims.d_a, dv = dims.d_v;
  const auto cross = ParamGroup::Cross;
  const auto A = StreamId::Audio;
  const auto V = StreamId::Video;
  p.cca.resize(static_cast<std::size_t>(config.audio.depth));
  for (Index b = 0; b < config.audio.depth; ++b) {
    const std::string cp = "cca" + std::to_string(b) + ".";
    cca::CCAParams<T>& c = p.cca[static_cast<std::size_t>(b)];
    // Weights are owned by the stream whose residual they feed.
    c.wq_a = init.linear(cp + "wq_a", da, da, A, cross);
    c.wk_v = init.linear(cp + "wk_v", dv, da, A, cross);
    c.wv_v = init.linear(cp + "wv_v", dv, da, A, cross);
    c.wo_a = init.zeros(cp + "wo_a", {da, da}, A, cross);
    c.wq_v = init.linear(cp + "wq_v", dv, dv, V, cross);
    c.wk_a = init.linear(cp + "wk_a", da, dv, V, cross);
    c.wv_a = init.linear(cp + "wv_a", da, dv, V, cross);
    c.wo_v = init.zeros(cp + "wo_v", {dv, dv}, V, cross);
    if (dims.n_v > 0) {
      c.lct.video_bank = init.normal(cp + "lct.video_bank", {dims.n_v, da}, 0.02, A, cross);
      c.wk_lv = init.linear(cp + "wk_lv", da, da, A, cross);
      c.wv_lv = init.linear(cp + "wv_lv", da, da, A, cross);
    }
    if (dims.n_a > 0) {
      c.lct.audio_bank = init.normal(cp + "lct.audio_bank", {dims.n_a, dv}, 0.02, V, cross);
      c.wk_la = init.linear(cp + "wk_la", dv, dv, V, cross);
      c.wv_la = init.linear(cp + "wv_la", dv, dv, V, cross);
    }
  }
  return p;
}

template <typename T>
Tensor<T> timestep_embedding(const std::vector<double>& t, Index dim) {
  const Index b = static_cast<Index>(t.size());
  const Index half = dim / 2;
  Tensor<T> out({b, dim});
  for (Index i = 0; i < b; ++i) {
    const double s = 1000.0 * t[static_cast<std::size_t>(i)];
    for (Index j = 0; j < half; ++j) {
      const double f = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(half));
      out[i * dim + j] = static_cast<T>(std::cos(s * f));
      out[i * dim + half + j] = static_cast<T>(std::sin(s * f));
    }
  }
  return out;
}

template <typename T>
ModelTables<T> make_tables(const ModelConfig& c) {
  c.validate();
  ModelTables<T> tb;
  tb.cross = c.window == WindowMode::Tarp ? tarp::tarp_index(tarp::build_window_map(c.grid), c.grid)
                                          : tarp::full_span_index(c.grid);
  tb.cross_rope = cca::make_cross_rope<T>(c.grid, c.cca_dims(), c.rope_base);

  const Index dh_v = c.video.dim / c.video.heads;
  std::vector<double> vpos;
  vpos.reserve(static_cast<std::size_t>(3 * c.grid.s_v()));
  for (Index t = 0; t < c.grid.t_v; ++t)
    for (Index y = 0; y < c.grid.h; ++y)
      for (Index x = 0; x < c.grid.w; ++x) {
        vpos.push_back(static_cast<double>(t));
        vpos.push_back(static_cast<double>(y));
        vpos.push_back(static_cast<double>(x));
      }
  const auto pairs = tarp::video_axis_pairs(dh_v);
  tb.video_self_rope = tarp::rope_table_axes<T>(vpos, 3, pairs, dh_v, c.rope_base);

  std::vector<double> apos(static_cast<std::size_t>(c.grid.t_a));
  for (Index j = 0; j < c.grid.t_a; ++j) apos[static_cast<std::size_t>(j)] = static_cast<double>(j);
  tb.audio_self_rope = tarp::rope_table<T>(apos, c.audio.dim / c.audio.heads, c.rope_base);
  return tb;
}

template <typename T>
DualStreamModel<T>::DualStreamModel(ModelParams<T> params)
    : params_(std::move(params)), tables_(make_tables<T>(params_.config)) {}

template <typename T>
Var<T> DualStreamModel<T>::embed(StreamId s, const Tensor<T>& x, const std::vector<double>& t,
                                 const Tensor<T>& first_frame) const {
  const ModelConfig& c = params_.config;
  const StreamParams<T>& sp = s == StreamId::Audio ? params_.audio : params_.video;
  const Index dim = s == StreamId::Audio ? c.audio.dim : c.video.dim;
  const Index tokens = s == StreamId::Audio ? c.grid.t_a : c.grid.s_v();
  if (x.rank() != 3 || x.dim(1) != tokens || x.dim(2) != c.signal_channels) {
    throw DimensionError(std::string("forward: ") + (s == StreamId::Audio ? "audio" : "video") + " input " +
                         shape_str(x.shape()) + " does not match [b, " + std::to_string(tokens) + ", " +
                         std::to_string(c.signal_channels) + "]");
  }
  const Index b = x.dim(0);
  check_batch("timesteps", t.size(), b);
  Tensor<T> input = x;
  if (s == StreamId::Video && c.image_conditioning) {
    const Index ch = c.signal_channels, hw = c.grid.frame_tokens();
    Tensor<T> cat({b, tokens, 2 * ch});
    for (Index bi = 0; bi < b; ++bi)
      for (Index i = 0; i < tokens; ++i)
        for (Index k = 0; k < ch; ++k) {
          cat[(bi * tokens + i) * 2 * ch + k] = x[(bi * tokens + i) * ch + k];
          cat[(bi * tokens + i) * 2 * ch + ch + k] =
              first_frame.numel() > 0 ? first_frame[(bi * hw + i % hw) * ch + k] : T(0);
        }
    input = cat;
  }
  const Var<T> h = matmul(Var<T>::constant(input), sp.patch_in);
  const Var<T> temb = Var<T>::constant(timestep_embedding<T>(t, dim));
  const Var<T> tvec = matmul(silu(matmul(temb, sp.time_w1)), sp.time_w2);
  return add_per_batch(h, tvec);
}

template <typename T>
Var<T> DualStreamModel<T>::text_tokens(StreamId s, const std::vector<Index>& ids) const {
  const ModelConfig& c = params_.config;
  const StreamParams<T>& sp = s == StreamId::Audio ? params_.audio : params_.video;
  std::vector<Index> rows;
  rows.reserve(ids.size() * static_cast<std::size_t>(c.text_tokens));
  for (Index id : ids) {
    if (id < 0 || id > c.n_classes) throw ContractError("text id " + std::to_string(id) + " out of range");
    for (Index k = 0; k < c.text_tokens; ++k) rows.push_back(id * c.text_tokens + k);
  }
  return gather_rows(sp.text_table, std::span<const Index>(rows),
                     Shape{static_cast<Index>(ids.size()), c.text_tokens, sp.text_table.dim(1)});
}

template <typename T>
Var<T> DualStreamModel<T>::pre_cross(StreamId s, Index block, const Var<T>& h, const Var<T>& text) const {
  const bool audio = s == StreamId::Audio;
  const StreamBlock<T>& blk = (audio ? params_.audio : params_.video).blocks[static_cast<std::size_t>(block)];
  const Index heads = audio ? params_.config.audio.heads : params_.config.video.heads;
  const RopeTable<T>* rope = audio ? &tables_.audio_self_rope : &tables_.video_self_rope;
  const Var<T> n1 = layer_norm(h);
  Var<T> x = add(h, attention_layer(blk.self_attn, n1, n1, heads, rope));
  x = add(x, attention_layer(blk.text_attn, layer_norm(x), text, heads, static_cast<const RopeTable<T>*>(nullptr)));
  return x;
}

template <typename T>
Var<T> DualStreamModel<T>::post_cross(StreamId s, Index block, const Var<T>& h) const {
  const StreamBlock<T>& blk =
      (s == StreamId::Audio ? params_.audio : params_.video).blocks[static_cast<std::size_t>(block)];
  return add(h, matmul(gelu(matmul(layer_norm(h), blk.ffn_in)), blk.ffn_out));
}

template <typename T>
Var<T> DualStreamModel<T>::head(StreamId s, const Var<T>& h) const {
  const StreamParams<T>& sp = s == StreamId::Audio ? params_.audio : params_.video;
  return matmul(layer_norm(h), sp.patch_out);
}

template <typename T>
ForwardOutputs<T> DualStreamModel<T>::forward(const ForwardInputs<T>& in, const dcr::RoutingPlan& plan,
                                              cca::AttnCapture* capture) const {
  const ModelConfig& c = params_.config;
  const bool run_a = plan.audio.active;
  const bool run_v = plan.video.active;
  if (run_a && in.audio.numel() == 0) throw ContractError("forward: plan runs the audio stream but no audio given");
  if (run_v && in.video.numel() == 0) throw ContractError("forward: plan runs the video stream but no video given");
  if (plan.shared_timestep && run_a && run_v && in.t_audio != in.t_video) {
    throw ContractError("forward: joint generation requires synchronised audio and video timesteps");
  }
  auto check_reference = [](const dcr::StreamRoute& r, const std::vector<double>& t, const char* name) {
    if (!r.active || !r.is_reference) return;
    for (double v : t) {
      if (v != 0.0) throw ContractError(std::string("forward: reference ") + name + " stream must use timestep 0");
    }
  };
  check_reference(plan.audio, in.t_audio, "audio");
  check_reference(plan.video, in.t_video, "video");

  Var<T> ha, hv, text_a, text_v;
  if (run_a) {
    ha = embed(StreamId::Audio, in.audio, in.t_audio, Tensor<T>());
    check_batch("audio text ids", in.text_audio.size(), in.audio.dim(0));
    text_a = text_tokens(StreamId::Audio, in.text_audio);
  }
  if (run_v) {
    hv = embed(StreamId::Video, in.video, in.t_video, in.first_frame);
    check_batch("video text ids", in.text_video.size(), in.video.dim(0));
    text_v = text_tokens(StreamId::Video, in.text_video);
  }
  if (run_a && run_v && in.audio.dim(0) != in.video.dim(0)) {
    throw ContractError("forward: audio and video batch sizes differ");
  }
  const cca::CCADims dims = c.cca_dims();
  for (Index b = 0; b < c.audio.depth; ++b) {
    if (run_a) ha = pre_cross(StreamId::Audio, b, ha, text_a);
    if (run_v) hv = pre_cross(StreamId::Video, b, hv, text_v);
    if (capture) capture->block = b;
    const Var<T> na = run_a ? layer_norm(ha) : Var<T>();
    const Var<T> nv = run_v ? layer_norm(hv) : Var<T>();
    const cca::CCAOutput<T> d = cca::cca_block_forward(na, nv, params_.cca[static_cast<std::size_t>(b)], dims,
                                                       tables_.cross, tables_.cross_rope, plan, capture);
    if (d.delta_a.defined()) ha = add(ha, d.delta_a);
    if (d.delta_v.defined()) hv = add(hv, d.delta_v);
    if (run_a) ha = post_cross(StreamId::Audio, b, ha);
    if (run_v) hv = post_cross(StreamId::Video, b, hv);
  }
  ForwardOutputs<T> out;
  if (run_a) out.v_audio = head(StreamId::Audio, ha);
  if (run_v) out.v_video = head(StreamId::Video, hv);
  return out;
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template class DualStreamModel<float>;
template class DualStreamModel<double>;
template ModelParams<float> init_params<float>(const ModelConfig&, std::uint64_t);
template ModelParams<double> init_params<double>(const ModelConfig&, std::uint64_t);
template ModelTables<float> make_tables<float>(const ModelConfig&);
template ModelTables<double> make_tables<double>(const ModelConfig&);
template Tensor<float> timestep_embedding<float>(const std::vector<double>&, Index);
template Tensor<double> timestep_embedding<double>(const std::vector<double>&, Index);

}  // namespace ccl::model
