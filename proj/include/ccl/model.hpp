#pragma once

// Dual-stream transformer. Each block runs, per stream,
//   X += SA(X); X += CA(X, text); X += cross-modal term; X += FFN(X)
// with pre-norm sub-layers. The cross-modal term is the context attention
// (CCL variant) or plain cross attention switched by a binary gate (gated
// variant).

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ccl/autograd.hpp"
#include "ccl/cca.hpp"
#include "ccl/dcr.hpp"
#include "ccl/tarp.hpp"

namespace ccl::model {

enum class Variant { CCL, Gated };
enum class WindowMode { Tarp, FullSpan };

const char* variant_name(Variant v);
std::optional<Variant> parse_variant(const std::string& s);

struct StreamConfig {
  Index depth = 4;
  Index dim = 64;
  Index heads = 4;
  Index ffn_mult = 2;
  Index text_dim = 32;
  Index n_lct = 8;  // size of the context bank this stream's queries attend to
};

struct ModelConfig {
  StreamConfig audio{.depth = 4, .dim = 32, .heads = 4, .ffn_mult = 2, .text_dim = 32, .n_lct = 128};
  StreamConfig video{.depth = 4, .dim = 64, .heads = 4, .ffn_mult = 2, .text_dim = 32, .n_lct = 8};
  tarp::GridMeta grid{.t_a = 32, .t_v = 8, .h = 4, .w = 4};
  Index signal_channels = 4;
  Index n_classes = 4;
  Index text_tokens = 4;
  Variant variant = Variant::CCL;
  WindowMode window = WindowMode::Tarp;
  // Adds the clean first video frame as extra input channels.
  bool image_conditioning = false;
  double rope_base = tarp::kRopeBase;

  void validate() const;
  cca::CCADims cca_dims() const;
  Index null_text() const { return n_classes; }
};

enum class StreamId { Audio, Video };
enum class ParamGroup { Base, Cross };

template <typename T>
struct AttnWeights {
  Var<T> wq, wk, wv, wo;
};

template <typename T>
struct StreamBlock {
  AttnWeights<T> self_attn;
  AttnWeights<T> text_attn;
  Var<T> ffn_in;
  Var<T> ffn_out;
};

template <typename T>
struct StreamParams {
  Var<T> patch_in;    // c_sig (x2 with image conditioning) -> dim
  Var<T> patch_out;   // dim -> c_sig
  Var<T> time_w1;     // dim -> dim
  Var<T> time_w2;     // dim -> dim
  Var<T> text_table;  // (n_classes + 1) * text_tokens x text_dim; last class is the null text
  std::vector<StreamBlock<T>> blocks;
};

template <typename T>
struct ParamEntry {
  std::string name;
  Var<T> var;
  StreamId stream;
  ParamGroup group;
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  StreamParams<T> audio;
  StreamParams<T> video;
  std::vector<cca::CCAParams<T>> cca;
  // Every trainable tensor in a fixed order (checkpoint and optimizer order).
  std::vector<ParamEntry<T>> registry;

  Index parameter_count() const;
  const ParamEntry<T>* find(const std::string& name) const;
};

template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed);

// Closed-form parameter count for a config.
Index expected_parameter_count(const ModelConfig& config);

// Conditioning inputs for one forward pass. A stream is absent when its
// tensor is empty.
template <typename T>
struct ForwardInputs {
  Tensor<T> audio;  // [b, t_a, c_sig]
  Tensor<T> video;  // [b, s_v, c_sig] (t, h, w token order)
  std::vector<double> t_audio;
  std::vector<double> t_video;
  std::vector<Index> text_audio;  // class id per sample, null_text() for unconditional
  std::vector<Index> text_video;
  Tensor<T> first_frame;  // [b, h*w, c_sig]; used only with image conditioning
};

template <typename T>
struct ForwardOutputs {
  Var<T> v_audio;  // undefined when the audio stream is inactive
  Var<T> v_video;
};

// Precomputed index and rotary tables for a config.
template <typename T>
struct ModelTables {
  tarp::CrossIndex cross;
  cca::CrossRope<T> cross_rope;
  RopeTable<T> video_self_rope;
  RopeTable<T> audio_self_rope;
};

template <typename T>
ModelTables<T> make_tables(const ModelConfig& config);

template <typename T>
class DualStreamModel {
 public:
  explicit DualStreamModel(ModelParams<T> params);

  const ModelConfig& config() const { return params_.config; }
  ModelParams<T>& params() { return params_; }
  const ModelParams<T>& params() const { return params_; }
  const ModelTables<T>& tables() const { return tables_; }

  // Velocity prediction. Throws ContractError when inputs do not match the
  // plan (missing active stream, joint task with unsynchronised timesteps,
  // reference stream with nonzero timestep).
  ForwardOutputs<T> forward(const ForwardInputs<T>& in, const dcr::RoutingPlan& plan,
                            cca::AttnCapture* capture = nullptr) const;

  // Sub-layers, exposed for block-level tests.
  Var<T> embed(StreamId s, const Tensor<T>& x, const std::vector<double>& t, const Tensor<T>& first_frame) const;
  Var<T> text_tokens(StreamId s, const std::vector<Index>& ids) const;
  Var<T> pre_cross(StreamId s, Index block, const Var<T>& h, const Var<T>& text) const;
  Var<T> post_cross(StreamId s, Index block, const Var<T>& h) const;
  Var<T> head(StreamId s, const Var<T>& h) const;

 private:
  ModelParams<T> params_;
  ModelTables<T> tables_;
};

// Sinusoidal embedding of timesteps (scaled by 1000), [b, dim].
template <typename T>
Tensor<T> timestep_embedding(const std::vector<double>& t, Index dim);

}  // namespace ccl::model
