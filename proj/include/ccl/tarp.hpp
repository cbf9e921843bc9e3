#pragma once

// Temporally aligned rotary embeddings and windowed partitioning of the
// cross-modal key/value sequences.

#include <span>
#include <utility>
#include <vector>

#include "ccl/autograd.hpp"

namespace ccl::tarp {

inline constexpr double kRopeBase = 10000.0;

struct GridMeta {
  Index t_a = 0;  // audio tokens
  Index t_v = 0;  // video latent frames
  Index h = 0;
  Index w = 0;

  Index frame_tokens() const { return h * w; }
  Index s_v() const { return t_v * h * w; }
  // Throws ContractError unless t_a >= t_v >= 1 and h, w >= 1.
  void validate() const;
  bool operator==(const GridMeta&) const = default;
};

struct WindowMap {
  Index t_a = 0;
  Index t_v = 0;
  Index c = 0;  // audio tokens per video frame
  Index s = 0;  // audio window length, 3c
  std::vector<Index> centers;               // t_v
  std::vector<Index> audio_window_indices;  // t_v x s, row-major
  std::vector<Index> video_frame_of_audio;  // t_a

  Index window(Index frame, Index k) const { return audio_window_indices[frame * s + k]; }
};

// Which latent tokens each cross-modal query group may see.
//   a2v: t_v rows of `a2v_len` audio token indices (video queries, audio keys)
//   v2a: t_a rows of `v2a_len` video token indices (audio queries, video keys)
struct CrossIndex {
  Index t_a = 0;
  Index t_v = 0;
  Index frame_tokens = 0;
  Index a2v_len = 0;
  std::vector<Index> a2v;
  Index v2a_len = 0;
  std::vector<Index> v2a;
};

// position[j] = j * t_v / t_a
std::vector<double> audio_rope_positions(const GridMeta& meta);
// Integer frame index of every video token (t, h, w order).
std::vector<double> video_frame_positions(const GridMeta& meta);

WindowMap build_window_map(const GridMeta& meta);

// Windowed index sets derived from a WindowMap.
CrossIndex tarp_index(const WindowMap& map, const GridMeta& meta);
// Every query group sees the whole opposing sequence.
CrossIndex full_span_index(const GridMeta& meta);

// One rotary axis: positions [len] with head_dim/2 pairs.
template <typename T>
RopeTable<T> rope_table(std::span<const double> positions, Index head_dim, double base = kRopeBase);

// Factorised rotary table: positions is len x axes (row-major); pairs[a]
// channel pairs are given to axis a, in order, and must sum to head_dim/2.
template <typename T>
RopeTable<T> rope_table_axes(std::span<const double> positions, Index axes, std::span<const Index> pairs,
                             Index head_dim, double base = kRopeBase);

// Standard split for video self-attention: two equal spatial sections of
// floor(head_dim/8) pairs each, the rest temporal.
std::vector<Index> video_axis_pairs(Index head_dim);

// x: [rows, len, d]; one head spanning all of d.
template <typename T>
Var<T> apply_rope(const Var<T>& x, std::span<const double> positions, double base = kRopeBase);

// k_a, v_a: [b, t_a, d] -> [(b*t_v), a2v_len, d]
template <typename T>
Var<T> gather_audio_windows(const Var<T>& x, const CrossIndex& index);
// k_v, v_v: [b, s_v, d] -> [(b*t_a), v2a_len, d]
template <typename T>
Var<T> gather_video_frames(const Var<T>& x, const CrossIndex& index);

template <typename T>
std::pair<Var<T>, Var<T>> partition_audio_kv(const Var<T>& k_a, const Var<T>& v_a, const WindowMap& map);
template <typename T>
std::pair<Var<T>, Var<T>> partition_video_kv(const Var<T>& k_v, const Var<T>& v_v, const WindowMap& map,
                                             const GridMeta& meta);

}  // namespace ccl::tarp
