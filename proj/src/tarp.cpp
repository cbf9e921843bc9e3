#include "ccl/tarp.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ccl::tarp {

void GridMeta::validate() const {
  if (t_v < 1 || t_a < t_v || h < 1 || w < 1) {
    throw ContractError("invalid grid: t_a=" + std::to_string(t_a) + " t_v=" + std::to_string(t_v) +
                        " h=" + std::to_string(h) + " w=" + std::to_string(w) + " (need t_a >= t_v >= 1, h, w >= 1)");
  }
}

std::vector<double> audio_rope_positions(const GridMeta& meta) {
  if (meta.t_a == 0) throw ContractError("audio_rope_positions: t_a == 0");
  meta.validate();
  std::vector<double> pos(static_cast<std::size_t>(meta.t_a));
  for (Index j = 0; j < meta.t_a; ++j) {
    pos[static_cast<std::size_t>(j)] = static_cast<double>(j * meta.t_v) / static_cast<double>(meta.t_a);
  }
  return pos;
}

std::vector<double> video_frame_positions(const GridMeta& meta) {
  meta.validate();
  std::vector<double> pos(static_cast<std::size_t>(meta.s_v()));
  for (Index i = 0; i < meta.s_v(); ++i) {
    pos[static_cast<std::size_t>(i)] = static_cast<double>(i / meta.frame_tokens());
  }
  return pos;
}

WindowMap build_window_map(const GridMeta& meta) {
  meta.validate();
  WindowMap map;
  map.t_a = meta.t_a;
  map.t_v = meta.t_v;
  map.c = meta.t_a / meta.t_v;
  map.s = 3 * map.c;
  map.centers.resize(static_cast<std::size_t>(meta.t_v));
  map.audio_window_indices.resize(static_cast<std::size_t>(meta.t_v * map.s));
  for (Index i = 0; i < meta.t_v; ++i) {
    // floor(c/2 + c*i) with integer c
    const Index m = map.c * i + map.c / 2;
    map.centers[static_cast<std::size_t>(i)] = m;
    const Index start = m - map.s / 2;
    for (Index k = 0; k < map.s; ++k) {
      map.audio_window_indices[static_cast<std::size_t>(i * map.s + k)] =
          std::clamp<Index>(start + k, 0, meta.t_a - 1);
    }
  }
  map.video_frame_of_audio.resize(static_cast<std::size_t>(meta.t_a));
  for (Index j = 0; j < meta.t_a; ++j) {
    map.video_frame_of_audio[static_cast<std::size_t>(j)] = std::min((j * meta.t_v) / meta.t_a, meta.t_v - 1);
  }
  return map;
}

CrossIndex tarp_index(const WindowMap& map, const GridMeta& meta) {
  if (map.t_a != meta.t_a || map.t_v != meta.t_v) throw DimensionError("tarp_index: window map built for another grid");
  CrossIndex ix;
  ix.t_a = meta.t_a;
  ix.t_v = meta.t_v;
  ix.frame_tokens = meta.frame_tokens();
  ix.a2v_len = map.s;
  ix.a2v = map.audio_window_indices;
  ix.v2a_len = meta.frame_tokens();
  ix.v2a.resize(static_cast<std::size_t>(meta.t_a * ix.v2a_len));
  for (Index j = 0; j < meta.t_a; ++j) {
    const Index f = map.video_frame_of_audio[static_cast<std::size_t>(j)];
    for (Index p = 0; p < ix.v2a_len; ++p) ix.v2a[static_cast<std::size_t>(j * ix.v2a_len + p)] = f * ix.v2a_len + p;
  }
  return ix;
}

CrossIndex full_span_index(const GridMeta& meta) {
  meta.validate();
  CrossIndex ix;
  ix.t_a = meta.t_a;
  ix.t_v = meta.t_v;
  ix.frame_tokens = meta.frame_tokens();
  ix.a2v_len = meta.t_a;
  ix.a2v.resize(static_cast<std::size_t>(meta.t_v * meta.t_a));
  for (Index i = 0; i < meta.t_v; ++i)
    for (Index j = 0; j < meta.t_a; ++j) ix.a2v[static_cast<std::size_t>(i * meta.t_a + j)] = j;
  ix.v2a_len = meta.s_v();
  ix.v2a.resize(static_cast<std::size_t>(meta.t_a * meta.s_v()));
  for (Index j = 0; j < meta.t_a; ++j)
    for (Index p = 0; p < meta.s_v(); ++p) ix.v2a[static_cast<std::size_t>(j * meta.s_v() + p)] = p;
  return ix;
}

template <typename T>
RopeTable<T> rope_table_axes(std::span<const double> positions, Index axes, std::span<const Index> pairs,
                             Index head_dim, double base) {
  if (head_dim < 2 || head_dim % 2 != 0) {
    throw ContractError("rotary embedding needs an even head dimension, got " + std::to_string(head_dim));
  }
  if (axes < 1 || static_cast<Index>(pairs.size()) != axes || positions.size() % static_cast<std::size_t>(axes) != 0) {
    throw ContractError("rope_table_axes: inconsistent axis description");
  }
  Index total = 0;
  for (Index p : pairs) total += p;
  if (total != head_dim / 2) {
    throw ContractError("rope_table_axes: axis pairs sum to " + std::to_string(total) + ", expected " +
                        std::to_string(head_dim / 2));
  }
  RopeTable<T> t;
  t.len = static_cast<Index>(positions.size()) / axes;
  t.head_dim = head_dim;
  const Index half = head_dim / 2;
  t.angle.resize(static_cast<std::size_t>(t.len * half));
  for (Index l = 0; l < t.len; ++l) {
    Index slot = 0;
    for (Index a = 0; a < axes; ++a) {
      const Index np = pairs[static_cast<std::size_t>(a)];
      const double pos = positions[static_cast<std::size_t>(l * axes + a)];
      for (Index k = 0; k < np; ++k, ++slot) {
        const double freq = std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(2 * np));
        t.angle[static_cast<std::size_t>(l * half + slot)] = pos * freq;
      }
    }
  }
  t.cos.resize(t.angle.size());
  t.sin.resize(t.angle.size());
  for (std::size_t i = 0; i < t.angle.size(); ++i) {
    t.cos[i] = static_cast<T>(std::cos(t.angle[i]));
    t.sin[i] = static_cast<T>(std::sin(t.angle[i]));
  }
  return t;
}

template <typename T>
RopeTable<T> rope_table(std::span<const double> positions, Index head_dim, double base) {
  const Index pairs[1] = {head_dim / 2};
  if (head_dim % 2 != 0) {
    throw ContractError("rotary embedding needs an even head dimension, got " + std::to_string(head_dim));
  }
  return rope_table_axes<T>(positions, 1, pairs, head_dim, base);
}

std::vector<Index> video_axis_pairs(Index head_dim) {
  const Index half = head_dim / 2;
  const Index spatial = half / 4;
  return {half - 2 * spatial, spatial, spatial};
}

template <typename T>
Var<T> apply_rope(const Var<T>& x, std::span<const double> positions, double base) {
  if (x.value().rank() != 3) throw DimensionError("apply_rope: expected [rows, len, d], got " + shape_str(x.shape()));
  if (x.dim(2) % 2 != 0) throw ContractError("apply_rope: odd channel count " + std::to_string(x.dim(2)));
  if (static_cast<Index>(positions.size()) != x.dim(1)) {
    throw DimensionError("apply_rope: " + std::to_string(positions.size()) + " positions for length " +
                         std::to_string(x.dim(1)));
  }
  return ccl::apply_rope(x, rope_table<T>(positions, x.dim(2), base));
}

template <typename T>
Var<T> gather_audio_windows(const Var<T>& x, const CrossIndex& ix) {
  if (x.value().rank() != 3 || x.dim(1) != ix.t_a) {
    throw DimensionError("gather_audio_windows: expected [b, " + std::to_string(ix.t_a) + ", d], got " +
                         shape_str(x.shape()));
  }
  const Index b = x.dim(0), d = x.dim(2);
  std::vector<Index> rows(static_cast<std::size_t>(b * ix.t_v * ix.a2v_len));
  std::size_t o = 0;
  for (Index bi = 0; bi < b; ++bi)
    for (Index i = 0; i < ix.t_v; ++i)
      for (Index k = 0; k < ix.a2v_len; ++k) rows[o++] = bi * ix.t_a + ix.a2v[static_cast<std::size_t>(i * ix.a2v_len + k)];
  return gather_rows(x, std::span<const Index>(rows), Shape{b * ix.t_v, ix.a2v_len, d});
}

template <typename T>
Var<T> gather_video_frames(const Var<T>& x, const CrossIndex& ix) {
  const Index s_v = ix.t_v * ix.frame_tokens;
  if (x.value().rank() != 3 || x.dim(1) != s_v) {
    throw DimensionError("gather_video_frames: expected [b, " + std::to_string(s_v) + ", d], got " +
                         shape_str(x.shape()));
  }
  const Index b = x.dim(0), d = x.dim(2);
  std::vector<Index> rows(static_cast<std::size_t>(b * ix.t_a * ix.v2a_len));
  std::size_t o = 0;
  for (Index bi = 0; bi < b; ++bi)
    for (Index j = 0; j < ix.t_a; ++j)
      for (Index p = 0; p < ix.v2a_len; ++p) rows[o++] = bi * s_v + ix.v2a[static_cast<std::size_t>(j * ix.v2a_len + p)];
  return gather_rows(x, std::span<const Index>(rows), Shape{b * ix.t_a, ix.v2a_len, d});
}

template <typename T>
std::pair<Var<T>, Var<T>> partition_audio_kv(const Var<T>& k_a, const Var<T>& v_a, const WindowMap& map) {
  if (k_a.shape() != v_a.shape()) {
    throw DimensionError("partition_audio_kv: keys " + shape_str(k_a.shape()) + " vs values " + shape_str(v_a.shape()));
  }
  CrossIndex ix;
  ix.t_a = map.t_a;
  ix.t_v = map.t_v;
  ix.a2v_len = map.s;
  ix.a2v = map.audio_window_indices;
  return {gather_audio_windows(k_a, ix), gather_audio_windows(v_a, ix)};
}

template <typename T>
std::pair<Var<T>, Var<T>> partition_video_kv(const Var<T>& k_v, const Var<T>& v_v, const WindowMap& map,
                                             const GridMeta& meta) {
  if (k_v.shape() != v_v.shape()) {
    throw DimensionError("partition_video_kv: keys " + shape_str(k_v.shape()) + " vs values " + shape_str(v_v.shape()));
  }
  const CrossIndex ix = tarp_index(map, meta);
  return {gather_video_frames(k_v, ix), gather_video_frames(v_v, ix)};
}

#define CCL_INSTANTIATE(T)                                                                               \
  template RopeTable<T> rope_table<T>(std::span<const double>, Index, double);                          \
  template RopeTable<T> rope_table_axes<T>(std::span<const double>, Index, std::span<const Index>, Index, \
                                           double);                                                     \
  template Var<T> apply_rope(const Var<T>&, std::span<const double>, double);                           \
  template Var<T> gather_audio_windows(const Var<T>&, const CrossIndex&);                               \
  template Var<T> gather_video_frames(const Var<T>&, const CrossIndex&);                                \
  template std::pair<Var<T>, Var<T>> partition_audio_kv(const Var<T>&, const Var<T>&, const WindowMap&); \
  template std::pair<Var<T>, Var<T>> partition_video_kv(const Var<T>&, const Var<T>&, const WindowMap&,   \
                                                        const GridMeta&);

CCL_INSTANTIATE(float)
CCL_INSTANTIATE(double)

#undef CCL_INSTANTIATE

}  // namespace ccl::tarp
