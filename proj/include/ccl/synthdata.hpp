#pragma once

// Synthetic paired audio/video data. Each class owns a blob quadrant in the
// video and a channel signature in the audio. Per-frame events brighten the
// blob and raise the audio amplitude on the aligned token span; everything
// else is a static texture plus independent noise.

#include <cstdint>
#include <vector>

#include "ccl/tarp.hpp"
#include "ccl/tensor.hpp"

namespace ccl::synth {

struct DatasetSpec {
  tarp::GridMeta grid{.t_a = 32, .t_v = 8, .h = 4, .w = 4};
  Index channels = 4;
  Index n_classes = 4;
  double event_rate = 0.4;
  double noise_std = 0.05;
  double amplitude = 1.0;  // event pulse height
  double contrast = 4.0;   // minimum fg/bg mean-power ratio the generator guarantees
  std::uint64_t seed = 0;

  // Throws ContractError on out-of-range fields or a grid with t_a % t_v != 0.
  void validate() const;
};

struct AVSample {
  Tensor<float> video;  // [t_v, h, w, c]
  Tensor<float> audio;  // [t_a, c]
  Index class_id = 0;
  std::vector<std::uint8_t> fg_video_mask;  // t_v * h * w, blob pixels
  std::vector<std::uint8_t> fg_audio_mask;  // t_a, event-active tokens
  std::vector<Index> event_frames;
};

AVSample generate_pair(const DatasetSpec& spec, std::uint64_t index);

// Blob quadrant (top-left corner) of a class, in pixels.
std::pair<Index, Index> blob_origin(const DatasetSpec& spec, Index class_id);

struct SyncScore {
  double value = 0.0;
  bool degenerate = false;  // one of the two series had zero variance
};

// Pearson correlation between the per-frame audio envelope and the
// brightness of the most time-varying quarter of the video pixels.
SyncScore sync_score(const Tensor<float>& audio, const Tensor<float>& video, const tarp::GridMeta& grid);

struct Batch {
  Tensor<float> audio;  // [b, t_a, c]
  Tensor<float> video;  // [b, t_v*h*w, c]
  std::vector<Index> class_ids;
  std::vector<AVSample> samples;
};

Batch make_batch(const std::vector<AVSample>& samples);

// Infinite seeded stream of batches. Batch k depends only on (stream seed,
// k), so any position can be reproduced without replaying the stream.
class DatasetIter {
 public:
  DatasetIter(DatasetSpec spec, Index batch, std::uint64_t seed);

  Batch next();
  Batch batch_at(std::uint64_t k) const;
  std::uint64_t position() const { return pos_; }
  void seek(std::uint64_t k) { pos_ = k; }
  const DatasetSpec& spec() const { return spec_; }

 private:
  DatasetSpec spec_;
  Index batch_;
  std::uint64_t seed_;
  std::uint64_t pos_ = 0;
};

}  // namespace ccl::synth
