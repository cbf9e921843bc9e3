#include "ccl/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

namespace ccl::synth {

namespace {

constexpr double kTexture = 0.2;    // static background texture, uniform in [-kTexture, kTexture]
constexpr double kBlobBase = 0.5;   // blob brightness between events
constexpr double kOffChannel = 0.5; // audio signature weight of non-primary channels

std::mt19937_64 make_rng(std::uint64_t a, std::uint64_t b, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32),
                    static_cast<std::uint32_t>(salt)};
  return std::mt19937_64(seq);
}

}  // namespace

void DatasetSpec::validate() const {
  grid.validate();
  if (grid.t_a % grid.t_v != 0) {
    throw ContractError("dataset: t_a (" + std::to_string(grid.t_a) + ") must be a multiple of t_v (" +
                        std::to_string(grid.t_v) + ")");
  }
  if (grid.h < 2 || grid.w < 2) throw ContractError("dataset: frames must be at least 2x2");
  if (channels < 1 || n_classes < 1) throw ContractError("dataset: channels and n_classes must be positive");
  if (!(event_rate >= 0.0 && event_rate <= 1.0)) throw ContractError("dataset: event_rate outside [0, 1]");
  if (!(noise_std >= 0.0) || !(amplitude >= 0.0) || !(contrast >= 0.0)) {
    throw ContractError("dataset: noise_std, amplitude and contrast must be nonnegative");
  }
  // Worst-case foreground power is a quarter of amplitude^2 (off channels);
  // background power is bounded by texture^2 + noise^2.
  const double bg = kTexture * kTexture + noise_std * noise_std;
  if (event_rate > 0.0 && 0.25 * amplitude * amplitude < contrast * bg) {
    throw ContractError("dataset: amplitude too small for the requested contrast");
  }
}

std::pair<Index, Index> blob_origin(const DatasetSpec& spec, Index class_id) {
  const Index q = class_id % 4;
  const Index by = spec.grid.h / 2, bx = spec.grid.w / 2;
  return {(q / 2) * by, (q % 2) * bx};
}

AVSample generate_pair(const DatasetSpec& spec, std::uint64_t index) {
  spec.validate();
  const auto& g = spec.grid;
  const Index c = g.t_a / g.t_v;
  const Index ch = spec.channels;
  auto rng = make_rng(spec.seed, index, 0x5eedu);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  AVSample s;
  s.class_id = static_cast<Index>(rng() % static_cast<std::uint64_t>(spec.n_classes));

  std::vector<std::uint8_t> event(static_cast<std::size_t>(g.t_v), 0);
  for (Index f = 0; f < g.t_v; ++f) event[static_cast<std::size_t>(f)] = unit(rng) < spec.event_rate ? 1 : 0;
  if (spec.event_rate > 0.0 && spec.event_rate < 1.0 && g.t_v > 1) {
    // At least one event and one silent frame, so both series vary.
    const Index on = std::count(event.begin(), event.end(), 1);
    if (on == 0) event[static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(g.t_v))] = 1;
    if (on == g.t_v) event[static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(g.t_v))] = 0;
  }
  for (Index f = 0; f < g.t_v; ++f)
    if (event[static_cast<std::size_t>(f)]) s.event_frames.push_back(f);

  // Static per-sample background.
  std::vector<double> texture(static_cast<std::size_t>(g.h * g.w * ch));
  for (double& v : texture) v = kTexture * (2.0 * unit(rng) - 1.0);
  std::vector<double> ambience(static_cast<std::size_t>(ch));
  for (double& v : ambience) v = kTexture * (2.0 * unit(rng) - 1.0);

  const auto [oy, ox] = blob_origin(spec, s.class_id);
  const Index by = g.h / 2, bx = g.w / 2;
  s.video = Tensor<float>({g.t_v, g.h, g.w, ch});
  s.fg_video_mask.assign(static_cast<std::size_t>(g.s_v()), 0);
  for (Index f = 0; f < g.t_v; ++f) {
    const double pulse = event[static_cast<std::size_t>(f)] ? spec.amplitude : 0.0;
    for (Index y = 0; y < g.h; ++y)
      for (Index x = 0; x < g.w; ++x) {
        const bool blob = y >= oy && y < oy + by && x >= ox && x < ox + bx;
        const Index pix = (f * g.h + y) * g.w + x;
        if (blob) s.fg_video_mask[static_cast<std::size_t>(pix)] = 1;
        for (Index k = 0; k < ch; ++k) {
          const double base = blob ? kBlobBase + pulse : texture[static_cast<std::size_t>((y * g.w + x) * ch + k)];
          s.video[pix * ch + k] = static_cast<float>(base + spec.noise_std * gauss(rng));
        }
      }
  }

  const Index primary = (s.class_id + s.class_id / 4) % ch;
  s.audio = Tensor<float>({g.t_a, ch});
  s.fg_audio_mask.assign(static_cast<std::size_t>(g.t_a), 0);
  for (Index j = 0; j < g.t_a; ++j) {
    const Index f = j / c;
    const bool on = event[static_cast<std::size_t>(f)] != 0;
    if (on) s.fg_audio_mask[static_cast<std::size_t>(j)] = 1;
    for (Index k = 0; k < ch; ++k) {
      const double sig = k == primary ? 1.0 : kOffChannel;
      const double v = ambience[static_cast<std::size_t>(k)] + (on ? spec.amplitude * sig : 0.0);
      s.audio[j * ch + k] = static_cast<float>(v + spec.noise_std * gauss(rng));
    }
  }
  return s;
}

SyncScore sync_score(const Tensor<float>& audio, const Tensor<float>& video, const tarp::GridMeta& g) {
  g.validate();
  if (audio.rank() < 2 || audio.dim(0) != g.t_a || video.numel() % g.s_v() != 0 ||
      audio.numel() / g.t_a != video.numel() / g.s_v()) {
    throw DimensionError("sync_score: audio " + shape_str(audio.shape()) + " and video " + shape_str(video.shape()) +
                         " do not match grid t_a=" + std::to_string(g.t_a) + " t_v=" + std::to_string(g.t_v));
  }
  const Index ch = audio.numel() / g.t_a;
  const Index c = g.t_a / g.t_v;
  const Index hw = g.frame_tokens();

  std::vector<double> env(static_cast<std::size_t>(g.t_v), 0.0);
  for (Index f = 0; f < g.t_v; ++f) {
    double s = 0;
    for (Index j = f * c; j < (f + 1) * c; ++j)
      for (Index k = 0; k < ch; ++k) s += std::fabs(static_cast<double>(audio[j * ch + k]));
    env[static_cast<std::size_t>(f)] = s / static_cast<double>(c * ch);
  }

  // Pixel brightness over time, then the quarter of pixels that vary most.
  std::vector<double> bright(static_cast<std::size_t>(g.t_v * hw), 0.0);
  for (Index f = 0; f < g.t_v; ++f)
    for (Index p = 0; p < hw; ++p) {
      double s = 0;
      for (Index k = 0; k < ch; ++k) s += video[(f * hw + p) * ch + k];
      bright[static_cast<std::size_t>(f * hw + p)] = s / static_cast<double>(ch);
    }
  std::vector<double> var(static_cast<std::size_t>(hw), 0.0);
  for (Index p = 0; p < hw; ++p) {
    double m = 0, m2 = 0;
    for (Index f = 0; f < g.t_v; ++f) m += bright[static_cast<std::size_t>(f * hw + p)];
    m /= static_cast<double>(g.t_v);
    for (Index f = 0; f < g.t_v; ++f) {
      const double d = bright[static_cast<std::size_t>(f * hw + p)] - m;
      m2 += d * d;
    }
    var[static_cast<std::size_t>(p)] = m2;
  }
  std::vector<Index> order(static_cast<std::size_t>(hw));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return var[static_cast<std::size_t>(a)] > var[static_cast<std::size_t>(b)];
  });
  const Index top = std::max<Index>(1, hw / 4);
  std::vector<double> vid(static_cast<std::size_t>(g.t_v), 0.0);
  for (Index f = 0; f < g.t_v; ++f) {
    double s = 0;
    for (Index i = 0; i < top; ++i) s += bright[static_cast<std::size_t>(f * hw + order[static_cast<std::size_t>(i)])];
    vid[static_cast<std::size_t>(f)] = s / static_cast<double>(top);
  }

  const double n = static_cast<double>(g.t_v);
  const double ma = std::accumulate(env.begin(), env.end(), 0.0) / n;
  const double mv = std::accumulate(vid.begin(), vid.end(), 0.0) / n;
  double sab = 0, saa = 0, svv = 0;
  for (Index f = 0; f < g.t_v; ++f) {
    const double a = env[static_cast<std::size_t>(f)] - ma;
    const double v = vid[static_cast<std::size_t>(f)] - mv;
    sab += a * v;
    saa += a * a;
    svv += v * v;
  }
  constexpr double kTiny = 1e-20;
  if (saa <= kTiny || svv <= kTiny) return {0.0, true};
  return {std::clamp(sab / std::sqrt(saa * svv), -1.0, 1.0), false};
}

Batch make_batch(const std::vector<AVSample>& samples) {
  if (samples.empty()) throw ContractError("make_batch: no samples");
  const Index b = static_cast<Index>(samples.size());
  const Shape as = samples[0].audio.shape(), vs = samples[0].video.shape();
  const Index ch = as[1];
  const Index sv = vs[0] * vs[1] * vs[2];
  Batch out;
  out.audio = Tensor<float>({b, as[0], ch});
  out.video = Tensor<float>({b, sv, ch});
  for (Index i = 0; i < b; ++i) {
    const AVSample& s = samples[static_cast<std::size_t>(i)];
    if (s.audio.shape() != as || s.video.shape() != vs) throw DimensionError("make_batch: samples differ in grid");
    std::copy(s.audio.data().begin(), s.audio.data().end(), out.audio.ptr() + i * as[0] * ch);
    std::copy(s.video.data().begin(), s.video.data().end(), out.video.ptr() + i * sv * ch);
    out.class_ids.push_back(s.class_id);
  }
  out.samples = samples;
  return out;
}

DatasetIter::DatasetIter(DatasetSpec spec, Index batch, std::uint64_t seed)
    : spec_(std::move(spec)), batch_(batch), seed_(seed) {
  spec_.validate();
  if (batch_ < 1) throw ContractError("dataset: batch must be positive");
}

Batch DatasetIter::batch_at(std::uint64_t k) const {
  auto rng = make_rng(seed_, k, 0xba7cu);
  std::vector<AVSample> samples;
  samples.reserve(static_cast<std::size_t>(batch_));
  for (Index i = 0; i < batch_; ++i) samples.push_back(generate_pair(spec_, rng()));
  return make_batch(samples);
}

Batch DatasetIter::next() { return batch_at(pos_++); }

}  // namespace ccl::synth
