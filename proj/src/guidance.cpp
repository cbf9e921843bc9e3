#include "ccl/guidance.hpp"

#include <cmath>
#include <random>

#include "ccl/autograd.hpp"

namespace ccl::guide {

const char* mode_name(Mode m) {
  switch (m) {
    case Mode::TextOnly:
      return "text";
    case Mode::UCG2:
      return "ucg2";
    case Mode::UCG3:
      return "ucg3";
    case Mode::MMCFG:
      return "mmcfg";
    case Mode::SyncCFGStatic:
      return "synccfg";
  }
  return "?";
}

std::optional<Mode> parse_mode(const std::string& s) {
  if (s == "none") return Mode::TextOnly;
  for (Mode m : {Mode::TextOnly, Mode::UCG2, Mode::UCG3, Mode::MMCFG, Mode::SyncCFGStatic}) {
    if (s == mode_name(m)) return m;
  }
  return std::nullopt;
}

Scales GuidanceConfig::for_stream(model::StreamId s) const {
  const std::optional<Scales>& o = s == model::StreamId::Audio ? audio : video;
  return o ? *o : scales;
}

void GuidanceConfig::validate() const {
  if (steps < 1) throw ContractError("guidance: steps must be >= 1");
  for (const Scales& s : {scales, for_stream(model::StreamId::Audio), for_stream(model::StreamId::Video)}) {
    if (!std::isfinite(s.s_text) || !std::isfinite(s.s_m)) throw ContractError("guidance: scales must be finite");
  }
}

Velocity VelocityModel::evaluate(const Tensor<float>& x_a, const Tensor<float>& x_v, double t, const Condition& cond,
                                 const Branch& branch) {
  Velocity v = velocity(x_a, x_v, t, cond, branch);
  if (v.audio.numel() > 0) ++audio_forwards_;
  if (v.video.numel() > 0) ++video_forwards_;
  return v;
}

Tensor<float> static_video(const Tensor<float>& x_v, const tarp::GridMeta& grid) {
  const Index sv = grid.s_v();
  if (x_v.rank() != 3 || x_v.dim(1) != sv) {
    throw DimensionError("static_video: expected [b, " + std::to_string(sv) + ", c], got " + shape_str(x_v.shape()));
  }
  const Index b = x_v.dim(0), ch = x_v.dim(2), frame = grid.frame_tokens() * ch;
  Tensor<float> out(x_v.shape());
  for (Index i = 0; i < b; ++i) {
    const float* src = x_v.ptr() + i * sv * ch;
    float* dst = out.ptr() + i * sv * ch;
    for (Index f = 0; f < grid.t_v; ++f) std::copy(src, src + frame, dst + f * frame);
  }
  return out;
}

Tensor<float> silent_audio(const Tensor<float>& x_a) { return Tensor<float>(x_a.shape()); }

dcr::RoutingPlan branch_plan(model::Variant variant, CrossSource cross) {
  dcr::RoutingPlan p = variant == model::Variant::CCL ? dcr::routing_plan(dcr::TaskKind::JointAV)
                                                      : dcr::gated_routing(dcr::TaskKind::JointAV);
  if (cross == CrossSource::ContextOnly || cross == CrossSource::Dropped) {
    for (dcr::StreamRoute* r : {&p.audio, &p.video}) {
      r->use_cross_latent = false;
      if (cross == CrossSource::Dropped) r->use_lct = false;
    }
  }
  return p;
}

Velocity ModelVelocity::velocity(const Tensor<float>& x_a, const Tensor<float>& x_v, double t, const Condition& cond,
                                 const Branch& branch) {
  NoGradGuard ng;
  const model::ModelConfig& c = model_.config();
  const Index b = x_a.dim(0);
  model::ForwardInputs<float> in;
  in.t_audio.assign(static_cast<std::size_t>(b), t);
  in.t_video = in.t_audio;
  if (branch.text) {
    in.text_audio = cond.class_ids;
  } else {
    in.text_audio.assign(static_cast<std::size_t>(b), c.null_text());
  }
  in.text_video = in.text_audio;
  in.first_frame = cond.first_frame;
  const dcr::RoutingPlan plan = branch_plan(c.variant, branch.cross);

  if (branch.cross == CrossSource::Static) {
    Velocity v;
    in.audio = x_a;
    in.video = static_video(x_v, c.grid);
    v.audio = model_.forward(in, plan).v_audio.value();
    in.audio = silent_audio(x_a);
    in.video = x_v;
    v.video = model_.forward(in, plan).v_video.value();
    return v;
  }
  in.audio = x_a;
  in.video = x_v;
  cca::AttnCapture* cap = branch.cross == CrossSource::Full ? capture_ : nullptr;
  if (cap) capture_ = nullptr;
  const model::ForwardOutputs<float> o = model_.forward(in, plan, cap);
  return {o.v_audio.value(), o.v_video.value()};
}

Tensor<float> affine(const std::vector<std::pair<double, const Tensor<float>*>>& terms) {
  const Tensor<float>* first = nullptr;
  for (const auto& [w, x] : terms) {
    if (first && x->shape() != first->shape()) throw DimensionError("affine: terms differ in shape");
    if (!first) first = x;
  }
  if (!first) throw ContractError("affine: no terms");
  const Index n = first->numel();
  std::vector<double> acc(static_cast<std::size_t>(n), 0.0);
  for (const auto& [w, x] : terms) {
    if (w == 0.0) continue;
    const float* p = x->ptr();
    for (Index i = 0; i < n; ++i) acc[static_cast<std::size_t>(i)] += w * static_cast<double>(p[i]);
  }
  Tensor<float> out(first->shape());
  for (Index i = 0; i < n; ++i) out[i] = static_cast<float>(acc[static_cast<std::size_t>(i)]);
  return out;
}

namespace {

// Per-stream combination U + a (A - U) + b (B - U) written as weights.
Velocity combine3(const Velocity& u, const Velocity& a, const Velocity& b, const GuidanceConfig& cfg) {
  Velocity out;
  const Scales sa = cfg.for_stream(model::StreamId::Audio), sv = cfg.for_stream(model::StreamId::Video);
  out.audio = affine({{1.0 - sa.s_text - sa.s_m, &u.audio}, {sa.s_text, &a.audio}, {sa.s_m, &b.audio}});
  out.video = affine({{1.0 - sv.s_text - sv.s_m, &u.video}, {sv.s_text, &a.video}, {sv.s_m, &b.video}});
  return out;
}

Velocity three_pass(VelocityModel& m, const Tensor<float>& x_a, const Tensor<float>& x_v, double t,
                    const Condition& cond, const GuidanceConfig& cfg, CrossSource uncond) {
  const Velocity u = m.evaluate(x_a, x_v, t, cond, {.text = false, .cross = uncond});
  const Velocity tx = m.evaluate(x_a, x_v, t, cond, {.text = true, .cross = uncond});
  const Velocity cm = m.evaluate(x_a, x_v, t, cond, {.text = false, .cross = CrossSource::Full});
  return combine3(u, tx, cm, cfg);
}

}  // namespace

Velocity ucg_two_pass(VelocityModel& m, const Tensor<float>& x_a, const Tensor<float>& x_v, double t,
                      const Condition& cond, const GuidanceConfig& cfg) {
  const Velocity u = m.evaluate(x_a, x_v, t, cond, {.text = false, .cross = CrossSource::ContextOnly});
  const Velocity c = m.evaluate(x_a, x_v, t, cond, {.text = true, .cross = CrossSource::Full});
  const double sa = cfg.for_stream(model::StreamId::Audio).s_m, sv = cfg.for_stream(model::StreamId::Video).s_m;
  return {affine({{1.0 - sa, &u.audio}, {sa, &c.audio}}), affine({{1.0 - sv, &u.video}, {sv, &c.video}})};
}

Velocity ucg_three_pass(VelocityModel& m, const Tensor<float>& x_a, const Tensor<float>& x_v, double t,
                        const Condition& cond, const GuidanceConfig& cfg) {
  return three_pass(m, x_a, x_v, t, cond, cfg, CrossSource::ContextOnly);
}

Velocity mm_cfg_baseline(VelocityModel& m, const Tensor<float>& x_a, const Tensor<float>& x_v, double t,
                         const Condition& cond, const GuidanceConfig& cfg) {
  return three_pass(m, x_a, x_v, t, cond, cfg, CrossSource::Dropped);
}

Velocity synccfg_static_baseline(VelocityModel& m, const Tensor<float>& x_a, const Tensor<float>& x_v, double t,
                                 const Condition& cond, const GuidanceConfig& cfg) {
  return three_pass(m, x_a, x_v, t, cond, cfg, CrossSource::Static);
}

Velocity guided_velocity(VelocityModel& m, const Tensor<float>& x_a, const Tensor<float>& x_v, double t,
                         const Condition& cond, const GuidanceConfig& cfg) {
  switch (cfg.mode) {
    case Mode::TextOnly:
      return m.evaluate(x_a, x_v, t, cond, {.text = true, .cross = CrossSource::Full});
    case Mode::UCG2:
      return ucg_two_pass(m, x_a, x_v, t, cond, cfg);
    case Mode::UCG3:
      return ucg_three_pass(m, x_a, x_v, t, cond, cfg);
    case Mode::MMCFG:
      return mm_cfg_baseline(m, x_a, x_v, t, cond, cfg);
    case Mode::SyncCFGStatic:
      return synccfg_static_baseline(m, x_a, x_v, t, cond, cfg);
  }
  throw ContractError("guidance: unknown mode");
}

std::vector<double> uniform_schedule(Index steps) {
  if (steps < 1) throw ContractError("schedule: steps must be >= 1");
  std::vector<double> t(static_cast<std::size_t>(steps + 1));
  for (Index k = 0; k <= steps; ++k) t[static_cast<std::size_t>(k)] = 1.0 - static_cast<double>(k) / static_cast<double>(steps);
  return t;
}

Sample initial_noise(const SampleShape& shape, std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x5a3bu};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Sample s{Tensor<float>({shape.batch, shape.t_a, shape.channels}),
           Tensor<float>({shape.batch, shape.s_v, shape.channels})};
  for (float& v : s.audio.data()) v = static_cast<float>(gauss(rng));
  for (float& v : s.video.data()) v = static_cast<float>(gauss(rng));
  return s;
}

namespace {

Tensor<float> euler_update(const Tensor<float>& x, const Tensor<float>& v, double dt, const char* what, Index k) {
  if (v.shape() != x.shape()) {
    throw DimensionError(std::string("euler: ") + what + " velocity " + shape_str(v.shape()) + " vs state " +
                         shape_str(x.shape()));
  }
  Tensor<float> out(x.shape());
  for (Index i = 0; i < x.numel(); ++i) out[i] = static_cast<float>(static_cast<double>(x[i]) - dt * v[i]);
  if (!out.all_finite()) throw NumericalError(std::string("euler: non-finite ") + what + " state at step " + std::to_string(k));
  return out;
}

}  // namespace

Sample euler_sample_from(VelocityModel& m, Sample x, const Condition& cond, const GuidanceConfig& cfg) {
  cfg.validate();
  const std::vector<double> ts = uniform_schedule(cfg.steps);
  for (Index k = 0; k < cfg.steps; ++k) {
    const double t = ts[static_cast<std::size_t>(k)];
    const double dt = t - ts[static_cast<std::size_t>(k + 1)];
    const Velocity v = guided_velocity(m, x.audio, x.video, t, cond, cfg);
    x.audio = euler_update(x.audio, v.audio, dt, "audio", k);
    x.video = euler_update(x.video, v.video, dt, "video", k);
  }
  return x;
}

Sample euler_sample(VelocityModel& m, const Condition& cond, const GuidanceConfig& cfg, const SampleShape& shape,
                    std::uint64_t seed) {
  return euler_sample_from(m, initial_noise(shape, seed), cond, cfg);
}

}  // namespace ccl::guide
