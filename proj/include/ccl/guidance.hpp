#pragma once

// Guided Euler sampling of both streams. Each guidance mode is an affine
// combination of velocity evaluations ("branches") that differ in the text
// condition and in what the cross-modal attention sees.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ccl/cca.hpp"
#include "ccl/model.hpp"

namespace ccl::guide {

// TextOnly is the plain conditional velocity v(c_text, c_m), one branch.
enum class Mode { TextOnly, UCG2, UCG3, MMCFG, SyncCFGStatic };

const char* mode_name(Mode m);
// Accepts the names above in lower case ("text", "ucg2", "ucg3", "mmcfg",
// "synccfg") plus "none" as an alias for "text".
std::optional<Mode> parse_mode(const std::string& s);

struct Scales {
  double s_text = 4.0;
  double s_m = 2.0;
};

struct GuidanceConfig {
  Mode mode = Mode::UCG2;
  Scales scales;
  std::optional<Scales> audio;  // per-stream overrides
  std::optional<Scales> video;
  Index steps = 50;

  Scales for_stream(model::StreamId s) const;
  // Throws ContractError on steps < 1 or non-finite scales.
  void validate() const;
};

// What the cross-modal attention of a stream attends to in one branch.
enum class CrossSource {
  Full,         // opposing latents (plus the context bank when the model has one)
  ContextOnly,  // context bank only
  Dropped,      // nothing: the cross-modal term is removed
  Static,       // opposing stream replaced by a static video / silent audio latent
};

struct Branch {
  bool text = true;  // false: null text
  CrossSource cross = CrossSource::Full;

  bool operator==(const Branch&) const = default;
};

struct Velocity {
  Tensor<float> audio;  // [b, t_a, c]
  Tensor<float> video;  // [b, s_v, c]
};

struct Condition {
  std::vector<Index> class_ids;
  Tensor<float> first_frame;  // [b, h*w, c], only for image-conditioned models
};

// Source of velocities. evaluate() counts one forward per stream whose
// output it returns.
class VelocityModel {
 public:
  virtual ~VelocityModel() = default;

  Velocity evaluate(const Tensor<float>& x_a, const Tensor<float>& x_v, double t, const Condition& cond,
                    const Branch& branch);

  Index audio_forwards() const { return audio_forwards_; }
  Index video_forwards() const { return video_forwards_; }
  void reset_counts() { audio_forwards_ = video_forwards_ = 0; }

 protected:
  virtual Velocity velocity(const Tensor<float>& x_a, const Tensor<float>& x_v, double t, const Condition& cond,
                            const Branch& branch) = 0;

 private:
  Index audio_forwards_ = 0;
  Index video_forwards_ = 0;
};

// Video latent whose frames all equal frame 0 of x_v ([b, t_v*h*w, c]).
Tensor<float> static_video(const Tensor<float>& x_v, const tarp::GridMeta& grid);
// All-zero latent shaped like x_a.
Tensor<float> silent_audio(const Tensor<float>& x_a);

// Adapter over the dual-stream model. Full uses the joint routing of the
// model's variant; ContextOnly and Dropped turn off the cross latents (and
// for Dropped the bank too). Static runs one forward per stream with the
// other stream replaced by its static counterpart.
class ModelVelocity : public VelocityModel {
 public:
  explicit ModelVelocity(const model::DualStreamModel<float>& model) : model_(model) {}

  // When set, the next Full-branch evaluation appends its maps here and
  // clears the pointer.
  void capture_next(cca::AttnCapture* capture) { capture_ = capture; }

 protected:
  Velocity velocity(const Tensor<float>& x_a, const Tensor<float>& x_v, double t, const Condition& cond,
                    const Branch& branch) override;

 private:
  const model::DualStreamModel<float>& model_;
  cca::AttnCapture* capture_ = nullptr;
};

dcr::RoutingPlan branch_plan(model::Variant variant, CrossSource cross);

// v = v(uc, L) + s_m (v(c, c_m) - v(uc, L)) per stream.
Velocity ucg_two_pass(VelocityModel& m, const Tensor<float>& x_a, const Tensor<float>& x_v, double t,
                      const Condition& cond, const GuidanceConfig& cfg);
// v = v(uc, L) + s_text (v(c, L) - v(uc, L)) + s_m (v(uc, c_m) - v(uc, L)).
Velocity ucg_three_pass(VelocityModel& m, const Tensor<float>& x_a, const Tensor<float>& x_v, double t,
                        const Condition& cond, const GuidanceConfig& cfg);
// Same combination as the three-pass form with the cross-modal input dropped
// in the unconditional branches.
Velocity mm_cfg_baseline(VelocityModel& m, const Tensor<float>& x_a, const Tensor<float>& x_v, double t,
                         const Condition& cond, const GuidanceConfig& cfg);
// Three-pass form whose unconditional cross input is a static video / silent
// audio latent.
Velocity synccfg_static_baseline(VelocityModel& m, const Tensor<float>& x_a, const Tensor<float>& x_v, double t,
                                 const Condition& cond, const GuidanceConfig& cfg);

Velocity guided_velocity(VelocityModel& m, const Tensor<float>& x_a, const Tensor<float>& x_v, double t,
                         const Condition& cond, const GuidanceConfig& cfg);

// sum_i w_i x_i, skipping zero weights and evaluated left to right, so a
// single unit weight returns that input unchanged.
Tensor<float> affine(const std::vector<std::pair<double, const Tensor<float>*>>& terms);

// t_k = 1 - k / steps, k = 0..steps (t_steps is exactly 0).
std::vector<double> uniform_schedule(Index steps);

struct SampleShape {
  Index batch = 1;
  Index t_a = 0;
  Index s_v = 0;
  Index channels = 0;
};

struct Sample {
  Tensor<float> audio;
  Tensor<float> video;
};

// Gaussian initial latents for a seed.
Sample initial_noise(const SampleShape& shape, std::uint64_t seed);

// x <- x - (t_k - t_{k+1}) v(x, t_k) from t = 1 to 0. Throws NumericalError
// when the state stops being finite.
Sample euler_sample(VelocityModel& m, const Condition& cond, const GuidanceConfig& cfg, const SampleShape& shape,
                    std::uint64_t seed);
Sample euler_sample_from(VelocityModel& m, Sample init, const Condition& cond, const GuidanceConfig& cfg);

}  // namespace ccl::guide
