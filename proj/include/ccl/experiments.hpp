#pragma once

// Experiment drivers shared by the command-line tool and the acceptance
// suite: paired training runs, attention probes and guided-sampling sync.

#include <cstdint>
#include <functional>
#include <vector>

#include "ccl/guidance.hpp"
#include "ccl/io.hpp"

namespace ccl::exp {

struct CurvePoint {
  Index step = 0;  // 1-based iteration count
  double joint_ema = 0.0;
  double joint_audio_ema = 0.0;  // per-stream MSE EMAs over joint steps only
  double joint_video_ema = 0.0;
};

struct RunResult {
  model::Variant variant = model::Variant::CCL;
  std::uint64_t seed = 0;
  std::vector<CurvePoint> curve;  // iterations log_from..steps
  double final_joint_ema = 0.0;
  model::ModelParams<float> params;
};

// Trains `variant` from the config with the given seed (used for both the
// parameters and the step randomness; data order depends only on the
// config's data/train seeds, so variants with equal seeds see equal data).
RunResult train_run(const io::RunConfig& cfg, model::Variant variant, std::uint64_t seed, Index steps,
                    Index log_from = 100, const std::function<void(const train::TrainRecord&)>& on_record = {});

// Runs jobs on up to `threads` worker threads, each with one OpenMP thread.
void run_parallel(std::size_t n_jobs, unsigned threads, const std::function<void(std::size_t)>& job);

struct LctMass {
  double fg = 0.0;  // mean mass on context-bank columns over foreground queries
  double bg = 0.0;
  Index n_fg = 0;
  Index n_bg = 0;
};

struct LctReport {
  LctMass a2v;  // video queries
  LctMass v2a;  // audio queries
  std::vector<LctMass> a2v_blocks;
  std::vector<LctMass> v2a_blocks;
  bool bg_exceeds_fg() const { return a2v.bg > a2v.fg && v2a.bg > v2a.fg; }
};

// Maps must come from one forward over `masks.pairs` samples laid out as in
// the probe. Throws IntegrityError when map shapes do not fit the masks.
LctReport lct_mass_report(const std::vector<cca::AttnMap>& maps, const io::ProbeMasks& masks,
                          const tarp::GridMeta& grid);

struct Probe {
  std::vector<cca::AttnMap> maps;
  io::ProbeMasks masks;
};

// Text-conditioned joint forward on `pairs` held-out dataset samples noised
// to time t, capturing every cross-modal attention map.
Probe attention_probe(const model::DualStreamModel<float>& m, const synth::DatasetSpec& data, Index pairs, double t,
                      std::uint64_t seed);

inline constexpr double kProbeTime = 0.5;

struct SyncResult {
  std::vector<double> scores;
  double mean = 0.0;
  guide::Sample sample;
  std::vector<Index> class_ids;
};

// Draws n samples (class i mod n_classes) in chunks of `chunk` and scores
// each with sync_score.
SyncResult guided_sync(const model::DualStreamModel<float>& m, const guide::GuidanceConfig& g, Index n,
                       std::uint64_t seed, Index chunk = 25);

}  // namespace ccl::exp
