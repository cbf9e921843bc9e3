#pragma once

// Flow-matching multi-task training: x_t = (1 - t) x0 + t eps with velocity
// target eps - x0, one task per step, Adam with separate learning rates for
// the cross-modal parameters and everything else.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "ccl/dcr.hpp"
#include "ccl/model.hpp"
#include "ccl/synthdata.hpp"

namespace ccl::train {

// The text/image-to-X share is split evenly between t2v and t2a.
struct TaskProbs {
  double t2v = 0.05;
  double t2a = 0.05;
  double a2v = 0.15;
  double v2a = 0.15;
  double joint = 0.6;

  double of(dcr::TaskKind t) const;
  // Throws ContractError unless all entries are >= 0 and sum to 1 (1e-9).
  void validate() const;
};

struct TrainConfig {
  TaskProbs probs;
  double lr_cca = 2e-3;
  double lr_base = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  Index steps = 1500;
  Index batch = 8;
  double ema_decay = 0.99;
  double text_drop = 0.1;  // chance a sample trains with the null text
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainRecord {
  Index step = 0;
  dcr::TaskKind task = dcr::TaskKind::JointAV;
  double loss = 0.0;
  double loss_audio = 0.0;  // unweighted stream MSEs; 0 for inactive streams
  double loss_video = 0.0;
  double ema = 0.0;        // EMA of `loss` over the steps of this task
  double joint_ema = 0.0;  // latest joint-task EMA (NaN before the first joint step)
};

template <typename T>
std::pair<Tensor<T>, Tensor<T>> flow_interpolate(const Tensor<T>& x0, const Tensor<T>& eps, double t);

// Per-sample timesteps: x0 and eps are [b, ...] and t has b entries.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> flow_interpolate_batch(const Tensor<T>& x0, const Tensor<T>& eps,
                                                       const std::vector<double>& t);

dcr::TaskKind sample_task(const TaskProbs& probs, std::mt19937_64& rng);

template <typename T>
struct LossParts {
  Var<T> total;
  double audio = 0.0;
  double video = 0.0;
};

// w_a MSE(v_a) + w_v MSE(v_v) with weights from the plan. Zero-weighted
// streams are left out of the graph entirely.
template <typename T>
LossParts<T> multitask_loss(const model::ForwardOutputs<T>& preds, const Tensor<T>& target_audio,
                            const Tensor<T>& target_video, const dcr::RoutingPlan& plan);

// Routing used by a model variant for a task.
dcr::RoutingPlan plan_for(model::Variant variant, dcr::TaskKind task);

template <typename T>
class Adam {
 public:
  Adam(const std::vector<model::ParamEntry<T>>& params, const TrainConfig& cfg);

  void step();
  void zero_grad();
  double lr_of(std::size_t i) const;

  Index t = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;

 private:
  std::vector<model::ParamEntry<T>> params_;
  double lr_base_, lr_cca_, b1_, b2_, eps_;
};

// Everything needed to continue a run bit-identically.
struct TrainerState {
  Index step = 0;
  std::array<double, 5> ema{};
  std::array<bool, 5> ema_init{};
};

template <typename T>
class Trainer {
 public:
  Trainer(model::ModelParams<T> params, TrainConfig cfg, synth::DatasetSpec data);

  // Runs one step. Throws NumericalError (with step and task in the message)
  // when the forward pass or the loss is non-finite.
  TrainRecord step();
  // Runs until state().step == cfg.steps, calling `on_record` after each step.
  void run(const std::function<void(const TrainRecord&)>& on_record = {});

  model::DualStreamModel<T>& model() { return model_; }
  const model::DualStreamModel<T>& model() const { return model_; }
  Adam<T>& optimizer() { return opt_; }
  const Adam<T>& optimizer() const { return opt_; }
  TrainerState& state() { return state_; }
  const TrainerState& state() const { return state_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  TrainConfig cfg_;
  synth::DatasetIter data_;
  model::DualStreamModel<T> model_;
  Adam<T> opt_;
  TrainerState state_;
};

// Builds the inputs and targets for one training step of `task`.
template <typename T>
struct StepBatch {
  model::ForwardInputs<T> inputs;
  Tensor<T> target_audio;
  Tensor<T> target_video;
  dcr::RoutingPlan plan;
};

template <typename T>
StepBatch<T> make_step_batch(const synth::Batch& batch, const model::ModelConfig& mc, dcr::TaskKind task,
                             double text_drop, std::mt19937_64& rng);

}  // namespace ccl::train
