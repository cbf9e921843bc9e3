#include "ccl/trainer.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace ccl::train {

namespace {

std::size_t task_slot(dcr::TaskKind t) { return static_cast<std::size_t>(t); }

std::mt19937_64 step_rng(std::uint64_t seed, Index step) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(static_cast<std::uint64_t>(step) >> 32),
                    0x7a5cu};
  return std::mt19937_64(seq);
}

}  // namespace

double TaskProbs::of(dcr::TaskKind t) const {
  switch (t) {
    case dcr::TaskKind::TextToVideo:
      return t2v;
    case dcr::TaskKind::TextToAudio:
      return t2a;
    case dcr::TaskKind::AudioToVideo:
      return a2v;
    case dcr::TaskKind::VideoToAudio:
      return v2a;
    case dcr::TaskKind::JointAV:
      return joint;
  }
  return 0.0;
}

void TaskProbs::validate() const {
  double s = 0;
  for (dcr::TaskKind t : dcr::kAllTasks) {
    const double p = of(t);
    if (!(p >= 0.0)) throw ContractError("task probability for " + std::string(dcr::task_name(t)) + " is negative");
    s += p;
  }
  if (std::fabs(s - 1.0) > 1e-9) throw ContractError("task probabilities sum to " + std::to_string(s) + ", not 1");
}

void TrainConfig::validate() const {
  probs.validate();
  if (!(lr_cca >= 0.0) || !(lr_base >= 0.0)) throw ContractError("learning rates must be nonnegative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(adam_eps > 0.0)) {
    throw ContractError("invalid Adam hyperparameters");
  }
  if (steps < 0 || batch < 1) throw ContractError("steps must be >= 0 and batch >= 1");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ContractError("ema_decay must be in [0, 1)");
  if (!(text_drop >= 0.0 && text_drop <= 1.0)) throw ContractError("text_drop must be in [0, 1]");
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> flow_interpolate(const Tensor<T>& x0, const Tensor<T>& eps, double t) {
  if (x0.shape() != eps.shape()) {
    throw DimensionError("flow_interpolate: x0 " + shape_str(x0.shape()) + " vs eps " + shape_str(eps.shape()));
  }
  if (!(t >= 0.0 && t <= 1.0)) throw ContractError("flow_interpolate: t=" + std::to_string(t) + " outside [0, 1]");
  Tensor<T> xt(x0.shape()), v(x0.shape());
  const T a = static_cast<T>(1.0 - t), b = static_cast<T>(t);
  for (Index i = 0; i < x0.numel(); ++i) {
    xt[i] = a * x0[i] + b * eps[i];
    v[i] = eps[i] - x0[i];
  }
  return {xt, v};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> flow_interpolate_batch(const Tensor<T>& x0, const Tensor<T>& eps,
                                                       const std::vector<double>& t) {
  if (x0.shape() != eps.shape() || x0.rank() < 1 || x0.dim(0) != static_cast<Index>(t.size())) {
    throw DimensionError("flow_interpolate_batch: x0 " + shape_str(x0.shape()) + ", eps " + shape_str(eps.shape()) +
                         ", " + std::to_string(t.size()) + " timesteps");
  }
  Tensor<T> xt(x0.shape()), v(x0.shape());
  const Index per = x0.numel() / std::max<Index>(1, x0.dim(0));
  for (Index b = 0; b < x0.dim(0); ++b) {
    const double tb = t[static_cast<std::size_t>(b)];
    if (!(tb >= 0.0 && tb <= 1.0)) throw ContractError("flow_interpolate: t outside [0, 1]");
    const T a = static_cast<T>(1.0 - tb), s = static_cast<T>(tb);
    for (Index i = b * per; i < (b + 1) * per; ++i) {
      xt[i] = a * x0[i] + s * eps[i];
      v[i] = eps[i] - x0[i];
    }
  }
  return {xt, v};
}

dcr::TaskKind sample_task(const TaskProbs& probs, std::mt19937_64& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0;
  dcr::TaskKind last = dcr::TaskKind::JointAV;
  for (dcr::TaskKind t : dcr::kAllTasks) {
    const double p = probs.of(t);
    if (p <= 0.0) continue;
    acc += p;
    last = t;
    if (u < acc) return t;
  }
  return last;
}

template <typename T>
LossParts<T> multitask_loss(const model::ForwardOutputs<T>& preds, const Tensor<T>& target_audio,
                            const Tensor<T>& target_video, const dcr::RoutingPlan& plan) {
  if (plan.audio.active && !preds.v_audio.defined()) {
    throw ContractError("multitask_loss: audio stream is active but has no prediction");
  }
  if (plan.video.active && !preds.v_video.defined()) {
    throw ContractError("multitask_loss: video stream is active but has no prediction");
  }
  LossParts<T> out;
  Var<T> la, lv;
  // Reference streams carry no target.
  if (plan.audio.active && target_audio.numel() > 0) {
    la = mse(preds.v_audio, target_audio);
    out.audio = static_cast<double>(la.value().item());
  }
  if (plan.video.active && target_video.numel() > 0) {
    lv = mse(preds.v_video, target_video);
    out.video = static_cast<double>(lv.value().item());
  }
  auto weighted = [](const Var<T>& l, float w) { return w == 1.0F ? l : scale(l, static_cast<T>(w)); };
  const bool use_a = la.defined() && plan.audio.loss_weight != 0.0F;
  const bool use_v = lv.defined() && plan.video.loss_weight != 0.0F;
  if (use_a && use_v) {
    out.total = add(weighted(la, plan.audio.loss_weight), weighted(lv, plan.video.loss_weight));
  } else if (use_a) {
    out.total = weighted(la, plan.audio.loss_weight);
  } else if (use_v) {
    out.total = weighted(lv, plan.video.loss_weight);
  } else {
    throw ContractError("multitask_loss: no stream carries loss weight");
  }
  return out;
}

dcr::RoutingPlan plan_for(model::Variant variant, dcr::TaskKind task) {
  return variant == model::Variant::CCL ? dcr::routing_plan(task) : dcr::gated_routing(task);
}

template <typename T>
Adam<T>::Adam(const std::vector<model::ParamEntry<T>>& params, const TrainConfig& cfg)
    : params_(params), lr_base_(cfg.lr_base), lr_cca_(cfg.lr_cca), b1_(cfg.beta1), b2_(cfg.beta2),
      eps_(cfg.adam_eps) {
  for (const auto& p : params_) {
    m.emplace_back(p.var.shape());
    v.emplace_back(p.var.shape());
  }
}

template <typename T>
double Adam<T>::lr_of(std::size_t i) const {
  return params_[i].group == model::ParamGroup::Cross ? lr_cca_ : lr_base_;
}

template <typename T>
void Adam<T>::step() {
  ++t;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const double lr = lr_of(i);
    Var<T> p = params_[i].var;
    if (lr == 0.0 || !p.has_grad()) continue;
    const Tensor<T> g = p.grad();
    T* w = p.mutable_value().ptr();
    T* mi = m[i].ptr();
    T* vi = v[i].ptr();
    const T b1 = static_cast<T>(b1_), b2 = static_cast<T>(b2_);
    const T step = static_cast<T>(lr / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(eps_);
    for (Index k = 0; k < g.numel(); ++k) {
      mi[k] = b1 * mi[k] + (T(1) - b1) * g[k];
      vi[k] = b2 * vi[k] + (T(1) - b2) * g[k] * g[k];
      w[k] -= step * mi[k] / (std::sqrt(vi[k] * inv_c2) + eps);
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

template <typename T>
StepBatch<T> make_step_batch(const synth::Batch& batch, const model::ModelConfig& mc, dcr::TaskKind task,
                             double text_drop, std::mt19937_64& rng) {
  StepBatch<T> sb;
  sb.plan = plan_for(mc.variant, task);
  const Index b = static_cast<Index>(batch.class_ids.size());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // Draw order is fixed so both variants consume identical randomness.
  std::vector<double> t_shared(static_cast<std::size_t>(b)), t_a(static_cast<std::size_t>(b)),
      t_v(static_cast<std::size_t>(b));
  for (Index i = 0; i < b; ++i) {
    t_shared[static_cast<std::size_t>(i)] = unit(rng);
    t_a[static_cast<std::size_t>(i)] = unit(rng);
    t_v[static_cast<std::size_t>(i)] = unit(rng);
  }
  std::vector<Index> text(static_cast<std::size_t>(b));
  for (Index i = 0; i < b; ++i) {
    const bool drop = unit(rng) < text_drop;
    text[static_cast<std::size_t>(i)] = drop ? mc.null_text() : batch.class_ids[static_cast<std::size_t>(i)];
  }
  const Tensor<T> x0_a = cast<T>(batch.audio);
  const Tensor<T> x0_v = cast<T>(batch.video);
  Tensor<T> eps_a(x0_a.shape()), eps_v(x0_v.shape());
  for (Index i = 0; i < eps_a.numel(); ++i) eps_a[i] = static_cast<T>(gauss(rng));
  for (Index i = 0; i < eps_v.numel(); ++i) eps_v[i] = static_cast<T>(gauss(rng));

  auto fill = [&](const dcr::StreamRoute& r, const Tensor<T>& x0, const Tensor<T>& eps, const std::vector<double>& own,
                  Tensor<T>& input, std::vector<double>& ts, Tensor<T>& target) {
    if (!r.active) return;
    if (r.is_reference) {
      input = x0;
      ts.assign(static_cast<std::size_t>(b), 0.0);
      return;
    }
    ts = sb.plan.shared_timestep ? t_shared : own;
    auto [xt, v] = flow_interpolate_batch(x0, eps, ts);
    input = xt;
    target = v;
  };
  fill(sb.plan.audio, x0_a, eps_a, t_a, sb.inputs.audio, sb.inputs.t_audio, sb.target_audio);
  fill(sb.plan.video, x0_v, eps_v, t_v, sb.inputs.video, sb.inputs.t_video, sb.target_video);
  if (sb.plan.audio.active) sb.inputs.text_audio = text;
  if (sb.plan.video.active) sb.inputs.text_video = text;
  if (mc.image_conditioning && sb.plan.video.active) {
    const Index hw = mc.grid.frame_tokens(), ch = mc.signal_channels, sv = mc.grid.s_v();
    Tensor<T> ff({b, hw, ch});
    for (Index i = 0; i < b; ++i)
      for (Index k = 0; k < hw * ch; ++k) ff[i * hw * ch + k] = x0_v[i * sv * ch + k];
    sb.inputs.first_frame = ff;
  }
  return sb;
}

template <typename T>
Trainer<T>::Trainer(model::ModelParams<T> params, TrainConfig cfg, synth::DatasetSpec data)
    : cfg_(std::move(cfg)),
      data_(std::move(data), cfg_.batch, cfg_.seed),
      model_(std::move(params)),
      opt_(model_.params().registry, cfg_) {
  cfg_.validate();
  const auto& mc = model_.config();
  const auto& ds = data_.spec();
  if (!(ds.grid == mc.grid) || ds.channels != mc.signal_channels || ds.n_classes != mc.n_classes) {
    throw ContractError("trainer: dataset grid/channels/classes do not match the model config");
  }
}

template <typename T>
TrainRecord Trainer<T>::step() {
  const Index s = state_.step;
  auto rng = step_rng(cfg_.seed, s);
  const dcr::TaskKind task = sample_task(cfg_.probs, rng);
  const synth::Batch batch = data_.batch_at(static_cast<std::uint64_t>(s));
  StepBatch<T> sb = make_step_batch<T>(batch, model_.config(), task, cfg_.text_drop, rng);

  TrainRecord rec;
  rec.step = s;
  rec.task = task;
  try {
    const auto preds = model_.forward(sb.inputs, sb.plan);
    const LossParts<T> loss = multitask_loss(preds, sb.target_audio, sb.target_video, sb.plan);
    rec.loss = static_cast<double>(loss.total.value().item());
    rec.loss_audio = loss.audio;
    rec.loss_video = loss.video;
    if (!std::isfinite(rec.loss)) throw NumericalError("loss is not finite");
    opt_.zero_grad();
    backward(loss.total);
    opt_.step();
  } catch (const NumericalError& e) {
    throw NumericalError("training aborted at step " + std::to_string(s) + " (task " +
                         std::string(dcr::task_name(task)) + "): " + e.what());
  }

  const std::size_t k = task_slot(task);
  if (!state_.ema_init[k]) {
    state_.ema[k] = rec.loss;
    state_.ema_init[k] = true;
  } else {
    state_.ema[k] = cfg_.ema_decay * state_.ema[k] + (1.0 - cfg_.ema_decay) * rec.loss;
  }
  rec.ema = state_.ema[k];
  const std::size_t j = task_slot(dcr::TaskKind::JointAV);
  rec.joint_ema = state_.ema_init[j] ? state_.ema[j] : std::numeric_limits<double>::quiet_NaN();
  ++state_.step;
  return rec;
}

template <typename T>
void Trainer<T>::run(const std::function<void(const TrainRecord&)>& on_record) {
  while (state_.step < cfg_.steps) {
    const TrainRecord r = step();
    if (on_record) on_record(r);
  }
}

#define CCL_INSTANTIATE(T)                                                                                     \
  template std::pair<Tensor<T>, Tensor<T>> flow_interpolate(const Tensor<T>&, const Tensor<T>&, double);      \
  template std::pair<Tensor<T>, Tensor<T>> flow_interpolate_batch(const Tensor<T>&, const Tensor<T>&,         \
                                                                  const std::vector<double>&);                \
  template LossParts<T> multitask_loss(const model::ForwardOutputs<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                       const dcr::RoutingPlan&);                                              \
  template class Adam<T>;                                                                                     \
  template class Trainer<T>;                                                                                  \
  template StepBatch<T> make_step_batch<T>(const synth::Batch&, const model::ModelConfig&, dcr::TaskKind,     \
                                           double, std::mt19937_64&);

CCL_INSTANTIATE(float)
CCL_INSTANTIATE(double)

#undef CCL_INSTANTIATE

}  // namespace ccl::train
