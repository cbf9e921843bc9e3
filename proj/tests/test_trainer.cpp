#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <random>

#include "ccl/trainer.hpp"
#include "fixtures.hpp"
#include "oracle.hpp"

using namespace ccl;
using namespace ccl::train;
using dcr::TaskKind;

namespace {

TaskProbs only(TaskKind t) {
  TaskProbs p{0, 0, 0, 0, 0};
  switch (t) {
    case TaskKind::TextToVideo: p.t2v = 1; break;
    case TaskKind::TextToAudio: p.t2a = 1; break;
    case TaskKind::AudioToVideo: p.a2v = 1; break;
    case TaskKind::VideoToAudio: p.v2a = 1; break;
    case TaskKind::JointAV: p.joint = 1; break;
  }
  return p;
}

Trainer<double> tiny_trainer(TrainConfig tc, bool randomise, model::Variant v = model::Variant::CCL) {
  const auto c = fixtures::tiny_config(v);
  auto p = model::init_params<double>(c, 1);
  if (randomise) fixtures::randomise(p, 2);
  tc.batch = 2;
  return Trainer<double>(std::move(p), tc, fixtures::data_for(c));
}

bool all_zero(const Var<double>& v) {
  if (!v.has_grad()) return true;
  for (double g : v.grad().data())
    if (g != 0.0) return false;
  return true;
}

}  // namespace

TEST(Flow, EndpointsAndVelocity) {
  std::mt19937_64 rng(1);
  const auto x0 = oracle::random_tensor({3, 4}, rng), eps = oracle::random_tensor({3, 4}, rng);
  const auto [a, va] = flow_interpolate(x0, eps, 0.0);
  const auto [b, vb] = flow_interpolate(x0, eps, 1.0);
  EXPECT_TRUE(bit_equal(a, x0));
  EXPECT_TRUE(bit_equal(b, eps));
  const auto [c1, v1] = flow_interpolate(x0, eps, 0.3);
  const auto [c2, v2] = flow_interpolate(x0, eps, 0.3 + 1e-6);
  for (Index i = 0; i < 12; ++i) {
    EXPECT_EQ(v1[i], eps[i] - x0[i]);
    EXPECT_NEAR((c2[i] - c1[i]) / 1e-6, v1[i], 1e-6);
  }
  EXPECT_THROW(flow_interpolate(x0, eps, 1.5), ContractError);
  EXPECT_THROW(flow_interpolate(x0, eps, -0.1), ContractError);
  const auto [xb, vbb] = flow_interpolate_batch(x0, eps, {0.0, 1.0, 0.5});
  for (Index k = 0; k < 4; ++k) {
    EXPECT_EQ(xb[k], x0[k]);
    EXPECT_EQ(xb[4 + k], eps[4 + k]);
  }
}

TEST(TaskSampling, DegenerateAndDeterministic) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(sample_task(only(TaskKind::JointAV), rng), TaskKind::JointAV);
  std::mt19937_64 r1(3), r2(3);
  for (int i = 0; i < 200; ++i) EXPECT_EQ(sample_task(TaskProbs{}, r1), sample_task(TaskProbs{}, r2));
}

TEST(TaskSampling, DefaultFrequencies) {
  std::mt19937_64 rng(4);
  std::array<int, 5> n{};
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) ++n[static_cast<std::size_t>(sample_task(TaskProbs{}, rng))];
  auto f = [&](TaskKind t) { return static_cast<double>(n[static_cast<std::size_t>(t)]) / draws; };
  EXPECT_NEAR(f(TaskKind::TextToVideo) + f(TaskKind::TextToAudio), 0.10, 0.01);
  EXPECT_NEAR(f(TaskKind::TextToVideo), 0.05, 0.01);
  EXPECT_NEAR(f(TaskKind::AudioToVideo), 0.15, 0.01);
  EXPECT_NEAR(f(TaskKind::VideoToAudio), 0.15, 0.01);
  EXPECT_NEAR(f(TaskKind::JointAV), 0.60, 0.01);
}

TEST(TaskSampling, InvalidProbabilities) {
  TaskProbs p;
  p.joint = 0.7;
  EXPECT_THROW(p.validate(), ContractError);
  p.joint = 0.6;
  p.t2v = -0.05;
  p.t2a = 0.15;
  EXPECT_THROW(p.validate(), ContractError);
}

TEST(StepBatch, TimestepsFollowThePlan) {
  const auto c = fixtures::tiny_config();
  synth::DatasetIter it(fixtures::data_for(c), 64, 5);
  const auto batch = it.next();
  std::mt19937_64 rng(6);
  const auto joint = make_step_batch<double>(batch, c, TaskKind::JointAV, 0.0, rng);
  EXPECT_EQ(joint.inputs.t_audio, joint.inputs.t_video);
  double mean = 0;
  for (double t : joint.inputs.t_audio) {
    EXPECT_GE(t, 0.0);
    EXPECT_LT(t, 1.0);
    mean += t / 64.0;
  }
  EXPECT_NEAR(mean, 0.5, 0.15);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(joint.inputs.text_audio[i], batch.class_ids[i]);

  const auto a2v = make_step_batch<double>(batch, c, TaskKind::AudioToVideo, 1.0, rng);
  EXPECT_TRUE(bit_equal(a2v.inputs.audio, cast<double>(batch.audio)));
  for (double t : a2v.inputs.t_audio) EXPECT_EQ(t, 0.0);
  EXPECT_EQ(a2v.target_audio.numel(), 0);
  EXPECT_NE(a2v.inputs.t_audio, a2v.inputs.t_video);
  for (Index id : a2v.inputs.text_video) EXPECT_EQ(id, c.null_text());

  const auto t2v = make_step_batch<double>(batch, c, TaskKind::TextToVideo, 0.0, rng);
  EXPECT_EQ(t2v.inputs.audio.numel(), 0);
  EXPECT_TRUE(t2v.inputs.t_audio.empty());
}

TEST(Loss, PlanWeights) {
  std::mt19937_64 rng(7);
  model::ForwardOutputs<double> preds;
  preds.v_audio = Var<double>::parameter(oracle::random_tensor({2, 3}, rng));
  preds.v_video = Var<double>::parameter(oracle::random_tensor({2, 5}, rng));
  const auto ta = oracle::random_tensor({2, 3}, rng), tv = oracle::random_tensor({2, 5}, rng);
  auto mse = [](const Tensor<double>& a, const Tensor<double>& b) {
    double s = 0;
    for (Index i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(a.numel());
  };
  const auto joint = multitask_loss(preds, ta, tv, dcr::routing_plan(TaskKind::JointAV));
  EXPECT_NEAR(joint.total.value().item(), mse(preds.v_audio.value(), ta) + mse(preds.v_video.value(), tv), 1e-14);
  const auto a2v = multitask_loss(preds, Tensor<double>(), tv, dcr::routing_plan(TaskKind::AudioToVideo));
  EXPECT_NEAR(a2v.total.value().item(), mse(preds.v_video.value(), tv), 1e-14);
  model::ForwardOutputs<double> missing;
  missing.v_video = preds.v_video;
  EXPECT_THROW(multitask_loss(missing, ta, tv, dcr::routing_plan(TaskKind::JointAV)), ContractError);
}

TEST(Adam, MatchesHandFormula) {
  std::mt19937_64 rng(8);
  model::ParamEntry<double> e{"w", Var<double>::parameter(oracle::random_tensor({4}, rng)), model::StreamId::Audio,
                              model::ParamGroup::Base};
  model::ParamEntry<double> f{"c", Var<double>::parameter(oracle::random_tensor({4}, rng)), model::StreamId::Video,
                              model::ParamGroup::Cross};
  TrainConfig tc;
  tc.lr_base = 0.01;
  tc.lr_cca = 0.03;
  Adam<double> opt({e, f}, tc);
  EXPECT_EQ(opt.lr_of(0), 0.01);
  EXPECT_EQ(opt.lr_of(1), 0.03);
  std::vector<double> w(e.var.value().data().begin(), e.var.value().data().end());
  std::vector<double> m(4, 0.0), v(4, 0.0);
  const auto coef = oracle::random_tensor({4}, rng);
  for (int t = 1; t <= 3; ++t) {
    opt.zero_grad();
    backward(sum(add(mul(mul(e.var, e.var), Var<double>::constant(coef)), f.var)));
    for (int k = 0; k < 4; ++k) {
      const double g = 2 * w[k] * coef[k];
      m[k] = 0.9 * m[k] + 0.1 * g;
      v[k] = 0.95 * v[k] + 0.05 * g * g;
      const double mh = m[k] / (1 - std::pow(0.9, t)), vh = v[k] / (1 - std::pow(0.95, t));
      w[k] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
    opt.step();
    for (int k = 0; k < 4; ++k) EXPECT_NEAR(e.var.value()[k], w[k], 1e-12);
  }
  EXPECT_EQ(opt.t, 3);
}

TEST(Trainer, ZeroLearningRateLeavesParametersUnchanged) {
  TrainConfig tc;
  tc.lr_base = tc.lr_cca = 0.0;
  auto tr = tiny_trainer(tc, false);
  const auto before = model::init_params<double>(fixtures::tiny_config(), 1);
  for (int i = 0; i < 4; ++i) tr.step();
  const auto& reg = tr.model().params().registry;
  for (std::size_t i = 0; i < reg.size(); ++i) EXPECT_TRUE(bit_equal(reg[i].var.value(), before.registry[i].var.value()));
}

TEST(Trainer, SameSeedGivesIdenticalRecords) {
  TrainConfig tc;
  tc.seed = 9;
  auto a = tiny_trainer(tc, false), b = tiny_trainer(tc, false);
  for (int i = 0; i < 6; ++i) {
    const auto ra = a.step(), rb = b.step();
    EXPECT_EQ(ra.task, rb.task);
    EXPECT_EQ(ra.loss, rb.loss);
    EXPECT_EQ(ra.ema, rb.ema);
  }
  const auto& pa = a.model().params().registry;
  const auto& pb = b.model().params().registry;
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(bit_equal(pa[i].var.value(), pb[i].var.value()));
}

TEST(Trainer, EmaRecurrencePerTask) {
  TrainConfig tc;
  tc.seed = 10;
  auto tr = tiny_trainer(tc, false);
  std::array<double, 5> ema{};
  std::array<bool, 5> seen{};
  for (int i = 0; i < 40; ++i) {
    const auto r = tr.step();
    const auto k = static_cast<std::size_t>(r.task);
    const double want = seen[k] ? 0.99 * ema[k] + (1.0 - 0.99) * r.loss : r.loss;
    EXPECT_NEAR(r.ema, want, 1e-13 * want);
    ema[k] = r.ema;
    seen[k] = true;
    const auto j = static_cast<std::size_t>(TaskKind::JointAV);
    if (seen[j]) {
      EXPECT_EQ(r.joint_ema, ema[j]);
    } else {
      EXPECT_TRUE(std::isnan(r.joint_ema));
    }
  }
}

TEST(Trainer, ReferenceStreamGetsExactlyZeroGradient) {
  for (auto [task, ref] : {std::pair{TaskKind::AudioToVideo, model::StreamId::Audio},
                           std::pair{TaskKind::VideoToAudio, model::StreamId::Video}}) {
    for (auto variant : {model::Variant::CCL, model::Variant::Gated}) {
      TrainConfig tc;
      tc.probs = only(task);
      auto tr = tiny_trainer(tc, true, variant);
      tr.step();
      int live = 0;
      for (const auto& e : tr.model().params().registry) {
        if (e.stream == ref) {
          EXPECT_TRUE(all_zero(e.var)) << e.name;
        } else {
          live += all_zero(e.var) ? 0 : 1;
        }
      }
      EXPECT_GT(live, 0);
    }
  }
}

TEST(Trainer, JointStepsReachEveryParameter) {
  TrainConfig tc;
  tc.probs = only(TaskKind::JointAV);
  auto tr = tiny_trainer(tc, false);
  const auto& reg = tr.model().params().registry;
  std::vector<bool> hit(reg.size(), false);
  for (int s = 0; s < 5; ++s) {
    tr.step();
    for (std::size_t i = 0; i < reg.size(); ++i) hit[i] = hit[i] || !all_zero(reg[i].var);
  }
  for (std::size_t i = 0; i < reg.size(); ++i) EXPECT_TRUE(hit[i]) << reg[i].name;
}

TEST(Trainer, RejectsMismatchedData) {
  const auto c = fixtures::tiny_config();
  auto d = fixtures::data_for(c);
  d.channels = 3;
  EXPECT_THROW(Trainer<double>(model::init_params<double>(c, 1), TrainConfig{}, d), ContractError);
}
