#include <gtest/gtest.h>

#include <random>

#include "ccl/dcr.hpp"
#include "ccl/model.hpp"
#include "fixtures.hpp"
#include "oracle.hpp"

using namespace ccl;
using namespace ccl::dcr;
using V = Var<double>;

TEST(RoutingPlan, DocumentedTable) {
  const StreamRoute lct_only{.active = true, .use_cross_latent = false, .use_lct = true, .is_reference = false,
                             .loss_weight = 1.0F};
  const StreamRoute full{.active = true, .use_cross_latent = true, .use_lct = true, .is_reference = false,
                         .loss_weight = 1.0F};
  const StreamRoute reference{.active = true, .use_cross_latent = false, .use_lct = true, .is_reference = true,
                              .loss_weight = 0.0F};
  const auto a2v = routing_plan(TaskKind::AudioToVideo);
  EXPECT_EQ(a2v.audio, reference);
  EXPECT_EQ(a2v.video, full);
  const auto v2a = routing_plan(TaskKind::VideoToAudio);
  EXPECT_EQ(v2a.video, reference);
  EXPECT_EQ(v2a.audio, full);
  const auto joint = routing_plan(TaskKind::JointAV);
  EXPECT_EQ(joint.audio, full);
  EXPECT_EQ(joint.video, full);
  EXPECT_TRUE(joint.shared_timestep);
  const auto t2v = routing_plan(TaskKind::TextToVideo);
  EXPECT_EQ(t2v.video, lct_only);
  EXPECT_FALSE(t2v.audio.active);
  const auto t2a = routing_plan(TaskKind::TextToAudio);
  EXPECT_EQ(t2a.audio, lct_only);
  EXPECT_FALSE(t2a.video.active);
}

TEST(RoutingPlan, Invariants) {
  for (TaskKind t : kAllTasks) {
    const auto p = routing_plan(t);
    EXPECT_EQ(p.task, t);
    for (const StreamRoute* r : {&p.audio, &p.video}) {
      EXPECT_TRUE(r->use_lct);
      if (r->is_reference) {
        EXPECT_EQ(r->loss_weight, 0.0F);
      }
    }
    EXPECT_EQ(p.shared_timestep, t == TaskKind::JointAV);
    EXPECT_EQ(parse_task(task_name(t)), t);
  }
  EXPECT_FALSE(parse_task("x2y").has_value());
}

TEST(GatedPlan, GateValues) {
  EXPECT_EQ(gated_baseline_plan(TaskKind::TextToVideo).audio, 0);
  EXPECT_EQ(gated_baseline_plan(TaskKind::TextToVideo).video, 0);
  EXPECT_EQ(gated_baseline_plan(TaskKind::JointAV).audio, 1);
  EXPECT_EQ(gated_baseline_plan(TaskKind::JointAV).video, 1);
  EXPECT_EQ(gated_baseline_plan(TaskKind::AudioToVideo).video, 1);
  EXPECT_EQ(gated_baseline_plan(TaskKind::AudioToVideo).audio, 0);
  EXPECT_EQ(gated_baseline_plan(TaskKind::VideoToAudio).audio, 1);
  EXPECT_EQ(gated_baseline_plan(TaskKind::VideoToAudio).video, 0);
  for (TaskKind t : kAllTasks) {
    const auto g = gated_baseline_plan(t);
    const auto p = gated_routing(t);
    const auto c = routing_plan(t);
    EXPECT_EQ(p.audio.use_cross_latent, g.audio == 1);
    EXPECT_EQ(p.video.use_cross_latent, g.video == 1);
    EXPECT_FALSE(p.audio.use_lct);
    EXPECT_FALSE(p.video.use_lct);
    EXPECT_EQ(p.audio.active, c.audio.active);
    EXPECT_EQ(p.audio.is_reference, c.audio.is_reference);
    EXPECT_EQ(p.video.loss_weight, c.video.loss_weight);
  }
}

TEST(Routing, EqualsMaskedJointComputationForEveryTask) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 6; ++trial) {
    const auto c = fixtures::random_case(rng);
    const auto p = fixtures::random_cca(c.dims, rng);
    const V xa = V::constant(oracle::random_tensor({c.batch, c.grid.t_a, c.dims.d_a}, rng));
    const V xv = V::constant(oracle::random_tensor({c.batch, c.grid.s_v(), c.dims.d_v}, rng));
    const auto ix = tarp::tarp_index(tarp::build_window_map(c.grid), c.grid);
    const auto rope = cca::make_cross_rope<double>(c.grid, c.dims);
    for (TaskKind t : kAllTasks) {
      const auto plan = routing_plan(t);
      const auto got = cca::cca_block_forward(plan.audio.active ? xa : V(), plan.video.active ? xv : V(), p, c.dims,
                                              ix, rope, plan);
      const auto want = oracle::dense_cca(oracle::values(xa.value()), oracle::values(xv.value()), c.batch, c.grid,
                                          p, c.dims, plan);
      for (auto [v, w] : {std::pair{&got.delta_a, &want.delta_a}, std::pair{&got.delta_v, &want.delta_v}}) {
        ASSERT_EQ(v->defined(), !w->empty()) << task_name(t);
        if (v->defined()) {
          EXPECT_LT(oracle::max_abs(oracle::values(v->value()), *w), 1e-5) << task_name(t);
        }
      }
    }
  }
}

TEST(GatedBaseline, ClosedGateBitEqualsBlockWithoutCrossTerm) {
  const auto cfg = fixtures::tiny_config(model::Variant::Gated);
  auto params = model::init_params<double>(cfg, 3);
  fixtures::randomise(params, 4);
  const model::DualStreamModel<double> m(std::move(params));
  std::mt19937_64 rng(5);
  auto in = fixtures::random_inputs(cfg, 2, rng);

  const auto t2v = m.forward(in, gated_routing(TaskKind::TextToVideo));
  EXPECT_FALSE(t2v.v_audio.defined());
  EXPECT_TRUE(bit_equal(t2v.v_video.value(), fixtures::without_cross(m, model::StreamId::Video, in)));
  const auto t2a = m.forward(in, gated_routing(TaskKind::TextToAudio));
  EXPECT_TRUE(bit_equal(t2a.v_audio.value(), fixtures::without_cross(m, model::StreamId::Audio, in)));

  // a2v: the audio gate is closed, so the reference audio stream ignores video.
  auto ref = in;
  std::fill(ref.t_audio.begin(), ref.t_audio.end(), 0.0);
  const auto a2v = m.forward(ref, gated_routing(TaskKind::AudioToVideo));
  EXPECT_TRUE(bit_equal(a2v.v_audio.value(), fixtures::without_cross(m, model::StreamId::Audio, ref)));
  auto ref2 = ref;
  ref2.video = oracle::random_tensor(ref.video.shape(), rng);
  const auto a2v2 = m.forward(ref2, gated_routing(TaskKind::AudioToVideo));
  EXPECT_TRUE(bit_equal(a2v.v_audio.value(), a2v2.v_audio.value()));
  EXPECT_FALSE(bit_equal(a2v.v_video.value(), a2v2.v_video.value()));

  // open gate: the cross term changes the output
  const auto joint = m.forward(in, gated_routing(TaskKind::JointAV));
  EXPECT_FALSE(bit_equal(joint.v_video.value(), fixtures::without_cross(m, model::StreamId::Video, in)));
}

TEST(GatedBaseline, ParityWithBanklessFullSpanContextModel) {
  auto ccl_cfg = fixtures::tiny_config(model::Variant::CCL);
  ccl_cfg.audio.n_lct = ccl_cfg.video.n_lct = 0;
  ccl_cfg.window = model::WindowMode::FullSpan;
  auto gated_cfg = ccl_cfg;
  gated_cfg.variant = model::Variant::Gated;
  auto pc = model::init_params<double>(ccl_cfg, 7);
  auto pg = model::init_params<double>(gated_cfg, 7);
  fixtures::randomise(pc, 8);
  fixtures::randomise(pg, 8);
  ASSERT_EQ(pc.registry.size(), pg.registry.size());
  const model::DualStreamModel<double> mc(std::move(pc)), mg(std::move(pg));
  std::mt19937_64 rng(9);
  const auto in = fixtures::random_inputs(ccl_cfg, 2, rng);
  const auto a = mc.forward(in, routing_plan(TaskKind::JointAV));
  const auto b = mg.forward(in, gated_routing(TaskKind::JointAV));
  EXPECT_LT(max_abs_diff(a.v_audio.value(), b.v_audio.value()), 1e-6);
  EXPECT_LT(max_abs_diff(a.v_video.value(), b.v_video.value()), 1e-6);
}
