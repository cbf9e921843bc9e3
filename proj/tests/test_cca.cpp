#include <gtest/gtest.h>

#include <random>

#include "ccl/cca.hpp"
#include "fixtures.hpp"
#include "oracle.hpp"

using namespace ccl;
using namespace ccl::cca;
using V = Var<double>;

namespace {

struct CcaRun {
  CCAOutput<double> out;
  AttnCapture cap;
};

CcaRun run_cca(const fixtures::CcaCase& c, const CCAParams<double>& p, const V& xa, const V& xv,
            const dcr::RoutingPlan& plan, bool full_span = false) {
  const tarp::CrossIndex ix = full_span ? tarp::full_span_index(c.grid)
                                        : tarp::tarp_index(tarp::build_window_map(c.grid), c.grid);
  const auto rope = make_cross_rope<double>(c.grid, c.dims);
  CcaRun r;
  r.out = cca_block_forward(xa, xv, p, c.dims, ix, rope, plan, &r.cap);
  return r;
}

double diff(const V& a, const oracle::Vec& b) {
  if (!a.defined()) return b.empty() ? 0.0 : 1e300;
  return oracle::max_abs(oracle::values(a.value()), b);
}

}  // namespace

TEST(ProjectCrossQkv, ShapesAndLinearity) {
  std::mt19937_64 rng(1);
  const CCADims d{.d_a = 6, .d_v = 10, .heads_a = 1, .heads_v = 1, .n_a = 0, .n_v = 0};
  const auto p = fixtures::random_cca(d, rng);
  const V xa = V::constant(oracle::random_tensor({2, 5, 6}, rng));
  const V xv = V::constant(oracle::random_tensor({2, 7, 10}, rng));
  const auto q = project_cross_qkv(xa, xv, p);
  EXPECT_EQ(q.q_a.shape(), (Shape{2, 5, 6}));
  EXPECT_EQ(q.k_a.shape(), (Shape{2, 5, 10}));
  EXPECT_EQ(q.v_a.shape(), (Shape{2, 5, 10}));
  EXPECT_EQ(q.q_v.shape(), (Shape{2, 7, 10}));
  EXPECT_EQ(q.k_v.shape(), (Shape{2, 7, 6}));
  EXPECT_EQ(q.v_v.shape(), (Shape{2, 7, 6}));
  const auto z = project_cross_qkv(V::constant(Tensor<double>({1, 3, 6})), V::constant(Tensor<double>({1, 2, 10})), p);
  for (double v : z.k_a.value().data()) EXPECT_EQ(v, 0.0);
  for (double v : z.v_v.value().data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(project_cross_qkv(V::constant(Tensor<double>({1, 3, 5})), xv, p), DimensionError);
}

TEST(ProjectCrossQkv, IdentityWeights) {
  const CCADims d{.d_a = 4, .d_v = 4, .heads_a = 1, .heads_v = 1, .n_a = 0, .n_v = 0};
  std::mt19937_64 rng(2);
  auto p = fixtures::random_cca(d, rng);
  Tensor<double> eye({4, 4});
  for (Index i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  for (V* w : {&p.wq_a, &p.wk_a, &p.wv_a, &p.wq_v, &p.wk_v, &p.wv_v}) *w = V::constant(eye);
  const V xa = V::constant(oracle::random_tensor({1, 3, 4}, rng));
  const V xv = V::constant(oracle::random_tensor({1, 2, 4}, rng));
  const auto q = project_cross_qkv(xa, xv, p);
  EXPECT_TRUE(bit_equal(q.q_a.value(), xa.value()));
  EXPECT_TRUE(bit_equal(q.v_a.value(), xa.value()));
  EXPECT_TRUE(bit_equal(q.k_v.value(), xv.value()));
}

TEST(AssembleContext, EmptyBankIsPassThrough) {
  std::mt19937_64 rng(3);
  const V k = V::constant(oracle::random_tensor({4, 12, 8}, rng));
  const V v = V::constant(oracle::random_tensor({4, 12, 8}, rng));
  const V w = V::constant(oracle::random_tensor({8, 8}, rng));
  const V empty = V::constant(Tensor<double>({0, 8}));
  const auto [kk, vv] = assemble_context_kv(k, v, empty, w, w, 4);
  EXPECT_TRUE(bit_equal(kk.value(), k.value()));
  EXPECT_TRUE(bit_equal(vv.value(), v.value()));
}

TEST(AssembleContext, BankRowsFollowLatentsAndRepeat) {
  std::mt19937_64 rng(4);
  const Index rows = 5, d = 6;
  const V k = V::constant(oracle::random_tensor({rows, 12, d}, rng));
  const V bank = V::constant(oracle::random_tensor({8, d}, rng));
  const V w = V::constant(oracle::random_tensor({d, d}, rng));
  const auto [kk, vv] = assemble_context_kv(k, k, bank, w, w, rows);
  ASSERT_EQ(kk.shape(), (Shape{rows, 20, d}));
  const auto& x = kk.value();
  for (Index r = 0; r < rows; ++r) {
    for (Index j = 0; j < 12; ++j)
      for (Index e = 0; e < d; ++e) EXPECT_EQ(x[(r * 20 + j) * d + e], k.value()[(r * 12 + j) * d + e]);
    for (Index j = 12; j < 20; ++j)
      for (Index e = 0; e < d; ++e) EXPECT_EQ(x[(r * 20 + j) * d + e], x[j * d + e]);
  }
  EXPECT_THROW(assemble_context_kv(k, k, bank, w, w, rows + 1), DimensionError);
}

TEST(AssembleContext, BankKeysCarryNoRotary) {
  // Rotating the latent keys to other positions leaves the bank rows intact.
  std::mt19937_64 rng(5);
  const V k = V::constant(oracle::random_tensor({1, 4, 4}, rng));
  const V bank = V::constant(oracle::random_tensor({3, 4}, rng));
  const V w = V::constant(oracle::random_tensor({4, 4}, rng));
  const std::vector<double> p1 = {0, 1, 2, 3}, p2 = {7.5, 8.5, 9.5, 10.5};
  const auto a = assemble_context_kv(tarp::apply_rope(k, std::span<const double>(p1)), k, bank, w, w, 1).first;
  const auto b = assemble_context_kv(tarp::apply_rope(k, std::span<const double>(p2)), k, bank, w, w, 1).first;
  for (Index j = 4; j < 7; ++j)
    for (Index e = 0; e < 4; ++e) EXPECT_EQ(a.value()[j * 4 + e], b.value()[j * 4 + e]);
}

TEST(ScaledAttention, SingleKeyReturnsItsValue) {
  std::mt19937_64 rng(6);
  const V q = V::constant(oracle::random_tensor({2, 3, 4}, rng));
  const V k = V::constant(oracle::random_tensor({2, 1, 4}, rng));
  const V v = V::constant(oracle::random_tensor({2, 1, 4}, rng));
  const V o = scaled_attention(q, k, v, 2);
  for (Index r = 0; r < 2; ++r)
    for (Index i = 0; i < 3; ++i)
      for (Index e = 0; e < 4; ++e) EXPECT_NEAR(o.value()[(r * 3 + i) * 4 + e], v.value()[r * 4 + e], 1e-15);
}

TEST(ScaledAttention, EqualLogitsAverageTheValues) {
  std::mt19937_64 rng(7);
  const V q = V::constant(Tensor<double>({1, 1, 2}, {1.0, 0.0}));
  const V k = V::constant(Tensor<double>({1, 3, 2}, {0, 1, 0, -2, 0, 5}));
  const V v = V::constant(oracle::random_tensor({1, 3, 2}, rng));
  const V o = scaled_attention(q, k, v, 1);
  for (Index e = 0; e < 2; ++e) {
    const double m = (v.value()[e] + v.value()[2 + e] + v.value()[4 + e]) / 3.0;
    EXPECT_NEAR(o.value()[e], m, 1e-15);
  }
}

TEST(ScaledAttention, MatchesExplicitOracleAndRowsSumToOne) {
  std::mt19937_64 rng(8);
  const Index R = 3, Lq = 4, Lk = 6, D = 5;
  const V q = V::constant(oracle::random_tensor({R, Lq, D}, rng));
  const V k = V::constant(oracle::random_tensor({R, Lk, D}, rng));
  const V v = V::constant(oracle::random_tensor({R, Lk, D}, rng));
  std::vector<float> probs;
  const V o = scaled_attention(q, k, v, 1, &probs);
  ASSERT_EQ(probs.size(), static_cast<std::size_t>(R * Lq * Lk));
  for (Index r = 0; r < R; ++r) {
    const auto qv = oracle::values(q.value()), kv = oracle::values(k.value()), vv = oracle::values(v.value());
    for (Index i = 0; i < Lq; ++i) {
      std::vector<double> logit(Lk);
      double mx = -1e300;
      for (Index j = 0; j < Lk; ++j) {
        double s = 0;
        for (Index e = 0; e < D; ++e) s += qv[(r * Lq + i) * D + e] * kv[(r * Lk + j) * D + e];
        logit[j] = s / std::sqrt(5.0);
        mx = std::max(mx, logit[j]);
      }
      double z = 0;
      for (double& l : logit) z += (l = std::exp(l - mx));
      double psum = 0;
      for (Index e = 0; e < D; ++e) {
        double acc = 0;
        for (Index j = 0; j < Lk; ++j) acc += logit[j] / z * vv[(r * Lk + j) * D + e];
        EXPECT_NEAR(o.value()[(r * Lq + i) * D + e], acc, 1e-6);
      }
      for (Index j = 0; j < Lk; ++j) psum += probs[(r * Lq + i) * Lk + j];
      EXPECT_NEAR(psum, 1.0, 1e-6);
    }
  }
  EXPECT_THROW(scaled_attention(q, k, v, 2), ContractError);
}

TEST(CcaBlock, PartitionedEqualsDenseMaskedOracle) {
  std::mt19937_64 rng(9);
  const auto plan = dcr::routing_plan(dcr::TaskKind::JointAV);
  for (int trial = 0; trial < 20; ++trial) {
    const auto c = fixtures::random_case(rng);
    const auto p = fixtures::random_cca(c.dims, rng);
    const V xa = V::constant(oracle::random_tensor({c.batch, c.grid.t_a, c.dims.d_a}, rng));
    const V xv = V::constant(oracle::random_tensor({c.batch, c.grid.s_v(), c.dims.d_v}, rng));
    const CcaRun r = run_cca(c, p, xa, xv, plan);
    const auto want = oracle::dense_cca(oracle::values(xa.value()), oracle::values(xv.value()), c.batch, c.grid, p,
                                        c.dims, plan);
    EXPECT_LT(diff(r.out.delta_a, want.delta_a), 1e-5) << "trial " << trial;
    EXPECT_LT(diff(r.out.delta_v, want.delta_v), 1e-5) << "trial " << trial;
  }
}

TEST(CcaBlock, FullSpanWithoutBanksIsVanillaCrossAttention) {
  std::mt19937_64 rng(10);
  const auto plan = dcr::routing_plan(dcr::TaskKind::JointAV);
  for (int trial = 0; trial < 5; ++trial) {
    auto c = fixtures::random_case(rng);
    c.dims.n_a = c.dims.n_v = 0;
    const auto p = fixtures::random_cca(c.dims, rng);
    const V xa = V::constant(oracle::random_tensor({c.batch, c.grid.t_a, c.dims.d_a}, rng));
    const V xv = V::constant(oracle::random_tensor({c.batch, c.grid.s_v(), c.dims.d_v}, rng));
    const CcaRun r = run_cca(c, p, xa, xv, plan, true);
    const auto want = oracle::dense_cca(oracle::values(xa.value()), oracle::values(xv.value()), c.batch, c.grid, p,
                                        c.dims, plan, true);
    EXPECT_LT(diff(r.out.delta_a, want.delta_a), 1e-6);
    EXPECT_LT(diff(r.out.delta_v, want.delta_v), 1e-6);
  }
}

TEST(CcaBlock, BankOnlyRoutingIgnoresOtherStream) {
  std::mt19937_64 rng(11);
  const fixtures::CcaCase c{.grid = {.t_a = 8, .t_v = 2, .h = 2, .w = 2},
                            .dims = {.d_a = 4, .d_v = 8, .heads_a = 2, .heads_v = 2, .n_a = 3, .n_v = 5},
                            .batch = 1};
  const auto p = fixtures::random_cca(c.dims, rng);
  auto plan = dcr::routing_plan(dcr::TaskKind::JointAV);
  plan.audio.use_cross_latent = plan.video.use_cross_latent = false;
  const V xa = V::constant(oracle::random_tensor({1, 8, 4}, rng));
  const V xv = V::constant(oracle::random_tensor({1, 8, 8}, rng));
  const V xa2 = V::constant(oracle::random_tensor({1, 8, 4}, rng));
  const V xv2 = V::constant(oracle::random_tensor({1, 8, 8}, rng));
  const CcaRun a = run_cca(c, p, xa, xv, plan);
  const CcaRun b = run_cca(c, p, xa2, xv, plan);
  const CcaRun d = run_cca(c, p, xa, xv2, plan);
  EXPECT_TRUE(bit_equal(a.out.delta_v.value(), b.out.delta_v.value()));
  EXPECT_TRUE(bit_equal(a.out.delta_a.value(), d.out.delta_a.value()));
}

TEST(CcaBlock, GlobalTemporalShiftLeavesOutputUnchanged) {
  std::mt19937_64 rng(12);
  const fixtures::CcaCase c{.grid = {.t_a = 12, .t_v = 3, .h = 1, .w = 2},
                            .dims = {.d_a = 8, .d_v = 8, .heads_a = 2, .heads_v = 2, .n_a = 3, .n_v = 4},
                            .batch = 1};
  const auto p = fixtures::random_cca(c.dims, rng);
  const V xa = V::constant(oracle::random_tensor({1, 12, 8}, rng));
  const V xv = V::constant(oracle::random_tensor({1, 6, 8}, rng));
  const auto plan = dcr::routing_plan(dcr::TaskKind::JointAV);
  const auto ix = tarp::tarp_index(tarp::build_window_map(c.grid), c.grid);
  auto shifted = [&](double delta) {
    auto a = tarp::audio_rope_positions(c.grid);
    auto v = tarp::video_frame_positions(c.grid);
    for (double& x : a) x += delta;
    for (double& x : v) x += delta;
    CrossRope<double> r;
    r.q_v = tarp::rope_table<double>(v, 4);
    r.k_a = tarp::rope_table<double>(a, 4);
    r.q_a = tarp::rope_table<double>(a, 4);
    r.k_v = tarp::rope_table<double>(v, 4);
    return cca_block_forward(xa, xv, p, c.dims, ix, r, plan);
  };
  const auto base = shifted(0.0);
  for (double delta : {0.37, 5.0, 123.25}) {
    const auto s = shifted(delta);
    EXPECT_LT(max_abs_diff(base.delta_a.value(), s.delta_a.value()), 1e-5);
    EXPECT_LT(max_abs_diff(base.delta_v.value(), s.delta_v.value()), 1e-5);
  }
}

TEST(CcaBlock, CapturedMapsHaveDocumentedShape) {
  std::mt19937_64 rng(13);
  const fixtures::CcaCase c{.grid = {.t_a = 16, .t_v = 4, .h = 2, .w = 2},
                            .dims = {.d_a = 4, .d_v = 8, .heads_a = 2, .heads_v = 2, .n_a = 8, .n_v = 5},
                            .batch = 2};
  const auto p = fixtures::random_cca(c.dims, rng);
  const V xa = V::constant(oracle::random_tensor({2, 16, 4}, rng));
  const V xv = V::constant(oracle::random_tensor({2, 16, 8}, rng));
  const CcaRun r = run_cca(c, p, xa, xv, dcr::routing_plan(dcr::TaskKind::JointAV));
  ASSERT_EQ(r.cap.maps.size(), 2U);
  const AttnMap& a2v = r.cap.maps[0];
  EXPECT_EQ(a2v.direction, Direction::AudioToVideo);
  EXPECT_EQ(a2v.rows, 8);
  EXPECT_EQ(a2v.q_len, 4);
  EXPECT_EQ(a2v.kv_len, 12 + 8);
  EXPECT_EQ(a2v.n_lct, 8);
  const AttnMap& v2a = r.cap.maps[1];
  EXPECT_EQ(v2a.rows, 32);
  EXPECT_EQ(v2a.q_len, 1);
  EXPECT_EQ(v2a.kv_len, 4 + 5);
  for (const AttnMap* m : {&a2v, &v2a})
    for (Index row = 0; row < m->rows * m->q_len; ++row) {
      double s = 0;
      for (Index j = 0; j < m->kv_len; ++j) s += m->data[row * m->kv_len + j];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  const auto mass = a2v.lct_mass();
  for (double m : mass) {
    EXPECT_GE(m, 0.0);
    EXPECT_LE(m, 1.0 + 1e-6);
  }
}
