#include "ccl/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <cmath>
#include <random>
#include <thread>

#include "ccl/kernels.hpp"

namespace ccl::exp {

RunResult train_run(const io::RunConfig& cfg, model::Variant variant, std::uint64_t seed, Index steps,
                    Index log_from, const std::function<void(const train::TrainRecord&)>& on_record) {
  model::ModelConfig mc = cfg.model;
  mc.variant = variant;
  train::TrainConfig tc = cfg.train;
  tc.seed = seed;
  tc.steps = steps;
  synth::DatasetSpec ds = cfg.data;
  ds.seed = cfg.data.seed + seed;
  train::Trainer<float> tr(model::init_params<float>(mc, seed), tc, ds);

  RunResult res;
  res.variant = variant;
  res.seed = seed;
  double ea = 0, ev = 0;
  bool init = false;
  const double d = tc.ema_decay;
  tr.run([&](const train::TrainRecord& r) {
    if (r.task == dcr::TaskKind::JointAV) {
      ea = init ? d * ea + (1.0 - d) * r.loss_audio : r.loss_audio;
      ev = init ? d * ev + (1.0 - d) * r.loss_video : r.loss_video;
      init = true;
    }
    const Index it = r.step + 1;
    if (it >= log_from) res.curve.push_back({it, r.joint_ema, ea, ev});
    if (on_record) on_record(r);
  });
  res.final_joint_ema = tr.state().ema_init[static_cast<std::size_t>(dcr::TaskKind::JointAV)]
                            ? tr.state().ema[static_cast<std::size_t>(dcr::TaskKind::JointAV)]
                            : std::nan("");
  res.params = tr.model().params();
  return res;
}

void run_parallel(std::size_t n_jobs, unsigned threads, const std::function<void(std::size_t)>& job) {
  threads = std::max(1U, std::min<unsigned>(threads, static_cast<unsigned>(n_jobs)));
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      kernels::set_threads(1);
      for (std::size_t i = next++; i < n_jobs; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

LctReport lct_mass_report(const std::vector<cca::AttnMap>& maps, const io::ProbeMasks& masks,
                          const tarp::GridMeta& grid) {
  LctReport rep;
  struct Acc {
    double fg = 0, bg = 0;
    Index nf = 0, nb = 0;
    LctMass done() const {
      return {nf ? fg / static_cast<double>(nf) : 0.0, nb ? bg / static_cast<double>(nb) : 0.0, nf, nb};
    }
  };
  Acc tot[2];
  Index depth = 0;
  for (const auto& m : maps) depth = std::max(depth, m.block + 1);
  std::vector<Acc> per[2] = {std::vector<Acc>(static_cast<std::size_t>(depth)),
                             std::vector<Acc>(static_cast<std::size_t>(depth))};
  const Index hw = grid.frame_tokens();
  for (const auto& m : maps) {
    const int d = static_cast<int>(m.direction);
    const bool a2v = m.direction == cca::Direction::AudioToVideo;
    const Index want_rows = masks.pairs * (a2v ? grid.t_v : grid.t_a);
    const Index want_q = a2v ? hw : 1;
    if (m.rows != want_rows || m.q_len != want_q) {
      throw io::IntegrityError("attention map of block " + std::to_string(m.block) + " (" + cca::direction_name(m.direction) +
                           ") has " + std::to_string(m.rows) + "x" + std::to_string(m.q_len) +
                           " queries; masks imply " + std::to_string(want_rows) + "x" + std::to_string(want_q));
    }
    const std::vector<double> mass = m.lct_mass();
    for (Index r = 0; r < m.rows; ++r)
      for (Index q = 0; q < m.q_len; ++q) {
        // Rows are (sample, frame) for video queries and (sample, token) for audio.
        const bool fg = a2v ? masks.video[static_cast<std::size_t>(r * hw + q)] != 0
                            : masks.audio[static_cast<std::size_t>(r)] != 0;
        const double v = mass[static_cast<std::size_t>(r * m.q_len + q)];
        for (Acc* a : {&tot[d], &per[d][static_cast<std::size_t>(m.block)]}) {
          if (fg) {
            a->fg += v;
            ++a->nf;
          } else {
            a->bg += v;
            ++a->nb;
          }
        }
      }
  }
  rep.a2v = tot[0].done();
  rep.v2a = tot[1].done();
  for (const Acc& a : per[0]) rep.a2v_blocks.push_back(a.done());
  for (const Acc& a : per[1]) rep.v2a_blocks.push_back(a.done());
  return rep;
}

Probe attention_probe(const model::DualStreamModel<float>& m, const synth::DatasetSpec& data, Index pairs, double t,
                      std::uint64_t seed) {
  NoGradGuard ng;
  const model::ModelConfig& c = m.config();
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x9b0eu};
  std::mt19937_64 rng(seq);
  std::vector<synth::AVSample> samples;
  for (Index i = 0; i < pairs; ++i) samples.push_back(synth::generate_pair(data, rng()));
  const synth::Batch batch = synth::make_batch(samples);

  Probe p;
  p.masks.pairs = pairs;
  for (const auto& s : samples) {
    p.masks.audio.insert(p.masks.audio.end(), s.fg_audio_mask.begin(), s.fg_audio_mask.end());
    p.masks.video.insert(p.masks.video.end(), s.fg_video_mask.begin(), s.fg_video_mask.end());
  }
  std::normal_distribution<double> gauss(0.0, 1.0);
  Tensor<float> ea(batch.audio.shape()), ev(batch.video.shape());
  for (float& v : ea.data()) v = static_cast<float>(gauss(rng));
  for (float& v : ev.data()) v = static_cast<float>(gauss(rng));
  const std::vector<double> ts(static_cast<std::size_t>(pairs), t);
  model::ForwardInputs<float> in;
  in.audio = train::flow_interpolate_batch(batch.audio, ea, ts).first;
  in.video = train::flow_interpolate_batch(batch.video, ev, ts).first;
  in.t_audio = ts;
  in.t_video = ts;
  in.text_audio = batch.class_ids;
  in.text_video = batch.class_ids;
  if (c.image_conditioning) {
    const Index hw = c.grid.frame_tokens(), ch = c.signal_channels, sv = c.grid.s_v();
    Tensor<float> ff({pairs, hw, ch});
    for (Index i = 0; i < pairs; ++i)
      for (Index k = 0; k < hw * ch; ++k) ff[i * hw * ch + k] = batch.video[i * sv * ch + k];
    in.first_frame = ff;
  }
  cca::AttnCapture cap;
  m.forward(in, train::plan_for(c.variant, dcr::TaskKind::JointAV), &cap);
  p.maps = std::move(cap.maps);
  return p;
}

SyncResult guided_sync(const model::DualStreamModel<float>& m, const guide::GuidanceConfig& g, Index n,
                       std::uint64_t seed, Index chunk) {
  const model::ModelConfig& c = m.config();
  if (c.image_conditioning) throw ContractError("guided_sync: image-conditioned models need a first frame");
  guide::ModelVelocity vm(m);
  SyncResult res;
  res.sample.audio = Tensor<float>({n, c.grid.t_a, c.signal_channels});
  res.sample.video = Tensor<float>({n, c.grid.s_v(), c.signal_channels});
  const Index na = c.grid.t_a * c.signal_channels, nv = c.grid.s_v() * c.signal_channels;
  for (Index start = 0, k = 0; start < n; start += chunk, ++k) {
    const Index b = std::min(chunk, n - start);
    guide::Condition cond;
    for (Index i = 0; i < b; ++i) cond.class_ids.push_back((start + i) % c.n_classes);
    const guide::SampleShape shape{b, c.grid.t_a, c.grid.s_v(), c.signal_channels};
    const guide::Sample s = guide::euler_sample(vm, cond, g, shape, seed + static_cast<std::uint64_t>(k));
    std::copy(s.audio.data().begin(), s.audio.data().end(), res.sample.audio.ptr() + start * na);
    std::copy(s.video.data().begin(), s.video.data().end(), res.sample.video.ptr() + start * nv);
    for (Index i = 0; i < b; ++i) {
      const Tensor<float> a({c.grid.t_a, c.signal_channels},
                            std::vector<float>(s.audio.ptr() + i * na, s.audio.ptr() + (i + 1) * na));
      const Tensor<float> v({c.grid.t_v, c.grid.h, c.grid.w, c.signal_channels},
                            std::vector<float>(s.video.ptr() + i * nv, s.video.ptr() + (i + 1) * nv));
      res.scores.push_back(synth::sync_score(a, v, c.grid).value);
      res.class_ids.push_back(cond.class_ids[static_cast<std::size_t>(i)]);
    }
  }
  double sum = 0;
  for (double s : res.scores) sum += s;
  res.mean = n > 0 ? sum / static_cast<double>(n) : 0.0;
  return res;
}

}  // namespace ccl::exp
