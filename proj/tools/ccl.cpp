// Command-line entry point: train, sample, bench, eval-attn, eval-sync.
// Exit codes: 0 ok, 2 usage/config, 3 numerical failure.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>

#include "CLI11.hpp"
#include "ccl/experiments.hpp"
#include "ccl/io.hpp"

namespace fs = std::filesystem;
using namespace ccl;
using io::Json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

io::RunConfig load_config(const std::string& path) {
  io::RunConfig c;
  if (!path.empty()) {
    c = io::load_run_config(path);
  } else {
    c.finalize();
  }
  return c;
}

std::string ckpt_name(Index step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%06lld", static_cast<long long>(step));
  return buf;
}

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<Index> steps;
  std::string variant;
  std::string resume;
  std::string out;
};

int cmd_train(const TrainArgs& a) {
  io::RunConfig cfg;
  std::optional<io::CheckpointData> ck;
  if (!a.resume.empty()) {
    ck = io::load_checkpoint(a.resume);
    cfg = ck->config;
  } else {
    cfg = load_config(a.config);
  }
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.steps) cfg.train.steps = *a.steps;
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (!a.variant.empty()) {
    const auto v = model::parse_variant(a.variant);
    if (!v) throw io::ConfigError("--variant must be ccl or gated");
    if (ck && *v != cfg.model.variant) throw io::ConfigError("--variant differs from the checkpoint's variant");
    cfg.model.variant = *v;
  }
  cfg.finalize();

  const fs::path out = cfg.out_dir;
  fs::create_directories(out);
  io::write_json(out / "config.json", io::to_json(cfg));

  train::Trainer<float> tr(ck ? ck->params : model::init_params<float>(cfg.model, cfg.train.seed), cfg.train,
                           cfg.data);
  if (ck) io::restore_trainer(tr, *ck);
  std::ofstream log(out / "train_log.jsonl", ck ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + (out / "train_log.jsonl").string());

  std::cout << "training " << model::variant_name(cfg.model.variant) << " ("
            << tr.model().params().parameter_count() << " parameters) from step " << tr.state().step << " to "
            << cfg.train.steps << "\n";
  const auto t0 = std::chrono::steady_clock::now();
  tr.run([&](const train::TrainRecord& r) {
    log << io::record_json(r).dump() << "\n";
    const Index done = r.step + 1;
    if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.train.steps) {
      log.flush();
      io::save_checkpoint(out / ckpt_name(done), cfg, tr.model().params(), &tr.optimizer(), tr.state());
    }
    if (done % 100 == 0 || done == cfg.train.steps) {
      std::cout << "step " << done << " task " << dcr::task_name(r.task) << " loss " << r.loss << " joint_ema "
                << r.joint_ema << "\n";
    }
  });
  log.flush();
  io::save_checkpoint(out / "final", cfg, tr.model().params(), &tr.optimizer(), tr.state());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "wrote " << (out / "final").string() << " (" << secs << " s)\n";
  return 0;
}

struct SampleArgs {
  std::string checkpoint;
  std::string mode;
  std::optional<double> s_text;
  std::optional<double> s_m;
  std::optional<Index> steps;
  Index cls = 0;
  Index count = 1;
  std::uint64_t seed = 0;
  std::string out = "sample";
  std::string dump_attn;
  Index probe_pairs = 8;
};

int cmd_sample(const SampleArgs& a) {
  const io::CheckpointData ck = io::load_checkpoint(a.checkpoint);
  guide::GuidanceConfig g = ck.config.guidance;
  if (!a.mode.empty()) {
    const auto m = guide::parse_mode(a.mode);
    if (!m) throw io::ConfigError("unknown --mode " + a.mode + " (text|none|ucg2|ucg3|mmcfg|synccfg)");
    g.mode = *m;
  }
  if (a.s_text) g.scales.s_text = *a.s_text;
  if (a.s_m) g.scales.s_m = *a.s_m;
  if (a.steps) g.steps = *a.steps;
  try {
    g.validate();
  } catch (const ContractError& e) {
    throw io::ConfigError(e.what());
  }
  const model::ModelConfig& mc = ck.config.model;
  if (a.cls < 0 || a.cls >= mc.n_classes) throw io::ConfigError("--class must be in [0, n_classes)");
  if (a.count < 1) throw io::ConfigError("--count must be >= 1");
  if (mc.image_conditioning) throw io::ConfigError("sampling image-conditioned models is not supported");

  const model::DualStreamModel<float> model(ck.params);
  guide::ModelVelocity vm(model);
  guide::Condition cond;
  cond.class_ids.assign(static_cast<std::size_t>(a.count), a.cls);
  const guide::SampleShape shape{a.count, mc.grid.t_a, mc.grid.s_v(), mc.signal_channels};
  const guide::Sample s = guide::euler_sample(vm, cond, g, shape, a.seed);

  io::SampleMeta meta;
  meta.grid = mc.grid;
  meta.channels = mc.signal_channels;
  meta.class_ids = cond.class_ids;
  const Index na = mc.grid.t_a * mc.signal_channels, nv = mc.grid.s_v() * mc.signal_channels;
  for (Index i = 0; i < a.count; ++i) {
    const Tensor<float> au({mc.grid.t_a, mc.signal_channels},
                           std::vector<float>(s.audio.ptr() + i * na, s.audio.ptr() + (i + 1) * na));
    const Tensor<float> vi({mc.grid.t_v, mc.grid.h, mc.grid.w, mc.signal_channels},
                           std::vector<float>(s.video.ptr() + i * nv, s.video.ptr() + (i + 1) * nv));
    meta.sync.push_back(synth::sync_score(au, vi, mc.grid).value);
  }
  meta.extra = Json{{"mode", guide::mode_name(g.mode)},
                    {"s_text", g.scales.s_text},
                    {"s_m", g.scales.s_m},
                    {"steps", g.steps},
                    {"seed", a.seed},
                    {"checkpoint", a.checkpoint}};
  const fs::path out = a.out;
  io::write_sample(out, s, meta);
  for (std::size_t i = 0; i < meta.sync.size(); ++i) std::cout << "sync_score[" << i << "] " << meta.sync[i] << "\n";

  if (!a.dump_attn.empty()) {
    const exp::Probe p = exp::attention_probe(model, ck.config.data, a.probe_pairs, exp::kProbeTime, a.seed);
    const fs::path dir = a.dump_attn;
    fs::create_directories(dir);
    for (const auto& m : p.maps) io::write_attn(dir / io::attn_file_name(m), m);
    io::write_masks(out, p.masks, mc.grid);
    std::cout << "wrote " << p.maps.size() << " attention maps to " << dir.string() << "\n";
  }
  return 0;
}

int cmd_eval_attn(const std::string& attn_dir, const std::string& sample_dir) {
  tarp::GridMeta grid;
  io::ProbeMasks masks;
  try {
    masks = io::read_masks(sample_dir, &grid);
  } catch (const io::IntegrityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  const auto maps = io::read_attn_dir(attn_dir);
  if (maps.empty()) {
    std::cerr << "error: no attention maps in " << attn_dir << "\n";
    return kExitUsage;
  }
  const exp::LctReport r = exp::lct_mass_report(maps, masks, grid);
  auto line = [](const char* name, const exp::LctMass& m) {
    std::cout << name << " fg " << m.fg << " (" << m.n_fg << ") bg " << m.bg << " (" << m.n_bg << ") bg>fg "
              << (m.bg > m.fg ? "yes" : "no") << "\n";
  };
  for (std::size_t b = 0; b < r.a2v_blocks.size(); ++b) {
    std::cout << "block " << b << "\n";
    line("  a2v", r.a2v_blocks[b]);
    line("  v2a", r.v2a_blocks[b]);
  }
  std::cout << "all blocks\n";
  line("  a2v", r.a2v);
  line("  v2a", r.v2a);
  std::cout << "background exceeds foreground in both directions: " << (r.bg_exceeds_fg() ? "yes" : "no") << "\n";
  return 0;
}

int cmd_eval_sync(const std::string& dir) {
  const Json j = io::read_json(fs::path(dir) / "sample.json");
  tarp::GridMeta g;
  g.t_a = j.at("grid").at("t_a");
  g.t_v = j.at("grid").at("t_v");
  g.h = j.at("grid").at("h");
  g.w = j.at("grid").at("w");
  const Index ch = j.at("channels");
  const auto a = io::read_f32(fs::path(dir) / "audio.f32");
  const auto v = io::read_f32(fs::path(dir) / "video.f32");
  const Index na = g.t_a * ch, nv = g.s_v() * ch;
  if (na == 0 || a.size() % static_cast<std::size_t>(na) != 0 ||
      a.size() / static_cast<std::size_t>(na) * static_cast<std::size_t>(nv) != v.size()) {
    throw io::IntegrityError("sample arrays do not match sample.json");
  }
  const Index n = static_cast<Index>(a.size()) / na;
  double sum = 0;
  for (Index i = 0; i < n; ++i) {
    const Tensor<float> au({g.t_a, ch}, std::vector<float>(a.begin() + i * na, a.begin() + (i + 1) * na));
    const Tensor<float> vi({g.t_v, g.h, g.w, ch}, std::vector<float>(v.begin() + i * nv, v.begin() + (i + 1) * nv));
    const synth::SyncScore s = synth::sync_score(au, vi, g);
    sum += s.value;
    std::cout << "sync_score[" << i << "] " << s.value << (s.degenerate ? " (zero variance)" : "") << "\n";
  }
  std::cout << "mean " << sum / static_cast<double>(n) << "\n";
  return 0;
}

struct BenchArgs {
  std::string config;
  Index seeds = 5;
  std::optional<Index> steps;
  unsigned jobs = 0;
  std::string out;
};

int cmd_bench(const BenchArgs& a) {
  io::RunConfig cfg = load_config(a.config);
  if (a.steps) cfg.train.steps = *a.steps;
  if (!a.out.empty()) cfg.out_dir = a.out;
  cfg.finalize();
  if (a.seeds < 1) throw io::ConfigError("--seeds must be >= 1");
  if (cfg.train.steps < 100) throw io::ConfigError("bench needs at least 100 steps (curves start at step 100)");
  const fs::path out = fs::path(cfg.out_dir) / "bench";
  fs::create_directories(out);
  io::write_json(out / "config.json", io::to_json(cfg));

  const std::size_t n = static_cast<std::size_t>(a.seeds) * 2;
  std::vector<exp::RunResult> results(n);
  std::mutex mu;
  const unsigned jobs = a.jobs ? a.jobs : std::max(1U, std::thread::hardware_concurrency());
  exp::run_parallel(n, jobs, [&](std::size_t i) {
    const auto variant = i % 2 == 0 ? model::Variant::CCL : model::Variant::Gated;
    const auto seed = static_cast<std::uint64_t>(i / 2);
    results[i] = exp::train_run(cfg, variant, seed, cfg.train.steps);
    std::lock_guard<std::mutex> lk(mu);
    std::cout << model::variant_name(variant) << " seed " << seed << " final joint_ema "
              << results[i].final_joint_ema << std::endl;
  });

  std::ofstream csv(out / "curves.csv", std::ios::trunc);
  csv << "variant,seed,step,joint_ema,joint_audio_ema,joint_video_ema\n";
  csv.precision(9);
  for (const auto& r : results)
    for (const auto& p : r.curve) {
      csv << model::variant_name(r.variant) << "," << r.seed << "," << p.step << "," << p.joint_ema << ","
          << p.joint_audio_ema << "," << p.joint_video_ema << "\n";
    }
  Json table = Json::array();
  Index wins = 0;
  std::cout << "seed  ccl_final  gated_final  ccl_audio  ccl_video  gated_audio  gated_video\n";
  for (Index s = 0; s < a.seeds; ++s) {
    const auto& c = results[static_cast<std::size_t>(2 * s)];
    const auto& g = results[static_cast<std::size_t>(2 * s + 1)];
    const bool win = c.final_joint_ema <= g.final_joint_ema;
    wins += win ? 1 : 0;
    const auto& cl = c.curve.back();
    const auto& gl = g.curve.back();
    table.push_back(Json{{"seed", s},
                         {"ccl", c.final_joint_ema},
                         {"gated", g.final_joint_ema},
                         {"ccl_audio", cl.joint_audio_ema},
                         {"ccl_video", cl.joint_video_ema},
                         {"gated_audio", gl.joint_audio_ema},
                         {"gated_video", gl.joint_video_ema},
                         {"ccl_wins", win}});
    std::printf("%4lld  %9.5f  %11.5f  %9.5f  %9.5f  %11.5f  %11.5f\n", static_cast<long long>(s), c.final_joint_ema,
                g.final_joint_ema, cl.joint_audio_ema, cl.joint_video_ema, gl.joint_audio_ema, gl.joint_video_ema);
  }
  const double rate = static_cast<double>(wins) / static_cast<double>(a.seeds);
  io::write_json(out / "report.json", Json{{"steps", cfg.train.steps},
                                           {"seeds", a.seeds},
                                           {"points_per_curve", cfg.train.steps - 99},
                                           {"final", table},
                                           {"ccl_wins", wins},
                                           {"win_rate", rate}});
  std::cout << "ccl win rate " << wins << "/" << a.seeds << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-stream audio/video flow model: training, sampling and analysis"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model and write checkpoints");
  train->add_option("--config", ta.config, "JSON run config (defaults when omitted)");
  train->add_option("--seed", ta.seed, "Training seed");
  train->add_option("--steps", ta.steps, "Total number of steps");
  train->add_option("--variant", ta.variant, "ccl or gated");
  train->add_option("--resume", ta.resume, "Checkpoint directory to continue from");
  train->add_option("--out", ta.out, "Output directory (overrides out_dir)");

  SampleArgs sa;
  auto* sample = app.add_subcommand("sample", "Draw guided samples from a checkpoint");
  sample->add_option("--checkpoint", sa.checkpoint, "Checkpoint directory")->required();
  sample->add_option("--mode", sa.mode, "text|none|ucg2|ucg3|mmcfg|synccfg");
  sample->add_option("--s-text", sa.s_text, "Text guidance scale");
  sample->add_option("--s-m", sa.s_m, "Cross-modal guidance scale");
  sample->add_option("--steps", sa.steps, "Sampler steps");
  sample->add_option("--class", sa.cls, "Class id to condition on");
  sample->add_option("--count", sa.count, "Number of samples");
  sample->add_option("--seed", sa.seed, "Noise seed");
  sample->add_option("--out", sa.out, "Sample directory");
  sample->add_option("--dump-attn", sa.dump_attn, "Also write attention maps of a probe forward here");
  sample->add_option("--probe-pairs", sa.probe_pairs, "Dataset pairs in the attention probe");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Paired-seed CCL vs gated training comparison");
  bench->add_option("--config", ba.config, "JSON run config");
  bench->add_option("--seeds", ba.seeds, "Number of seeds");
  bench->add_option("--steps", ba.steps, "Steps per run");
  bench->add_option("--jobs", ba.jobs, "Worker threads (default: hardware threads)");
  bench->add_option("--out", ba.out, "Output directory (overrides out_dir)");

  std::string attn_dir, sample_dir;
  auto* eval_attn = app.add_subcommand("eval-attn", "Foreground/background attention mass on context tokens");
  eval_attn->add_option("attn_dir", attn_dir)->required();
  eval_attn->add_option("sample_dir", sample_dir)->required();

  std::string sync_dir;
  auto* eval_sync = app.add_subcommand("eval-sync", "Sync score of every sample in a sample directory");
  eval_sync->add_option("sample_dir", sync_dir)->required();

  auto* show = app.add_subcommand("config", "Print the default run config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train) return cmd_train(ta);
    if (*sample) return cmd_sample(sa);
    if (*bench) return cmd_bench(ba);
    if (*eval_attn) return cmd_eval_attn(attn_dir, sample_dir);
    if (*eval_sync) return cmd_eval_sync(sync_dir);
    if (*show) {
      io::RunConfig c;
      c.finalize();
      std::cout << io::to_json(c).dump(2) << "\n";
      return 0;
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const io::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const io::IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
