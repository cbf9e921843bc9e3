#include "ccl/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace ccl::io {

namespace {

// Reads the known keys of one JSON object and rejects the rest.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <typename V>
  void get(const std::string& key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path_ + "." + key + ": wrong type");
    }
  }

  const Json* sub(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config key " + path_ + "." + it.key());
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

Json stream_json(const model::StreamConfig& s) {
  return Json{{"depth", s.depth},       {"dim", s.dim},           {"heads", s.heads},
              {"ffn_mult", s.ffn_mult}, {"text_dim", s.text_dim}, {"n_lct", s.n_lct}};
}

void read_stream(const Json& j, const std::string& path, model::StreamConfig& s) {
  ObjectReader r(j, path);
  r.get("depth", s.depth);
  r.get("dim", s.dim);
  r.get("heads", s.heads);
  r.get("ffn_mult", s.ffn_mult);
  r.get("text_dim", s.text_dim);
  r.get("n_lct", s.n_lct);
  r.finish();
}

Json scales_json(const guide::Scales& s) { return Json{{"s_text", s.s_text}, {"s_m", s.s_m}}; }

guide::Scales read_scales(const Json& j, const std::string& path, guide::Scales s) {
  ObjectReader r(j, path);
  r.get("s_text", s.s_text);
  r.get("s_m", s.s_m);
  r.finish();
  return s;
}

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

void write_floats(std::ostream& os, const float* p, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < n; ++i) put_u32(os, std::bit_cast<std::uint32_t>(p[i]));
  }
}

void read_floats(const unsigned char* b, float* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = std::bit_cast<float>(get_u32(b + 4 * i));
}

std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IntegrityError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const void* data, std::size_t n) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

Json shape_json(const Shape& s) {
  Json a = Json::array();
  for (Index d : s) a.push_back(d);
  return a;
}

Json grid_json(const tarp::GridMeta& g) { return Json{{"t_a", g.t_a}, {"t_v", g.t_v}, {"h", g.h}, {"w", g.w}}; }

tarp::GridMeta grid_from(const Json& j) {
  tarp::GridMeta g;
  ObjectReader r(j, "grid");
  r.get("t_a", g.t_a);
  r.get("t_v", g.t_v);
  r.get("h", g.h);
  r.get("w", g.w);
  r.finish();
  return g;
}

}  // namespace

void RunConfig::finalize() {
  data.grid = model.grid;
  data.channels = model.signal_channels;
  data.n_classes = model.n_classes;
  try {
    model.validate();
    data.validate();
    train.validate();
    guidance.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

Json to_json(const RunConfig& c) {
  const auto& m = c.model;
  Json j;
  j["out_dir"] = c.out_dir;
  j["checkpoint_every"] = c.checkpoint_every;
  j["grid"] = grid_json(m.grid);
  j["model"] = Json{{"variant", model::variant_name(m.variant)},
                    {"window", m.window == model::WindowMode::Tarp ? "tarp" : "full_span"},
                    {"signal_channels", m.signal_channels},
                    {"n_classes", m.n_classes},
                    {"text_tokens", m.text_tokens},
                    {"image_conditioning", m.image_conditioning},
                    {"rope_base", m.rope_base},
                    {"audio", stream_json(m.audio)},
                    {"video", stream_json(m.video)}};
  j["data"] = Json{{"event_rate", c.data.event_rate}, {"noise_std", c.data.noise_std},
                   {"amplitude", c.data.amplitude},   {"contrast", c.data.contrast},
                   {"seed", c.data.seed}};
  const auto& t = c.train;
  j["train"] = Json{{"seed", t.seed},
                    {"steps", t.steps},
                    {"batch", t.batch},
                    {"lr_cca", t.lr_cca},
                    {"lr_base", t.lr_base},
                    {"beta1", t.beta1},
                    {"beta2", t.beta2},
                    {"adam_eps", t.adam_eps},
                    {"ema_decay", t.ema_decay},
                    {"text_drop", t.text_drop},
                    {"task_probs", Json{{"t2v", t.probs.t2v},
                                        {"t2a", t.probs.t2a},
                                        {"a2v", t.probs.a2v},
                                        {"v2a", t.probs.v2a},
                                        {"joint", t.probs.joint}}}};
  const auto& g = c.guidance;
  j["guidance"] = Json{{"mode", guide::mode_name(g.mode)},
                       {"s_text", g.scales.s_text},
                       {"s_m", g.scales.s_m},
                       {"steps", g.steps}};
  if (g.audio) j["guidance"]["audio"] = scales_json(*g.audio);
  if (g.video) j["guidance"]["video"] = scales_json(*g.video);
  return j;
}

RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  ObjectReader top(j, "");
  top.get("out_dir", c.out_dir);
  top.get("checkpoint_every", c.checkpoint_every);
  if (const Json* g = top.sub("grid")) c.model.grid = grid_from(*g);
  if (const Json* mj = top.sub("model")) {
    ObjectReader r(*mj, "model");
    std::string variant = model::variant_name(c.model.variant);
    std::string window = "tarp";
    r.get("variant", variant);
    r.get("window", window);
    const auto v = model::parse_variant(variant);
    if (!v) throw ConfigError("model.variant must be ccl or gated, got " + variant);
    c.model.variant = *v;
    if (window == "tarp") {
      c.model.window = model::WindowMode::Tarp;
    } else if (window == "full_span") {
      c.model.window = model::WindowMode::FullSpan;
    } else {
      throw ConfigError("model.window must be tarp or full_span, got " + window);
    }
    r.get("signal_channels", c.model.signal_channels);
    r.get("n_classes", c.model.n_classes);
    r.get("text_tokens", c.model.text_tokens);
    r.get("image_conditioning", c.model.image_conditioning);
    r.get("rope_base", c.model.rope_base);
    if (const Json* a = r.sub("audio")) read_stream(*a, "model.audio", c.model.audio);
    if (const Json* v2 = r.sub("video")) read_stream(*v2, "model.video", c.model.video);
    r.finish();
  }
  if (const Json* dj = top.sub("data")) {
    ObjectReader r(*dj, "data");
    r.get("event_rate", c.data.event_rate);
    r.get("noise_std", c.data.noise_std);
    r.get("amplitude", c.data.amplitude);
    r.get("contrast", c.data.contrast);
    r.get("seed", c.data.seed);
    r.finish();
  }
  if (const Json* tj = top.sub("train")) {
    ObjectReader r(*tj, "train");
    auto& t = c.train;
    r.get("seed", t.seed);
    r.get("steps", t.steps);
    r.get("batch", t.batch);
    r.get("lr_cca", t.lr_cca);
    r.get("lr_base", t.lr_base);
    r.get("beta1", t.beta1);
    r.get("beta2", t.beta2);
    r.get("adam_eps", t.adam_eps);
    r.get("ema_decay", t.ema_decay);
    r.get("text_drop", t.text_drop);
    if (const Json* pj = r.sub("task_probs")) {
      ObjectReader p(*pj, "train.task_probs");
      p.get("t2v", t.probs.t2v);
      p.get("t2a", t.probs.t2a);
      p.get("a2v", t.probs.a2v);
      p.get("v2a", t.probs.v2a);
      p.get("joint", t.probs.joint);
      p.finish();
    }
    r.finish();
  }
  if (const Json* gj = top.sub("guidance")) {
    ObjectReader r(*gj, "guidance");
    auto& g = c.guidance;
    std::string mode = guide::mode_name(g.mode);
    r.get("mode", mode);
    const auto m = guide::parse_mode(mode);
    if (!m) throw ConfigError("guidance.mode: unknown mode " + mode);
    g.mode = *m;
    r.get("s_text", g.scales.s_text);
    r.get("s_m", g.scales.s_m);
    r.get("steps", g.steps);
    if (const Json* a = r.sub("audio")) g.audio = read_scales(*a, "guidance.audio", g.scales);
    if (const Json* v = r.sub("video")) g.video = read_scales(*v, "guidance.video", g.scales);
    r.finish();
  }
  top.finish();
  c.finalize();
  return c;
}

Json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open " + path.string());
  try {
    return Json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

RunConfig load_run_config(const fs::path& path) { return run_config_from_json(read_json(path)); }

void write_json(const fs::path& path, const Json& j) {
  const std::string s = j.dump(2) + "\n";
  write_bytes(path, s.data(), s.size());
}

void write_f32(const fs::path& path, const float* data, std::size_t n) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_floats(os, data, n);
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

std::vector<float> read_f32(const fs::path& path) {
  const std::vector<unsigned char> b = read_bytes(path);
  if (b.size() % 4 != 0) throw IntegrityError(path.string() + ": size is not a multiple of 4");
  std::vector<float> out(b.size() / 4);
  read_floats(b.data(), out.data(), out.size());
  return out;
}

void save_checkpoint(const fs::path& dir, const RunConfig& config, const model::ModelParams<float>& params,
                     const train::Adam<float>* opt, const train::TrainerState& state) {
  fs::create_directories(dir);
  Json entries = Json::array();
  std::ostringstream blob(std::ios::binary);
  Index offset = 0;
  auto add = [&](const std::string& name, const Tensor<float>& t) {
    entries.push_back(Json{{"name", name}, {"shape", shape_json(t.shape())}, {"offset", offset}});
    write_floats(blob, t.ptr(), static_cast<std::size_t>(t.numel()));
    offset += t.numel() * 4;
  };
  for (const auto& p : params.registry) add(p.name, p.var.value());
  if (opt) {
    for (std::size_t i = 0; i < params.registry.size(); ++i) add("adam.m/" + params.registry[i].name, opt->m[i]);
    for (std::size_t i = 0; i < params.registry.size(); ++i) add("adam.v/" + params.registry[i].name, opt->v[i]);
  }
  Json ema = Json::array(), ema_init = Json::array();
  for (std::size_t k = 0; k < state.ema.size(); ++k) {
    ema.push_back(state.ema_init[k] ? state.ema[k] : 0.0);
    ema_init.push_back(static_cast<bool>(state.ema_init[k]));
  }
  Json manifest{{"format", "ccl-checkpoint"},
                {"version", kCheckpointVersion},
                {"dtype", "float32-le"},
                {"blob", "params.bin"},
                {"blob_bytes", offset},
                {"parameter_count", params.parameter_count()},
                {"optimizer", opt != nullptr},
                {"adam_t", opt ? opt->t : 0},
                {"step", state.step},
                {"ema", ema},
                {"ema_init", ema_init},
                {"tensors", entries}};
  const std::string b = blob.str();
  write_bytes(dir / "params.bin", b.data(), b.size());
  write_json(dir / "manifest.json", manifest);
  write_json(dir / "config.json", to_json(config));
}

CheckpointData load_checkpoint(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw IntegrityError(dir.string() + ": no manifest.json");
  Json man;
  try {
    man = read_json(dir / "manifest.json");
  } catch (const ConfigError& e) {
    throw IntegrityError(e.what());
  }
  try {
    if (man.at("format") != "ccl-checkpoint") throw IntegrityError("not a checkpoint manifest");
    if (man.at("version").get<int>() != kCheckpointVersion) {
      throw IntegrityError("checkpoint version " + man.at("version").dump() + ", expected " +
                           std::to_string(kCheckpointVersion));
    }
    CheckpointData ck;
    ck.config = load_run_config(dir / "config.json");
    ck.params = model::init_params<float>(ck.config.model, 0);
    const std::vector<unsigned char> blob = read_bytes(dir / man.at("blob").get<std::string>());
    const Index bytes = man.at("blob_bytes").get<Index>();
    if (static_cast<Index>(blob.size()) != bytes) {
      throw IntegrityError("blob has " + std::to_string(blob.size()) + " bytes, manifest says " +
                           std::to_string(bytes));
    }
    const Json& entries = man.at("tensors");
    const bool has_opt = man.at("optimizer").get<bool>();
    const std::size_t np = ck.params.registry.size();
    if (entries.size() != (has_opt ? 3 : 1) * np) throw IntegrityError("manifest lists an unexpected tensor count");
    auto load = [&](std::size_t e, const std::string& name, Tensor<float>& t) {
      const Json& en = entries.at(e);
      if (en.at("name").get<std::string>() != name) {
        throw IntegrityError("manifest entry " + std::to_string(e) + " is " + en.at("name").dump() + ", expected " +
                             name);
      }
      if (en.at("shape").get<Shape>() != t.shape()) {
        throw IntegrityError(name + ": manifest shape " + en.at("shape").dump() + " does not match the config " +
                             shape_str(t.shape()));
      }
      const Index off = en.at("offset").get<Index>();
      if (off < 0 || off + t.numel() * 4 > bytes) throw IntegrityError(name + ": offset outside the blob");
      read_floats(blob.data() + off, t.ptr(), static_cast<std::size_t>(t.numel()));
    };
    for (std::size_t i = 0; i < np; ++i) {
      auto& p = ck.params.registry[i];
      load(i, p.name, p.var.mutable_value());
    }
    if (has_opt) {
      for (std::size_t i = 0; i < np; ++i) {
        const auto& p = ck.params.registry[i];
        ck.adam_m.emplace_back(p.var.shape());
        ck.adam_v.emplace_back(p.var.shape());
        load(np + i, "adam.m/" + p.name, ck.adam_m.back());
        load(2 * np + i, "adam.v/" + p.name, ck.adam_v.back());
      }
    }
    ck.adam_t = man.at("adam_t").get<Index>();
    ck.state.step = man.at("step").get<Index>();
    const Json& ema = man.at("ema");
    const Json& init = man.at("ema_init");
    if (ema.size() != ck.state.ema.size() || init.size() != ck.state.ema.size()) {
      throw IntegrityError("manifest ema has the wrong length");
    }
    for (std::size_t k = 0; k < ck.state.ema.size(); ++k) {
      ck.state.ema[k] = ema[k].get<double>();
      ck.state.ema_init[k] = init[k].get<bool>();
    }
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("malformed manifest: ") + e.what());
  }
}

void restore_trainer(train::Trainer<float>& trainer, const CheckpointData& ck) {
  auto& reg = trainer.model().params().registry;
  if (reg.size() != ck.params.registry.size()) throw IntegrityError("restore: parameter lists differ");
  for (std::size_t i = 0; i < reg.size(); ++i) {
    reg[i].var.mutable_value() = ck.params.registry[i].var.value().clone();
  }
  auto& opt = trainer.optimizer();
  if (!ck.adam_m.empty()) {
    for (std::size_t i = 0; i < reg.size(); ++i) {
      opt.m[i] = ck.adam_m[i].clone();
      opt.v[i] = ck.adam_v[i].clone();
    }
  }
  opt.t = ck.adam_t;
  trainer.state() = ck.state;
}

void write_sample(const fs::path& dir, const guide::Sample& s, const SampleMeta& meta) {
  fs::create_directories(dir);
  const auto& g = meta.grid;
  const Index b = s.audio.dim(0);
  write_f32(dir / "audio.f32", s.audio.ptr(), static_cast<std::size_t>(s.audio.numel()));
  write_f32(dir / "video.f32", s.video.ptr(), static_cast<std::size_t>(s.video.numel()));
  Json j{{"format", "ccl-sample"},
         {"version", kSampleVersion},
         {"dtype", "float32-le"},
         {"grid", grid_json(g)},
         {"channels", meta.channels},
         {"audio", Json{{"file", "audio.f32"}, {"shape", shape_json({b, g.t_a, meta.channels})}}},
         {"video", Json{{"file", "video.f32"}, {"shape", shape_json({b, g.t_v, g.h, g.w, meta.channels})}}},
         {"class_ids", meta.class_ids},
         {"sync_score", meta.sync}};
  for (auto it = meta.extra.begin(); it != meta.extra.end(); ++it) j[it.key()] = it.value();
  write_json(dir / "sample.json", j);
}

void write_masks(const fs::path& dir, const ProbeMasks& m, const tarp::GridMeta& grid) {
  fs::create_directories(dir);
  write_bytes(dir / "fg_audio.u8", m.audio.data(), m.audio.size());
  write_bytes(dir / "fg_video.u8", m.video.data(), m.video.size());
  write_json(dir / "masks.json", Json{{"pairs", m.pairs},
                                      {"grid", grid_json(grid)},
                                      {"fg_audio", Json{{"file", "fg_audio.u8"}, {"shape", shape_json({m.pairs, grid.t_a})}}},
                                      {"fg_video", Json{{"file", "fg_video.u8"},
                                                        {"shape", shape_json({m.pairs, grid.t_v, grid.h, grid.w})}}}});
}

ProbeMasks read_masks(const fs::path& dir, tarp::GridMeta* grid) {
  for (const char* f : {"masks.json", "fg_audio.u8", "fg_video.u8"}) {
    if (!fs::exists(dir / f)) throw IntegrityError("missing " + (dir / f).string());
  }
  Json j;
  try {
    j = read_json(dir / "masks.json");
  } catch (const ConfigError& e) {
    throw IntegrityError(e.what());
  }
  ProbeMasks m;
  tarp::GridMeta g;
  try {
    m.pairs = j.at("pairs").get<Index>();
    g = grid_from(j.at("grid"));
  } catch (const std::exception& e) {
    throw IntegrityError(std::string("masks.json: ") + e.what());
  }
  const auto a = read_bytes(dir / "fg_audio.u8");
  const auto v = read_bytes(dir / "fg_video.u8");
  if (static_cast<Index>(a.size()) != m.pairs * g.t_a || static_cast<Index>(v.size()) != m.pairs * g.s_v()) {
    throw IntegrityError("mask files do not match masks.json");
  }
  m.audio.assign(a.begin(), a.end());
  m.video.assign(v.begin(), v.end());
  if (grid) *grid = g;
  return m;
}

std::string attn_file_name(const cca::AttnMap& m) {
  return "attn_b" + std::to_string(m.block) + "_" + cca::direction_name(m.direction) + ".bin";
}

void write_attn(const fs::path& path, const cca::AttnMap& m) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write(kAttnMagic, 8);
  for (Index v : {m.block, static_cast<Index>(m.direction), m.rows, m.q_len, m.kv_len, m.n_lct}) {
    put_u32(os, static_cast<std::uint32_t>(static_cast<std::int32_t>(v)));
  }
  write_floats(os, m.data.data(), m.data.size());
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

cca::AttnMap read_attn(const fs::path& path) {
  const auto b = read_bytes(path);
  if (b.size() < 32 || std::memcmp(b.data(), kAttnMagic, 8) != 0) throw IntegrityError(path.string() + ": bad header");
  Index h[6];
  for (int i = 0; i < 6; ++i) h[i] = static_cast<std::int32_t>(get_u32(b.data() + 8 + 4 * i));
  cca::AttnMap m;
  m.block = h[0];
  if (h[1] != 0 && h[1] != 1) throw IntegrityError(path.string() + ": bad direction");
  m.direction = static_cast<cca::Direction>(h[1]);
  m.rows = h[2];
  m.q_len = h[3];
  m.kv_len = h[4];
  m.n_lct = h[5];
  if (m.rows < 0 || m.q_len < 0 || m.kv_len < 0 || m.n_lct < 0 || m.n_lct > m.kv_len) {
    throw IntegrityError(path.string() + ": bad header");
  }
  const std::size_t n = static_cast<std::size_t>(m.rows * m.q_len * m.kv_len);
  if (b.size() != 32 + 4 * n) throw IntegrityError(path.string() + ": payload size does not match the header");
  m.data.resize(n);
  read_floats(b.data() + 32, m.data.data(), n);
  return m;
}

std::vector<cca::AttnMap> read_attn_dir(const fs::path& dir) {
  std::vector<fs::path> files;
  if (!fs::is_directory(dir)) throw IntegrityError(dir.string() + " is not a directory");
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string n = e.path().filename().string();
    if (n.rfind("attn_", 0) == 0 && e.path().extension() == ".bin") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<cca::AttnMap> maps;
  for (const auto& f : files) maps.push_back(read_attn(f));
  return maps;
}

Json record_json(const train::TrainRecord& r) {
  Json j{{"step", r.step},
         {"task", std::string(dcr::task_name(r.task))},
         {"loss", r.loss},
         {"loss_audio", r.loss_audio},
         {"loss_video", r.loss_video},
         {"ema", r.ema}};
  j["joint_ema"] = std::isfinite(r.joint_ema) ? Json(r.joint_ema) : Json(nullptr);
  return j;
}

}  // namespace ccl::io
