#pragma once

// Run configuration, checkpoints, sample and attention dumps. All binary
// payloads are little-endian float32 (masks are raw bytes).

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "ccl/cca.hpp"
#include "ccl/guidance.hpp"
#include "ccl/model.hpp"
#include "ccl/synthdata.hpp"
#include "ccl/trainer.hpp"
#include "json.hpp"

namespace ccl::io {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

inline constexpr int kCheckpointVersion = 1;
inline constexpr int kSampleVersion = 1;
inline constexpr char kAttnMagic[9] = "CCLATTN1";

// Bad or unknown configuration keys and values.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A checkpoint or dump whose pieces do not agree.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  model::ModelConfig model;
  synth::DatasetSpec data;
  train::TrainConfig train;
  guide::GuidanceConfig guidance;
  std::string out_dir = "runs/default";
  Index checkpoint_every = 500;  // 0: final checkpoint only

  // Copies the shared grid/channels/classes from the model into the dataset
  // and validates every section. Throws ConfigError.
  void finalize();
};

Json to_json(const RunConfig& c);
// Keys missing from `j` keep their defaults; unknown keys throw ConfigError.
RunConfig run_config_from_json(const Json& j);
RunConfig load_run_config(const fs::path& path);

Json read_json(const fs::path& path);
void write_json(const fs::path& path, const Json& j);

void write_f32(const fs::path& path, const float* data, std::size_t n);
std::vector<float> read_f32(const fs::path& path);

// Checkpoint directory: manifest.json, params.bin, config.json.
struct CheckpointData {
  RunConfig config;
  model::ModelParams<float> params;
  Index adam_t = 0;
  std::vector<Tensor<float>> adam_m;  // empty when saved without optimizer state
  std::vector<Tensor<float>> adam_v;
  train::TrainerState state;
};

void save_checkpoint(const fs::path& dir, const RunConfig& config, const model::ModelParams<float>& params,
                     const train::Adam<float>* opt, const train::TrainerState& state);
// Throws IntegrityError on a version mismatch, a blob of the wrong size, or
// manifest entries that do not match the configured model.
CheckpointData load_checkpoint(const fs::path& dir);

// Restores a trainer from a checkpoint so that it continues bit-identically.
void restore_trainer(train::Trainer<float>& trainer, const CheckpointData& ck);

// Sample directory: audio.f32 [b, t_a, c], video.f32 [b, t_v, h, w, c],
// sample.json; optionally fg_audio.u8 [p, t_a] and fg_video.u8 [p, s_v] for
// the probe pairs whose attention was dumped.
struct SampleMeta {
  tarp::GridMeta grid;
  Index channels = 0;
  std::vector<Index> class_ids;
  std::vector<double> sync;
  Json extra = Json::object();
};

void write_sample(const fs::path& dir, const guide::Sample& s, const SampleMeta& meta);

struct ProbeMasks {
  Index pairs = 0;
  std::vector<std::uint8_t> audio;  // pairs * t_a
  std::vector<std::uint8_t> video;  // pairs * s_v
};

void write_masks(const fs::path& dir, const ProbeMasks& m, const tarp::GridMeta& grid);
// Throws IntegrityError when the mask files are missing or mis-sized.
ProbeMasks read_masks(const fs::path& dir, tarp::GridMeta* grid);

// One file per map: "CCLATTN1", six int32 (block, direction, rows, q_len,
// kv_len, n_lct), then rows * q_len * kv_len float32.
std::string attn_file_name(const cca::AttnMap& m);
void write_attn(const fs::path& path, const cca::AttnMap& m);
cca::AttnMap read_attn(const fs::path& path);
std::vector<cca::AttnMap> read_attn_dir(const fs::path& dir);

Json record_json(const train::TrainRecord& r);

}  // namespace ccl::io
