#pragma once

// Two-stage training (text-conditioned base, then audio adapters on a frozen
// base), the optimizer, and the checkpoint format.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "apa/backbone.hpp"
#include "apa/diffusion.hpp"
#include "apa/synthdata.hpp"

namespace apa::train {

using num::TensorF;

enum class Stage { base, adapter };
std::string_view to_string(Stage s);
Stage parse_stage(std::string_view s);

struct TrainConfig {
  Stage stage = Stage::base;
  std::size_t steps = 20000;  // adapter default is 5000
  std::size_t batch = 16;
  double lr = 1e-4;
  double weight_decay = 1e-2;
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
  double dropout = 0.05;
  std::uint64_t seed = 0;
  std::size_t log_every = 100;
  // Captions describe the clip's own attributes focused on a random task
  // (none/timbre/texture/accomp), so edit prompts are in-distribution.
  bool random_task_captions = true;
  net::UNetConfig unet;

  // Throws ContractError on non-positive steps/batch/lr or p outside [0, 1].
  void validate() const;
};

struct LossRecord {
  std::size_t step = 0;   // last step of the window
  double loss = 0.0;      // window mean
  double reference = 0.0; // adapter stage: frozen base (no audio) on the same draws; base stage: NaN
};

// AdamW with per-tensor moments; updates are applied in tensor order.
class AdamW {
 public:
  AdamW(std::vector<TensorF> params, const TrainConfig& config);
  // Applies one update from the accumulated gradients, then clears them.
  void step();
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<TensorF> params_;
  std::vector<std::vector<float>> m_, v_;
  double lr_, wd_, b1_, b2_, eps_;
  std::size_t t_ = 0;
};

struct Checkpoint {
  Stage stage = Stage::base;
  std::size_t steps = 0;
  std::string config_json;  // resolved training configuration
  std::vector<LossRecord> log;
  net::BaseParams base;        // stage == base
  net::AdapterParams adapter;  // stage == adapter
  std::string base_hash;       // adapter: content hash of the base it was trained on
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Content hash of the base tensors in visit order (f32 little-endian bytes).
std::string tensor_hash(const net::BaseParams& p);
std::string tensor_hash(const net::AdapterParams& p);

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes, const std::string& what);
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
// Throws IoError (missing/truncated), FormatError (magic/version/layout),
// CorruptionError (hash mismatch).
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Throws ContractError unless the adapter checkpoint was trained on this base.
void check_compatible(const Checkpoint& base, const Checkpoint& adapter);

using ProgressFn = std::function<void(const LossRecord&)>;

Checkpoint pretrain_base(const TrainConfig& config, const std::vector<synth::Record>& data,
                         const ProgressFn& progress = {});
Checkpoint train_adapter(const Checkpoint& base, const TrainConfig& config, const std::vector<synth::Record>& data,
                         const ProgressFn& progress = {});

void write_loss_csv(const std::vector<LossRecord>& log, const std::filesystem::path& path);

std::string config_to_json(const TrainConfig& c);

}  // namespace apa::train
