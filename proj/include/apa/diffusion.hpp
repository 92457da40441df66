#pragma once

// Noise schedule, forward noising, the noise-prediction loss, classifier-free
// and negative-prompt guidance, and deterministic / ancestral samplers.
//
// The network works in model space m = 2x - 1 so that data in [0, 1] is
// centred; samplers map back and clamp only at the very end.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "apa/backbone.hpp"
#include "apa/conditioning.hpp"
#include "apa/synthdata.hpp"

namespace apa::diff {

using num::TensorF;

struct NoiseSchedule {
  std::vector<double> variances;  // per-step noise variance
  std::vector<double> retention;  // cumulative product of (1 - variance); multiplies the signal

  std::size_t steps() const { return retention.size(); }
};

// Linear variances over [1e-4, 0.02], scaled by 1000 / T. Throws ContractError for T < 2.
NoiseSchedule make_schedule(std::size_t train_steps = net::kTrainSteps);

// x_t = sqrt(r_t) x + sqrt(1 - r_t) eps, one timestep per example along axis 0.
TensorF forward_noise(const TensorF& x, std::span<const int> t, const TensorF& eps, const NoiseSchedule& s);
std::vector<float> forward_noise(std::span<const float> x, int t, std::span<const float> eps, const NoiseSchedule& s);

TensorF to_model_space(std::span<const synth::Spectrogram> grids);
std::vector<synth::Spectrogram> from_model_space(const TensorF& x);  // clamps to [0, 1]

using Predictor = std::function<TensorF(const TensorF& x_t, std::span<const int> t, const net::Conditioning& c)>;

Predictor make_predictor(const net::BaseParams& base, const net::AdapterParams* adapter);

struct TrainBatch {
  TensorF x0;               // [B, 64, 64, 1], model space
  net::Conditioning cond;   // already encoded (and dropped) conditions
};

// Mean squared error per element between drawn noise and its prediction.
// Draws all timesteps first, then all noise, from `rng`.
TensorF training_loss(const TrainBatch& batch, std::mt19937_64& rng, const Predictor& predict,
                      const NoiseSchedule& s);

enum class GuidanceMode { standard, negative_prompt };

struct GuidanceConfig {
  double lambda = 7.5;
  GuidanceMode mode = GuidanceMode::negative_prompt;
};

// (1 - lambda) * eps(negative) + lambda * eps(positive). The negative branch
// never sees audio features. Both branches run in one batched forward pass.
TensorF guided_noise_prediction(const TensorF& x_t, std::span<const int> t, const net::Conditioning& positive,
                                const TensorF& negative_text, double lambda, const Predictor& predict);

enum class SamplerMode { deterministic, ancestral };

// Evenly strided timesteps, ascending; steps == T gives 0..T-1.
std::vector<int> sub_schedule(std::size_t steps, std::size_t train_steps);

// Index count into the sub-schedule for a partial (init) run.
std::size_t init_step_count(double strength, std::size_t steps);

struct SampleRequest {
  synth::ConditionTokens positive;
  synth::ConditionTokens negative;                 // used in negative_prompt mode
  std::optional<cond::AudioFeatures> audio;        // pooled; absent for text-only sampling
  std::optional<synth::Spectrogram> init;          // SDEdit-style start
  std::uint64_t seed = 0;
};

struct SampleOptions {
  GuidanceConfig guidance;
  float alpha = 0.5f;
  std::size_t steps = 50;
  SamplerMode mode = SamplerMode::deterministic;
  double strength = 1.0;  // used only for requests with init
};

struct SampleOutput {
  std::vector<synth::Spectrogram> grids;
  std::vector<int> timesteps;  // descending, as visited by the first request
};

// Batched sampling; each request draws from its own seed so results do not
// depend on which other requests share the batch.
SampleOutput sample(const net::BaseParams& base, const net::AdapterParams* adapter,
                    std::span<const SampleRequest> requests, const SampleOptions& options,
                    const NoiseSchedule& schedule);

}  // namespace apa::diff
