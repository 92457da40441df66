#pragma once

// Zero-shot editing: timbre, texture and accompaniment edits driven by an
// audio prompt plus edit tokens, and the partial-noising text-only baseline.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "apa/diffusion.hpp"
#include "apa/synthdata.hpp"
#include "apa/training.hpp"

namespace apa::edit {

inline constexpr double kBaselineStrength = 0.75;

struct EditRequest {
  synth::Spectrogram input;
  synth::Timbre source_timbre = synth::Timbre::pure;  // lead instrument of the input
  synth::Task task = synth::Task::timbre;
  int target_class = 0;
  std::optional<synth::ConditionTokens> negative;  // defaults per task when empty
  std::size_t omega = 2;
  double alpha = 0.5;
  double lambda = 7.5;
  std::size_t steps = 50;
  std::uint64_t seed = 0;
  diff::SamplerMode sampler = diff::SamplerMode::deterministic;
  diff::GuidanceMode guidance = diff::GuidanceMode::negative_prompt;
};

// Request with the per-task defaults: timbre and accomp use omega 2, alpha 0.5;
// texture uses omega 1, alpha 0.4; lambda 7.5 throughout. The source timbre is
// read from the input with the attribute oracle.
EditRequest make_request(const synth::Spectrogram& input, synth::Task task, int target_class, std::uint64_t seed = 0);

// Timbre: the source instrument; texture and accomp: the reserved low-quality token.
synth::ConditionTokens default_negative(synth::Task task, synth::Timbre source_timbre);
synth::ConditionTokens positive_tokens(const EditRequest& r);
synth::ConditionTokens negative_tokens(const EditRequest& r);

// Throws ContractError for task none, an invalid class, a timbre target equal
// to the source, omega outside {1,2,4,8}, negative alpha/lambda or zero steps.
void validate(const EditRequest& r);

struct EditResult {
  synth::Spectrogram edited;
  EditRequest request;
  std::vector<int> timesteps;
  double wall_seconds = 0.0;
};

// Requests in one call must share alpha, lambda, steps, sampler and guidance;
// they run as one batch. Throws ContractError otherwise.
std::vector<EditResult> edit_batch(std::span<const EditRequest> requests, const net::BaseParams& base,
                                   const net::AdapterParams& adapter);
std::vector<EditResult> sdedit_batch(std::span<const EditRequest> requests, const net::BaseParams& base);

// Checkpoint-level entry points; throw ContractError for an incompatible pair.
EditResult edit(const EditRequest& request, const train::Checkpoint& base, const train::Checkpoint& adapter);
EditResult sdedit_baseline(const EditRequest& request, const train::Checkpoint& base);

// Deterministic metadata (no wall time) for the JSON sidecar.
std::string result_json(const EditResult& r, std::string_view method);

// Writes the grid file at `path` and the sidecar at `path` + ".json".
void write_result(const EditResult& r, std::string_view method, const std::filesystem::path& path);

}  // namespace apa::edit
