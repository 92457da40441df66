#pragma once

// Evaluation harness: held-out edit requests, per-request fidelity and
// transfer scores, the tradeoff sweeps and the Frechet sanity check.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "apa/editops.hpp"
#include "apa/metrics.hpp"

namespace apa::exp {

// Clip i comes from the dataset generator at clip_seed (disjoint from the
// training seeds by choice of clip_seed); its target timbre cycles through the
// three other classes; request i samples with seed + i.
std::vector<edit::EditRequest> heldout_timbre_requests(std::size_t n, std::uint64_t clip_seed, std::uint64_t seed);

struct RequestScore {
  double fidelity = 0.0;  // chroma similarity to the input
  double transfer = 0.0;  // oracle transfer score for the requested class
};

std::vector<RequestScore> score_results(std::span<const edit::EditResult> results);

struct Summary {
  std::size_t n = 0;
  double mean_fidelity = 0.0, std_fidelity = 0.0;
  double mean_transfer = 0.0, std_transfer = 0.0;
};

Summary summarize(std::span<const RequestScore> scores);

enum class Axis { omega, alpha, lambda };
std::string_view to_string(Axis a);
Axis parse_axis(std::string_view s);
std::vector<double> default_axis_values(Axis a);

struct SweepFixed {
  std::size_t omega = 2;
  double alpha = 0.55;
  double lambda = 7.5;
};

inline constexpr std::size_t kMinSweepRequests = 32;

struct SweepRow {
  double value = 0.0;
  Summary summary;
};

// One row per value, in the given (ascending) order. Needs at least
// kMinSweepRequests requests. Points run on up to
// `threads` workers; the result does not depend on the thread count.
std::vector<SweepRow> sweep_grid(Axis axis, std::span<const double> values, const SweepFixed& fixed,
                                 std::span<const edit::EditRequest> requests, const net::BaseParams& base,
                                 const net::AdapterParams& adapter, std::size_t threads);

void write_sweep_csv(std::span<const SweepRow> rows, Axis axis, const std::filesystem::path& path);
// "transfer fidelity value" pairs, one per line, for external plotting.
void write_plot_data(std::span<const SweepRow> rows, Axis axis, const std::filesystem::path& path);

// Unconditional samples: null text, no audio, guidance scale 1.
std::vector<synth::Spectrogram> unconditional_samples(const net::BaseParams& base, std::size_t n, std::uint64_t seed,
                                                      std::size_t steps, std::size_t batch = 32);
std::vector<synth::Spectrogram> uniform_noise_grids(std::size_t n, std::uint64_t seed);

struct FrechetReport {
  double samples = 0.0;  // generated samples vs training clips
  double noise = 0.0;    // uniform-noise grids vs training clips
};

FrechetReport frechet_report(std::span<const synth::Spectrogram> training, std::span<const synth::Spectrogram> samples,
                             std::span<const synth::Spectrogram> noise, const cond::EncoderParams& encoder);

}  // namespace apa::exp
