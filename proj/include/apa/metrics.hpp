#pragma once

// Objective evaluation: chroma fidelity, Gaussian Frechet distance over frozen
// encoder features, and an analytic attribute oracle used as the transfer score.

#include <Eigen/Dense>
#include <array>
#include <span>
#include <vector>

#include "apa/conditioning.hpp"
#include "apa/synthdata.hpp"

namespace apa::metrics {

inline constexpr double kSilentThreshold = 1e-9;
inline constexpr double kCovarianceRidge = 1e-6;

using Chromagram = Eigen::Matrix<double, 12, Eigen::Dynamic>;

Chromagram chroma_extract(const synth::Spectrogram& x);

struct Similarity {
  double score = 0.0;
  bool degenerate = false;  // every frame was skipped
};

Similarity chroma_similarity(const synth::Spectrogram& a, const synth::Spectrogram& b);
// Raw-grid form; throws DimensionError when the sizes differ or are not 64x64.
Similarity chroma_similarity(std::span<const float> a, std::span<const float> b);

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Rows of `samples` are feature vectors. Unbiased covariance; a ridge of 1e-6 I
// is added when there are fewer than d+1 samples. Throws ContractError when empty.
GaussianStats feature_stats(const Eigen::MatrixXd& samples);

double frechet_distance(const GaussianStats& a, const GaussianStats& b);

// Per-clip Frechet feature: encoder patch features averaged over patches.
Eigen::VectorXd clip_feature(const synth::Spectrogram& x, const cond::EncoderParams& encoder);
Eigen::MatrixXd clip_features(std::span<const synth::Spectrogram> clips, const cond::EncoderParams& encoder);

struct OracleScores {
  std::array<double, synth::kTimbreCount> timbre{};
  std::array<double, synth::kTextureCount> texture{};
  std::array<double, synth::kAccompCount> accomp{};
  std::array<double, 4> partials{};  // measured partial levels, median over segments
  bool degenerate = false;           // silent input

  synth::Timbre best_timbre() const;
  synth::Texture best_texture() const;
  synth::Accomp best_accomp() const;
  double score(synth::Task task, int target_class) const;
};

OracleScores attribute_oracle(const synth::Spectrogram& x);

// (oracle score of target_class + 1) / 2, in [0, 1].
double transfer_score(const synth::Spectrogram& x, synth::Task task, int target_class);

}  // namespace apa::metrics
