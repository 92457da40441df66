#include "apa/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "apa/errors.hpp"

namespace apa::metrics {

using synth::kBins;
using synth::kFrames;

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  const double hi = v[mid];
  if (v.size() % 2) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + mid);
  return 0.5 * (lo + hi);
}

Chromagram chroma_of(std::span<const float> x) {
  Chromagram c = Chromagram::Zero(12, kFrames);
  for (std::size_t b = 0; b < kBins; ++b)
    for (std::size_t t = 0; t < kFrames; ++t) c(b % 12, t) += x[b * kFrames + t];
  return c;
}

void check_grid(std::span<const float> x, const char* what) {
  if (x.size() != kBins * kFrames)
    throw DimensionError(std::string(what) + ": expected 64x64 grid (" + std::to_string(kBins * kFrames) +
                         " values), got " + std::to_string(x.size()));
}

// Texture and accompaniment templates in signature space.
constexpr std::array<std::array<double, 3>, 4> kTextureSignatures{{
    {0.0, 0.0, 0.0},
    {synth::kPulseLevel, 0.0, 0.0},
    {0.0, synth::kPulseLevel, 0.0},
    {synth::kFloorLevel, synth::kFloorLevel, synth::kFloorLevel},
}};
constexpr double kTextureScale = synth::kPulseLevel;
constexpr std::array<std::array<double, 2>, 3> kAccompSignatures{{
    {0.0, 0.0},
    {synth::kAccompScale, 0.0},
    {0.0, synth::kAccompScale},
}};
constexpr double kAccompScaleDist = synth::kAccompScale;

template <std::size_t N>
double distance_score(std::span<const double> sig, const std::array<double, N>& tmpl, double scale) {
  double d2 = 0.0;
  for (std::size_t i = 0; i < N; ++i) d2 += (sig[i] - tmpl[i]) * (sig[i] - tmpl[i]);
  return 1.0 - 2.0 * std::min(1.0, std::sqrt(d2) / scale);
}

template <std::size_t N>
std::size_t argmax(const std::array<double, N>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

Chromagram chroma_extract(const synth::Spectrogram& x) { return chroma_of(x.values()); }

Similarity chroma_similarity(std::span<const float> a, std::span<const float> b) {
  check_grid(a, "chroma_similarity");
  check_grid(b, "chroma_similarity");
  const Chromagram ca = chroma_of(a), cb = chroma_of(b);
  double total = 0.0;
  std::size_t used = 0;
  for (Eigen::Index t = 0; t < ca.cols(); ++t) {
    const double na = ca.col(t).norm(), nb = cb.col(t).norm();
    if (na < kSilentThreshold || nb < kSilentThreshold) continue;
    total += ca.col(t).dot(cb.col(t)) / (na * nb);
    ++used;
  }
  if (used == 0) return {0.0, true};
  return {std::clamp(total / double(used), 0.0, 1.0), false};
}

Similarity chroma_similarity(const synth::Spectrogram& a, const synth::Spectrogram& b) {
  return chroma_similarity(a.values(), b.values());
}

GaussianStats feature_stats(const Eigen::MatrixXd& samples) {
  if (samples.rows() == 0) throw ContractError("feature_stats: empty feature set");
  const Eigen::Index n = samples.rows(), d = samples.cols();
  GaussianStats s;
  s.mean = samples.colwise().mean().transpose();
  const Eigen::MatrixXd centered = samples.rowwise() - s.mean.transpose();
  s.cov = n > 1 ? Eigen::MatrixXd(centered.transpose() * centered / double(n - 1)) : Eigen::MatrixXd::Zero(d, d);
  if (n < d + 1) s.cov.diagonal().array() += kCovarianceRidge;
  return s;
}

namespace {
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}
}  // namespace

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows() || a.cov.rows() != a.mean.size())
    throw ContractError("frechet_distance: dimension mismatch (" + std::to_string(a.mean.size()) + " vs " +
                        std::to_string(b.mean.size()) + ")");
  const Eigen::MatrixXd ra = psd_sqrt(a.cov);
  const Eigen::MatrixXd cross = psd_sqrt(ra * b.cov * ra);
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
  return std::max(0.0, d);
}

Eigen::VectorXd clip_feature(const synth::Spectrogram& x, const cond::EncoderParams& encoder) {
  const auto f = cond::encode_audio(x, encoder);
  const std::size_t n = f.seq.dim(0), d = f.seq.dim(1);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
  auto data = f.seq.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) v[Eigen::Index(c)] += data[r * d + c];
  return v / double(n);
}

Eigen::MatrixXd clip_features(std::span<const synth::Spectrogram> clips, const cond::EncoderParams& encoder) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(clips.size()), encoder.patch_projection.dim(1));
  for (std::size_t i = 0; i < clips.size(); ++i) m.row(Eigen::Index(i)) = clip_feature(clips[i], encoder).transpose();
  return m;
}

synth::Timbre OracleScores::best_timbre() const { return static_cast<synth::Timbre>(argmax(timbre)); }
synth::Texture OracleScores::best_texture() const { return static_cast<synth::Texture>(argmax(texture)); }
synth::Accomp OracleScores::best_accomp() const { return static_cast<synth::Accomp>(argmax(accomp)); }

double OracleScores::score(synth::Task task, int target_class) const {
  const auto n = synth::class_count(task);
  if (target_class < 0 || static_cast<std::size_t>(target_class) >= n)
    throw ContractError("oracle: class " + std::to_string(target_class) + " invalid for task " +
                        std::string(synth::to_string(task)));
  switch (task) {
    case synth::Task::timbre: return timbre[std::size_t(target_class)];
    case synth::Task::texture: return texture[std::size_t(target_class)];
    case synth::Task::accomp: return accomp[std::size_t(target_class)];
    case synth::Task::none: break;
  }
  throw ContractError("oracle: task none has no classes");
}

OracleScores attribute_oracle(const synth::Spectrogram& x) {
  OracleScores out;
  const auto& v = x.values();
  if (*std::max_element(v.begin(), v.end()) < kSilentThreshold) {
    out.degenerate = true;
    return out;
  }

  // Texture: the broadband level of each frame is the median over bins.
  std::array<double, 3> tex_sum{}, tex_n{};
  for (std::size_t t = 0; t < kFrames; ++t) {
    std::vector<double> col(kBins);
    for (std::size_t b = 0; b < kBins; ++b) col[b] = x.at(b, t);
    const std::size_t phase = t % synth::kPulsePeriod;
    const std::size_t slot = phase == 0 ? 0 : phase == synth::kPulsePeriod / 2 ? 1 : 2;
    tex_sum[slot] += median(std::move(col));
    tex_n[slot] += 1.0;
  }
  std::array<double, 3> tex_sig{};
  for (std::size_t i = 0; i < 3; ++i) tex_sig[i] = tex_sum[i] / tex_n[i];
  for (std::size_t k = 0; k < kTextureSignatures.size(); ++k)
    out.texture[k] = distance_score(tex_sig, kTextureSignatures[k], kTextureScale);

  // Melody segments: per-bin medians over the segment's frames remove
  // isolated pulses; the median over bins is the broadband floor.
  const std::size_t segments = synth::kMelodyLength;
  std::array<std::vector<double>, 4> partial_levels;
  std::vector<double> third_levels, bass_levels;
  for (std::size_t s = 0; s < segments; ++s) {
    std::vector<double> level(kBins);
    for (std::size_t b = 0; b < kBins; ++b) {
      std::vector<double> frames(synth::kFramesPerStep);
      for (std::size_t j = 0; j < synth::kFramesPerStep; ++j) frames[j] = x.at(b, s * synth::kFramesPerStep + j);
      level[b] = median(std::move(frames));
    }
    const double floor = median(level);
    for (auto& l : level) l -= floor;
    int p = synth::kPitchLow;
    for (int b = synth::kPitchLow; b < synth::kPitchHigh; ++b)
      if (level[std::size_t(b)] > level[std::size_t(p)]) p = b;
    for (std::size_t k = 0; k < 4; ++k) partial_levels[k].push_back(level[std::size_t(p + synth::kPartialOffsets[k])]);
    third_levels.push_back(level[std::size_t(p + synth::kThirdInterval)]);
    // A lead note on the bass bin masks the bass track.
    if (p != synth::kBassPitch) bass_levels.push_back(level[std::size_t(synth::kBassPitch)]);
  }

  Eigen::Vector4d measured;
  for (std::size_t k = 0; k < 4; ++k) {
    out.partials[k] = median(partial_levels[k]);
    measured[Eigen::Index(k)] = std::max(0.0, out.partials[k]);
  }
  const double mnorm = measured.norm();
  for (std::size_t c = 0; c < synth::kTimbreCount; ++c) {
    const auto& tpl = synth::timbre_template(static_cast<synth::Timbre>(c));
    const Eigen::Vector4d tv(tpl[0], tpl[1], tpl[2], tpl[3]);
    out.timbre[c] = mnorm < kSilentThreshold ? 0.0 : measured.dot(tv) / (mnorm * tv.norm());
  }

  const std::array<double, 2> acc_sig{median(third_levels), median(bass_levels)};
  for (std::size_t k = 0; k < kAccompSignatures.size(); ++k)
    out.accomp[k] = distance_score(acc_sig, kAccompSignatures[k], kAccompScaleDist);
  return out;
}

double transfer_score(const synth::Spectrogram& x, synth::Task task, int target_class) {
  return 0.5 * (attribute_oracle(x).score(task, target_class) + 1.0);
}

}  // namespace apa::metrics
