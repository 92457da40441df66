#include "apa/conditioning.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "apa/errors.hpp"
#include "apa/numerics/ops.hpp"

namespace apa::cond {

namespace {
constexpr double kCodeAmplitude = 0.5;
}

std::vector<float> plane_position_code(double bin, double frame, std::size_t dim) {
  const std::size_t half = dim / 2, pairs = half / 2;
  std::vector<float> code(dim, 0.0f);
  for (std::size_t axis = 0; axis < 2; ++axis) {
    const double u = axis == 0 ? bin : frame;
    for (std::size_t i = 0; i < pairs; ++i) {
      // Periods 4 .. 128 grid units, geometrically spaced.
      const double period = 4.0 * std::pow(32.0, pairs > 1 ? double(i) / double(pairs - 1) : 0.0);
      const double phase = 2.0 * std::numbers::pi * u / period;
      code[axis * half + 2 * i] = static_cast<float>(kCodeAmplitude * std::sin(phase));
      code[axis * half + 2 * i + 1] = static_cast<float>(kCodeAmplitude * std::cos(phase));
    }
  }
  return code;
}

std::vector<float> slot_position_code(std::size_t slot, std::size_t dim) {
  std::vector<float> code(dim);
  for (std::size_t i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(100.0, -2.0 * double(i) / double(dim));
    code[2 * i] = static_cast<float>(kCodeAmplitude * std::sin(double(slot) * freq));
    code[2 * i + 1] = static_cast<float>(kCodeAmplitude * std::cos(double(slot) * freq));
  }
  return code;
}

EncoderParams init_encoder(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd g(kPatchValues, kFeatureDim);
  for (Eigen::Index r = 0; r < g.rows(); ++r)
    for (Eigen::Index c = 0; c < g.cols(); ++c) g(r, c) = gauss(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(kPatchValues, kFeatureDim);
  std::vector<float> proj(kPatchValues * kFeatureDim);
  for (std::size_t r = 0; r < kPatchValues; ++r)
    for (std::size_t c = 0; c < kFeatureDim; ++c) proj[r * kFeatureDim + c] = static_cast<float>(q(r, c));

  std::vector<float> table(synth::vocab::size * kFeatureDim);
  for (auto& v : table) v = static_cast<float>(0.5 * gauss(rng));
  return {num::TensorF::from({kPatchValues, kFeatureDim}, std::move(proj)),
          num::TensorF::from({std::size_t(synth::vocab::size), kFeatureDim}, std::move(table))};
}

AudioFeatures encode_audio(std::span<const float> grid, std::size_t bins, std::size_t frames,
                           const EncoderParams& params) {
  if (bins != synth::kBins || frames != synth::kFrames || grid.size() != bins * frames)
    throw DimensionError("encode_audio: expected a 64x64 grid, got " + std::to_string(bins) + "x" +
                         std::to_string(frames));
  const auto& proj = params.patch_projection;
  if (proj.rank() != 2 || proj.dim(0) != kPatchValues)
    throw DimensionError("encode_audio: projection must be [64, d], got " + num::shape_str(proj.shape()));
  const std::size_t d = proj.dim(1);
  const std::size_t grid_cols = frames / kPatch;
  std::vector<float> out(kAudioTokens * d, 0.0f);
  auto w = proj.data();
  for (std::size_t token = 0; token < kAudioTokens; ++token) {
    const std::size_t fb = token / grid_cols, tb = token % grid_cols;
    float* row = out.data() + token * d;
    for (std::size_t i = 0; i < kPatch; ++i)
      for (std::size_t j = 0; j < kPatch; ++j) {
        const float v = grid[(fb * kPatch + i) * frames + tb * kPatch + j];
        if (v == 0.0f) continue;
        const float* wr = w.data() + (i * kPatch + j) * d;
        for (std::size_t c = 0; c < d; ++c) row[c] += v * wr[c];
      }
    const auto code = plane_position_code(fb * kPatch + 0.5 * (kPatch - 1), tb * kPatch + 0.5 * (kPatch - 1), d);
    for (std::size_t c = 0; c < d; ++c) row[c] += code[c];
  }
  return {num::TensorF::from({kAudioTokens, d}, std::move(out)), 1};
}

AudioFeatures encode_audio(const synth::Spectrogram& x, const EncoderParams& params) {
  return encode_audio(x.values(), synth::kBins, synth::kFrames, params);
}

AudioFeatures pool_features(const AudioFeatures& f, std::size_t rate) {
  if (std::find(kPoolingRates.begin(), kPoolingRates.end(), rate) == kPoolingRates.end())
    throw ContractError("pool_features: rate " + std::to_string(rate) + " not in {1,2,4,8}");
  if (f.rate != 1) throw ContractError("pool_features: input is already pooled");
  const std::size_t len = f.seq.dim(0), d = f.seq.dim(1);
  const std::size_t out_len = (len + rate - 1) / rate;
  std::vector<float> out(out_len * d);
  auto in = f.seq.data();
  for (std::size_t w = 0; w < out_len; ++w) {
    const std::size_t begin = w * rate, end = std::min(len, begin + rate);
    for (std::size_t c = 0; c < d; ++c) {
      float mx = in[begin * d + c];
      double total = 0.0;
      for (std::size_t r = begin; r < end; ++r) {
        mx = std::max(mx, in[r * d + c]);
        total += in[r * d + c];
      }
      const double mean = total / double(end - begin);
      out[w * d + c] = static_cast<float>(0.5 * (double(mx) + mean));
    }
  }
  return {num::TensorF::from({out_len, d}, std::move(out)), rate};
}

num::TensorF encode_text_batch(std::span<const synth::ConditionTokens> tokens, const EncoderParams& params) {
  const auto& table = params.token_table;
  const std::size_t d = table.dim(1);
  std::vector<int> idx;
  idx.reserve(tokens.size() * synth::kTextSlots);
  for (const auto& t : tokens)
    for (int s : t.slots()) {
      if (s < 0 || s >= static_cast<int>(table.dim(0)))
        throw ContractError("encode_text: token " + std::to_string(s) + " outside vocabulary");
      idx.push_back(s);
    }
  std::vector<float> codes(tokens.size() * synth::kTextSlots * d);
  for (std::size_t b = 0; b < tokens.size(); ++b)
    for (std::size_t s = 0; s < synth::kTextSlots; ++s) {
      const auto code = slot_position_code(s, d);
      std::copy(code.begin(), code.end(), codes.begin() + (b * synth::kTextSlots + s) * d);
    }
  auto rows = num::add(num::embedding<float>(table, idx), num::TensorF::from({idx.size(), d}, std::move(codes)));
  return num::reshape(rows, {tokens.size(), synth::kTextSlots, d});
}

TextFeatures encode_text(const synth::ConditionTokens& tokens, const EncoderParams& params) {
  auto batch = encode_text_batch(std::span(&tokens, 1), params);
  return {num::reshape(batch, {synth::kTextSlots, batch.dim(2)})};
}

AudioFeatures zero_audio(std::size_t length) {
  return {num::TensorF::zeros({length, kFeatureDim}), 1};
}

std::pair<AudioFeatures, synth::ConditionTokens> drop_conditions(const AudioFeatures& audio,
                                                                 const synth::ConditionTokens& tokens,
                                                                 std::mt19937_64& rng, double p) {
  std::bernoulli_distribution drop(std::clamp(p, 0.0, 1.0));
  const bool drop_audio = drop(rng);
  const bool drop_text = drop(rng);
  AudioFeatures a = audio;
  if (drop_audio) a.seq = num::TensorF::zeros(audio.seq.shape());
  return {a, drop_text ? synth::null_condition() : tokens};
}

}  // namespace apa::cond
