#pragma once

// The two conditioning streams: a frozen patch encoder for audio with
// combined max+mean pooling, and a token-embedding text encoder.

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "apa/numerics/tensor.hpp"
#include "apa/synthdata.hpp"

namespace apa::cond {

inline constexpr std::size_t kPatch = 8;
inline constexpr std::size_t kPatchValues = kPatch * kPatch;                                    // 64
inline constexpr std::size_t kAudioTokens = (synth::kBins / kPatch) * (synth::kFrames / kPatch);  // 64
inline constexpr std::size_t kFeatureDim = 32;
inline constexpr std::array<std::size_t, 4> kPoolingRates{1, 2, 4, 8};

// Fixed 2-D sinusoidal code of a point on the spectrogram plane, in bin/frame
// units. The first half of the vector encodes the bin coordinate, the second
// half the frame coordinate. Shared by the audio encoder (patch centres) and
// the backbone (attention-site grid cells) so that both live in one space.
std::vector<float> plane_position_code(double bin, double frame, std::size_t dim);

// Fixed 1-D code for text slot positions.
std::vector<float> slot_position_code(std::size_t slot, std::size_t dim);

struct EncoderParams {
  num::TensorF patch_projection;  // [64, d_a], orthonormal columns; frozen
  num::TensorF token_table;       // [vocab, d]; trained in stage 1, frozen in stage 2
};

// Projection from the QR factorization of a seeded Gaussian matrix; token
// table from a scaled seeded Gaussian.
EncoderParams init_encoder(std::uint64_t seed);

struct AudioFeatures {
  num::TensorF seq;      // [L, d_a]
  std::size_t rate = 1;  // pooling rate applied; 1 for raw encoder output

  std::size_t length() const { return seq.dim(0); }
};

struct TextFeatures {
  num::TensorF seq;  // [4, d]
};

// Patchify 8x8 (row-major over the patch grid), project, add patch position code.
AudioFeatures encode_audio(const synth::Spectrogram& x, const EncoderParams& params);
// Same, for a raw 64x64 grid; throws DimensionError on any other size.
AudioFeatures encode_audio(std::span<const float> grid, std::size_t bins, std::size_t frames,
                           const EncoderParams& params);

// Windows of `rate` consecutive rows; each output row = 0.5 * (max + mean).
// Throws ContractError for rates outside {1,2,4,8} or already-pooled input.
AudioFeatures pool_features(const AudioFeatures& f, std::size_t rate);

// Per-slot embedding lookup plus fixed slot code. Differentiable w.r.t. the table.
TextFeatures encode_text(const synth::ConditionTokens& tokens, const EncoderParams& params);
// Batched form: [B, 4, d].
num::TensorF encode_text_batch(std::span<const synth::ConditionTokens> tokens, const EncoderParams& params);

// Each stream dropped independently with probability p: audio to an all-zero
// matrix of the same length, tokens to the null condition.
std::pair<AudioFeatures, synth::ConditionTokens> drop_conditions(const AudioFeatures& audio,
                                                                 const synth::ConditionTokens& tokens,
                                                                 std::mt19937_64& rng, double p = 0.05);

AudioFeatures zero_audio(std::size_t length);

}  // namespace apa::cond
