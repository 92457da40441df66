#pragma once

// Noise-prediction network: a two-level encoder/decoder over the 64x64 grid
// with residual blocks and, at each attention site, text cross-attention plus
// an optional decoupled audio cross-attention branch sharing the query.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "apa/conditioning.hpp"
#include "apa/numerics/tensor.hpp"

namespace apa::net {

using num::TensorF;

struct UNetConfig {
  std::size_t channels1 = 16;       // level 1, 64x64
  std::size_t channels2 = 32;       // level 2, 32x32
  std::size_t bottleneck = 32;      // 16x16
  std::size_t blocks_per_level = 2;
  std::size_t attn_width = 32;
  std::size_t heads = 2;
  std::size_t time_dim = 32;
  std::size_t text_dim = cond::kFeatureDim;
  std::size_t audio_dim = cond::kFeatureDim;

  // Throws ContractError for zero sizes or a width not divisible by heads.
  void validate() const;
};

inline constexpr std::size_t kTrainSteps = 200;  // T_train; timesteps are [0, kTrainSteps)

struct ResBlock {
  TensorF norm_gain, norm_shift;  // [C]
  TensorF time_w, time_b;         // [time_dim, C], [C]
  TensorF conv_w, conv_b;         // [9C, C], [C]
};

// Attention-site weights owned by the base model.
struct AttnSite {
  std::size_t resolution = 0;    // spatial side length at this site
  TensorF norm_gain, norm_shift; // [C]
  TensorF in_w, in_b;            // [C, d], [d]
  TensorF wq;                    // [d, d]
  TensorF wk, wv;                // [text_dim, d]; no bias
  TensorF out_w, out_b;          // [d, C], [C]
  TensorF position;              // [n*d] fixed grid code, not a parameter
};

struct AdapterSite {
  TensorF wk, wv;  // [audio_dim, d]; no bias
};

struct BaseParams {
  UNetConfig config;
  cond::EncoderParams encoder;  // token table trained with the base; projection frozen
  TensorF time_w1, time_b1;     // [time_dim, time_dim]
  TensorF in_conv_w, in_conv_b; // [9, C1]
  std::vector<ResBlock> enc1, enc2, dec2, dec1;
  TensorF down1_w, down1_b;     // C1 -> C2
  TensorF down2_w, down2_b;     // C2 -> Cm
  ResBlock mid_a, mid_b;
  TensorF up2_w, up2_b;         // Cm -> C2
  TensorF up1_w, up1_b;         // C2 -> C1
  AttnSite site_mid, site_up2, site_up1;
  TensorF out_norm_gain, out_norm_shift;
  TensorF out_conv_w, out_conv_b;  // [9*C1, 1]

  std::vector<AttnSite*> sites() { return {&site_mid, &site_up2, &site_up1}; }
  std::vector<const AttnSite*> sites() const { return {&site_mid, &site_up2, &site_up1}; }
};

struct AdapterParams {
  std::vector<AdapterSite> sites;  // parallel to BaseParams::sites()
};

using TensorVisitor = std::function<void(const std::string& name, TensorF& tensor)>;
using ConstTensorVisitor = std::function<void(const std::string& name, const TensorF& tensor)>;

// Stable, ordered enumeration of every stored tensor (encoder included).
void visit(BaseParams& p, const TensorVisitor& fn);
void visit(const BaseParams& p, const ConstTensorVisitor& fn);
void visit(AdapterParams& p, const TensorVisitor& fn);
void visit(const AdapterParams& p, const ConstTensorVisitor& fn);

// Names of base tensors that never train (the audio encoder projection).
bool is_frozen_encoder_tensor(const std::string& name);

std::size_t parameter_count(const BaseParams& p);
std::size_t parameter_count(const AdapterParams& p);
// Closed form from the configuration alone.
std::size_t expected_base_parameter_count(const UNetConfig& c);
std::size_t expected_adapter_parameter_count(const UNetConfig& c);

BaseParams init_params(const UNetConfig& config, std::uint64_t seed);
// Deep copies of each site's text key/value projections.
AdapterParams init_adapter_from_text(const BaseParams& base);

BaseParams clone(const BaseParams& p);
AdapterParams clone(const AdapterParams& p);

// Batched conditioning for one forward pass.
struct Conditioning {
  TensorF text;                          // [B, L_y, text_dim]
  std::optional<TensorF> audio;          // [B, m, audio_dim]; absent skips the audio branch
  std::vector<std::size_t> audio_lengths;  // valid keys per example; empty = all m
  float alpha = 0.0f;
};

// z: [B, n, d] site-space activations. Returns z_text + alpha * z_audio.
TensorF fused_cross_attention(const TensorF& z, const Conditioning& c, const AttnSite& site,
                              const AdapterSite* adapter, std::size_t heads);

// x_t: [B, 64, 64, 1]; t: one timestep per example in [0, kTrainSteps).
// Returns the noise estimate with the same shape.
TensorF predict_noise(const TensorF& x_t, std::span<const int> t, const Conditioning& c, const BaseParams& base,
                      const AdapterParams* adapter);

// Sinusoidal timestep features [B, time_dim].
TensorF timestep_features(std::span<const int> t, std::size_t dim);

// Pads pooled audio sequences to a common length; fills lengths.
TensorF stack_audio(std::span<const cond::AudioFeatures> feats, std::vector<std::size_t>& lengths,
                    std::size_t pad_to = 0);

}  // namespace apa::net
