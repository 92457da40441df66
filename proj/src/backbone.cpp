#include "apa/backbone.hpp"

#include <cmath>
#include <random>

#include "apa/errors.hpp"
#include "apa/numerics/ops.hpp"

namespace apa::net {

using num::Shape;

void UNetConfig::validate() const {
  for (auto v : {channels1, channels2, bottleneck, blocks_per_level, attn_width, heads, time_dim})
    if (v == 0) throw ContractError("unet config: sizes must be positive");
  if (attn_width % heads != 0)
    throw ContractError("unet config: attention width " + std::to_string(attn_width) + " not divisible by " +
                        std::to_string(heads) + " heads");
  if (time_dim % 2 != 0) throw ContractError("unet config: time_dim must be even");
  if (text_dim != cond::kFeatureDim || audio_dim != cond::kFeatureDim)
    throw ContractError("unet config: condition widths must match the encoder width " +
                        std::to_string(cond::kFeatureDim));
}

namespace {

TensorF copy_tensor(const TensorF& t) {
  auto d = t.data();
  return TensorF::from(t.shape(), std::vector<float>(d.begin(), d.end()));
}

class Init {
 public:
  explicit Init(std::uint64_t seed) : rng_(seed) {}
  TensorF normal(Shape shape, double stddev) {
    std::normal_distribution<double> n(0.0, stddev);
    std::vector<float> v(num::shape_numel(shape));
    for (auto& x : v) x = static_cast<float>(n(rng_));
    return TensorF::from(std::move(shape), std::move(v));
  }
  TensorF linear(std::size_t in, std::size_t out, double gain = 1.0) {
    return normal({in, out}, gain / std::sqrt(double(in)));
  }

 private:
  std::mt19937_64 rng_;
};

TensorF ones(std::size_t n) { return TensorF::full({n}, 1.0f); }
TensorF zeros(std::size_t n) { return TensorF::zeros({n}); }

ResBlock make_block(Init& init, std::size_t c, std::size_t time_dim) {
  return {ones(c), zeros(c), init.linear(time_dim, c, 0.5), zeros(c), init.linear(9 * c, c, 0.5), zeros(c)};
}

TensorF grid_position(std::size_t resolution, std::size_t d) {
  const double cell = double(synth::kBins) / double(resolution);
  std::vector<float> v;
  v.reserve(resolution * resolution * d);
  for (std::size_t i = 0; i < resolution; ++i)
    for (std::size_t j = 0; j < resolution; ++j) {
      auto code = cond::plane_position_code(i * cell + 0.5 * (cell - 1.0), j * cell + 0.5 * (cell - 1.0), d);
      v.insert(v.end(), code.begin(), code.end());
    }
  const std::size_t n = v.size();
  return TensorF::from({n}, std::move(v));
}

AttnSite make_site(Init& init, std::size_t resolution, std::size_t c, const UNetConfig& cfg) {
  const std::size_t d = cfg.attn_width;
  AttnSite s;
  s.resolution = resolution;
  s.norm_gain = ones(c);
  s.norm_shift = zeros(c);
  s.in_w = init.linear(c, d);
  s.in_b = zeros(d);
  s.wq = init.linear(d, d);
  s.wk = init.linear(cfg.text_dim, d);
  s.wv = init.linear(cfg.text_dim, d);
  s.out_w = init.linear(d, c, 0.5);
  s.out_b = zeros(c);
  s.position = grid_position(resolution, d);
  return s;
}

void visit_block(const std::string& prefix, ResBlock& b, const TensorVisitor& fn) {
  fn(prefix + ".norm_gain", b.norm_gain);
  fn(prefix + ".norm_shift", b.norm_shift);
  fn(prefix + ".time_w", b.time_w);
  fn(prefix + ".time_b", b.time_b);
  fn(prefix + ".conv_w", b.conv_w);
  fn(prefix + ".conv_b", b.conv_b);
}

void visit_site(const std::string& prefix, AttnSite& s, const TensorVisitor& fn) {
  fn(prefix + ".norm_gain", s.norm_gain);
  fn(prefix + ".norm_shift", s.norm_shift);
  fn(prefix + ".in_w", s.in_w);
  fn(prefix + ".in_b", s.in_b);
  fn(prefix + ".wq", s.wq);
  fn(prefix + ".wk", s.wk);
  fn(prefix + ".wv", s.wv);
  fn(prefix + ".out_w", s.out_w);
  fn(prefix + ".out_b", s.out_b);
}

const char* const kSiteNames[] = {"site_mid", "site_up2", "site_up1"};

}  // namespace

void visit(BaseParams& p, const TensorVisitor& fn) {
  fn("encoder.patch_projection", p.encoder.patch_projection);
  fn("encoder.token_table", p.encoder.token_table);
  fn("time.w1", p.time_w1);
  fn("time.b1", p.time_b1);
  fn("in_conv.w", p.in_conv_w);
  fn("in_conv.b", p.in_conv_b);
  for (std::size_t i = 0; i < p.enc1.size(); ++i) visit_block("enc1." + std::to_string(i), p.enc1[i], fn);
  fn("down1.w", p.down1_w);
  fn("down1.b", p.down1_b);
  for (std::size_t i = 0; i < p.enc2.size(); ++i) visit_block("enc2." + std::to_string(i), p.enc2[i], fn);
  fn("down2.w", p.down2_w);
  fn("down2.b", p.down2_b);
  visit_block("mid_a", p.mid_a, fn);
  visit_site("site_mid", p.site_mid, fn);
  visit_block("mid_b", p.mid_b, fn);
  fn("up2.w", p.up2_w);
  fn("up2.b", p.up2_b);
  for (std::size_t i = 0; i < p.dec2.size(); ++i) visit_block("dec2." + std::to_string(i), p.dec2[i], fn);
  visit_site("site_up2", p.site_up2, fn);
  fn("up1.w", p.up1_w);
  fn("up1.b", p.up1_b);
  for (std::size_t i = 0; i < p.dec1.size(); ++i) visit_block("dec1." + std::to_string(i), p.dec1[i], fn);
  visit_site("site_up1", p.site_up1, fn);
  fn("out.norm_gain", p.out_norm_gain);
  fn("out.norm_shift", p.out_norm_shift);
  fn("out.conv_w", p.out_conv_w);
  fn("out.conv_b", p.out_conv_b);
}

void visit(const BaseParams& p, const ConstTensorVisitor& fn) {
  visit(const_cast<BaseParams&>(p), [&](const std::string& n, TensorF& t) { fn(n, t); });
}

void visit(AdapterParams& p, const TensorVisitor& fn) {
  for (std::size_t i = 0; i < p.sites.size(); ++i) {
    const std::string prefix = i < 3 ? kSiteNames[i] : "site" + std::to_string(i);
    fn(prefix + ".wk_audio", p.sites[i].wk);
    fn(prefix + ".wv_audio", p.sites[i].wv);
  }
}

void visit(const AdapterParams& p, const ConstTensorVisitor& fn) {
  visit(const_cast<AdapterParams&>(p), [&](const std::string& n, TensorF& t) { fn(n, t); });
}

bool is_frozen_encoder_tensor(const std::string& name) { return name == "encoder.patch_projection"; }

std::size_t parameter_count(const BaseParams& p) {
  std::size_t n = 0;
  visit(p, [&](const std::string&, const TensorF& t) { n += t.numel(); });
  return n;
}

std::size_t parameter_count(const AdapterParams& p) {
  std::size_t n = 0;
  visit(p, [&](const std::string&, const TensorF& t) { n += t.numel(); });
  return n;
}

std::size_t expected_base_parameter_count(const UNetConfig& c) {
  const std::size_t e = c.time_dim, d = c.attn_width, c1 = c.channels1, c2 = c.channels2, cm = c.bottleneck;
  auto block = [&](std::size_t ch) { return 2 * ch + e * ch + ch + 9 * ch * ch + ch; };
  auto site = [&](std::size_t ch) { return 2 * ch + ch * d + d + d * d + 2 * c.text_dim * d + d * ch + ch; };
  auto linear = [](std::size_t in, std::size_t out) { return in * out + out; };
  std::size_t n = cond::kPatchValues * c.audio_dim + std::size_t(synth::vocab::size) * c.text_dim;
  n += linear(e, e) + linear(9, c1);
  n += c.blocks_per_level * (2 * block(c1) + 2 * block(c2)) + 2 * block(cm);
  n += linear(c1, c2) + linear(c2, cm) + linear(cm, c2) + linear(c2, c1);
  n += site(cm) + site(c2) + site(c1);
  n += 2 * c1 + linear(9 * c1, 1);
  return n;
}

std::size_t expected_adapter_parameter_count(const UNetConfig& c) { return 3 * 2 * c.audio_dim * c.attn_width; }

BaseParams init_params(const UNetConfig& config, std::uint64_t seed) {
  config.validate();
  Init init(seed);
  BaseParams p;
  p.config = config;
  p.encoder = cond::init_encoder(seed ^ 0x9e3779b97f4a7c15ULL);
  const std::size_t c1 = config.channels1, c2 = config.channels2, cm = config.bottleneck, e = config.time_dim;
  p.time_w1 = init.linear(e, e);
  p.time_b1 = zeros(e);
  p.in_conv_w = init.linear(9, c1);
  p.in_conv_b = zeros(c1);
  for (std::size_t i = 0; i < config.blocks_per_level; ++i) p.enc1.push_back(make_block(init, c1, e));
  p.down1_w = init.linear(c1, c2);
  p.down1_b = zeros(c2);
  for (std::size_t i = 0; i < config.blocks_per_level; ++i) p.enc2.push_back(make_block(init, c2, e));
  p.down2_w = init.linear(c2, cm);
  p.down2_b = zeros(cm);
  p.mid_a = make_block(init, cm, e);
  p.site_mid = make_site(init, synth::kBins / 4, cm, config);
  p.mid_b = make_block(init, cm, e);
  p.up2_w = init.linear(cm, c2);
  p.up2_b = zeros(c2);
  for (std::size_t i = 0; i < config.blocks_per_level; ++i) p.dec2.push_back(make_block(init, c2, e));
  p.site_up2 = make_site(init, synth::kBins / 2, c2, config);
  p.up1_w = init.linear(c2, c1);
  p.up1_b = zeros(c1);
  for (std::size_t i = 0; i < config.blocks_per_level; ++i) p.dec1.push_back(make_block(init, c1, e));
  p.site_up1 = make_site(init, synth::kBins, c1, config);
  p.out_norm_gain = ones(c1);
  p.out_norm_shift = zeros(c1);
  p.out_conv_w = init.linear(9 * c1, 1, 0.1);
  p.out_conv_b = zeros(1);
  return p;
}

AdapterParams init_adapter_from_text(const BaseParams& base) {
  if (base.config.audio_dim != base.config.text_dim)
    throw ContractError("init_adapter_from_text: audio width " + std::to_string(base.config.audio_dim) +
                        " differs from text width " + std::to_string(base.config.text_dim));
  AdapterParams a;
  for (const AttnSite* s : base.sites()) a.sites.push_back({copy_tensor(s->wk), copy_tensor(s->wv)});
  return a;
}

BaseParams clone(const BaseParams& p) {
  BaseParams c = p;
  visit(c, [](const std::string&, TensorF& t) { t = copy_tensor(t); });
  for (AttnSite* s : c.sites()) s->position = copy_tensor(s->position);
  return c;
}

AdapterParams clone(const AdapterParams& p) {
  AdapterParams c = p;
  visit(c, [](const std::string&, TensorF& t) { t = copy_tensor(t); });
  return c;
}

TensorF timestep_features(std::span<const int> t, std::size_t dim) {
  std::vector<float> v(t.size() * dim);
  const std::size_t half = dim / 2;
  for (std::size_t b = 0; b < t.size(); ++b)
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(1000.0, -double(i) / double(half));
      v[b * dim + i] = static_cast<float>(std::sin(t[b] * freq));
      v[b * dim + half + i] = static_cast<float>(std::cos(t[b] * freq));
    }
  return TensorF::from({t.size(), dim}, std::move(v));
}

TensorF stack_audio(std::span<const cond::AudioFeatures> feats, std::vector<std::size_t>& lengths,
                    std::size_t pad_to) {
  if (feats.empty()) throw ContractError("stack_audio: no features");
  const std::size_t d = feats[0].seq.dim(1);
  std::size_t m = pad_to;
  for (const auto& f : feats) m = std::max(m, f.length());
  std::vector<float> v(feats.size() * m * d, 0.0f);
  lengths.assign(feats.size(), 0);
  for (std::size_t b = 0; b < feats.size(); ++b) {
    if (feats[b].seq.dim(1) != d) throw DimensionError("stack_audio: mixed feature widths");
    auto src = feats[b].seq.data();
    std::copy(src.begin(), src.end(), v.begin() + b * m * d);
    lengths[b] = feats[b].length();
  }
  return TensorF::from({feats.size(), m, d}, std::move(v));
}

TensorF fused_cross_attention(const TensorF& z, const Conditioning& c, const AttnSite& site,
                              const AdapterSite* adapter, std::size_t heads) {
  if (z.rank() != 3 || z.dim(2) != site.wq.dim(0))
    throw DimensionError("fused_cross_attention: z " + num::shape_str(z.shape()) + " does not match width " +
                         std::to_string(site.wq.dim(0)));
  if (c.text.rank() != 3 || c.text.dim(0) != z.dim(0))
    throw DimensionError("fused_cross_attention: text " + num::shape_str(c.text.shape()) + " for batch " +
                         std::to_string(z.dim(0)));
  const TensorF q = num::matmul(z, site.wq);
  TensorF out = num::multihead_attention(q, num::matmul(c.text, site.wk), num::matmul(c.text, site.wv), heads);
  if (adapter == nullptr || !c.audio || c.alpha == 0.0f) return out;
  const TensorF& a = *c.audio;
  if (a.rank() != 3 || a.dim(0) != z.dim(0))
    throw DimensionError("fused_cross_attention: audio " + num::shape_str(a.shape()) + " for batch " +
                         std::to_string(z.dim(0)));
  TensorF za = num::multihead_attention(q, num::matmul(a, adapter->wk), num::matmul(a, adapter->wv), heads,
                                        c.audio_lengths);
  return num::add(out, num::scale(za, c.alpha));
}

namespace {

TensorF res_block(const TensorF& h, const TensorF& temb, const ResBlock& b) {
  auto n = num::layer_norm(h, b.norm_gain, b.norm_shift);
  n = num::add_per_example(n, num::add_bias(num::matmul(temb, b.time_w), b.time_b));
  return num::add(h, num::conv3x3(num::silu(n), b.conv_w, b.conv_b));
}

TensorF linear(const TensorF& x, const TensorF& w, const TensorF& b) { return num::add_bias(num::matmul(x, w), b); }

TensorF site_forward(const TensorF& h, const Conditioning& c, const AttnSite& site, const AdapterSite* adapter,
                     std::size_t heads) {
  const std::size_t batch = h.dim(0), r = h.dim(1), ch = h.dim(3), d = site.wq.dim(0);
  const TensorF flat = num::reshape(h, {batch, r * r, ch});
  TensorF z = linear(num::layer_norm(flat, site.norm_gain, site.norm_shift), site.in_w, site.in_b);
  z = num::reshape(num::add_bias(num::reshape(z, {batch, r * r * d}), site.position), {batch, r * r, d});
  const TensorF fused = fused_cross_attention(z, c, site, adapter, heads);
  return num::reshape(num::add(flat, linear(fused, site.out_w, site.out_b)), {batch, r, r, ch});
}

}  // namespace

TensorF predict_noise(const TensorF& x_t, std::span<const int> t, const Conditioning& c, const BaseParams& p,
                      const AdapterParams* adapter) {
  if (x_t.rank() != 4 || x_t.dim(1) != synth::kBins || x_t.dim(2) != synth::kFrames || x_t.dim(3) != 1)
    throw DimensionError("predict_noise: expected [B, 64, 64, 1], got " + num::shape_str(x_t.shape()));
  const std::size_t batch = x_t.dim(0);
  if (t.size() != batch)
    throw DimensionError("predict_noise: " + std::to_string(t.size()) + " timesteps for batch " +
                         std::to_string(batch));
  for (int ti : t)
    if (ti < 0 || ti >= static_cast<int>(kTrainSteps))
      throw ContractError("predict_noise: timestep " + std::to_string(ti) + " outside [0, " +
                          std::to_string(kTrainSteps) + ")");
  if (adapter && adapter->sites.size() != 3)
    throw ContractError("predict_noise: adapter has " + std::to_string(adapter->sites.size()) + " sites, expected 3");
  const auto site_adapter = [&](std::size_t i) { return adapter ? &adapter->sites[i] : nullptr; };
  const std::size_t heads = p.config.heads;

  const TensorF temb = num::silu(linear(timestep_features(t, p.config.time_dim), p.time_w1, p.time_b1));

  TensorF h = num::conv3x3(x_t, p.in_conv_w, p.in_conv_b);
  for (const auto& b : p.enc1) h = res_block(h, temb, b);
  const TensorF skip1 = h;
  h = linear(num::avg_pool2(h), p.down1_w, p.down1_b);
  for (const auto& b : p.enc2) h = res_block(h, temb, b);
  const TensorF skip2 = h;
  h = linear(num::avg_pool2(h), p.down2_w, p.down2_b);

  h = res_block(h, temb, p.mid_a);
  h = site_forward(h, c, p.site_mid, site_adapter(0), heads);
  h = res_block(h, temb, p.mid_b);

  h = num::add(num::upsample2(linear(h, p.up2_w, p.up2_b)), skip2);
  for (const auto& b : p.dec2) h = res_block(h, temb, b);
  h = site_forward(h, c, p.site_up2, site_adapter(1), heads);

  h = num::add(num::upsample2(linear(h, p.up1_w, p.up1_b)), skip1);
  for (const auto& b : p.dec1) h = res_block(h, temb, b);
  h = site_forward(h, c, p.site_up1, site_adapter(2), heads);

  h = num::silu(num::layer_norm(h, p.out_norm_gain, p.out_norm_shift));
  return num::conv3x3(h, p.out_conv_w, p.out_conv_b);
}

}  // namespace apa::net
