#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "apa/backbone.hpp"
#include "apa/errors.hpp"
#include "apa/numerics/grad_check.hpp"
#include "apa/numerics/ops.hpp"

using namespace apa;
using namespace apa::net;

namespace {

TensorF random_tensor(std::mt19937_64& rng, num::Shape shape, double spread = 1.0) {
  std::normal_distribution<double> n(0.0, spread);
  std::vector<float> v(num::shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(n(rng));
  return TensorF::from(std::move(shape), std::move(v));
}

bool equal(const TensorF& a, const TensorF& b) {
  return a.shape() == b.shape() && std::ranges::equal(a.data(), b.data());
}

double max_abs_diff(const TensorF& a, const TensorF& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, double(std::abs(a.at(i) - b.at(i))));
  return m;
}

struct SiteFixture {
  BaseParams base = init_params(UNetConfig{}, 21);
  AdapterParams adapter = init_adapter_from_text(base);
  std::mt19937_64 rng{5};
  TensorF z = random_tensor(rng, {2, 16, 32});
  TensorF text = random_tensor(rng, {2, 4, 32});
  TensorF audio = random_tensor(rng, {2, 8, 32});
};

}  // namespace

TEST(Init, SameSeedIsBitIdentical) {
  auto a = init_params(UNetConfig{}, 3), b = init_params(UNetConfig{}, 3);
  std::vector<TensorF> ta, tb;
  visit(a, [&](const std::string&, const TensorF& t) { ta.push_back(t); });
  visit(b, [&](const std::string&, const TensorF& t) { tb.push_back(t); });
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_TRUE(equal(ta[i], tb[i]));
}

TEST(Init, DifferentSeedsDiffer) {
  auto a = init_params(UNetConfig{}, 0), b = init_params(UNetConfig{}, 1);
  EXPECT_FALSE(equal(a.site_up1.wq, b.site_up1.wq));
  EXPECT_FALSE(equal(a.in_conv_w, b.in_conv_w));
}

TEST(Init, ParameterCountMatchesClosedForm) {
  auto p = init_params(UNetConfig{}, 0);
  EXPECT_EQ(parameter_count(p), expected_base_parameter_count(p.config));
  // Hand count for the default configuration.
  EXPECT_EQ(parameter_count(p), 95569u);
  auto a = init_adapter_from_text(p);
  EXPECT_EQ(parameter_count(a), expected_adapter_parameter_count(p.config));
  EXPECT_EQ(parameter_count(a), 6144u);

  UNetConfig wide;
  wide.channels1 = 8;
  wide.bottleneck = 24;
  wide.blocks_per_level = 1;
  wide.heads = 4;
  EXPECT_EQ(parameter_count(init_params(wide, 0)), expected_base_parameter_count(wide));
}

TEST(Init, InvalidConfigThrows) {
  UNetConfig c;
  c.heads = 3;
  EXPECT_THROW(init_params(c, 0), ContractError);
  c = {};
  c.channels1 = 0;
  EXPECT_THROW(init_params(c, 0), ContractError);
}

TEST(Adapter, InitCopiesTextProjections) {
  auto base = init_params(UNetConfig{}, 4);
  auto adapter = init_adapter_from_text(base);
  auto sites = base.sites();
  ASSERT_EQ(adapter.sites.size(), sites.size());
  for (std::size_t i = 0; i < sites.size(); ++i) {
    EXPECT_TRUE(equal(adapter.sites[i].wk, sites[i]->wk));
    EXPECT_TRUE(equal(adapter.sites[i].wv, sites[i]->wv));
    EXPECT_FALSE(adapter.sites[i].wk.same(sites[i]->wk));
  }
}

TEST(Adapter, MutatingCopyLeavesBaseUntouched) {
  auto base = init_params(UNetConfig{}, 4);
  const auto before = clone(base);
  auto adapter = init_adapter_from_text(base);
  for (auto& s : adapter.sites) {
    for (auto& v : s.wk.mutable_data()) v += 1.0f;
    for (auto& v : s.wv.mutable_data()) v *= -2.0f;
  }
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(equal(base.sites()[i]->wk, before.sites()[i]->wk));
    EXPECT_TRUE(equal(base.sites()[i]->wv, before.sites()[i]->wv));
  }
}

TEST(FusedAttention, AlphaZeroIsTextBranch) {
  SiteFixture f;
  Conditioning text_only{f.text, std::nullopt, {}, 0.0f};
  Conditioning with_audio{f.text, f.audio, {}, 0.0f};
  auto zt = fused_cross_attention(f.z, text_only, f.base.site_mid, nullptr, 2);
  auto out = fused_cross_attention(f.z, with_audio, f.base.site_mid, &f.adapter.sites[0], 2);
  EXPECT_TRUE(equal(zt, out));
}

TEST(FusedAttention, ZeroAudioIsTextBranch) {
  SiteFixture f;
  Conditioning text_only{f.text, std::nullopt, {}, 0.7f};
  Conditioning zero_audio{f.text, TensorF::zeros({2, 8, 32}), {}, 0.7f};
  auto zt = fused_cross_attention(f.z, text_only, f.base.site_mid, nullptr, 2);
  auto out = fused_cross_attention(f.z, zero_audio, f.base.site_mid, &f.adapter.sites[0], 2);
  EXPECT_TRUE(equal(zt, out));
}

TEST(FusedAttention, CopiedAdapterWithSameInputsScalesByOnePlusAlpha) {
  SiteFixture f;
  for (float alpha : {0.5f, 1.0f, 2.5f}) {
    Conditioning text_only{f.text, std::nullopt, {}, alpha};
    Conditioning same{f.text, f.text, {}, alpha};
    auto zt = fused_cross_attention(f.z, text_only, f.base.site_up2, nullptr, 2);
    auto out = fused_cross_attention(f.z, same, f.base.site_up2, &f.adapter.sites[1], 2);
    EXPECT_LT(max_abs_diff(out, num::scale(zt, 1.0f + alpha)), 1e-6) << alpha;
  }
}

TEST(FusedAttention, AudioContributionIsLinearInAlpha) {
  SiteFixture f;
  std::vector<std::size_t> lengths{8, 5};
  Conditioning text_only{f.text, std::nullopt, {}, 0.0f};
  auto zt = fused_cross_attention(f.z, text_only, f.base.site_up1, nullptr, 2);
  for (float alpha : {0.1f, 0.4f, 1.3f}) {
    Conditioning c1{f.text, f.audio, lengths, alpha}, c2{f.text, f.audio, lengths, 2 * alpha};
    auto d1 = num::sub(fused_cross_attention(f.z, c1, f.base.site_up1, &f.adapter.sites[2], 2), zt);
    auto d2 = num::sub(fused_cross_attention(f.z, c2, f.base.site_up1, &f.adapter.sites[2], 2), zt);
    EXPECT_LT(max_abs_diff(d2, num::scale(d1, 2.0f)), 1e-5) << alpha;
  }
}

TEST(FusedAttention, ShapeMismatchThrows) {
  SiteFixture f;
  std::mt19937_64 rng(1);
  Conditioning c{f.text, std::nullopt, {}, 0.0f};
  EXPECT_THROW(fused_cross_attention(random_tensor(rng, {2, 16, 31}), c, f.base.site_mid, nullptr, 2),
               DimensionError);
  Conditioning wrong_batch{random_tensor(rng, {3, 4, 32}), std::nullopt, {}, 0.0f};
  EXPECT_THROW(fused_cross_attention(f.z, wrong_batch, f.base.site_mid, nullptr, 2), DimensionError);
}

TEST(PredictNoise, DeterministicAndShapePreserving) {
  auto base = init_params(UNetConfig{}, 8);
  auto adapter = init_adapter_from_text(base);
  std::mt19937_64 rng(9);
  auto x = random_tensor(rng, {2, 64, 64, 1});
  Conditioning c{random_tensor(rng, {2, 4, 32}), random_tensor(rng, {2, 32, 32}), {32, 16}, 0.5f};
  std::vector<int> t{0, 199};
  num::NoGradGuard guard;
  auto a = predict_noise(x, t, c, base, &adapter);
  auto b = predict_noise(x, t, c, base, &adapter);
  EXPECT_EQ(a.shape(), x.shape());
  EXPECT_TRUE(equal(a, b));
  EXPECT_TRUE(std::ranges::all_of(a.data(), [](float v) { return std::isfinite(v); }));
}

TEST(PredictNoise, TimestepOutOfRangeThrows) {
  auto base = init_params(UNetConfig{}, 8);
  std::mt19937_64 rng(9);
  auto x = random_tensor(rng, {1, 64, 64, 1});
  Conditioning c{random_tensor(rng, {1, 4, 32}), std::nullopt, {}, 0.0f};
  std::vector<int> bad{200}, neg{-1};
  EXPECT_THROW(predict_noise(x, bad, c, base, nullptr), ContractError);
  EXPECT_THROW(predict_noise(x, neg, c, base, nullptr), ContractError);
  EXPECT_THROW(predict_noise(random_tensor(rng, {1, 32, 64, 1}), std::vector<int>{3}, c, base, nullptr),
               DimensionError);
}

TEST(PredictNoise, NullTextZeroAudioMatchesTextOnlyModel) {
  auto base = init_params(UNetConfig{}, 8);
  auto adapter = init_adapter_from_text(base);
  std::mt19937_64 rng(2);
  auto x = random_tensor(rng, {1, 64, 64, 1});
  auto null_text = cond::encode_text_batch(std::vector{synth::null_condition()}, base.encoder);
  num::NoGradGuard guard;
  auto uncond = predict_noise(x, std::vector<int>{50}, {null_text, std::nullopt, {}, 0.0f}, base, nullptr);
  auto zero_audio =
      predict_noise(x, std::vector<int>{50}, {null_text, TensorF::zeros({1, 64, 32}), {}, 1.0f}, base, &adapter);
  EXPECT_TRUE(equal(uncond, zero_audio));
}

TEST(PredictNoise, AdapterGradientMatchesFiniteDifferences) {
  auto base = init_params(UNetConfig{}, 13);
  auto adapter = init_adapter_from_text(base);
  std::mt19937_64 rng(14);
  // Perturb so the audio branch differs from the text branch.
  for (auto& s : adapter.sites)
    for (auto* w : {&s.wk, &s.wv})
      for (auto& v : w->mutable_data()) v += 0.3f * std::normal_distribution<float>()(rng);
  auto x = random_tensor(rng, {1, 64, 64, 1});
  Conditioning c{random_tensor(rng, {1, 4, 32}), random_tensor(rng, {1, 16, 32}), {}, 1.0f};
  std::vector<int> t{120};
  std::vector<std::size_t> coords;
  for (std::size_t i = 0; i < 1024; i += 97) coords.push_back(i);
  for (std::size_t site = 0; site < 3; ++site)
    for (int which = 0; which < 2; ++which) {
      auto& target = which == 0 ? adapter.sites[site].wk : adapter.sites[site].wv;
      const TensorF original = target;
      num::ScalarFn<float> fn = [&](const TensorF& w) {
        target = w;
        return num::mean(predict_noise(x, t, c, base, &adapter));
      };
      const double err = num::grad_check(fn, original, 1e-3, coords);
      target = original;
      EXPECT_LT(err, 1e-3) << "site " << site << (which == 0 ? " wk" : " wv");
    }
}

TEST(StackAudio, PadsAndRecordsLengths) {
  std::vector<cond::AudioFeatures> f{{TensorF::full({3, 32}, 1.0f), 2}, {TensorF::full({5, 32}, 2.0f), 1}};
  std::vector<std::size_t> lengths;
  auto s = stack_audio(f, lengths, 8);
  EXPECT_EQ(s.shape(), (num::Shape{2, 8, 32}));
  EXPECT_EQ(lengths, (std::vector<std::size_t>{3, 5}));
  EXPECT_EQ(s.at(2 * 32), 1.0f);
  EXPECT_EQ(s.at(3 * 32), 0.0f);
  EXPECT_EQ(s.at(8 * 32 + 4 * 32), 2.0f);
}
