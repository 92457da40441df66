#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "apa/diffusion.hpp"
#include "apa/errors.hpp"
#include "apa/numerics/ops.hpp"

using namespace apa;
using namespace apa::diff;

namespace {

TensorF random_tensor(std::mt19937_64& rng, num::Shape shape) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<float> v(num::shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return TensorF::from(std::move(shape), std::move(v));
}

double max_abs_diff(const TensorF& a, const TensorF& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, double(std::abs(a.at(i) - b.at(i))));
  return m;
}

net::BaseParams small_base(std::uint64_t seed) {
  net::UNetConfig c;
  c.channels1 = 8;
  c.channels2 = 16;
  c.bottleneck = 16;
  c.blocks_per_level = 1;
  return net::init_params(c, seed);
}

SampleRequest request(const net::BaseParams& base, std::uint64_t seed, bool audio) {
  SampleRequest r;
  synth::ClipSpec spec;
  spec.melody.fill(24);
  r.positive = synth::edit_tokens(synth::Task::timbre, int(synth::Timbre::bright), synth::Timbre::pure);
  r.negative = synth::edit_tokens(synth::Task::timbre, int(synth::Timbre::pure), synth::Timbre::pure);
  if (audio) r.audio = cond::pool_features(cond::encode_audio(synth::render_spectrogram(spec), base.encoder), 2);
  r.seed = seed;
  return r;
}

}  // namespace

TEST(Schedule, StrictlyDecreasingWithExpectedEndpoints) {
  auto s = make_schedule();
  ASSERT_EQ(s.steps(), 200u);
  for (std::size_t i = 1; i < s.steps(); ++i) EXPECT_LT(s.retention[i], s.retention[i - 1]);
  EXPECT_DOUBLE_EQ(s.retention[0], 1.0 - s.variances[0]);
  EXPECT_DOUBLE_EQ(s.variances[0], 5e-4);
  EXPECT_DOUBLE_EQ(s.variances[199], 0.1);
  // Independent product of (1 - v_i) for linearly spaced v_i in [5e-4, 0.1].
  long double keep = 1.0L;
  for (int i = 0; i < 200; ++i) keep *= 1.0L - (5e-4L + (0.1L - 5e-4L) * i / 199.0L);
  EXPECT_NEAR(s.retention.back(), double(keep), 1e-12);
  EXPECT_LT(s.retention.back(), 0.01);
  EXPECT_GT(s.retention.back(), 0.0);
}

TEST(Schedule, TooFewStepsThrows) {
  EXPECT_THROW(make_schedule(1), ContractError);
  EXPECT_NO_THROW(make_schedule(2));
}

TEST(ForwardNoise, RetentionEndpoints) {
  NoiseSchedule s{{0.0, 1.0}, {1.0, 0.0}};
  std::mt19937_64 rng(1);
  auto x = random_tensor(rng, {2, 3}), e = random_tensor(rng, {2, 3});
  auto keep = forward_noise(x, std::vector<int>{0, 0}, e, s);
  auto noise = forward_noise(x, std::vector<int>{1, 1}, e, s);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(keep.at(i), x.at(i));
    EXPECT_EQ(noise.at(i), e.at(i));
  }
}

TEST(ForwardNoise, ExactFormula) {
  auto s = make_schedule();
  std::vector<float> x{0.5f, -1.0f}, e{2.0f, 0.25f};
  auto out = forward_noise(x, 80, e, s);
  const double r = s.retention[80];
  EXPECT_FLOAT_EQ(out[0], float(std::sqrt(r) * 0.5 + std::sqrt(1 - r) * 2.0));
  EXPECT_FLOAT_EQ(out[1], float(-std::sqrt(r) + std::sqrt(1 - r) * 0.25));
}

TEST(ForwardNoise, PreservesUnitVariance) {
  auto s = make_schedule();
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n;
  for (int t : {0, 60, 120, 199}) {
    double sum = 0.0, sq = 0.0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
      std::vector<float> x{float(n(rng))}, e{float(n(rng))};
      const double v = forward_noise(x, t, e, s)[0];
      sum += v;
      sq += v * v;
    }
    const double var = sq / draws - (sum / draws) * (sum / draws);
    EXPECT_NEAR(var, 1.0, 0.05) << "t=" << t;
  }
}

TEST(ForwardNoise, SecondMomentsCombine) {
  // Var(x_t) = r Var(x) + (1 - r) Var(eps) for independent x and eps.
  auto s = make_schedule();
  std::mt19937_64 rng(8);
  std::normal_distribution<double> nx(0.0, 0.5), ne(0.0, 1.0);
  const int t = 40, draws = 20000;
  double sq = 0.0;
  for (int i = 0; i < draws; ++i) {
    std::vector<float> x{float(nx(rng))}, e{float(ne(rng))};
    const double v = forward_noise(x, t, e, s)[0];
    sq += v * v;
  }
  const double r = s.retention[t];
  EXPECT_NEAR(sq / draws, r * 0.25 + (1 - r), 0.05 * (r * 0.25 + (1 - r)));
}

TEST(ForwardNoise, ShapeMismatchThrows) {
  auto s = make_schedule();
  std::mt19937_64 rng(1);
  EXPECT_THROW(forward_noise(random_tensor(rng, {2, 3}), std::vector<int>{0, 1}, random_tensor(rng, {2, 4}), s),
               DimensionError);
  std::vector<float> a(3), b(4);
  EXPECT_THROW(forward_noise(a, 0, b, s), DimensionError);
  EXPECT_THROW(forward_noise(a, 200, a, s), ContractError);
}

TEST(ModelSpace, RoundTripsAndClamps) {
  synth::Spectrogram g;
  g.at(3, 4) = 1.0f;
  g.at(10, 10) = 0.25f;
  auto m = to_model_space(std::vector{g});
  EXPECT_EQ(m.at(0), -1.0f);
  auto back = from_model_space(m);
  EXPECT_EQ(back[0], g);
  auto over = from_model_space(num::scale(m, 3.0f));
  EXPECT_EQ(over[0].at(3, 4), 1.0f);
  EXPECT_EQ(over[0].at(0, 0), 0.0f);
}

TEST(TrainingLoss, UntrainedModelNearUnitLoss) {
  auto base = net::init_params(net::UNetConfig{}, 3);
  std::vector<synth::Spectrogram> grids;
  std::vector<synth::ConditionTokens> toks;
  for (const auto& r : synth::generate_dataset(4, 11)) {
    grids.push_back(r.grid);
    toks.push_back(r.tokens);
  }
  TrainBatch batch{to_model_space(grids), {cond::encode_text_batch(toks, base.encoder), std::nullopt, {}, 0.0f}};
  std::mt19937_64 rng(5);
  num::NoGradGuard guard;
  double total = 0.0;
  for (int i = 0; i < 4; ++i) total += training_loss(batch, rng, make_predictor(base, nullptr), make_schedule()).item();
  EXPECT_NEAR(total / 4, 1.0, 0.3);
}

TEST(TrainingLoss, PerfectPredictorGivesZero) {
  auto s = make_schedule();
  std::mt19937_64 data_rng(1);
  TrainBatch batch{random_tensor(data_rng, {3, 64, 64, 1}), {TensorF::zeros({3, 4, 32}), std::nullopt, {}, 0.0f}};
  // Recovers eps exactly from x_t, x0 and the schedule.
  Predictor oracle = [&](const TensorF& x_t, std::span<const int> t, const net::Conditioning&) {
    std::vector<float> e(x_t.numel());
    const std::size_t per = x_t.numel() / t.size();
    for (std::size_t b = 0; b < t.size(); ++b) {
      const double r = s.retention[std::size_t(t[b])];
      for (std::size_t i = b * per; i < (b + 1) * per; ++i)
        e[i] = float((x_t.at(i) - std::sqrt(r) * batch.x0.at(i)) / std::sqrt(1.0 - r));
    }
    return TensorF::from(x_t.shape(), std::move(e));
  };
  std::mt19937_64 rng(2);
  EXPECT_NEAR(training_loss(batch, rng, oracle, s).item(), 0.0, 1e-6);
}

TEST(TrainingLoss, DeterministicGivenSeed) {
  auto base = small_base(2);
  std::mt19937_64 data_rng(1);
  TrainBatch batch{random_tensor(data_rng, {2, 64, 64, 1}), {TensorF::zeros({2, 4, 32}), std::nullopt, {}, 0.0f}};
  std::mt19937_64 r1(9), r2(9);
  num::NoGradGuard guard;
  auto p = make_predictor(base, nullptr);
  EXPECT_EQ(training_loss(batch, r1, p, make_schedule()).item(), training_loss(batch, r2, p, make_schedule()).item());
}

TEST(TrainingLoss, EmptyBatchThrows) {
  TrainBatch batch{TensorF::zeros({0, 64, 64, 1}), {TensorF::zeros({0, 4, 32}), std::nullopt, {}, 0.0f}};
  std::mt19937_64 rng(1);
  Predictor p = [](const TensorF& x, std::span<const int>, const net::Conditioning&) { return x; };
  EXPECT_THROW(training_loss(batch, rng, p, make_schedule()), ContractError);
}

class GuidanceTest : public ::testing::Test {
 protected:
  net::BaseParams base = small_base(4);
  net::AdapterParams adapter = net::init_adapter_from_text(base);
  std::mt19937_64 rng{3};
  TensorF x = random_tensor(rng, {2, 64, 64, 1});
  std::vector<int> t{30, 150};
  net::Conditioning pos{random_tensor(rng, {2, 4, 32}), random_tensor(rng, {2, 16, 32}), {16, 9}, 0.5f};
  TensorF neg = random_tensor(rng, {2, 4, 32});
  Predictor predict = make_predictor(base, &adapter);
  num::NoGradGuard guard;
};

TEST_F(GuidanceTest, LambdaOneIsConditionedPrediction) {
  auto g = guided_noise_prediction(x, t, pos, neg, 1.0, predict);
  EXPECT_LT(max_abs_diff(g, predict(x, t, pos)), 1e-6);
}

TEST_F(GuidanceTest, LambdaZeroIsNegativeBranchWithoutAudio) {
  auto g = guided_noise_prediction(x, t, pos, neg, 0.0, predict);
  net::Conditioning n{neg, std::nullopt, {}, 0.5f};
  EXPECT_LT(max_abs_diff(g, predict(x, t, n)), 1e-6);
}

TEST_F(GuidanceTest, AffineInLambda) {
  for (auto [l1, l3] : std::vector<std::pair<double, double>>{{0.0, 2.0}, {3.5, 10.0}, {1.0, 7.5}}) {
    auto a = guided_noise_prediction(x, t, pos, neg, l1, predict);
    auto b = guided_noise_prediction(x, t, pos, neg, 0.5 * (l1 + l3), predict);
    auto c = guided_noise_prediction(x, t, pos, neg, l3, predict);
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i)
      worst = std::max(worst, std::abs(double(a.at(i)) + c.at(i) - 2.0 * b.at(i)) / std::max(1.0, std::abs(double(b.at(i)))));
    EXPECT_LT(worst, 1e-6) << l1 << ", " << l3;
  }
}

TEST_F(GuidanceTest, DefaultScale) { EXPECT_EQ(GuidanceConfig{}.lambda, 7.5); }

TEST(SubSchedule, FullLengthIsStrideOne) {
  auto ts = sub_schedule(200, 200);
  for (int i = 0; i < 200; ++i) EXPECT_EQ(ts[std::size_t(i)], i);
}

TEST(SubSchedule, FiftyStepsStrideFour) {
  auto ts = sub_schedule(50, 200);
  ASSERT_EQ(ts.size(), 50u);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(ts[i], int(4 * i + 3));
  EXPECT_THROW(sub_schedule(201, 200), ContractError);
  EXPECT_THROW(sub_schedule(0, 200), ContractError);
}

TEST(SubSchedule, InitStrength) {
  EXPECT_EQ(init_step_count(0.75, 50), 38u);
  EXPECT_EQ(sub_schedule(50, 200)[init_step_count(0.75, 50) - 1], 151);
  EXPECT_EQ(init_step_count(1.0, 50), 50u);
  EXPECT_EQ(init_step_count(0.001, 50), 1u);
  EXPECT_THROW(init_step_count(0.0, 50), ContractError);
  EXPECT_THROW(init_step_count(1.5, 50), ContractError);
}

TEST(Sample, DeterministicModeIsBitReproducible) {
  auto base = small_base(6);
  auto adapter = net::init_adapter_from_text(base);
  std::vector<SampleRequest> reqs{request(base, 1, true), request(base, 2, true)};
  SampleOptions opt;
  opt.steps = 8;
  auto a = sample(base, &adapter, reqs, opt, make_schedule());
  auto b = sample(base, &adapter, reqs, opt, make_schedule());
  ASSERT_EQ(a.grids.size(), 2u);
  EXPECT_EQ(a.grids, b.grids);
  EXPECT_NE(a.grids[0], a.grids[1]);
  EXPECT_EQ(a.timesteps.front(), 199);
  EXPECT_EQ(a.timesteps.back(), 24);
  for (const auto& g : a.grids)
    EXPECT_TRUE(std::ranges::all_of(g.values(), [](float v) { return v >= 0.0f && v <= 1.0f; }));
}

TEST(Sample, AncestralDiffersAndIsSeeded) {
  auto base = small_base(6);
  std::vector<SampleRequest> reqs{request(base, 1, false)};
  SampleOptions opt;
  opt.steps = 6;
  auto det = sample(base, nullptr, reqs, opt, make_schedule());
  opt.mode = SamplerMode::ancestral;
  auto a1 = sample(base, nullptr, reqs, opt, make_schedule());
  auto a2 = sample(base, nullptr, reqs, opt, make_schedule());
  EXPECT_EQ(a1.grids, a2.grids);
  EXPECT_NE(a1.grids, det.grids);
}

TEST(Sample, RequestResultIndependentOfBatchMates) {
  auto base = small_base(6);
  auto adapter = net::init_adapter_from_text(base);
  SampleOptions opt;
  opt.steps = 5;
  auto alone = sample(base, &adapter, std::vector{request(base, 3, true)}, opt, make_schedule());
  auto paired = sample(base, &adapter, std::vector{request(base, 9, true), request(base, 3, true)}, opt, make_schedule());
  double worst = 0.0;
  for (std::size_t i = 0; i < synth::kBins * synth::kFrames; ++i)
    worst = std::max(worst, double(std::abs(alone.grids[0].values()[i] - paired.grids[1].values()[i])));
  EXPECT_LT(worst, 1e-4);
}

TEST(Sample, InitRunsOnlyThePartialSchedule) {
  auto base = small_base(6);
  auto r = request(base, 4, false);
  synth::ClipSpec spec;
  spec.melody.fill(30);
  r.init = synth::render_spectrogram(spec);
  SampleOptions opt;
  opt.strength = 0.75;
  opt.steps = 50;
  opt.guidance.mode = GuidanceMode::standard;
  auto out = sample(base, nullptr, std::vector{r}, opt, make_schedule());
  ASSERT_EQ(out.timesteps.size(), 38u);
  EXPECT_EQ(out.timesteps.front(), 151);
  EXPECT_EQ(out.timesteps.back(), 3);
}

TEST(Sample, MixedBatchesAndBadStepsThrow) {
  auto base = small_base(6);
  SampleOptions opt;
  opt.steps = 4;
  EXPECT_THROW(sample(base, nullptr, std::vector{request(base, 1, true), request(base, 2, false)}, opt, make_schedule()),
               ContractError);
  opt.steps = 300;
  EXPECT_THROW(sample(base, nullptr, std::vector{request(base, 1, false)}, opt, make_schedule()), ContractError);
}

TEST(Sample, ScaleOneIgnoresNegativeAndMatchesGuidedPath) {
  auto base = small_base(6);
  SampleOptions opt;
  opt.steps = 5;
  opt.guidance.lambda = 1.0;
  auto a = request(base, 2, false);
  auto b = a;
  b.negative = synth::low_quality_condition();
  auto ra = sample(base, nullptr, std::vector{a}, opt, make_schedule());
  auto rb = sample(base, nullptr, std::vector{b}, opt, make_schedule());
  EXPECT_EQ(ra.grids, rb.grids);
  opt.guidance.lambda = 1.0 + 1e-9;
  auto guided = sample(base, nullptr, std::vector{b}, opt, make_schedule());
  double worst = 0.0;
  for (std::size_t i = 0; i < synth::kBins * synth::kFrames; ++i)
    worst = std::max(worst, double(std::abs(ra.grids[0].values()[i] - guided.grids[0].values()[i])));
  EXPECT_LT(worst, 1e-4);
}
