#include "apa/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "apa/errors.hpp"
#include "apa/numerics/ops.hpp"

namespace apa::diff {

namespace {

constexpr std::size_t kGridValues = synth::kBins * synth::kFrames;

TensorF concat0(const TensorF& a, const TensorF& b) {
  if (a.rank() != b.rank() || !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1))
    throw DimensionError("concat: " + num::shape_str(a.shape()) + " vs " + num::shape_str(b.shape()));
  std::vector<float> v(a.data().begin(), a.data().end());
  v.insert(v.end(), b.data().begin(), b.data().end());
  num::Shape s = a.shape();
  s[0] += b.dim(0);
  return TensorF::from(std::move(s), std::move(v));
}

void check_timesteps(std::span<const int> t, const NoiseSchedule& s) {
  for (int ti : t)
    if (ti < 0 || static_cast<std::size_t>(ti) >= s.steps())
      throw ContractError("timestep " + std::to_string(ti) + " outside [0, " + std::to_string(s.steps()) + ")");
}

}  // namespace

NoiseSchedule make_schedule(std::size_t train_steps) {
  if (train_steps < 2) throw ContractError("make_schedule: need at least 2 steps, got " + std::to_string(train_steps));
  constexpr double lo = 1e-4, hi = 0.02;
  const double factor = 1000.0 / double(train_steps);
  NoiseSchedule s;
  double keep = 1.0;
  for (std::size_t i = 0; i < train_steps; ++i) {
    const double v = std::min(0.999, factor * (lo + (hi - lo) * double(i) / double(train_steps - 1)));
    s.variances.push_back(v);
    keep *= 1.0 - v;
    s.retention.push_back(keep);
  }
  return s;
}

TensorF forward_noise(const TensorF& x, std::span<const int> t, const TensorF& eps, const NoiseSchedule& s) {
  if (x.shape() != eps.shape())
    throw DimensionError("forward_noise: x " + num::shape_str(x.shape()) + " vs eps " + num::shape_str(eps.shape()));
  if (x.rank() == 0 || t.size() != x.dim(0))
    throw DimensionError("forward_noise: " + std::to_string(t.size()) + " timesteps for " + num::shape_str(x.shape()));
  check_timesteps(t, s);
  const std::size_t per = x.numel() / x.dim(0);
  std::vector<float> out(x.numel());
  auto xv = x.data(), ev = eps.data();
  for (std::size_t b = 0; b < t.size(); ++b) {
    const double r = s.retention[std::size_t(t[b])];
    const double a = std::sqrt(r), c = std::sqrt(1.0 - r);
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) out[i] = static_cast<float>(a * xv[i] + c * ev[i]);
  }
  return TensorF::from(x.shape(), std::move(out));
}

std::vector<float> forward_noise(std::span<const float> x, int t, std::span<const float> eps, const NoiseSchedule& s) {
  if (x.size() != eps.size())
    throw DimensionError("forward_noise: " + std::to_string(x.size()) + " values vs " + std::to_string(eps.size()));
  const int ts[] = {t};
  check_timesteps(ts, s);
  const double r = s.retention[std::size_t(t)];
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = static_cast<float>(std::sqrt(r) * x[i] + std::sqrt(1.0 - r) * eps[i]);
  return out;
}

TensorF to_model_space(std::span<const synth::Spectrogram> grids) {
  std::vector<float> v;
  v.reserve(grids.size() * kGridValues);
  for (const auto& g : grids)
    for (float x : g.values()) v.push_back(2.0f * x - 1.0f);
  return TensorF::from({grids.size(), synth::kBins, synth::kFrames, 1}, std::move(v));
}

std::vector<synth::Spectrogram> from_model_space(const TensorF& x) {
  if (x.rank() != 4 || x.dim(1) != synth::kBins || x.dim(2) != synth::kFrames || x.dim(3) != 1)
    throw DimensionError("from_model_space: expected [B, 64, 64, 1], got " + num::shape_str(x.shape()));
  std::vector<synth::Spectrogram> out;
  auto v = x.data();
  for (std::size_t b = 0; b < x.dim(0); ++b) {
    std::vector<float> g(kGridValues);
    for (std::size_t i = 0; i < kGridValues; ++i)
      g[i] = std::clamp(0.5f * (v[b * kGridValues + i] + 1.0f), 0.0f, 1.0f);
    out.emplace_back(std::move(g));
  }
  return out;
}

Predictor make_predictor(const net::BaseParams& base, const net::AdapterParams* adapter) {
  return [&base, adapter](const TensorF& x_t, std::span<const int> t, const net::Conditioning& c) {
    return net::predict_noise(x_t, t, c, base, adapter);
  };
}

TensorF training_loss(const TrainBatch& batch, std::mt19937_64& rng, const Predictor& predict,
                      const NoiseSchedule& s) {
  if (batch.x0.rank() == 0 || batch.x0.dim(0) == 0) throw ContractError("training_loss: empty batch");
  const std::size_t n = batch.x0.dim(0);
  std::uniform_int_distribution<int> pick_t(0, static_cast<int>(s.steps()) - 1);
  std::vector<int> t(n);
  for (auto& ti : t) ti = pick_t(rng);
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  std::vector<float> noise(batch.x0.numel());
  for (auto& e : noise) e = gauss(rng);
  const TensorF eps = TensorF::from(batch.x0.shape(), std::move(noise));
  const TensorF x_t = forward_noise(batch.x0, t, eps, s);
  return num::mse(predict(x_t, t, batch.cond), eps);
}

TensorF guided_noise_prediction(const TensorF& x_t, std::span<const int> t, const net::Conditioning& positive,
                                const TensorF& negative_text, double lambda, const Predictor& predict) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ContractError("guidance: lambda must be finite and >= 0");
  const std::size_t n = x_t.dim(0);
  if (negative_text.shape() != positive.text.shape())
    throw DimensionError("guidance: negative text " + num::shape_str(negative_text.shape()) + " vs positive " +
                         num::shape_str(positive.text.shape()));
  net::Conditioning both;
  both.text = concat0(positive.text, negative_text);
  both.alpha = positive.alpha;
  if (positive.audio) {
    both.audio = concat0(*positive.audio, TensorF::zeros(positive.audio->shape()));
    if (!positive.audio_lengths.empty()) {
      both.audio_lengths = positive.audio_lengths;
      both.audio_lengths.insert(both.audio_lengths.end(), positive.audio_lengths.begin(),
                                positive.audio_lengths.end());
    }
  }
  std::vector<int> tt(t.begin(), t.end());
  tt.insert(tt.end(), t.begin(), t.end());
  const TensorF eps = predict(concat0(x_t, x_t), tt, both);
  const std::size_t half = n * (x_t.numel() / n);
  auto e = eps.data();
  std::vector<float> out(half);
  for (std::size_t i = 0; i < half; ++i)
    out[i] = static_cast<float>((1.0 - lambda) * double(e[half + i]) + lambda * double(e[i]));
  return TensorF::from(x_t.shape(), std::move(out));
}

std::vector<int> sub_schedule(std::size_t steps, std::size_t train_steps) {
  if (steps == 0 || steps > train_steps)
    throw ContractError("sampler: steps " + std::to_string(steps) + " must lie in [1, " + std::to_string(train_steps) +
                        "]");
  std::vector<int> ts(steps);
  for (std::size_t i = 0; i < steps; ++i)
    ts[i] = static_cast<int>(std::lround(double(i + 1) * double(train_steps) / double(steps))) - 1;
  return ts;
}

std::size_t init_step_count(double strength, std::size_t steps) {
  if (!(strength > 0.0 && strength <= 1.0)) throw ContractError("sampler: strength must lie in (0, 1]");
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(strength * double(steps))), 1, steps);
}

SampleOutput sample(const net::BaseParams& base, const net::AdapterParams* adapter,
                    std::span<const SampleRequest> requests, const SampleOptions& options,
                    const NoiseSchedule& schedule) {
  if (requests.empty()) return {};
  const auto ts = sub_schedule(options.steps, schedule.steps());
  const bool with_init = requests[0].init.has_value();
  const bool with_audio = requests[0].audio.has_value();
  for (const auto& r : requests)
    if (r.init.has_value() != with_init || r.audio.has_value() != with_audio)
      throw ContractError("sampler: requests in one batch must agree on init and audio presence");
  const std::size_t count = with_init ? init_step_count(options.strength, options.steps) : options.steps;
  const std::size_t n = requests.size();

  num::NoGradGuard no_grad;
  std::vector<synth::ConditionTokens> pos, neg;
  for (const auto& r : requests) {
    pos.push_back(r.positive);
    neg.push_back(options.guidance.mode == GuidanceMode::standard ? synth::null_condition() : r.negative);
  }
  net::Conditioning c;
  c.text = cond::encode_text_batch(pos, base.encoder);
  c.alpha = options.alpha;
  if (with_audio) {
    std::vector<cond::AudioFeatures> feats;
    for (const auto& r : requests) feats.push_back(*r.audio);
    c.audio = net::stack_audio(feats, c.audio_lengths);
  }
  const TensorF neg_text = cond::encode_text_batch(neg, base.encoder);
  const Predictor predict = make_predictor(base, adapter);

  std::vector<std::mt19937_64> rngs;
  for (const auto& r : requests) rngs.emplace_back(r.seed);
  // One distribution per request: it caches a spare draw between calls.
  std::vector<std::normal_distribution<float>> gauss(n);
  std::vector<float> x(n * kGridValues);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < kGridValues; ++i) x[b * kGridValues + i] = gauss[b](rngs[b]);
  if (with_init) {
    const int t0 = ts[count - 1];
    for (std::size_t b = 0; b < n; ++b) {
      std::vector<float> start(kGridValues);
      for (std::size_t i = 0; i < kGridValues; ++i) start[i] = 2.0f * requests[b].init->values()[i] - 1.0f;
      auto noised = forward_noise(start, t0, std::span(x).subspan(b * kGridValues, kGridValues), schedule);
      std::copy(noised.begin(), noised.end(), x.begin() + b * kGridValues);
    }
  }

  const double eta = options.mode == SamplerMode::ancestral ? 1.0 : 0.0;
  SampleOutput out;
  for (std::size_t k = count; k-- > 0;) {
    const int t = ts[k];
    out.timesteps.push_back(t);
    const double r = schedule.retention[std::size_t(t)];
    const double r_prev = k > 0 ? schedule.retention[std::size_t(ts[k - 1])] : 1.0;
    const std::vector<int> tv(n, t);
    const TensorF xt = TensorF::from({n, synth::kBins, synth::kFrames, 1}, x);
    // lambda == 1 gives the positive prediction alone; skip the negative branch.
    const TensorF eps = options.guidance.lambda == 1.0
                            ? predict(xt, tv, c)
                            : guided_noise_prediction(xt, tv, c, neg_text, options.guidance.lambda, predict);
    auto e = eps.data();
    const double sigma = eta * std::sqrt((1.0 - r_prev) / (1.0 - r)) * std::sqrt(1.0 - r / r_prev);
    const double dir = std::sqrt(std::max(0.0, 1.0 - r_prev - sigma * sigma));
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = b * kGridValues; i < (b + 1) * kGridValues; ++i) {
        const double x0 = (x[i] - std::sqrt(1.0 - r) * e[i]) / std::sqrt(r);
        double next = std::sqrt(r_prev) * x0 + dir * e[i];
        if (sigma > 0.0) next += sigma * gauss[b](rngs[b]);
        x[i] = static_cast<float>(next);
      }
  }
  out.grids = from_model_space(TensorF::from({n, synth::kBins, synth::kFrames, 1}, std::move(x)));
  return out;
}

}  // namespace apa::diff
