#include "apa/checks.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <sstream>

#include "apa/diffusion.hpp"
#include "apa/metrics.hpp"
#include "apa/numerics/grad_check.hpp"
#include "apa/numerics/ops.hpp"

namespace apa::checks {

namespace {

using num::TensorD;
using num::TensorF;

template <typename T>
num::Tensor<T> random_tensor(std::mt19937_64& rng, num::Shape shape, double spread = 1.0) {
  std::normal_distribution<double> n(0.0, spread);
  std::vector<T> v(num::shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(n(rng));
  return num::Tensor<T>::from(std::move(shape), std::move(v));
}

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

TensorD weighted_sum(const TensorD& y, const TensorD& w) { return num::sum(num::mul(y, w)); }

double max_abs_diff(const TensorF& a, const TensorF& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.at(i)) - double(b.at(i))));
  return m;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

CheckResult bound(std::string name, double err, double tol) {
  return {std::move(name), err <= tol, "max error " + fmt(err) + " (tolerance " + fmt(tol) + ")"};
}

net::UNetConfig small_unet() {
  net::UNetConfig c;
  c.channels1 = 8;
  c.channels2 = 16;
  c.bottleneck = 16;
  c.blocks_per_level = 1;
  return c;
}

}  // namespace

std::vector<CheckResult> algebra_checks() {
  std::vector<CheckResult> out;
  num::NoGradGuard guard;
  std::mt19937_64 rng(31);
  const auto base = net::init_params(small_unet(), 17);
  auto adapter = net::init_adapter_from_text(base);
  for (auto& s : adapter.sites)
    for (auto& v : s.wk.mutable_data()) v += 0.2f * std::normal_distribution<float>()(rng);
  const auto predict = diff::make_predictor(base, &adapter);
  const auto x = random_tensor<float>(rng, {2, 64, 64, 1});
  const std::vector<int> t{40, 170};
  const net::Conditioning pos{random_tensor<float>(rng, {2, 4, 32}), random_tensor<float>(rng, {2, 16, 32}),
                              {16, 11}, 0.5f};
  const auto neg = random_tensor<float>(rng, {2, 4, 32});

  const auto g1 = diff::guided_noise_prediction(x, t, pos, neg, 1.0, predict);
  out.push_back(bound("guidance lambda=1 equals conditioned prediction", max_abs_diff(g1, predict(x, t, pos)), 1e-6));
  const auto g0 = diff::guided_noise_prediction(x, t, pos, neg, 0.0, predict);
  const net::Conditioning neg_only{neg, std::nullopt, {}, pos.alpha};
  out.push_back(bound("guidance lambda=0 equals negative branch", max_abs_diff(g0, predict(x, t, neg_only)), 1e-6));

  double affine = 0.0;
  for (double lambda : {3.5, 5.0, 7.5, 10.0}) {
    const auto g = diff::guided_noise_prediction(x, t, pos, neg, lambda, predict);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double expect = (1.0 - lambda) * g0.at(i) + lambda * g1.at(i);
      affine = std::max(affine, std::abs(g.at(i) - expect) / std::max(1.0, std::abs(expect)));
    }
  }
  out.push_back(bound("guidance affine in lambda", affine, 1e-6));

  const auto z = random_tensor<float>(rng, {2, 64, base.config.attn_width});
  const auto& site = base.site_up2;
  const net::Conditioning text_only{pos.text, std::nullopt, {}, 0.0f};
  const auto zt = net::fused_cross_attention(z, text_only, site, nullptr, base.config.heads);
  const net::Conditioning alpha0{pos.text, pos.audio, pos.audio_lengths, 0.0f};
  out.push_back(bound("fusion alpha=0 equals text branch",
                      max_abs_diff(net::fused_cross_attention(z, alpha0, site, &adapter.sites[1], base.config.heads), zt),
                      0.0));

  const auto fresh = net::init_adapter_from_text(base);
  double identity = 0.0;
  for (float alpha : {0.25f, 0.5f, 1.0f, 2.0f}) {
    const net::Conditioning same{pos.text, pos.text, {}, alpha};
    const auto fused = net::fused_cross_attention(z, same, site, &fresh.sites[1], base.config.heads);
    identity = std::max(identity, max_abs_diff(fused, num::scale(zt, 1.0f + alpha)));
  }
  out.push_back(bound("fresh adapter with equal inputs gives (1+alpha) text branch", identity, 1e-6));

  const auto feats = cond::encode_audio(random_tensor<float>(rng, {64 * 64}).data(), 64, 64, base.encoder);
  const auto pooled = cond::pool_features(feats, 1);
  out.push_back(bound("pooling at rate 1 is the identity", max_abs_diff(pooled.seq, feats.seq), 0.0));
  return out;
}

std::vector<CheckResult> gradient_checks() {
  std::vector<CheckResult> out;
  std::mt19937_64 rng(77);
  using Run = std::function<void(std::mt19937_64&, double&)>;
  auto check = [](double& worst, const std::function<TensorD(const TensorD&)>& f, const TensorD& x) {
    worst = std::max(worst, num::grad_check<double>(f, x, 1e-5));
  };
  auto rnd = [](std::mt19937_64& g, num::Shape s, double spread = 1.0) { return random_tensor<double>(g, s, spread); };
  const std::vector<std::pair<const char*, Run>> cases = {
      {"add/sub/mul/scale",
       [&](std::mt19937_64& g, double& w) {
         num::Shape s{pick(g, 1, 3), pick(g, 1, 4)};
         auto a = rnd(g, s), b = rnd(g, s), r = rnd(g, s);
         check(w, [&](const TensorD& x) { return weighted_sum(num::add(x, b), r); }, a);
         check(w, [&](const TensorD& x) { return weighted_sum(num::sub(a, x), r); }, b);
         check(w, [&](const TensorD& x) { return weighted_sum(num::mul(x, b), r); }, a);
         check(w, [&](const TensorD& x) { return weighted_sum(num::add_scalar(num::scale(x, 1.7), 0.3), r); }, a);
       }},
      {"matmul",
       [&](std::mt19937_64& g, double& w) {
         const std::size_t n = pick(g, 1, 4), k = pick(g, 1, 4), m = pick(g, 1, 4);
         auto a = rnd(g, {2, n, k}), b = rnd(g, {k, m}), r = rnd(g, {2, n, m});
         check(w, [&](const TensorD& x) { return weighted_sum(num::matmul(x, b), r); }, a);
         check(w, [&](const TensorD& x) { return weighted_sum(num::matmul(a, x), r); }, b);
       }},
      {"add_bias/add_per_example",
       [&](std::mt19937_64& g, double& w) {
         const std::size_t b = pick(g, 1, 3), n = pick(g, 1, 4), c = pick(g, 1, 4);
         auto x = rnd(g, {b, n, c}), bias = rnd(g, {c}), e = rnd(g, {b, c}), r = rnd(g, {b, n, c});
         check(w, [&](const TensorD& v) { return weighted_sum(num::add_bias(v, bias), r); }, x);
         check(w, [&](const TensorD& v) { return weighted_sum(num::add_bias(x, v), r); }, bias);
         check(w, [&](const TensorD& v) { return weighted_sum(num::add_per_example(x, v), r); }, e);
       }},
      {"silu/softmax",
       [&](std::mt19937_64& g, double& w) {
         num::Shape s{pick(g, 1, 3), pick(g, 1, 5)};
         auto x = rnd(g, s, 2.0), r = rnd(g, s);
         check(w, [&](const TensorD& v) { return weighted_sum(num::silu(v), r); }, x);
         check(w, [&](const TensorD& v) { return weighted_sum(num::softmax(v), r); }, x);
       }},
      {"layer_norm",
       [&](std::mt19937_64& g, double& w) {
         const std::size_t rows = pick(g, 1, 3), c = pick(g, 2, 6);
         auto x = rnd(g, {rows, c}), gain = rnd(g, {c}), shift = rnd(g, {c}), r = rnd(g, {rows, c});
         check(w, [&](const TensorD& v) { return weighted_sum(num::layer_norm(v, gain, shift), r); }, x);
         check(w, [&](const TensorD& v) { return weighted_sum(num::layer_norm(x, v, shift), r); }, gain);
         check(w, [&](const TensorD& v) { return weighted_sum(num::layer_norm(x, gain, v), r); }, shift);
       }},
      {"conv3x3",
       [&](std::mt19937_64& g, double& w) {
         const std::size_t b = pick(g, 1, 2), h = pick(g, 1, 4), wd = pick(g, 1, 4), ci = pick(g, 1, 3),
                           co = pick(g, 1, 3);
         auto x = rnd(g, {b, h, wd, ci}), k = rnd(g, {9 * ci, co}), bias = rnd(g, {co}), r = rnd(g, {b, h, wd, co});
         check(w, [&](const TensorD& v) { return weighted_sum(num::conv3x3(v, k, bias), r); }, x);
         check(w, [&](const TensorD& v) { return weighted_sum(num::conv3x3(x, v, bias), r); }, k);
         check(w, [&](const TensorD& v) { return weighted_sum(num::conv3x3(x, k, v), r); }, bias);
       }},
      {"avg_pool2/upsample2/reshape",
       [&](std::mt19937_64& g, double& w) {
         const std::size_t b = pick(g, 1, 2), h = 2 * pick(g, 1, 2), wd = 2 * pick(g, 1, 2), c = pick(g, 1, 3);
         auto x = rnd(g, {b, h, wd, c});
         auto rp = rnd(g, {b, h / 2, wd / 2, c}), ru = rnd(g, {b, 2 * h, 2 * wd, c}), rr = rnd(g, {b * h, wd * c});
         check(w, [&](const TensorD& v) { return weighted_sum(num::avg_pool2(v), rp); }, x);
         check(w, [&](const TensorD& v) { return weighted_sum(num::upsample2(v), ru); }, x);
         check(w, [&](const TensorD& v) { return weighted_sum(num::reshape(v, {b * h, wd * c}), rr); }, x);
       }},
      {"sum/mean/mse",
       [&](std::mt19937_64& g, double& w) {
         num::Shape s{pick(g, 1, 3), pick(g, 1, 4)};
         auto a = rnd(g, s), b = rnd(g, s);
         check(w, [&](const TensorD& v) { return num::mean(num::mul(v, v)); }, a);
         check(w, [&](const TensorD& v) { return num::sum(num::mul(v, b)); }, a);
         check(w, [&](const TensorD& v) { return num::mse(v, b); }, a);
         check(w, [&](const TensorD& v) { return num::mse(a, v); }, b);
       }},
      {"embedding",
       [&](std::mt19937_64& g, double& w) {
         const std::size_t vocab = pick(g, 1, 5), d = pick(g, 1, 4), n = pick(g, 1, 6);
         auto table = rnd(g, {vocab, d});
         std::vector<int> idx(n);
         for (auto& i : idx) i = static_cast<int>(pick(g, 0, vocab - 1));
         auto r = rnd(g, {n, d});
         check(w, [&](const TensorD& v) { return weighted_sum(num::embedding<double>(v, idx), r); }, table);
       }},
      {"multihead_attention",
       [&](std::mt19937_64& g, double& w) {
         const std::size_t b = pick(g, 1, 2), n = pick(g, 1, 4), m = pick(g, 1, 4), heads = pick(g, 1, 2);
         const std::size_t d = heads * pick(g, 1, 3), dv = heads * pick(g, 1, 2);
         auto q = rnd(g, {b, n, d}), k = rnd(g, {b, m, d}), v = rnd(g, {b, m, dv}), r = rnd(g, {b, n, dv});
         std::vector<std::size_t> len(b);
         for (auto& l : len) l = pick(g, 1, m);
         check(w, [&](const TensorD& x) { return weighted_sum(num::multihead_attention(x, k, v, heads, len), r); }, q);
         check(w, [&](const TensorD& x) { return weighted_sum(num::multihead_attention(q, x, v, heads, len), r); }, k);
         check(w, [&](const TensorD& x) { return weighted_sum(num::multihead_attention(q, k, x, heads, len), r); }, v);
       }},
  };
  for (const auto& [name, run] : cases) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) run(rng, worst);
    out.push_back(bound(std::string("grad_check ") + name + " (100 cases, double)", worst, 1e-5));
  }

  const auto base = net::init_params(net::UNetConfig{}, 13);
  auto adapter = net::init_adapter_from_text(base);
  for (auto& s : adapter.sites)
    for (auto* w : {&s.wk, &s.wv})
      for (auto& v : w->mutable_data()) v += 0.3f * std::normal_distribution<float>()(rng);
  const auto x = random_tensor<float>(rng, {1, 64, 64, 1});
  const net::Conditioning c{random_tensor<float>(rng, {1, 4, 32}), random_tensor<float>(rng, {1, 16, 32}), {}, 1.0f};
  const std::vector<int> t{120};
  std::vector<std::size_t> coords;
  for (std::size_t i = 0; i < 1024; i += 97) coords.push_back(i);
  double worst = 0.0;
  for (std::size_t site = 0; site < adapter.sites.size(); ++site)
    for (int which = 0; which < 2; ++which) {
      auto& target = which == 0 ? adapter.sites[site].wk : adapter.sites[site].wv;
      const TensorF original = target;
      num::ScalarFn<float> fn = [&](const TensorF& w) {
        target = w;
        return num::mean(net::predict_noise(x, t, c, base, &adapter));
      };
      worst = std::max(worst, num::grad_check(fn, original, 1e-3, coords));
      target = original;
    }
  out.push_back(bound("grad_check predict_noise wrt adapter weights (float)", worst, 1e-3));
  return out;
}

std::vector<CheckResult> metric_checks() {
  using metrics::GaussianStats;
  std::vector<CheckResult> out;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;

  Eigen::MatrixXd samples(60, 8);
  for (Eigen::Index i = 0; i < samples.size(); ++i) samples.data()[i] = n(rng);
  const auto st = metrics::feature_stats(samples);
  out.push_back(bound("frechet identical stats is 0", std::abs(metrics::frechet_distance(st, st)), 1e-8));

  GaussianStats shifted = st;
  Eigen::VectorXd d(8);
  for (Eigen::Index i = 0; i < 8; ++i) d[i] = n(rng);
  shifted.mean += d;
  out.push_back(bound("frechet equal covariance mean shift is |d|^2",
                      std::abs(metrics::frechet_distance(st, shifted) - d.squaredNorm()), 1e-8));

  double scalar = 0.0;
  for (auto [m1, v1, m2, v2] : std::vector<std::array<double, 4>>{{0, 1, 0, 4}, {1.5, 0.25, -2, 9}, {-1, 3, 2, 0.5}}) {
    const GaussianStats a{Eigen::VectorXd::Constant(1, m1), Eigen::MatrixXd::Constant(1, 1, v1)};
    const GaussianStats b{Eigen::VectorXd::Constant(1, m2), Eigen::MatrixXd::Constant(1, 1, v2)};
    const double expect = (m1 - m2) * (m1 - m2) + std::pow(std::sqrt(v1) - std::sqrt(v2), 2);
    scalar = std::max(scalar, std::abs(metrics::frechet_distance(a, b) - expect));
  }
  out.push_back(bound("frechet 1-D closed form", scalar, 1e-8));

  std::mt19937_64 clip_rng(9);
  const auto x = synth::render_spectrogram(synth::sample_clip_spec(clip_rng));
  out.push_back(bound("chroma identical is 1", std::abs(metrics::chroma_similarity(x, x).score - 1.0), 1e-12));
  synth::Spectrogram a, b;
  for (std::size_t t = 0; t < synth::kFrames; ++t) {
    a.at(20, t) = 1.0f;
    b.at(26, t) = 1.0f;
  }
  out.push_back(bound("chroma of pure tones 6 semitones apart is 0",
                      std::abs(metrics::chroma_similarity(a, b).score), 1e-12));

  std::size_t recovered = 0, total = 0;
  for (std::size_t ti = 0; ti < synth::kTimbreCount; ++ti)
    for (std::size_t xi = 0; xi < synth::kTextureCount; ++xi)
      for (std::size_t ai = 0; ai < synth::kAccompCount; ++ai) {
        synth::ClipConstraints c;
        c.timbre = synth::Timbre(ti);
        c.texture = synth::Texture(xi);
        c.accomp = synth::Accomp(ai);
        std::mt19937_64 g(1000 + 100 * ti + 10 * xi + ai);
        const auto spec = synth::sample_clip_spec(g, c);
        const auto o = metrics::attribute_oracle(synth::render_spectrogram(spec));
        ++total;
        if (!o.degenerate && o.best_timbre() == spec.timbre && o.best_texture() == spec.texture &&
            o.best_accomp() == spec.accomp)
          ++recovered;
      }
  out.push_back({"attribute oracle recovers every combination", recovered == total && total == 48,
                 std::to_string(recovered) + "/" + std::to_string(total) + " combinations"});
  return out;
}

}  // namespace apa::checks
