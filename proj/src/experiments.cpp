#include "apa/experiments.hpp"

#include <atomic>
#include <cmath>
#include <sstream>
#include <thread>

#include "apa/binary_io.hpp"
#include "apa/errors.hpp"

namespace apa::exp {

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= double(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / double(v.size() - 1)) : 0.0};
}

}  // namespace

std::vector<edit::EditRequest> heldout_timbre_requests(std::size_t n, std::uint64_t clip_seed, std::uint64_t seed) {
  const auto clips = synth::generate_dataset(n, clip_seed);
  std::vector<edit::EditRequest> out;
  for (std::size_t i = 0; i < n; ++i) {
    const int source = static_cast<int>(clips[i].spec.timbre);
    const int target = (source + 1 + static_cast<int>(i % 3)) % static_cast<int>(synth::kTimbreCount);
    edit::EditRequest r;
    r.input = clips[i].grid;
    r.source_timbre = clips[i].spec.timbre;
    r.task = synth::Task::timbre;
    r.target_class = target;
    r.seed = seed + i;
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<RequestScore> score_results(std::span<const edit::EditResult> results) {
  std::vector<RequestScore> out;
  for (const auto& r : results)
    out.push_back({metrics::chroma_similarity(r.request.input, r.edited).score,
                   metrics::transfer_score(r.edited, r.request.task, r.request.target_class)});
  return out;
}

Summary summarize(std::span<const RequestScore> scores) {
  std::vector<double> f, t;
  for (const auto& s : scores) {
    f.push_back(s.fidelity);
    t.push_back(s.transfer);
  }
  Summary out;
  out.n = scores.size();
  std::tie(out.mean_fidelity, out.std_fidelity) = mean_std(f);
  std::tie(out.mean_transfer, out.std_transfer) = mean_std(t);
  return out;
}

std::string_view to_string(Axis a) {
  switch (a) {
    case Axis::omega: return "omega";
    case Axis::alpha: return "alpha";
    case Axis::lambda: return "lambda";
  }
  return "?";
}

Axis parse_axis(std::string_view s) {
  if (s == "omega") return Axis::omega;
  if (s == "alpha") return Axis::alpha;
  if (s == "lambda") return Axis::lambda;
  throw ContractError("sweep: unknown axis '" + std::string(s) + "' (omega, alpha or lambda)");
}

std::vector<double> default_axis_values(Axis a) {
  switch (a) {
    case Axis::omega: return {1, 2, 4, 8};
    case Axis::alpha: return {0.2, 0.4, 0.6, 0.8};
    case Axis::lambda: return {3.5, 5, 7.5, 10};
  }
  return {};
}

std::vector<SweepRow> sweep_grid(Axis axis, std::span<const double> values, const SweepFixed& fixed,
                                 std::span<const edit::EditRequest> requests, const net::BaseParams& base,
                                 const net::AdapterParams& adapter, std::size_t threads) {
  if (values.empty()) throw ContractError("sweep: no axis values");
  for (std::size_t i = 1; i < values.size(); ++i)
    if (!(values[i] > values[i - 1])) throw ContractError("sweep: axis values must be strictly ascending");
  if (requests.size() < kMinSweepRequests)
    throw ContractError("sweep: " + std::to_string(requests.size()) + " requests, need at least " +
                        std::to_string(kMinSweepRequests));

  std::vector<std::vector<edit::EditRequest>> points;
  for (double v : values) {
    std::vector<edit::EditRequest> rs(requests.begin(), requests.end());
    for (auto& r : rs) {
      r.omega = fixed.omega;
      r.alpha = fixed.alpha;
      r.lambda = fixed.lambda;
      switch (axis) {
        case Axis::omega: r.omega = static_cast<std::size_t>(std::lround(v)); break;
        case Axis::alpha: r.alpha = v; break;
        case Axis::lambda: r.lambda = v; break;
      }
      edit::validate(r);
    }
    points.push_back(std::move(rs));
  }

  std::vector<SweepRow> rows(values.size());
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(values.size());
  auto worker = [&] {
    for (std::size_t i = next++; i < values.size(); i = next++) {
      try {
        const auto results = edit::edit_batch(points[i], base, adapter);
        rows[i] = {values[i], summarize(score_results(results))};
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, values.size()));
  std::vector<std::thread> pool;
  for (std::size_t i = 1; i < n; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return rows;
}

void write_sweep_csv(std::span<const SweepRow> rows, Axis axis, const std::filesystem::path& path) {
  std::ostringstream os;
  os.precision(9);
  os << to_string(axis) << ",n,mean_transfer,std_transfer,mean_fidelity,std_fidelity\n";
  for (const auto& r : rows)
    os << r.value << ',' << r.summary.n << ',' << r.summary.mean_transfer << ',' << r.summary.std_transfer << ','
       << r.summary.mean_fidelity << ',' << r.summary.std_fidelity << '\n';
  io::write_text(path, os.str());
}

void write_plot_data(std::span<const SweepRow> rows, Axis axis, const std::filesystem::path& path) {
  std::ostringstream os;
  os.precision(9);
  os << "# transfer fidelity " << to_string(axis) << '\n';
  for (const auto& r : rows) os << r.summary.mean_transfer << ' ' << r.summary.mean_fidelity << ' ' << r.value << '\n';
  io::write_text(path, os.str());
}

std::vector<synth::Spectrogram> unconditional_samples(const net::BaseParams& base, std::size_t n, std::uint64_t seed,
                                                      std::size_t steps, std::size_t batch) {
  diff::SampleOptions o;
  o.guidance.lambda = 1.0;
  o.guidance.mode = diff::GuidanceMode::standard;
  o.steps = steps;
  const auto schedule = diff::make_schedule();
  std::vector<synth::Spectrogram> out;
  for (std::size_t start = 0; start < n; start += batch) {
    std::vector<diff::SampleRequest> rs;
    for (std::size_t i = start; i < std::min(n, start + batch); ++i) {
      diff::SampleRequest r;
      r.positive = synth::null_condition();
      r.negative = synth::null_condition();
      r.seed = seed + i;
      rs.push_back(r);
    }
    auto s = diff::sample(base, nullptr, rs, o, schedule);
    for (auto& g : s.grids) out.push_back(std::move(g));
  }
  return out;
}

std::vector<synth::Spectrogram> uniform_noise_grids(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<synth::Spectrogram> out(n);
  for (auto& g : out)
    for (auto& v : g.values()) v = u(rng);
  return out;
}

FrechetReport frechet_report(std::span<const synth::Spectrogram> training, std::span<const synth::Spectrogram> samples,
                             std::span<const synth::Spectrogram> noise, const cond::EncoderParams& encoder) {
  const auto ref = metrics::feature_stats(metrics::clip_features(training, encoder));
  return {metrics::frechet_distance(ref, metrics::feature_stats(metrics::clip_features(samples, encoder))),
          metrics::frechet_distance(ref, metrics::feature_stats(metrics::clip_features(noise, encoder)))};
}

}  // namespace apa::exp
