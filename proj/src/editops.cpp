#include "apa/editops.hpp"

#include <algorithm>
#include <chrono>

#include "apa/binary_io.hpp"
#include "apa/errors.hpp"
#include "apa/metrics.hpp"
#include "json.hpp"

namespace apa::edit {

using nlohmann::json;

namespace {

void check_shared_options(std::span<const EditRequest> rs) {
  for (const auto& r : rs) {
    validate(r);
    const auto& f = rs.front();
    if (r.alpha != f.alpha || r.lambda != f.lambda || r.steps != f.steps || r.sampler != f.sampler ||
        r.guidance != f.guidance)
      throw ContractError("edit: requests in one batch must share alpha, lambda, steps, sampler and guidance");
  }
}

json tokens_json(const synth::ConditionTokens& t) {
  json j = {{"task", synth::to_string(t.task)}, {"slots", t.slots()}};
  return j;
}

std::vector<EditResult> run(std::span<const EditRequest> requests, const net::BaseParams& base,
                            const net::AdapterParams* adapter) {
  if (requests.empty()) return {};
  check_shared_options(requests);
  const auto start = std::chrono::steady_clock::now();
  const auto& f = requests.front();
  std::vector<diff::SampleRequest> batch;
  for (const auto& r : requests) {
    diff::SampleRequest s;
    s.positive = positive_tokens(r);
    s.seed = r.seed;
    if (adapter) {
      s.negative = negative_tokens(r);
      s.audio = cond::pool_features(cond::encode_audio(r.input, base.encoder), r.omega);
    } else {
      s.negative = synth::null_condition();
      s.init = r.input;
    }
    batch.push_back(std::move(s));
  }
  diff::SampleOptions o;
  o.guidance.lambda = f.lambda;
  o.guidance.mode = adapter ? f.guidance : diff::GuidanceMode::standard;
  o.alpha = static_cast<float>(f.alpha);
  o.steps = f.steps;
  o.mode = f.sampler;
  o.strength = adapter ? 1.0 : kBaselineStrength;
  auto out = diff::sample(base, adapter, batch, o, diff::make_schedule());
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::vector<EditResult> results;
  for (std::size_t i = 0; i < requests.size(); ++i)
    results.push_back({std::move(out.grids[i]), requests[i], out.timesteps, wall / double(requests.size())});
  return results;
}

}  // namespace

synth::ConditionTokens default_negative(synth::Task task, synth::Timbre source_timbre) {
  if (task == synth::Task::timbre) return synth::edit_tokens(task, static_cast<int>(source_timbre), source_timbre);
  return synth::low_quality_condition();
}

EditRequest make_request(const synth::Spectrogram& input, synth::Task task, int target_class, std::uint64_t seed) {
  EditRequest r;
  r.input = input;
  r.source_timbre = metrics::attribute_oracle(input).best_timbre();
  r.task = task;
  r.target_class = target_class;
  r.seed = seed;
  if (task == synth::Task::texture) {
    r.omega = 1;
    r.alpha = 0.4;
  }
  return r;
}

synth::ConditionTokens positive_tokens(const EditRequest& r) {
  return synth::edit_tokens(r.task, r.target_class, r.source_timbre);
}

synth::ConditionTokens negative_tokens(const EditRequest& r) {
  return r.negative ? *r.negative : default_negative(r.task, r.source_timbre);
}

void validate(const EditRequest& r) {
  if (r.task == synth::Task::none) throw ContractError("edit: task must be timbre, texture or accomp");
  if (r.target_class < 0 || static_cast<std::size_t>(r.target_class) >= synth::class_count(r.task))
    throw ContractError("edit: class " + std::to_string(r.target_class) + " is not valid for task " +
                        std::string(synth::to_string(r.task)));
  if (r.task == synth::Task::timbre && r.target_class == static_cast<int>(r.source_timbre))
    throw ContractError("edit: timbre target equals the source instrument " +
                        std::string(synth::to_string(r.source_timbre)));
  if (std::find(cond::kPoolingRates.begin(), cond::kPoolingRates.end(), r.omega) == cond::kPoolingRates.end())
    throw ContractError("edit: omega must be one of 1, 2, 4, 8; got " + std::to_string(r.omega));
  if (!(r.alpha >= 0.0) || !(r.lambda >= 0.0)) throw ContractError("edit: alpha and lambda must be >= 0");
  if (r.steps == 0 || r.steps > net::kTrainSteps) throw ContractError("edit: steps must lie in [1, 200]");
}

std::vector<EditResult> edit_batch(std::span<const EditRequest> requests, const net::BaseParams& base,
                                   const net::AdapterParams& adapter) {
  return run(requests, base, &adapter);
}

std::vector<EditResult> sdedit_batch(std::span<const EditRequest> requests, const net::BaseParams& base) {
  return run(requests, base, nullptr);
}

EditResult edit(const EditRequest& request, const train::Checkpoint& base, const train::Checkpoint& adapter) {
  train::check_compatible(base, adapter);
  return edit_batch(std::span(&request, 1), base.base, adapter.adapter).front();
}

EditResult sdedit_baseline(const EditRequest& request, const train::Checkpoint& base) {
  if (base.stage != train::Stage::base) throw ContractError("sdedit: expected a base checkpoint");
  return sdedit_batch(std::span(&request, 1), base.base).front();
}

std::string result_json(const EditResult& r, std::string_view method) {
  const auto& q = r.request;
  const bool adapter = method != "sdedit";
  json j = {{"method", method},
            {"task", synth::to_string(q.task)},
            {"target_class", synth::class_name(q.task, q.target_class)},
            {"source_timbre", synth::to_string(q.source_timbre)},
            {"positive", tokens_json(positive_tokens(q))},
            {"negative", tokens_json(adapter ? negative_tokens(q) : synth::null_condition())},
            {"omega", q.omega},
            {"alpha", q.alpha},
            {"lambda", q.lambda},
            {"steps", q.steps},
            {"seed", q.seed},
            {"sampler", q.sampler == diff::SamplerMode::deterministic ? "deterministic" : "ancestral"},
            {"guidance", !adapter || q.guidance == diff::GuidanceMode::standard ? "standard" : "negative_prompt"},
            {"timesteps", r.timesteps},
            {"grid_format_version", synth::kGridFileVersion}};
  if (!adapter) j["strength"] = kBaselineStrength;
  return j.dump(2) + "\n";
}

void write_result(const EditResult& r, std::string_view method, const std::filesystem::path& path) {
  synth::write_grids({r.edited}, path);
  io::write_text(path.string() + ".json", result_json(r, method));
}

}  // namespace apa::edit
