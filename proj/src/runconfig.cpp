#include "apa/runconfig.hpp"

#include <charconv>
#include <cstdlib>
#include <sstream>

#include "apa/binary_io.hpp"
#include "apa/errors.hpp"

namespace apa::cli {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || ptr != end) throw UsageError("config: '" + key + "' expects a number, got '" + v + "'");
  return out;
}

}  // namespace

const std::map<std::string, std::string>& RunConfig::defaults() {
  static const std::map<std::string, std::string> d{
      {"data.n", "2048"},
      {"data.seed", "2024"},
      {"train.batch", "16"},
      {"train.lr", "0.0001"},
      {"train.weight_decay", "0.01"},
      {"train.beta1", "0.9"},
      {"train.beta2", "0.999"},
      {"train.epsilon", "1e-08"},
      {"train.dropout", "0.05"},
      {"train.log_every", "100"},
      {"train.random_task_captions", "true"},
      {"base.steps", "20000"},
      {"base.seed", "1"},
      {"adapter.steps", "5000"},
      {"adapter.seed", "2"},
      {"unet.channels1", "16"},
      {"unet.channels2", "32"},
      {"unet.bottleneck", "32"},
      {"unet.blocks_per_level", "2"},
      {"unet.attn_width", "32"},
      {"unet.heads", "2"},
      {"unet.time_dim", "32"},
      {"edit.task", "timbre"},
      {"edit.target", "bright"},
      {"edit.index", "0"},
      {"edit.omega", "auto"},
      {"edit.alpha", "auto"},
      {"edit.lambda", "7.5"},
      {"edit.steps", "50"},
      {"edit.seed", "0"},
      {"edit.sampler", "deterministic"},
      {"edit.negative", "default"},
      {"eval.requests", "32"},
      {"eval.clip_seed", "1000000"},
      {"eval.seed", "500"},
      {"eval.fad_samples", "256"},
      {"eval.negative_ablation", "false"},
      {"sweep.axis", "omega"},
      {"sweep.values", "auto"},
      {"sweep.requests", "32"},
      {"sweep.threads", "1"},
      {"sweep.omega", "2"},
      {"sweep.alpha", "0.55"},
      {"sweep.lambda", "7.5"},
  };
  return d;
}

RunConfig::RunConfig() : values_(defaults()) {}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw UsageError("config: unknown key '" + key + "'");
  if (value.empty()) throw UsageError("config: empty value for '" + key + "'");
  it->second = value;
}

void RunConfig::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw UsageError("config: expected key=value, got '" + assignment + "'");
  set(trim(std::string_view(assignment).substr(0, eq)), trim(std::string_view(assignment).substr(eq + 1)));
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    const std::string body = trim(line.substr(0, hash));
    if (body.empty()) continue;
    try {
      set_assignment(body);
    } catch (const UsageError& e) {
      throw UsageError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ContractError("config: no key '" + key + "'");
  return it->second;
}

double RunConfig::real(const std::string& key) const { return parse_number<double>(key, get(key)); }
std::size_t RunConfig::count(const std::string& key) const { return parse_number<std::size_t>(key, get(key)); }
std::uint64_t RunConfig::seed(const std::string& key) const { return parse_number<std::uint64_t>(key, get(key)); }

bool RunConfig::flag(const std::string& key) const {
  const auto& v = get(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw UsageError("config: '" + key + "' expects true or false, got '" + v + "'");
}

std::vector<double> RunConfig::reals(const std::string& key) const {
  std::vector<double> out;
  std::istringstream in(get(key));
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(parse_number<double>(key, trim(item)));
  if (out.empty()) throw UsageError("config: '" + key + "' expects a comma-separated list");
  return out;
}

std::string RunConfig::text() const {
  std::string out = "# apa run config, format " + std::to_string(kRunConfigVersion) + "\n";
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

void RunConfig::write(const std::filesystem::path& path) const { io::write_text(path, text()); }

net::UNetConfig RunConfig::unet() const {
  net::UNetConfig c;
  c.channels1 = count("unet.channels1");
  c.channels2 = count("unet.channels2");
  c.bottleneck = count("unet.bottleneck");
  c.blocks_per_level = count("unet.blocks_per_level");
  c.attn_width = count("unet.attn_width");
  c.heads = count("unet.heads");
  c.time_dim = count("unet.time_dim");
  c.text_dim = c.audio_dim = cond::kFeatureDim;
  return c;
}

train::TrainConfig RunConfig::train_config(train::Stage stage) const {
  train::TrainConfig c;
  c.stage = stage;
  const std::string prefix = stage == train::Stage::base ? "base." : "adapter.";
  c.steps = count(prefix + "steps");
  c.seed = seed(prefix + "seed");
  c.batch = count("train.batch");
  c.lr = real("train.lr");
  c.weight_decay = real("train.weight_decay");
  c.beta1 = real("train.beta1");
  c.beta2 = real("train.beta2");
  c.epsilon = real("train.epsilon");
  c.dropout = real("train.dropout");
  c.log_every = count("train.log_every");
  c.random_task_captions = flag("train.random_task_captions");
  c.unet = unet();
  return c;
}

void RunConfig::apply_edit_options(edit::EditRequest& r) const {
  if (get("edit.omega") != "auto") r.omega = count("edit.omega");
  if (get("edit.alpha") != "auto") r.alpha = real("edit.alpha");
  r.lambda = real("edit.lambda");
  r.steps = count("edit.steps");
  const auto& sampler = get("edit.sampler");
  if (sampler == "deterministic")
    r.sampler = diff::SamplerMode::deterministic;
  else if (sampler == "ancestral")
    r.sampler = diff::SamplerMode::ancestral;
  else
    throw UsageError("config: edit.sampler must be deterministic or ancestral");
  const auto& neg = get("edit.negative");
  if (neg == "null")
    r.negative = synth::null_condition();
  else if (neg == "low_quality")
    r.negative = synth::low_quality_condition();
  else if (neg != "default")
    throw UsageError("config: edit.negative must be default, null or low_quality");
}

RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  RunConfig c;
  std::string path = config_path;
  if (path.empty())
    if (const char* env = std::getenv(kConfigEnv)) path = env;
  if (!path.empty()) c.merge_file(path);
  for (const auto& o : overrides) c.set_assignment(o);
  return c;
}

}  // namespace apa::cli
