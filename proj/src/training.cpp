#include "apa/training.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "apa/binary_io.hpp"
#include "apa/errors.hpp"
#include "json.hpp"

namespace apa::train {

using nlohmann::json;

namespace {

constexpr std::string_view kCheckpointMagic{"APACKPT\0", 8};

json unet_to_json(const net::UNetConfig& c) {
  return {{"channels1", c.channels1},   {"channels2", c.channels2},   {"bottleneck", c.bottleneck},
          {"blocks_per_level", c.blocks_per_level}, {"attn_width", c.attn_width}, {"heads", c.heads},
          {"time_dim", c.time_dim},     {"text_dim", c.text_dim},     {"audio_dim", c.audio_dim}};
}

net::UNetConfig unet_from_json(const json& j) {
  net::UNetConfig c;
  c.channels1 = j.at("channels1");
  c.channels2 = j.at("channels2");
  c.bottleneck = j.at("bottleneck");
  c.blocks_per_level = j.at("blocks_per_level");
  c.attn_width = j.at("attn_width");
  c.heads = j.at("heads");
  c.time_dim = j.at("time_dim");
  c.text_dim = j.at("text_dim");
  c.audio_dim = j.at("audio_dim");
  return c;
}

void append_f32(std::vector<std::uint8_t>& out, const TensorF& t) {
  for (float v : t.data()) {
    const auto u = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
}

template <typename Params>
std::vector<std::uint8_t> blob_bytes(const Params& p) {
  std::vector<std::uint8_t> out;
  net::visit(p, [&](const std::string&, const TensorF& t) { append_f32(out, t); });
  return out;
}

std::vector<TensorF> trainable_base_tensors(net::BaseParams& p) {
  std::vector<TensorF> out;
  net::visit(p, [&](const std::string& name, TensorF& t) {
    const bool train = !net::is_frozen_encoder_tensor(name);
    t.set_requires_grad(train);
    if (train) out.push_back(t);
  });
  return out;
}

synth::ConditionTokens draw_caption(const synth::ClipSpec& spec, bool random_task, std::mt19937_64& rng) {
  synth::Task task = synth::Task::none;
  if (random_task) task = static_cast<synth::Task>(std::uniform_int_distribution<int>(0, 3)(rng));
  return synth::caption_tokens(spec, task);
}

void check_finite(double loss, std::size_t step) {
  if (!std::isfinite(loss))
    throw DivergenceError("training diverged at step " + std::to_string(step) + ": loss is " + std::to_string(loss));
}

class WindowLog {
 public:
  WindowLog(std::size_t every, const ProgressFn& progress) : every_(every), progress_(progress) {}
  void add(std::size_t step, double loss, double reference, bool last) {
    sum_ += loss;
    ref_sum_ += reference;
    ++n_;
    if (step % every_ == 0 || last) {
      LossRecord r{step, sum_ / double(n_), ref_sum_ / double(n_)};
      records.push_back(r);
      if (progress_) progress_(r);
      sum_ = ref_sum_ = 0.0;
      n_ = 0;
    }
  }
  std::vector<LossRecord> records;

 private:
  std::size_t every_;
  const ProgressFn& progress_;
  double sum_ = 0.0, ref_sum_ = 0.0;
  std::size_t n_ = 0;
};

}  // namespace

std::string_view to_string(Stage s) { return s == Stage::base ? "base" : "adapter"; }

Stage parse_stage(std::string_view s) {
  if (s == "base") return Stage::base;
  if (s == "adapter") return Stage::adapter;
  throw ContractError("unknown training stage '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  if (steps == 0 || batch == 0) throw ContractError("train config: steps and batch must be positive");
  if (!(lr > 0.0)) throw ContractError("train config: learning rate must be positive");
  if (!(weight_decay >= 0.0)) throw ContractError("train config: weight decay must be >= 0");
  if (!(dropout >= 0.0 && dropout <= 1.0)) throw ContractError("train config: dropout must lie in [0, 1]");
  if (log_every == 0) throw ContractError("train config: log_every must be positive");
  unet.validate();
}

std::string config_to_json(const TrainConfig& c) {
  json j = {{"stage", to_string(c.stage)},
            {"steps", c.steps},
            {"batch", c.batch},
            {"lr", c.lr},
            {"weight_decay", c.weight_decay},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"epsilon", c.epsilon},
            {"dropout", c.dropout},
            {"seed", c.seed},
            {"log_every", c.log_every},
            {"random_task_captions", c.random_task_captions},
            {"unet", unet_to_json(c.unet)}};
  return j.dump();
}

AdamW::AdamW(std::vector<TensorF> params, const TrainConfig& c)
    : params_(std::move(params)), lr_(c.lr), wd_(c.weight_decay), b1_(c.beta1), b2_(c.beta2), eps_(c.epsilon) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0f);
    v_.emplace_back(p.numel(), 0.0f);
  }
}

void AdamW::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, double(t_));
  const double c2 = 1.0 - std::pow(b2_, double(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    auto w = p.mutable_data();
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      m[i] = static_cast<float>(b1_ * m[i] + (1.0 - b1_) * gi);
      v[i] = static_cast<float>(b2_ * v[i] + (1.0 - b2_) * gi * gi);
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_) + wd_ * w[i];
      w[i] = static_cast<float>(w[i] - lr_ * update);
    }
    p.zero_grad();
  }
}

std::string tensor_hash(const net::BaseParams& p) { return io::hex64(io::fnv1a64(blob_bytes(p))); }
std::string tensor_hash(const net::AdapterParams& p) { return io::hex64(io::fnv1a64(blob_bytes(p))); }

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
  json tensors = json::array();
  std::vector<std::uint8_t> blobs;
  auto add = [&](const std::string& name, const TensorF& t) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", blobs.size()}, {"count", t.numel()}});
    append_f32(blobs, t);
  };
  if (c.stage == Stage::base)
    net::visit(c.base, add);
  else
    net::visit(c.adapter, add);

  json log = json::array();
  for (const auto& r : c.log)
    log.push_back({r.step, r.loss, std::isfinite(r.reference) ? json(r.reference) : json(nullptr)});
  json header = {{"kind", "apa-checkpoint"},
                 {"format_version", kCheckpointVersion},
                 {"stage", to_string(c.stage)},
                 {"steps", c.steps},
                 {"config", c.config_json.empty() ? json::object() : json::parse(c.config_json)},
                 {"log", log},
                 {"tensors", tensors},
                 {"blob_bytes", blobs.size()},
                 {"blob_hash", io::hex64(io::fnv1a64(blobs))}};
  if (c.stage == Stage::base) header["unet"] = unet_to_json(c.base.config);
  if (c.stage == Stage::adapter) header["base_hash"] = c.base_hash;

  io::ByteWriter w;
  io::write_container_prefix(w, kCheckpointMagic, kCheckpointVersion, header.dump());
  w.raw(blobs);
  return w.take();
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes, const std::string& what) {
  io::ByteReader r(bytes, what);
  const auto container = io::read_container_prefix(r, kCheckpointMagic, kCheckpointVersion, what);
  json header;
  try {
    header = json::parse(container.header);
  } catch (const json::exception& e) {
    throw FormatError(what + ": unreadable manifest (" + e.what() + ")");
  }
  try {
    Checkpoint c;
    c.stage = parse_stage(header.at("stage").get<std::string>());
    c.steps = header.at("steps");
    c.config_json = header.at("config").dump();
    for (const auto& row : header.at("log"))
      c.log.push_back({row.at(0).get<std::size_t>(), row.at(1).get<double>(),
                       row.at(2).is_null() ? std::numeric_limits<double>::quiet_NaN() : row.at(2).get<double>()});

    const std::size_t blob_size = header.at("blob_bytes");
    const auto blobs = r.span(blob_size);
    if (r.remaining() != 0) throw FormatError(what + ": trailing bytes after tensor data");
    if (io::hex64(io::fnv1a64(blobs)) != header.at("blob_hash").get<std::string>())
      throw CorruptionError(what + ": tensor data does not match the manifest hash");

    std::map<std::string, json> entries;
    for (const auto& t : header.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      if (!entries.emplace(name, t).second) throw FormatError(what + ": duplicate tensor '" + name + "'");
    }
    std::size_t used = 0;
    auto fill = [&](const std::string& name, TensorF& t) {
      auto it = entries.find(name);
      if (it == entries.end()) throw FormatError(what + ": missing tensor '" + name + "'");
      const auto shape = it->second.at("shape").get<num::Shape>();
      const std::size_t offset = it->second.at("offset"), count = it->second.at("count");
      if (num::shape_numel(shape) != count || offset + 4 * count > blobs.size())
        throw FormatError(what + ": bad layout for tensor '" + name + "'");
      std::vector<float> v(count);
      for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) u |= std::uint32_t(blobs[offset + 4 * i + b]) << (8 * b);
        v[i] = std::bit_cast<float>(u);
      }
      t = TensorF::from(shape, std::move(v));
      ++used;
    };
    if (c.stage == Stage::base) {
      c.base = net::init_params(unet_from_json(header.at("unet")), 0);
      net::visit(c.base, [&](const std::string& name, TensorF& t) {
        const auto expected = t.shape();
        fill(name, t);
        if (t.shape() != expected)
          throw FormatError(what + ": tensor '" + name + "' has shape " + num::shape_str(t.shape()) + ", expected " +
                            num::shape_str(expected));
      });
    } else {
      c.base_hash = header.at("base_hash").get<std::string>();
      c.adapter.sites.resize(3);
      net::visit(c.adapter, fill);
    }
    if (used != entries.size()) throw FormatError(what + ": manifest lists tensors the model does not have");
    return c;
  } catch (const json::exception& e) {
    throw FormatError(what + ": malformed manifest (" + e.what() + ")");
  }
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  io::write_file(path, serialize_checkpoint(c));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return deserialize_checkpoint(bytes, "checkpoint " + path.string());
}

void check_compatible(const Checkpoint& base, const Checkpoint& adapter) {
  if (base.stage != Stage::base || adapter.stage != Stage::adapter)
    throw ContractError("checkpoints: expected a base and an adapter checkpoint");
  const std::string h = tensor_hash(base.base);
  if (adapter.base_hash != h)
    throw ContractError("checkpoints: adapter was trained on base " + adapter.base_hash + ", got base " + h);
  const auto sites = base.base.sites();
  for (std::size_t i = 0; i < sites.size(); ++i)
    if (adapter.adapter.sites.at(i).wk.shape() != sites[i]->wk.shape() ||
        adapter.adapter.sites.at(i).wv.shape() != sites[i]->wv.shape())
      throw ContractError("checkpoints: adapter shapes do not match the base at site " + std::to_string(i));
}

Checkpoint pretrain_base(const TrainConfig& config, const std::vector<synth::Record>& data, const ProgressFn& progress) {
  config.validate();
  if (data.empty()) throw ContractError("pretrain: empty dataset");
  std::mt19937_64 rng(config.seed);
  Checkpoint out;
  out.stage = Stage::base;
  out.config_json = config_to_json(config);
  out.base = net::init_params(config.unet, config.seed);
  AdamW opt(trainable_base_tensors(out.base), config);
  const auto schedule = diff::make_schedule();
  const auto predict = diff::make_predictor(out.base, nullptr);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::bernoulli_distribution drop(config.dropout);
  WindowLog log(config.log_every, progress);

  for (std::size_t step = 1; step <= config.steps; ++step) {
    std::vector<synth::Spectrogram> grids;
    std::vector<synth::ConditionTokens> tokens;
    for (std::size_t b = 0; b < config.batch; ++b) {
      const auto& rec = data[pick(rng)];
      grids.push_back(rec.grid);
      auto tok = draw_caption(rec.spec, config.random_task_captions, rng);
      tokens.push_back(drop(rng) ? synth::null_condition() : tok);
    }
    diff::TrainBatch batch{diff::to_model_space(grids),
                           {cond::encode_text_batch(tokens, out.base.encoder), std::nullopt, {}, 0.0f}};
    const TensorF loss = diff::training_loss(batch, rng, predict, schedule);
    const double value = loss.item();
    check_finite(value, step);
    loss.backward();
    opt.step();
    log.add(step, value, std::numeric_limits<double>::quiet_NaN(), step == config.steps);
  }
  net::visit(out.base, [](const std::string&, TensorF& t) { t.set_requires_grad(false); });
  out.steps = config.steps;
  out.log = std::move(log.records);
  return out;
}

Checkpoint train_adapter(const Checkpoint& base_ckpt, const TrainConfig& config, const std::vector<synth::Record>& data,
                         const ProgressFn& progress) {
  config.validate();
  if (base_ckpt.stage != Stage::base) throw ContractError("train_adapter: expected a base checkpoint");
  if (data.empty()) throw ContractError("train_adapter: empty dataset");
  const net::BaseParams& base = base_ckpt.base;
  net::visit(const_cast<net::BaseParams&>(base), [](const std::string&, TensorF& t) { t.set_requires_grad(false); });

  std::mt19937_64 rng(config.seed);
  Checkpoint out;
  out.stage = Stage::adapter;
  out.config_json = config_to_json(config);
  out.base_hash = tensor_hash(base);
  out.adapter = net::init_adapter_from_text(base);
  std::vector<TensorF> trainable;
  net::visit(out.adapter, [&](const std::string&, TensorF& t) {
    t.set_requires_grad(true);
    trainable.push_back(t);
  });
  for (std::size_t i = 0; i < out.adapter.sites.size(); ++i)
    if (out.adapter.sites[i].wk.shape() != base.sites()[i]->wk.shape())
      throw ContractError("train_adapter: adapter shape mismatch with base at site " + std::to_string(i));
  AdamW opt(trainable, config);

  std::vector<cond::AudioFeatures> audio;
  {
    num::NoGradGuard guard;
    for (const auto& r : data) audio.push_back(cond::encode_audio(r.grid, base.encoder));
  }
  const auto schedule = diff::make_schedule();
  const auto predict = diff::make_predictor(base, &out.adapter);
  const auto predict_base = diff::make_predictor(base, nullptr);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_rate(0, cond::kPoolingRates.size() - 1);
  WindowLog log(config.log_every, progress);

  for (std::size_t step = 1; step <= config.steps; ++step) {
    std::vector<synth::Spectrogram> grids;
    std::vector<synth::ConditionTokens> tokens;
    std::vector<cond::AudioFeatures> feats;
    for (std::size_t b = 0; b < config.batch; ++b) {
      const std::size_t i = pick(rng);
      grids.push_back(data[i].grid);
      const auto tok = draw_caption(data[i].spec, config.random_task_captions, rng);
      const auto pooled = cond::pool_features(audio[i], cond::kPoolingRates[pick_rate(rng)]);
      auto [a, t] = cond::drop_conditions(pooled, tok, rng, config.dropout);
      feats.push_back(std::move(a));
      tokens.push_back(t);
    }
    net::Conditioning c;
    c.text = cond::encode_text_batch(tokens, base.encoder);
    c.audio = net::stack_audio(feats, c.audio_lengths, cond::kAudioTokens);
    c.alpha = 1.0f;
    diff::TrainBatch batch{diff::to_model_space(grids), c};

    std::mt19937_64 ref_rng = rng;  // same timesteps and noise for the reference
    const TensorF loss = diff::training_loss(batch, rng, predict, schedule);
    const double value = loss.item();
    check_finite(value, step);
    loss.backward();
    opt.step();
    double reference;
    {
      num::NoGradGuard guard;
      diff::TrainBatch ref_batch{batch.x0, {c.text, std::nullopt, {}, 0.0f}};
      reference = diff::training_loss(ref_batch, ref_rng, predict_base, schedule).item();
    }
    log.add(step, value, reference, step == config.steps);
  }
  net::visit(out.adapter, [](const std::string&, TensorF& t) { t.set_requires_grad(false); });
  out.steps = config.steps;
  out.log = std::move(log.records);
  return out;
}

void write_loss_csv(const std::vector<LossRecord>& log, const std::filesystem::path& path) {
  std::ostringstream os;
  os.precision(9);
  os << "step,loss,reference_loss\n";
  for (const auto& r : log) {
    os << r.step << ',' << r.loss << ',';
    if (std::isfinite(r.reference)) os << r.reference;
    os << '\n';
  }
  io::write_text(path, os.str());
}

}  // namespace apa::train
