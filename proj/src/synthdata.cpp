#include "apa/synthdata.hpp"

#include <algorithm>
#include "json.hpp"

#include "apa/binary_io.hpp"
#include "apa/errors.hpp"

namespace apa::synth {

namespace {

constexpr std::string_view kDatasetMagic{"APADSET\0", 8};
constexpr std::string_view kGridMagic{"APAGRID\0", 8};
constexpr std::size_t kGridBytes = kBins * kFrames * 4;
constexpr std::size_t kRecordBytes = kMelodyLength + 4 + 8 + kGridBytes + 6;

constexpr std::array<std::string_view, 4> kTimbreNames{"pure", "bright", "odd", "dark"};
constexpr std::array<std::string_view, 4> kTextureNames{"none", "pulse", "offbeat", "floor"};
constexpr std::array<std::string_view, 3> kAccompNames{"none", "third", "bass"};
constexpr std::array<std::string_view, 4> kTaskNames{"none", "timbre", "texture", "accomp"};

template <std::size_t N>
int parse_name(const std::array<std::string_view, N>& names, std::string_view s, const char* what) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == s) return static_cast<int>(i);
  throw ContractError(std::string("unknown ") + what + " class '" + std::string(s) + "'");
}

template <typename E>
void check_enum(E e, std::size_t count, const char* what) {
  if (static_cast<std::size_t>(e) >= count) throw ContractError(std::string("unknown ") + what + " class");
}

void put_grid(io::ByteWriter& w, const Spectrogram& g) {
  for (float v : g.values()) w.f32(v);
}

Spectrogram get_grid(io::ByteReader& r) {
  std::vector<float> v(kBins * kFrames);
  for (auto& x : v) x = r.f32();
  return Spectrogram(std::move(v));
}

}  // namespace

const std::array<double, 4>& timbre_template(Timbre t) {
  static const std::array<std::array<double, 4>, 4> templates{{
      {1.0, 0.0, 0.0, 0.0},
      {1.0, 0.7, 0.5, 0.35},
      {1.0, 0.0, 0.6, 0.0},
      {1.0, 0.3, 0.1, 0.05},
  }};
  check_enum(t, kTimbreCount, "timbre");
  return templates[static_cast<std::size_t>(t)];
}

std::string_view to_string(Timbre t) { return check_enum(t, kTimbreCount, "timbre"), kTimbreNames[std::size_t(t)]; }
std::string_view to_string(Texture t) {
  return check_enum(t, kTextureCount, "texture"), kTextureNames[std::size_t(t)];
}
std::string_view to_string(Accomp a) { return check_enum(a, kAccompCount, "accomp"), kAccompNames[std::size_t(a)]; }
std::string_view to_string(Task t) { return check_enum(t, 4, "task"), kTaskNames[std::size_t(t)]; }
Timbre parse_timbre(std::string_view s) { return static_cast<Timbre>(parse_name(kTimbreNames, s, "timbre")); }
Texture parse_texture(std::string_view s) { return static_cast<Texture>(parse_name(kTextureNames, s, "texture")); }
Accomp parse_accomp(std::string_view s) { return static_cast<Accomp>(parse_name(kAccompNames, s, "accomp")); }
Task parse_task(std::string_view s) { return static_cast<Task>(parse_name(kTaskNames, s, "task")); }

std::size_t class_count(Task task) {
  switch (task) {
    case Task::timbre: return kTimbreCount;
    case Task::texture: return kTextureCount;
    case Task::accomp: return kAccompCount;
    case Task::none: return 0;
  }
  throw ContractError("unknown task");
}

std::string class_name(Task task, int c) {
  if (c < 0 || static_cast<std::size_t>(c) >= class_count(task))
    throw ContractError("class index " + std::to_string(c) + " invalid for task " + std::string(to_string(task)));
  switch (task) {
    case Task::timbre: return std::string(kTimbreNames[c]);
    case Task::texture: return std::string(kTextureNames[c]);
    case Task::accomp: return std::string(kAccompNames[c]);
    case Task::none: break;
  }
  throw ContractError("task none has no classes");
}

int parse_class(Task task, std::string_view name) {
  switch (task) {
    case Task::timbre: return parse_name(kTimbreNames, name, "timbre");
    case Task::texture: return parse_name(kTextureNames, name, "texture");
    case Task::accomp: return parse_name(kAccompNames, name, "accomp");
    case Task::none: break;
  }
  throw ContractError("task none has no classes");
}

void validate(const ClipSpec& spec) {
  for (auto p : spec.melody)
    if (p < kPitchLow || p >= kPitchHigh)
      throw ContractError("clip spec: melody pitch " + std::to_string(p) + " outside [12, 40)");
  check_enum(spec.timbre, kTimbreCount, "timbre");
  check_enum(spec.texture, kTextureCount, "texture");
  check_enum(spec.accomp, kAccompCount, "accomp");
}

Spectrogram::Spectrogram(std::vector<float> values) : values_(std::move(values)) {
  if (values_.size() != kBins * kFrames)
    throw DimensionError("spectrogram: expected 64x64 values, got " + std::to_string(values_.size()));
}

int task_token(Task t) { return check_enum(t, 4, "task"), vocab::task_base + static_cast<int>(t); }
int timbre_token(Timbre t) { return check_enum(t, kTimbreCount, "timbre"), vocab::timbre_base + static_cast<int>(t); }
int texture_token(Texture t) {
  return check_enum(t, kTextureCount, "texture"), vocab::texture_base + static_cast<int>(t);
}
int accomp_token(Accomp a) { return check_enum(a, kAccompCount, "accomp"), vocab::accomp_base + static_cast<int>(a); }

std::array<int, 4> ConditionTokens::slots() const {
  if (null_flag) return {vocab::null_token, vocab::null_token, vocab::null_token, vocab::null_token};
  return {task_token(task), primary, secondary.value_or(vocab::null_token), vocab::null_token};
}

ConditionTokens null_condition() {
  ConditionTokens t;
  t.null_flag = true;
  return t;
}

ConditionTokens low_quality_condition() {
  ConditionTokens t;
  t.task = Task::none;
  t.primary = vocab::low_quality;
  return t;
}

ConditionTokens caption_tokens(const ClipSpec& spec, Task task) {
  validate(spec);
  ConditionTokens t;
  t.task = task;
  switch (task) {
    case Task::none:
      t.primary = timbre_token(spec.timbre);
      t.secondary = texture_token(spec.texture);
      break;
    case Task::timbre: t.primary = timbre_token(spec.timbre); break;
    case Task::texture: t.primary = texture_token(spec.texture); break;
    case Task::accomp:
      t.primary = timbre_token(spec.timbre);
      t.secondary = accomp_token(spec.accomp);
      break;
    default: throw ContractError("caption: unknown task");
  }
  return t;
}

ConditionTokens edit_tokens(Task task, int target_class, Timbre source_timbre) {
  if (target_class < 0 || static_cast<std::size_t>(target_class) >= class_count(task))
    throw ContractError("edit tokens: class " + std::to_string(target_class) + " invalid for task " +
                        std::string(to_string(task)));
  ConditionTokens t;
  t.task = task;
  switch (task) {
    case Task::timbre: t.primary = timbre_token(static_cast<Timbre>(target_class)); break;
    case Task::texture: t.primary = texture_token(static_cast<Texture>(target_class)); break;
    case Task::accomp:
      t.primary = timbre_token(source_timbre);
      t.secondary = accomp_token(static_cast<Accomp>(target_class));
      break;
    case Task::none: throw ContractError("edit tokens: task none is not an edit");
  }
  return t;
}

namespace {

template <typename E>
E pick_class(std::mt19937_64& rng, std::size_t count, const std::optional<E>& pin, const std::vector<E>& exclude,
             const char* what) {
  std::vector<E> allowed;
  for (std::size_t i = 0; i < count; ++i) {
    const E e = static_cast<E>(i);
    if (pin && *pin != e) continue;
    if (std::find(exclude.begin(), exclude.end(), e) != exclude.end()) continue;
    allowed.push_back(e);
  }
  if (allowed.empty()) throw ContractError(std::string("clip constraints on ") + what + " are contradictory");
  return allowed[std::uniform_int_distribution<std::size_t>(0, allowed.size() - 1)(rng)];
}

}  // namespace

ClipSpec sample_clip_spec(std::mt19937_64& rng, const ClipConstraints& c) {
  ClipSpec spec;
  spec.timbre = pick_class(rng, kTimbreCount, c.timbre, c.exclude_timbre, "timbre");
  spec.texture = pick_class(rng, kTextureCount, c.texture, c.exclude_texture, "texture");
  spec.accomp = pick_class(rng, kAccompCount, c.accomp, c.exclude_accomp, "accomp");
  int pitch = std::uniform_int_distribution<int>(kPitchLow, kPitchHigh - 1)(rng);
  std::uniform_int_distribution<int> step(-2, 2);
  for (auto& p : spec.melody) {
    p = static_cast<std::uint8_t>(pitch);
    pitch = std::clamp(pitch + step(rng), kPitchLow, kPitchHigh - 1);
  }
  spec.seed = rng();
  return spec;
}

Spectrogram render_spectrogram(const ClipSpec& spec) {
  validate(spec);
  std::vector<double> acc(kBins * kFrames, 0.0);
  const auto& amp = timbre_template(spec.timbre);
  auto voice = [&](int pitch, double gain, std::size_t frame) {
    for (std::size_t k = 0; k < kPartialOffsets.size(); ++k) {
      const int bin = pitch + kPartialOffsets[k];
      if (bin >= static_cast<int>(kBins) || amp[k] == 0.0) continue;
      acc[static_cast<std::size_t>(bin) * kFrames + frame] += gain * amp[k];
    }
  };
  for (std::size_t t = 0; t < kFrames; ++t) {
    const int p = spec.melody[t / kFramesPerStep];
    voice(p, 1.0, t);
    if (spec.accomp == Accomp::third) voice(p + kThirdInterval, kAccompScale, t);
    if (spec.accomp == Accomp::bass) voice(kBassPitch, kAccompScale, t);

    double broadband = 0.0;
    switch (spec.texture) {
      case Texture::pulse: broadband = (t % kPulsePeriod == 0) ? kPulseLevel : 0.0; break;
      case Texture::offbeat: broadband = (t % kPulsePeriod == kPulsePeriod / 2) ? kPulseLevel : 0.0; break;
      case Texture::floor: broadband = kFloorLevel; break;
      case Texture::none: break;
    }
    if (broadband != 0.0)
      for (std::size_t b = 0; b < kBins; ++b) acc[b * kFrames + t] += broadband;
  }
  std::vector<float> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(std::clamp(acc[i], 0.0, 1.0));
  return Spectrogram(std::move(out));
}

void write_dataset(const std::vector<Record>& records, const std::filesystem::path& path) {
  nlohmann::json header = {
      {"kind", "apa-dataset"},
      {"format_version", kDatasetVersion},
      {"count", records.size()},
      {"bins", kBins},
      {"frames", kFrames},
      {"grid_dtype", "f32le"},
      {"record_bytes", kRecordBytes},
      {"fields",
       {"melody:u8[16]", "timbre:u8", "texture:u8", "accomp:u8", "reserved:u8", "seed:u64le", "grid:f32le[64*64]",
        "task:u8", "null_flag:u8", "primary:i16le", "secondary:i16le(-1=null)"}},
  };
  io::ByteWriter w;
  io::write_container_prefix(w, kDatasetMagic, kDatasetVersion, header.dump());
  for (const auto& r : records) {
    for (auto p : r.spec.melody) w.u8(p);
    w.u8(static_cast<std::uint8_t>(r.spec.timbre));
    w.u8(static_cast<std::uint8_t>(r.spec.texture));
    w.u8(static_cast<std::uint8_t>(r.spec.accomp));
    w.u8(0);
    w.u64(r.spec.seed);
    put_grid(w, r.grid);
    w.u8(static_cast<std::uint8_t>(r.tokens.task));
    w.u8(r.tokens.null_flag ? 1 : 0);
    w.i16(static_cast<std::int16_t>(r.tokens.primary));
    w.i16(static_cast<std::int16_t>(r.tokens.secondary.value_or(-1)));
  }
  io::write_file(path, w.bytes());
}

std::vector<Record> read_dataset(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes, "dataset " + path.string());
  const auto c = io::read_container_prefix(r, kDatasetMagic, kDatasetVersion, "dataset " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(c.header);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("dataset " + path.string() + ": unreadable header: " + e.what());
  }
  if (header.value("record_bytes", std::size_t{0}) != kRecordBytes)
    throw FormatError("dataset " + path.string() + ": record layout mismatch");
  const auto count = header.at("count").get<std::size_t>();
  if (r.remaining() != count * kRecordBytes)
    throw IoError("dataset " + path.string() + ": truncated or padded payload (" + std::to_string(r.remaining()) +
                  " bytes for " + std::to_string(count) + " records)");
  std::vector<Record> out(count);
  for (auto& rec : out) {
    for (auto& p : rec.spec.melody) p = r.u8();
    rec.spec.timbre = static_cast<Timbre>(r.u8());
    rec.spec.texture = static_cast<Texture>(r.u8());
    rec.spec.accomp = static_cast<Accomp>(r.u8());
    r.u8();
    rec.spec.seed = r.u64();
    rec.grid = get_grid(r);
    rec.tokens.task = static_cast<Task>(r.u8());
    rec.tokens.null_flag = r.u8() != 0;
    rec.tokens.primary = r.i16();
    const int secondary = r.i16();
    if (secondary >= 0) rec.tokens.secondary = secondary;
  }
  return out;
}

void write_grids(const std::vector<Spectrogram>& grids, const std::filesystem::path& path) {
  nlohmann::json header = {{"kind", "apa-grids"},    {"format_version", kGridFileVersion},
                           {"count", grids.size()},  {"bins", kBins},
                           {"frames", kFrames},      {"grid_dtype", "f32le"}};
  io::ByteWriter w;
  io::write_container_prefix(w, kGridMagic, kGridFileVersion, header.dump());
  for (const auto& g : grids) put_grid(w, g);
  io::write_file(path, w.bytes());
}

std::vector<Spectrogram> read_grids(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes, "grid file " + path.string());
  const auto c = io::read_container_prefix(r, kGridMagic, kGridFileVersion, "grid file " + path.string());
  const auto count = nlohmann::json::parse(c.header).at("count").get<std::size_t>();
  if (r.remaining() != count * kGridBytes) throw IoError("grid file " + path.string() + ": truncated payload");
  std::vector<Spectrogram> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(get_grid(r));
  return out;
}

std::vector<Record> generate_dataset(std::size_t n, std::uint64_t seed, const ClipConstraints& constraints) {
  std::vector<Record> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(seed + i);
    Record r;
    r.spec = sample_clip_spec(rng, constraints);
    r.grid = render_spectrogram(r.spec);
    r.tokens = caption_tokens(r.spec, Task::none);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace apa::synth
