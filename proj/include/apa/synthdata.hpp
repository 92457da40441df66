#pragma once

// Procedural "music": symbolic clip descriptions rendered to 64x64
// semitone-bin spectrograms whose attributes are known exactly.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace apa::synth {

inline constexpr std::size_t kBins = 64;    // F, semitone-spaced
inline constexpr std::size_t kFrames = 64;  // T
inline constexpr std::size_t kMelodyLength = 16;
inline constexpr std::size_t kFramesPerStep = kFrames / kMelodyLength;
inline constexpr int kPitchLow = 12;   // inclusive
inline constexpr int kPitchHigh = 40;  // exclusive
inline constexpr std::array<int, 4> kPartialOffsets{0, 12, 19, 24};
inline constexpr int kBassPitch = 12;
inline constexpr int kThirdInterval = 4;
inline constexpr double kAccompScale = 0.6;
inline constexpr double kPulseLevel = 0.3;
inline constexpr double kFloorLevel = 0.05;
inline constexpr std::size_t kPulsePeriod = 8;

enum class Timbre : std::uint8_t { pure, bright, odd, dark };
enum class Texture : std::uint8_t { none, pulse, offbeat, floor };
enum class Accomp : std::uint8_t { none, third, bass };
enum class Task : std::uint8_t { none, timbre, texture, accomp };

inline constexpr std::size_t kTimbreCount = 4;
inline constexpr std::size_t kTextureCount = 4;
inline constexpr std::size_t kAccompCount = 3;

// Partial amplitudes for k = 1..4.
const std::array<double, 4>& timbre_template(Timbre t);

std::string_view to_string(Timbre t);
std::string_view to_string(Texture t);
std::string_view to_string(Accomp a);
std::string_view to_string(Task t);
Timbre parse_timbre(std::string_view s);
Texture parse_texture(std::string_view s);
Accomp parse_accomp(std::string_view s);
Task parse_task(std::string_view s);

// Number of classes for the attribute a task edits (0 for Task::none).
std::size_t class_count(Task task);
std::string class_name(Task task, int class_index);
int parse_class(Task task, std::string_view name);

struct ClipSpec {
  std::array<std::uint8_t, kMelodyLength> melody{};
  Timbre timbre = Timbre::pure;
  Texture texture = Texture::none;
  Accomp accomp = Accomp::none;
  std::uint64_t seed = 0;

  friend bool operator==(const ClipSpec&, const ClipSpec&) = default;
};

// Throws ContractError when a pitch is outside [12, 40) or an enum is out of range.
void validate(const ClipSpec& spec);

class Spectrogram {
 public:
  Spectrogram() : values_(kBins * kFrames, 0.0f) {}
  explicit Spectrogram(std::vector<float> values);

  float at(std::size_t bin, std::size_t frame) const { return values_[bin * kFrames + frame]; }
  float& at(std::size_t bin, std::size_t frame) { return values_[bin * kFrames + frame]; }
  const std::vector<float>& values() const { return values_; }
  std::vector<float>& values() { return values_; }

  friend bool operator==(const Spectrogram&, const Spectrogram&) = default;

 private:
  std::vector<float> values_;  // row-major [bin][frame]
};

// Shared token vocabulary for conditions.
namespace vocab {
inline constexpr int null_token = 0;
inline constexpr int low_quality = 1;
inline constexpr int task_base = 2;     // + Task
inline constexpr int timbre_base = 6;   // + Timbre
inline constexpr int texture_base = 10; // + Texture
inline constexpr int accomp_base = 14;  // + Accomp
inline constexpr int size = 17;
}  // namespace vocab

int task_token(Task t);
int timbre_token(Timbre t);
int texture_token(Texture t);
int accomp_token(Accomp a);

struct ConditionTokens {
  Task task = Task::none;
  int primary = vocab::null_token;
  std::optional<int> secondary;
  bool null_flag = false;

  // Slots fed to the text encoder: task, primary, secondary, null slot.
  std::array<int, 4> slots() const;

  friend bool operator==(const ConditionTokens&, const ConditionTokens&) = default;
};

inline constexpr std::size_t kTextSlots = 4;

// The "empty string" condition.
ConditionTokens null_condition();
// The reserved "low quality" negative condition.
ConditionTokens low_quality_condition();

// Deterministic caption of a clip's own attributes, focused on `task`:
//   timbre  -> (timbre, timbre class)
//   texture -> (texture, texture class)
//   accomp  -> (accomp, lead timbre class, accompaniment class)
//   none    -> (none, timbre class, texture class)
ConditionTokens caption_tokens(const ClipSpec& spec, Task task);

// Edit prompt asking for `target_class` of the task's attribute. `source_timbre`
// names the lead instrument for accompaniment prompts.
ConditionTokens edit_tokens(Task task, int target_class, Timbre source_timbre);

struct ClipConstraints {
  std::optional<Timbre> timbre;
  std::optional<Texture> texture;
  std::optional<Accomp> accomp;
  std::vector<Timbre> exclude_timbre;
  std::vector<Texture> exclude_texture;
  std::vector<Accomp> exclude_accomp;
};

// Uniform over unconstrained attributes; melody is a clamped random walk.
// Throws ContractError if the constraints leave no admissible value.
ClipSpec sample_clip_spec(std::mt19937_64& rng, const ClipConstraints& constraints = {});

Spectrogram render_spectrogram(const ClipSpec& spec);

struct Record {
  ClipSpec spec;
  Spectrogram grid;
  ConditionTokens tokens;

  friend bool operator==(const Record&, const Record&) = default;
};

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::uint32_t kGridFileVersion = 1;

void write_dataset(const std::vector<Record>& records, const std::filesystem::path& path);
std::vector<Record> read_dataset(const std::filesystem::path& path);

// Bare grid files (edited outputs): same grid encoding, no clip metadata.
void write_grids(const std::vector<Spectrogram>& grids, const std::filesystem::path& path);
std::vector<Spectrogram> read_grids(const std::filesystem::path& path);

// n clips from sequential seeds starting at `seed`, captioned with Task::none.
std::vector<Record> generate_dataset(std::size_t n, std::uint64_t seed, const ClipConstraints& constraints = {});

}  // namespace apa::synth
