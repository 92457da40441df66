// Checks that need the full-scale checkpoints; skipped when they are absent.

#include <gtest/gtest.h>

#include <filesystem>
#include <optional>

#include "apa/diffusion.hpp"
#include "apa/editops.hpp"
#include "apa/metrics.hpp"

using namespace apa;
namespace fs = std::filesystem;

namespace {

struct Pair {
  train::Checkpoint base, adapter;
};

const std::optional<Pair>& trained() {
  static const std::optional<Pair> p = []() -> std::optional<Pair> {
    const fs::path dir = APA_ARTIFACTS_DIR;
    if (!fs::exists(dir / "base.ckpt") || !fs::exists(dir / "adapter.ckpt")) return std::nullopt;
    return Pair{train::load_checkpoint(dir / "base.ckpt"), train::load_checkpoint(dir / "adapter.ckpt")};
  }();
  return p;
}

#define REQUIRE_TRAINED() \
  if (!trained()) GTEST_SKIP() << "no checkpoints in " << APA_ARTIFACTS_DIR

}  // namespace

TEST(Trained, PairIsCompatible) {
  REQUIRE_TRAINED();
  EXPECT_NO_THROW(train::check_compatible(trained()->base, trained()->adapter));
}

TEST(Trained, PureToBrightRaisesBrightScore) {
  REQUIRE_TRAINED();
  const auto clips = synth::generate_dataset(96, 3000000);
  std::vector<edit::EditRequest> reqs;
  for (const auto& c : clips)
    if (c.spec.timbre == synth::Timbre::pure && reqs.size() < 8) {
      auto r = edit::make_request(c.grid, synth::Task::timbre, int(synth::Timbre::bright), reqs.size());
      r.source_timbre = synth::Timbre::pure;
      reqs.push_back(r);
    }
  ASSERT_EQ(reqs.size(), 8u);
  const auto results = edit::edit_batch(reqs, trained()->base.base, trained()->adapter.adapter);
  double before = 0.0, after = 0.0;
  for (const auto& r : results) {
    before += metrics::transfer_score(r.request.input, synth::Task::timbre, int(synth::Timbre::bright));
    after += metrics::transfer_score(r.edited, synth::Task::timbre, int(synth::Timbre::bright));
  }
  EXPECT_GT(after / 8.0, before / 8.0);
}

TEST(Trained, AudioConditioningLowersHeldoutLoss) {
  REQUIRE_TRAINED();
  const auto& base = trained()->base.base;
  const auto& adapter = trained()->adapter.adapter;
  num::NoGradGuard guard;
  const auto schedule = diff::make_schedule();
  const auto clips = synth::generate_dataset(64, 4000000);
  double with_audio = 0.0, text_only = 0.0;
  for (std::size_t start = 0; start < clips.size(); start += 16) {
    std::vector<synth::Spectrogram> grids;
    std::vector<synth::ConditionTokens> tokens;
    std::vector<cond::AudioFeatures> feats;
    for (std::size_t i = start; i < start + 16; ++i) {
      grids.push_back(clips[i].grid);
      tokens.push_back(clips[i].tokens);
      feats.push_back(cond::pool_features(cond::encode_audio(clips[i].grid, base.encoder), 2));
    }
    net::Conditioning c;
    c.text = cond::encode_text_batch(tokens, base.encoder);
    c.audio = net::stack_audio(feats, c.audio_lengths, cond::kAudioTokens);
    c.alpha = 1.0f;
    const diff::TrainBatch audio_batch{diff::to_model_space(grids), c};
    const diff::TrainBatch text_batch{audio_batch.x0, {c.text, std::nullopt, {}, 0.0f}};
    std::mt19937_64 a(start), b(start);
    with_audio += diff::training_loss(audio_batch, a, diff::make_predictor(base, &adapter), schedule).item();
    text_only += diff::training_loss(text_batch, b, diff::make_predictor(base, nullptr), schedule).item();
  }
  EXPECT_LT(with_audio, text_only);
}
