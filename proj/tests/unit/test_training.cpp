#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "apa/binary_io.hpp"
#include "apa/errors.hpp"
#include "apa/numerics/ops.hpp"
#include "apa/training.hpp"
#include "json.hpp"

using namespace apa;
using namespace apa::train;

namespace {

TrainConfig small_config(Stage stage, std::size_t steps) {
  TrainConfig c;
  c.stage = stage;
  c.steps = steps;
  c.batch = 2;
  c.lr = 1e-3;
  c.log_every = 2;
  c.seed = 11;
  c.unet.channels1 = 8;
  c.unet.channels2 = 16;
  c.unet.bottleneck = 16;
  c.unet.blocks_per_level = 1;
  return c;
}

const std::vector<synth::Record>& data() {
  static const auto d = synth::generate_dataset(8, 5);
  return d;
}

const Checkpoint& base_ckpt() {
  static const Checkpoint c = pretrain_base(small_config(Stage::base, 3), data());
  return c;
}

const Checkpoint& adapter_ckpt() {
  static const Checkpoint c = train_adapter(base_ckpt(), small_config(Stage::adapter, 3), data());
  return c;
}

nlohmann::json manifest(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes, "test");
  return nlohmann::json::parse(io::read_container_prefix(r, {"APACKPT\0", 8}, kCheckpointVersion, "test").header);
}

std::vector<float> flatten(const net::BaseParams& p) {
  std::vector<float> out;
  net::visit(p, [&](const std::string&, const TensorF& t) { out.insert(out.end(), t.data().begin(), t.data().end()); });
  return out;
}

}  // namespace

TEST(Config, RejectsInvalidValues) {
  auto c = small_config(Stage::base, 1);
  EXPECT_NO_THROW(c.validate());
  auto bad = c;
  bad.steps = 0;
  EXPECT_THROW(bad.validate(), ContractError);
  bad = c;
  bad.lr = 0.0;
  EXPECT_THROW(bad.validate(), ContractError);
  bad = c;
  bad.dropout = 1.5;
  EXPECT_THROW(bad.validate(), ContractError);
  EXPECT_THROW(parse_stage("final"), ContractError);
  EXPECT_EQ(parse_stage(to_string(Stage::adapter)), Stage::adapter);
}

TEST(AdamW, FirstStepMovesEachWeightByLearningRate) {
  auto c = small_config(Stage::base, 1);
  c.weight_decay = 0.0;
  TensorF w = TensorF::from({3}, {1.0f, -2.0f, 0.5f}, true);
  AdamW opt({w}, c);
  num::sum(num::mul(w, TensorF::from({3}, {3.0f, -0.5f, 0.0f}))).backward();
  opt.step();
  // Bias-corrected first step is lr * g / (|g| + eps).
  EXPECT_NEAR(w.at(0), 1.0f - 1e-3f, 1e-6);
  EXPECT_NEAR(w.at(1), -2.0f + 1e-3f, 1e-6);
  EXPECT_NEAR(w.at(2), 0.5f, 1e-6);
  EXPECT_FALSE(w.has_grad() && w.grad()[0] != 0.0f);
  EXPECT_EQ(opt.steps_taken(), 1u);
}

TEST(AdamW, WeightDecayIsDecoupled) {
  auto c = small_config(Stage::base, 1);
  c.weight_decay = 0.5;
  TensorF w = TensorF::from({1}, {2.0f}, true);
  AdamW opt({w}, c);
  num::sum(num::mul(w, TensorF::zeros({1}))).backward();
  opt.step();
  EXPECT_NEAR(w.at(0), 2.0f - 1e-3f * 0.5f * 2.0f, 1e-6);
}

TEST(Pretrain, DeterministicAndLogged) {
  const auto again = pretrain_base(small_config(Stage::base, 3), data());
  EXPECT_EQ(flatten(again.base), flatten(base_ckpt().base));
  ASSERT_EQ(base_ckpt().log.size(), 2u);
  EXPECT_EQ(base_ckpt().log[0].step, 2u);
  EXPECT_EQ(base_ckpt().log[1].step, 3u);
  for (const auto& r : base_ckpt().log) {
    EXPECT_TRUE(std::isfinite(r.loss));
    EXPECT_TRUE(std::isnan(r.reference));
  }
  EXPECT_EQ(base_ckpt().steps, 3u);
}

TEST(Pretrain, PatchProjectionStaysFixed) {
  const auto init = net::init_params(small_config(Stage::base, 1).unet, 11);
  const auto& p0 = init.encoder.patch_projection.data();
  const auto& p1 = base_ckpt().base.encoder.patch_projection.data();
  EXPECT_TRUE(std::equal(p0.begin(), p0.end(), p1.begin()));
  const auto& w0 = init.out_conv_w.data();
  const auto& w1 = base_ckpt().base.out_conv_w.data();
  EXPECT_FALSE(std::equal(w0.begin(), w0.end(), w1.begin()));
}

TEST(Pretrain, ProgressReportsEachWindow) {
  std::vector<std::size_t> seen;
  pretrain_base(small_config(Stage::base, 4), data(), [&](const LossRecord& r) { seen.push_back(r.step); });
  EXPECT_EQ(seen, (std::vector<std::size_t>{2, 4}));
}

TEST(Adapter, BaseTensorsUnchangedAndReferenceLogged) {
  const auto before = flatten(base_ckpt().base);
  const auto& a = adapter_ckpt();
  EXPECT_EQ(flatten(base_ckpt().base), before);
  EXPECT_EQ(a.base_hash, tensor_hash(base_ckpt().base));
  for (const auto& r : a.log) {
    EXPECT_TRUE(std::isfinite(r.loss));
    EXPECT_TRUE(std::isfinite(r.reference));
  }
  const auto init = net::init_adapter_from_text(base_ckpt().base);
  EXPECT_NE(tensor_hash(init), tensor_hash(a.adapter));
  EXPECT_NO_THROW(check_compatible(base_ckpt(), a));
}

TEST(Adapter, Deterministic) {
  const auto again = train_adapter(base_ckpt(), small_config(Stage::adapter, 3), data());
  EXPECT_EQ(tensor_hash(again.adapter), tensor_hash(adapter_ckpt().adapter));
}

TEST(Adapter, IncompatibleBaseRejected) {
  auto other = pretrain_base([] {
    auto c = small_config(Stage::base, 1);
    c.seed = 99;
    return c;
  }(), data());
  EXPECT_THROW(check_compatible(other, adapter_ckpt()), ContractError);
  EXPECT_THROW(train_adapter(adapter_ckpt(), small_config(Stage::adapter, 1), data()), ContractError);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  for (const Checkpoint* c : {&base_ckpt(), &adapter_ckpt()}) {
    const auto bytes = serialize_checkpoint(*c);
    const auto loaded = deserialize_checkpoint(bytes, "mem");
    EXPECT_EQ(serialize_checkpoint(loaded), bytes);
    EXPECT_EQ(loaded.stage, c->stage);
    EXPECT_EQ(loaded.steps, c->steps);
    EXPECT_EQ(loaded.log.size(), c->log.size());
  }
  const auto loaded = deserialize_checkpoint(serialize_checkpoint(base_ckpt()), "mem");
  EXPECT_EQ(flatten(loaded.base), flatten(base_ckpt().base));
  EXPECT_EQ(tensor_hash(loaded.base), tensor_hash(base_ckpt().base));
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "apa_test_adapter.ckpt";
  save_checkpoint(adapter_ckpt(), path);
  const auto loaded = load_checkpoint(path);
  EXPECT_EQ(tensor_hash(loaded.adapter), tensor_hash(adapter_ckpt().adapter));
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), IoError);
}

TEST(Checkpoint, ManifestListsEveryTensor) {
  const auto m = manifest(serialize_checkpoint(base_ckpt()));
  std::size_t count = 0;
  net::visit(base_ckpt().base, [&](const std::string& name, const TensorF& t) {
    const auto& e = m.at("tensors").at(count++);
    EXPECT_EQ(e.at("name"), name);
    EXPECT_EQ(e.at("count").get<std::size_t>(), t.numel());
  });
  EXPECT_EQ(m.at("tensors").size(), count);
  EXPECT_EQ(m.at("stage"), "base");
  EXPECT_EQ(m.at("config").at("steps"), 3);
  const auto a = manifest(serialize_checkpoint(adapter_ckpt()));
  EXPECT_EQ(a.at("base_hash"), tensor_hash(base_ckpt().base));
  EXPECT_EQ(a.at("tensors").size(), 6u);
}

TEST(Checkpoint, FlippedPayloadByteIsCorruption) {
  auto bytes = serialize_checkpoint(adapter_ckpt());
  bytes[bytes.size() - 5] ^= 0x01;
  EXPECT_THROW(deserialize_checkpoint(bytes, "mem"), CorruptionError);
}

TEST(Checkpoint, WrongVersionOrMagicIsFormatError) {
  auto bytes = serialize_checkpoint(adapter_ckpt());
  auto v = bytes;
  v[8] = 2;
  EXPECT_THROW(deserialize_checkpoint(v, "mem"), FormatError);
  auto m = bytes;
  m[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(m, "mem"), FormatError);
}

TEST(Checkpoint, TruncatedIsIoError) {
  auto bytes = serialize_checkpoint(adapter_ckpt());
  bytes.resize(bytes.size() - 16);
  EXPECT_THROW(deserialize_checkpoint(bytes, "mem"), IoError);
}

TEST(LossCsv, WritesHeaderAndRows) {
  const auto path = std::filesystem::temp_directory_path() / "apa_test_loss.csv";
  write_loss_csv(adapter_ckpt().log, path);
  const auto bytes = io::read_file(path);
  const std::string text(bytes.begin(), bytes.end());
  EXPECT_EQ(text.rfind("step,loss,reference_loss\n", 0), 0u);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1 + long(adapter_ckpt().log.size()));
  std::filesystem::remove(path);
}
