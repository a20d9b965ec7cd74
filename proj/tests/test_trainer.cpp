#include <gtest/gtest.h>

#include <cmath>

#include "dnet/checkpoint.hpp"
#include "dnet/error.hpp"
#include "dnet/trainer.hpp"
#include "support.hpp"

using namespace dnet;
using train::Split;
using train::TrainConfig;

namespace {

TrainConfig toy_config() {
  TrainConfig cfg;
  cfg.model.input_channels = 4;
  cfg.model.growth_rate = 2;
  cfg.model.block_layer_counts = {1, 1};
  cfg.model.input_h = 8;
  cfg.model.input_w = 8;
  cfg.optimizer.lr = 1e-3;
  cfg.batch_size = 16;
  cfg.epochs = 2;
  cfg.validation_every = 3;
  cfg.seed = 5;
  return cfg;
}

data::Dataset toy_data(std::size_t n = 120) { return data::synth_generate(n, 8, 8, 1, 0.5, 77); }

double bce_of(double logit, std::uint8_t y) {
  ad::Tape<double> tape;
  const auto z = tape.leaf(Tensor<double>({1, 1}, logit));
  const std::vector<std::uint8_t> labels{y};
  return train::bce_loss(z, labels).value()[0];
}

/// Counts every read of sample data.
class CountingSource final : public data::SampleSource {
 public:
  explicit CountingSource(const data::SampleSource& inner) : inner_(inner) {}
  std::size_t size() const override { return inner_.size(); }
  std::size_t height() const override { return inner_.height(); }
  std::size_t width() const override { return inner_.width(); }
  std::size_t channels() const override { return inner_.channels(); }
  std::span<const std::uint8_t> pixels(std::size_t i) const override {
    ++reads;
    return inner_.pixels(i);
  }
  std::uint8_t label(std::size_t i) const override {
    ++reads;
    return inner_.label(i);
  }
  mutable std::size_t reads = 0;

 private:
  const data::SampleSource& inner_;
};

}  // namespace

TEST(Bce, AnalyticValues) {
  EXPECT_NEAR(bce_of(0.0, 1), std::log(2.0), 1e-15);
  EXPECT_NEAR(bce_of(0.0, 0), std::log(2.0), 1e-15);
  EXPECT_NEAR(bce_of(-60.0, 1), -std::log(1e-7), 1e-9);  // clamped, finite
  EXPECT_NEAR(bce_of(-60.0, 1), 16.118, 1e-3);
  EXPECT_LE(bce_of(60.0, 1), -std::log(1 - 1e-7) + 1e-15);
}

TEST(Bce, ClampedSamplesHaveZeroGradient) {
  ad::Tape<double> tape;
  const auto z = tape.leaf(Tensor<double>({2, 1}, std::vector<double>{-60.0, 0.0}), "z");
  const std::vector<std::uint8_t> labels{1, 1};
  const auto g = tape.backward(train::bce_loss(z, labels));
  EXPECT_EQ(g.param("z")[0], 0.0);
  EXPECT_NEAR(g.param("z")[1], (0.5 - 1.0) / 2.0, 1e-15);
}

TEST(Bce, ShapeErrors) {
  ad::Tape<double> tape;
  const auto z = tape.leaf(Tensor<double>({2, 1}));
  EXPECT_THROW(train::bce_loss(z, std::vector<std::uint8_t>{1}), ShapeError);
  const auto wide = tape.leaf(Tensor<double>({2, 2}));
  EXPECT_THROW(train::bce_loss(wide, std::vector<std::uint8_t>{1, 0}), ShapeError);
}

TEST(Sigmoid, StableAtExtremes) {
  EXPECT_EQ(train::sigmoid(-1000), 0.0);
  EXPECT_EQ(train::sigmoid(1000), 1.0);
  EXPECT_DOUBLE_EQ(train::sigmoid(0), 0.5);
}

TEST(TrainConfig, Defaults) {
  const TrainConfig cfg;
  EXPECT_EQ(cfg.optimizer.lr, 1e-4);
  EXPECT_EQ(cfg.batch_size, 128u);
  EXPECT_EQ(cfg.train_fraction, 0.8);
  EXPECT_EQ(cfg.validation_fraction, 0.1);
  EXPECT_EQ(cfg.validation_every, 50u);
  EXPECT_EQ(cfg.optimizer.kind, optim::Kind::RAdam);
}

TEST(TrainConfig, TextRoundTripAndErrors) {
  auto cfg = toy_config();
  cfg.optimizer.kind = optim::Kind::Sgd;
  cfg.optimizer.weight_decay = 1e-4;
  const auto back = TrainConfig::from_text(cfg.to_text());
  EXPECT_EQ(back.to_text(), cfg.to_text());
  EXPECT_EQ(back.model, cfg.model);
  EXPECT_EQ(back.optimizer, cfg.optimizer);
  EXPECT_THROW(TrainConfig::from_text("batch_size=0\n"), ConfigError);
  EXPECT_THROW(TrainConfig::from_text("validation_fraction=1\n"), ConfigError);
  EXPECT_THROW(TrainConfig::from_text("learning_rate=1\n"), ConfigError);
  EXPECT_THROW(TrainConfig::from_text("lr=abc\n"), ConfigError);
  EXPECT_THROW(TrainConfig::from_text("num_classes=2\n"), ConfigError);
}

TEST(CurveLog, CsvRoundTrip) {
  train::CurveLog log;
  log.add(1, Split::Train, 0.693147180559945);
  log.add(1, Split::Validation, 1.0 / 3.0);
  const auto text = log.to_csv();
  EXPECT_EQ(text.substr(0, 29), "batches_processed,split,loss\n");
  EXPECT_EQ(train::CurveLog::from_csv(text), log);
  EXPECT_THROW(train::CurveLog::from_csv("a,b,c\n"), FormatError);
}

TEST(Training, CurveContract) {
  const auto cfg = toy_config();
  const auto run = train::train(cfg, toy_data());
  // 120 -> 96 train portion -> 86 train + 10 validation; ceil(86 / 16) = 6 per epoch.
  EXPECT_EQ(run.train_samples, 86u);
  EXPECT_EQ(run.validation_samples, 10u);
  EXPECT_EQ(run.test_samples, 24u);
  const auto rows = run.training.curve.of(Split::Train);
  ASSERT_EQ(rows.size(), 12u);
  for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(rows[i].batches_processed, i + 1);
  const auto val = run.training.curve.of(Split::Validation);
  ASSERT_EQ(val.size(), 4u);
  for (std::size_t i = 0; i < val.size(); ++i) EXPECT_EQ(val[i].batches_processed, 3 * (i + 1));
  EXPECT_EQ(run.training.checkpoint.optimizer.step, 12u);
  EXPECT_EQ(run.training.checkpoint.curve_offset, run.training.curve.rows.size());
  EXPECT_EQ(run.report.samples, 24u);
}

TEST(Training, DeterministicGivenSeed) {
  const auto cfg = toy_config();
  const auto a = train::train(cfg, toy_data());
  const auto b = train::train(cfg, toy_data());
  EXPECT_EQ(a.training.curve, b.training.curve);
  EXPECT_EQ(a.training.checkpoint.encode(), b.training.checkpoint.encode());
  auto other = cfg;
  other.seed = 6;
  EXPECT_NE(train::train(other, toy_data()).training.curve, a.training.curve);
}

TEST(Training, TestSplitIsNeverReadWhileTraining) {
  const auto ds = toy_data();
  const auto [train_part, test] = data::split(ds, 0.8, 1);
  const auto [train_set, val] = data::split(train_part, 0.9, 2);
  CountingSource train_src(train_set), val_src(val), test_src(test);
  train::TrainHooks hooks;
  std::size_t epochs_seen = 0;
  hooks.on_epoch = [&](std::size_t, const train::CheckpointF&) {
    ++epochs_seen;
    EXPECT_EQ(test_src.reads, 0u);
  };
  const auto result = train::train_on_splits(toy_config(), train_src, val_src, hooks);
  EXPECT_EQ(epochs_seen, 2u);
  EXPECT_GT(train_src.reads, 0u);
  EXPECT_GT(val_src.reads, 0u);
  EXPECT_EQ(test_src.reads, 0u);
  train::evaluate(result.checkpoint, test_src);
  EXPECT_GT(test_src.reads, 0u);
}

TEST(Training, OneStepIsForwardLossBackwardUpdate) {
  const auto cfg = toy_config();
  const auto ds = toy_data(32);
  const auto batch = data::make_batch<float>(ds, data::batch_order(ds.size(), 8, 1)[0]);
  auto model = train::Model::build(cfg.model, 3);
  auto manual = model;
  auto state = optim::make_state<float>(cfg.optimizer);
  auto manual_state = state;

  const double loss = train::train_step(model, state, batch);

  ad::Tape<float> tape;
  const auto z = manual.forward(tape, batch.images, nn::Mode::Train);
  const auto l = train::bce_loss(z, batch.labels);
  EXPECT_EQ(loss, static_cast<double>(l.value()[0]));
  optim::radam_step(manual.params(), tape.backward(l).params(), manual_state);
  EXPECT_TRUE(model.params() == manual.params());
  EXPECT_EQ(state, manual_state);
}

TEST(Training, NonFiniteLossAbortsNamingTheBatch) {
  auto cfg = toy_config();
  cfg.optimizer.kind = optim::Kind::Sgd;
  cfg.optimizer.lr = 1e30;
  try {
    train::train(cfg, toy_data());
    FAIL() << "expected a numerical failure";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("training aborted at batch"), std::string::npos) << e.what();
  }
}

TEST(Training, ShapeMismatchRejected) {
  const auto cfg = toy_config();
  const auto wrong = data::synth_generate(40, 9, 8, 1, 0.5, 1);
  EXPECT_THROW(train::train(cfg, wrong), ShapeError);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const auto run = train::train(toy_config(), toy_data());
  const auto bytes = run.training.checkpoint.encode();
  const auto back = train::CheckpointF::decode(bytes);
  EXPECT_EQ(back, run.training.checkpoint);
  EXPECT_EQ(back.encode(), bytes);
  EXPECT_FALSE(back.optimizer.first.empty());
}

TEST(Checkpoint, LoadedModelScoresIdentically) {
  const auto data = toy_data();
  const auto run = train::train(toy_config(), data);
  train::Model in_memory(run.training.checkpoint.model, run.training.checkpoint.params);
  const auto loaded = train::CheckpointF::decode(run.training.checkpoint.encode());
  train::Model restored(loaded.model, loaded.params);
  EXPECT_EQ(train::predict(in_memory, data, 32), train::predict(restored, data, 32));
}

TEST(Checkpoint, CorruptionIsDetected) {
  auto model = train::Model::build(toy_config().model, 1);
  const auto state = optim::make_state<float>(toy_config().optimizer);
  const auto bytes = train::make_checkpoint(model, state, 0).encode();

  auto bad_magic = bytes;
  bad_magic[1] = 'X';
  EXPECT_THROW(train::CheckpointF::decode(bad_magic), FormatError);

  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(train::CheckpointF::decode(bad_version), FormatError);

  auto bad_config = bytes;
  bad_config[12] ^= 1;  // inside the config text
  EXPECT_THROW(train::CheckpointF::decode(bad_config), FormatError);

  for (std::size_t cut : {std::size_t{3}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_THROW(train::CheckpointF::decode(std::span(bytes).first(cut)), FormatError);

  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(train::CheckpointF::decode(trailing), FormatError);

  // A double checkpoint is not a float checkpoint.
  auto dmodel = nn::Classifier<double>::build(toy_config().model, 1);
  io::Checkpoint<double> dck;
  dck.model = dmodel.config();
  dck.params = dmodel.params();
  EXPECT_THROW(train::CheckpointF::decode(dck.encode()), FormatError);
}

TEST(Checkpoint, Fnv1aKnownValues) {
  EXPECT_EQ(io::fnv1a64(std::string_view("")), 0xcbf29ce484222325ULL);
  EXPECT_EQ(io::fnv1a64(std::string_view("a")), 0xaf63dc4c8601ec8cULL);
}

TEST(Evaluate, RandomWeightsAreNearChance) {
  // Blob-free patches: the labels carry no information about the pixels, so
  // any fixed scorer is at chance. (On blob data random filters still respond
  // to overall brightness and rank the classes far from 0.5.)
  train::TrainConfig cfg;
  cfg.model.input_channels = 8;
  cfg.model.growth_rate = 4;
  data::SynthParams no_blob;
  no_blob.amplitude = 0.0;
  const auto ds = data::synth_generate(2000, 16, 16, 1, 0.5, 123, no_blob);
  auto model = train::Model::build(cfg.model, 99);
  const auto r = train::evaluate(model, ds);
  EXPECT_GE(r.auc_roc, 0.45);
  EXPECT_LE(r.auc_roc, 0.55);
  EXPECT_EQ(r.samples, 2000u);
}

TEST(Evaluate, DimensionMismatchIsAnError) {
  auto model = train::Model::build(toy_config().model, 1);
  const auto state = optim::make_state<float>(toy_config().optimizer);
  const auto ck = train::make_checkpoint(model, state, 0);
  EXPECT_THROW(train::evaluate(ck, data::synth_generate(20, 8, 10, 1, 0.5, 1)), ShapeError);
  EXPECT_THROW(train::evaluate(ck, data::synth_generate(20, 8, 8, 3, 0.5, 1)), ShapeError);
}
