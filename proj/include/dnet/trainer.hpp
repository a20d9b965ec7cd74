#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dnet/architectures.hpp"
#include "dnet/autodiff.hpp"
#include "dnet/checkpoint.hpp"
#include "dnet/dataset.hpp"
#include "dnet/metrics.hpp"
#include "dnet/optimizers.hpp"

namespace dnet::train {

/// Probabilities are clamped to [eps, 1 - eps] before taking logs.
inline constexpr double kBceEpsilon = 1e-7;

/// Numerically stable logistic function.
double sigmoid(double z);

/// -mean(y ln p + (1 - y) ln(1 - p)) with p = clamp(sigmoid(logit)). The
/// gradient is the exact derivative of that expression, so it vanishes for
/// samples whose probability was clamped.
template <typename T>
ad::Var<T> bce_loss(const ad::Var<T>& logits, std::span<const std::uint8_t> labels,
                    double epsilon = kBceEpsilon);

/// Everything a training run needs, read from a flat key/value file.
/// Model keys are those of nn::ModelConfig; the rest are listed in to_text().
struct TrainConfig {
  nn::ModelConfig model;
  optim::Hyper optimizer;
  std::size_t batch_size = 128;
  std::size_t epochs = 1;
  /// Share of the data used for training; the rest is the held-out test set.
  double train_fraction = 0.8;
  /// Share of the training split set aside for validation.
  double validation_fraction = 0.1;
  /// Batches between validation passes; 0 disables them.
  std::size_t validation_every = 50;
  std::uint64_t seed = 0;
  std::string data_path;
  std::string output_dir;

  void validate() const;
  std::string to_text() const;
  static TrainConfig from_text(std::string_view text);
  static TrainConfig load(const std::string& path);
  bool set(std::string_view key, std::string_view value);
};

/// Sub-seeds derived from TrainConfig::seed.
std::uint64_t init_seed(std::uint64_t seed);
std::uint64_t split_seed(std::uint64_t seed);
std::uint64_t validation_seed(std::uint64_t seed);
std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch);

enum class Split { Train, Validation };

std::string to_string(Split s);

struct CurveRow {
  std::uint64_t batches_processed = 0;
  Split split = Split::Train;
  double loss = 0.0;
  friend bool operator==(const CurveRow&, const CurveRow&) = default;
};

struct CurveLog {
  std::vector<CurveRow> rows;

  void add(std::uint64_t batches, Split split, double loss) { rows.push_back({batches, split, loss}); }
  std::vector<CurveRow> of(Split split) const;
  /// `batches_processed,split,loss`; losses in shortest round-trip form.
  std::string to_csv() const;
  static CurveLog from_csv(std::string_view text);

  friend bool operator==(const CurveLog&, const CurveLog&) = default;
};

using Model = nn::Classifier<float>;
using State = optim::OptimState<float>;
using CheckpointF = io::Checkpoint<float>;

/// forward (train mode) -> bce_loss -> backward -> optimizer step. Returns
/// the batch loss; throws NumericError if it is not finite.
double train_step(Model& model, State& state, const data::Batch<float>& batch);

/// Sample-weighted eval-mode BCE over `source`, in index order.
double mean_loss(Model& model, const data::SampleSource& source, std::size_t batch_size);

/// Eval-mode sigmoid scores for every sample, in index order.
std::vector<double> predict(Model& model, const data::SampleSource& source,
                            std::size_t batch_size);

/// AUC, accuracy and confusion matrix at threshold 0.5.
metrics::Report evaluate(Model& model, const data::SampleSource& source,
                         std::size_t batch_size = 128);
metrics::Report evaluate(const CheckpointF& checkpoint, const data::SampleSource& source,
                         std::size_t batch_size = 128);

CheckpointF make_checkpoint(const Model& model, const State& state, std::uint64_t curve_offset);

struct TrainHooks {
  /// Called after each epoch (1-based) with a checkpoint of that moment.
  std::function<void(std::size_t epoch, const CheckpointF&)> on_epoch;
  /// Called after every appended curve row.
  std::function<void(const CurveRow&)> on_row;
};

struct TrainResult {
  CheckpointF checkpoint;
  CurveLog curve;
};

/// The training loop proper. Only `train` and `validation` are visible to
/// it; the test split stays with the caller.
TrainResult train_on_splits(const TrainConfig& cfg, const data::SampleSource& train,
                            const data::SampleSource& validation, const TrainHooks& hooks = {});

struct RunResult {
  TrainResult training;
  metrics::Report report;  ///< On the held-out test split.
  std::size_t train_samples = 0;
  std::size_t validation_samples = 0;
  std::size_t test_samples = 0;
};

/// Splits `ds` into train/test by train_fraction, carves validation out of
/// train, trains, then evaluates the final model on test.
RunResult train(const TrainConfig& cfg, const data::Dataset& ds, const TrainHooks& hooks = {});

/// `train` plus files in cfg.output_dir: config.txt, curve.csv,
/// checkpoint_epoch<E>.pckp per epoch, checkpoint.pckp and report.txt.
RunResult train_to_directory(const TrainConfig& cfg);

}  // namespace dnet::train
