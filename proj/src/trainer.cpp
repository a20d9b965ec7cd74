#include "dnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <fmt/format.h>

#include "dnet/error.hpp"
#include "dnet/rng.hpp"
#include "dnet/text_config.hpp"

namespace dnet::train {

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw FormatError("write to '" + path.string() + "' failed");
}

void check_source(const nn::ModelConfig& m, const data::SampleSource& s, const char* what) {
  if (s.height() != m.input_h || s.width() != m.input_w || s.channels() != m.image_channels)
    throw ShapeError(fmt::format("{} data is {}x{}x{} (HxWxC) but the model expects {}x{}x{}", what,
                                 s.height(), s.width(), s.channels(), m.input_h, m.input_w,
                                 m.image_channels));
}

std::vector<std::size_t> range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return idx;
}

}  // namespace

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

template <typename T>
ad::Var<T> bce_loss(const ad::Var<T>& logits, std::span<const std::uint8_t> labels,
                    double epsilon) {
  const Tensor<T>& z = logits.value();
  if (z.rank() != 2 || z.dim(1) != 1)
    throw ShapeError("bce_loss: logits must be N x 1, got " + shape_str(z.shape()));
  const std::size_t n = z.dim(0);
  if (labels.size() != n)
    throw ShapeError(fmt::format("bce_loss: {} logits for {} labels", n, labels.size()));
  if (n == 0) throw ShapeError("bce_loss: empty batch");
  if (!(epsilon > 0.0 && epsilon < 0.5)) throw ShapeError("bce_loss: epsilon must lie in (0, 0.5)");

  std::vector<double> dz(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = labels[i];
    if (labels[i] > 1) throw ShapeError("bce_loss: labels must be 0 or 1");
    const double p = sigmoid(static_cast<double>(z[i]));
    const double pc = std::clamp(p, epsilon, 1.0 - epsilon);
    total -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
    dz[i] = (p > epsilon && p < 1.0 - epsilon) ? (p - y) / static_cast<double>(n) : 0.0;
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n)));
  return logits.tape().record(
      ad::OpKind::Loss, {logits.id()}, std::move(out),
      [dz = std::move(dz)](const Tensor<T>& g, ad::GradAccess<T>& in) {
        Tensor<T>& gz = in[0];
        const T scale = g[0];
        for (std::size_t i = 0; i < dz.size(); ++i) gz[i] += scale * static_cast<T>(dz[i]);
      });
}

template ad::Var<float> bce_loss<float>(const ad::Var<float>&, std::span<const std::uint8_t>,
                                        double);
template ad::Var<double> bce_loss<double>(const ad::Var<double>&, std::span<const std::uint8_t>,
                                          double);

void TrainConfig::validate() const {
  model.validate();
  optimizer.validate();
  if (model.num_classes != 1)
    throw ConfigError("train: the binary loss needs num_classes = 1");
  if (batch_size == 0) throw ConfigError("train: batch_size must be at least 1");
  if (epochs == 0) throw ConfigError("train: epochs must be at least 1");
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ConfigError("train: train_fraction must lie in (0, 1)");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
    throw ConfigError("train: validation_fraction must lie in (0, 1)");
}

bool TrainConfig::set(std::string_view key, std::string_view value) {
  using namespace dnet::text;
  if (model.set(key, value)) return true;
  if (key == "optimizer") optimizer.kind = optim::parse_kind(value);
  else if (key == "lr") optimizer.lr = parse_double(key, value);
  else if (key == "beta1") optimizer.beta1 = parse_double(key, value);
  else if (key == "beta2") optimizer.beta2 = parse_double(key, value);
  else if (key == "epsilon") optimizer.epsilon = parse_double(key, value);
  else if (key == "weight_decay") optimizer.weight_decay = parse_double(key, value);
  else if (key == "momentum") optimizer.momentum = parse_double(key, value);
  else if (key == "batch_size") batch_size = parse_size(key, value);
  else if (key == "epochs") epochs = parse_size(key, value);
  else if (key == "train_fraction") train_fraction = parse_double(key, value);
  else if (key == "validation_fraction") validation_fraction = parse_double(key, value);
  else if (key == "validation_every") validation_every = parse_size(key, value);
  else if (key == "seed") seed = parse_u64(key, value);
  else if (key == "data") data_path = std::string(value);
  else if (key == "out") output_dir = std::string(value);
  else return false;
  return true;
}

std::string TrainConfig::to_text() const {
  std::string s = model.to_text();
  s += fmt::format("optimizer={}\n", optim::to_string(optimizer.kind));
  s += fmt::format("lr={}\nbeta1={}\nbeta2={}\nepsilon={}\nweight_decay={}\nmomentum={}\n",
                   optimizer.lr, optimizer.beta1, optimizer.beta2, optimizer.epsilon,
                   optimizer.weight_decay, optimizer.momentum);
  s += fmt::format("batch_size={}\nepochs={}\ntrain_fraction={}\nvalidation_fraction={}\n",
                   batch_size, epochs, train_fraction, validation_fraction);
  s += fmt::format("validation_every={}\nseed={}\n", validation_every, seed);
  if (!data_path.empty()) s += fmt::format("data={}\n", data_path);
  if (!output_dir.empty()) s += fmt::format("out={}\n", output_dir);
  return s;
}

TrainConfig TrainConfig::from_text(std::string_view text) {
  TrainConfig cfg;
  for (const auto& [key, value] : text::parse_pairs(text))
    if (!cfg.set(key, value)) throw ConfigError("train config: unknown key '" + key + "'");
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::load(const std::string& path) { return from_text(text::read_file(path)); }

std::uint64_t init_seed(std::uint64_t seed) { return derive_seed(seed, 1); }
std::uint64_t split_seed(std::uint64_t seed) { return derive_seed(seed, 2); }
std::uint64_t validation_seed(std::uint64_t seed) { return derive_seed(seed, 3); }
std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
  return derive_seed(derive_seed(seed, 4), epoch);
}

std::string to_string(Split s) { return s == Split::Train ? "train" : "validation"; }

std::vector<CurveRow> CurveLog::of(Split split) const {
  std::vector<CurveRow> out;
  std::copy_if(rows.begin(), rows.end(), std::back_inserter(out),
               [split](const CurveRow& r) { return r.split == split; });
  return out;
}

std::string CurveLog::to_csv() const {
  std::string s = "batches_processed,split,loss\n";
  for (const auto& r : rows) s += fmt::format("{},{},{}\n", r.batches_processed, to_string(r.split), r.loss);
  return s;
}

CurveLog CurveLog::from_csv(std::string_view text) {
  CurveLog log;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const std::size_t nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != "batches_processed,split,loss") throw FormatError("curve: bad header");
      continue;
    }
    const std::size_t c1 = line.find(','), c2 = line.find(',', c1 + 1);
    if (c1 == std::string_view::npos || c2 == std::string_view::npos)
      throw FormatError(fmt::format("curve: line {} needs three fields", line_no));
    CurveRow row;
    row.batches_processed = text::parse_u64("batches_processed", line.substr(0, c1));
    const std::string_view split = line.substr(c1 + 1, c2 - c1 - 1);
    if (split == "train") row.split = Split::Train;
    else if (split == "validation") row.split = Split::Validation;
    else throw FormatError(fmt::format("curve: line {} has unknown split", line_no));
    row.loss = text::parse_double("loss", line.substr(c2 + 1));
    log.rows.push_back(row);
  }
  return log;
}

double train_step(Model& model, State& state, const data::Batch<float>& batch) {
  ad::Tape<float> tape;
  const ad::Var<float> logits = model.forward(tape, batch.images, nn::Mode::Train);
  const ad::Var<float> loss = bce_loss(logits, batch.labels);
  const double value = loss.value()[0];
  if (!std::isfinite(value)) throw NumericError(fmt::format("non-finite training loss {}", value));
  const ad::GradStore<float> grads = tape.backward(loss);
  optim::step(model.params(), grads.params(), state);
  return value;
}

double mean_loss(Model& model, const data::SampleSource& source, std::size_t batch_size) {
  if (source.size() == 0) throw ShapeError("mean_loss: empty data");
  if (batch_size == 0) throw ShapeError("mean_loss: batch_size must be positive");
  double total = 0.0;
  for (std::size_t b = 0; b < source.size(); b += batch_size) {
    const auto idx = range(b, std::min(source.size(), b + batch_size));
    const auto batch = data::make_batch<float>(source, idx);
    ad::Tape<float> tape;
    const auto logits = model.forward(tape, batch.images, nn::Mode::Eval);
    total += static_cast<double>(bce_loss(logits, batch.labels).value()[0]) *
             static_cast<double>(idx.size());
  }
  return total / static_cast<double>(source.size());
}

std::vector<double> predict(Model& model, const data::SampleSource& source,
                            std::size_t batch_size) {
  if (batch_size == 0) throw ShapeError("predict: batch_size must be positive");
  std::vector<double> scores;
  scores.reserve(source.size());
  for (std::size_t b = 0; b < source.size(); b += batch_size) {
    const auto idx = range(b, std::min(source.size(), b + batch_size));
    const Tensor<float> z = model.logits(data::make_batch<float>(source, idx).images);
    for (std::size_t i = 0; i < idx.size(); ++i) scores.push_back(sigmoid(z[i]));
  }
  return scores;
}

metrics::Report evaluate(Model& model, const data::SampleSource& source, std::size_t batch_size) {
  check_source(model.config(), source, "evaluation");
  if (source.size() == 0) throw ShapeError("evaluate: empty data");
  const std::vector<double> scores = predict(model, source, batch_size);
  std::vector<std::uint8_t> labels(source.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = source.label(i);
  metrics::Report r;
  r.model = nn::to_string(model.config().connectivity);
  r.samples = source.size();
  r.confusion = metrics::confusion(scores, labels, 0.5);
  r.accuracy = metrics::accuracy(r.confusion);
  r.auc_roc = metrics::auc(metrics::roc_curve(scores, labels));
  return r;
}

metrics::Report evaluate(const CheckpointF& checkpoint, const data::SampleSource& source,
                         std::size_t batch_size) {
  Model model(checkpoint.model, checkpoint.params);
  return evaluate(model, source, batch_size);
}

CheckpointF make_checkpoint(const Model& model, const State& state, std::uint64_t curve_offset) {
  CheckpointF ck;
  ck.model = model.config();
  ck.params = model.params();
  ck.optimizer = state;
  ck.curve_offset = curve_offset;
  return ck;
}

TrainResult train_on_splits(const TrainConfig& cfg, const data::SampleSource& train,
                            const data::SampleSource& validation, const TrainHooks& hooks) {
  cfg.validate();
  check_source(cfg.model, train, "training");
  if (train.size() == 0) throw ShapeError("train: empty training split");
  if (validation.size() != 0) check_source(cfg.model, validation, "validation");

  Model model = Model::build(cfg.model, init_seed(cfg.seed));
  State state = optim::make_state<float>(cfg.optimizer);
  CurveLog curve;
  auto append = [&](std::uint64_t batches, Split split, double loss) {
    curve.add(batches, split, loss);
    if (hooks.on_row) hooks.on_row(curve.rows.back());
  };

  std::uint64_t processed = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = data::batch_order(train.size(), cfg.batch_size, epoch_seed(cfg.seed, epoch));
    for (const auto& idx : order) {
      const auto batch = data::make_batch<float>(train, idx);
      double loss = 0.0;
      try {
        loss = train_step(model, state, batch);
      } catch (const NumericError& e) {
        throw NumericError(fmt::format("training aborted at batch {} (epoch {}): {}", processed,
                                       epoch + 1, e.what()));
      }
      ++processed;
      append(processed, Split::Train, loss);
      if (cfg.validation_every != 0 && validation.size() != 0 &&
          processed % cfg.validation_every == 0) {
        const double vloss = mean_loss(model, validation, cfg.batch_size);
        if (!std::isfinite(vloss))
          throw NumericError(fmt::format("non-finite validation loss after batch {}", processed));
        append(processed, Split::Validation, vloss);
      }
    }
    if (hooks.on_epoch) hooks.on_epoch(epoch + 1, make_checkpoint(model, state, curve.rows.size()));
  }
  return {make_checkpoint(model, state, curve.rows.size()), std::move(curve)};
}

RunResult train(const TrainConfig& cfg, const data::Dataset& ds, const TrainHooks& hooks) {
  cfg.validate();
  const auto outer = data::split_indices(ds.size(), cfg.train_fraction, split_seed(cfg.seed));
  const data::Dataset train_part = ds.subset(outer.first);
  const data::Dataset test = ds.subset(outer.second);
  if (train_part.size() < 2 || test.size() == 0)
    throw ShapeError(fmt::format("train: {} samples are too few to split", ds.size()));
  const auto inner = data::split_indices(train_part.size(), 1.0 - cfg.validation_fraction,
                                         validation_seed(cfg.seed));
  const data::Dataset train_set = train_part.subset(inner.first);
  const data::Dataset validation = train_part.subset(inner.second);

  RunResult run;
  run.training = train_on_splits(cfg, train_set, validation, hooks);
  run.report = evaluate(run.training.checkpoint, test, cfg.batch_size);
  run.train_samples = train_set.size();
  run.validation_samples = validation.size();
  run.test_samples = test.size();
  return run;
}

RunResult train_to_directory(const TrainConfig& cfg) {
  if (cfg.data_path.empty()) throw ConfigError("train: no data file given");
  if (cfg.output_dir.empty()) throw ConfigError("train: no output directory given");
  cfg.validate();
  const data::Dataset ds = data::read_ppak(cfg.data_path);
  const std::filesystem::path out(cfg.output_dir);
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw FormatError("cannot create '" + out.string() + "': " + ec.message());
  write_text(out / "config.txt", cfg.to_text());

  TrainHooks hooks;
  hooks.on_epoch = [&](std::size_t epoch, const CheckpointF& ck) {
    ck.save((out / fmt::format("checkpoint_epoch{}.pckp", epoch)).string());
  };
  RunResult run = train(cfg, ds, hooks);
  write_text(out / "curve.csv", run.training.curve.to_csv());
  run.training.checkpoint.save((out / "checkpoint.pckp").string());
  write_text(out / "report.txt", run.report.to_text());
  return run;
}

}  // namespace dnet::train
