#include "dnet/cli.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>

#include "dnet/checkpoint.hpp"
#include "dnet/dataset.hpp"
#include "dnet/error.hpp"
#include "dnet/gradcheck.hpp"
#include "dnet/parallel.hpp"
#include "dnet/trainer.hpp"

namespace dnet::cli {

namespace {

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool deterministic = false;
  std::size_t threads = 1;
};

struct EvaluateArgs {
  std::string checkpoint;
  std::string data;
  std::size_t batch_size = 128;
};

struct SplitArgs {
  std::string data;
  double fraction = 0.8;
  std::uint64_t seed = 0;
  std::string out_train;
  std::string out_test;
};

struct SynthArgs {
  std::string out;
  std::size_t n = 0;
  std::size_t hw = 16;
  std::size_t channels = 1;
  double pos_frac = 0.5;
  std::uint64_t seed = 0;
  double amplitude = data::SynthParams{}.amplitude;
};

struct GradcheckArgs {
  std::string preset;
  std::uint64_t seed = 42;
  double eps = 1e-4;
};

struct LabelsArgs {
  std::string data;
  std::string out;
};

int run_train(const TrainArgs& a, std::ostream& out) {
  train::TrainConfig cfg =
      a.config.empty() ? train::TrainConfig{} : train::TrainConfig::load(a.config);
  cfg.data_path = a.data;
  cfg.output_dir = a.out;
  if (a.seed_given) cfg.seed = a.seed;
  set_num_threads(a.deterministic ? 1 : std::max<std::size_t>(1, a.threads));
  const auto start = std::chrono::steady_clock::now();
  const train::RunResult run = train::train_to_directory(cfg);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  fmt::print(out, "samples: train={} validation={} test={}\n", run.train_samples,
             run.validation_samples, run.test_samples);
  fmt::print(out, "batches: {}\n", run.training.curve.of(train::Split::Train).size());
  out << run.report.to_text();
  fmt::print(out, "seconds={:.1f}\n", seconds);
  return kOk;
}

int run_evaluate(const EvaluateArgs& a, std::ostream& out) {
  const auto ck = io::Checkpoint<float>::load(a.checkpoint);
  const data::Dataset ds = data::read_ppak(a.data);
  out << train::evaluate(ck, ds, a.batch_size).to_text();
  return kOk;
}

int run_split(const SplitArgs& a, std::ostream& out) {
  const data::Dataset ds = data::read_ppak(a.data);
  const auto [train_set, test_set] = data::split(ds, a.fraction, a.seed);
  data::write_ppak(train_set, a.out_train);
  data::write_ppak(test_set, a.out_test);
  fmt::print(out, "train={} test={}\n", train_set.size(), test_set.size());
  return kOk;
}

int run_synth(const SynthArgs& a, std::ostream& out) {
  data::SynthParams params;
  params.amplitude = a.amplitude;
  const data::Dataset ds =
      data::synth_generate(a.n, a.hw, a.hw, a.channels, a.pos_frac, a.seed, params);
  data::write_ppak(ds, a.out);
  const auto positives = std::count(ds.labels().begin(), ds.labels().end(), 1);
  fmt::print(out, "records={} positives={} bytes={}\n", ds.size(), positives,
             data::ppak_file_size(ds.size(), a.hw, a.hw, a.channels));
  return kOk;
}

int run_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  std::vector<std::string> names;
  if (a.preset == "all")
    names = gradcheck::preset_names();
  else
    names.push_back(a.preset);
  bool ok = true;
  for (const auto& name : names) {
    const auto r = gradcheck::run_preset(name, a.seed, a.eps);
    const bool pass = r.max_rel_err < gradcheck::kTolerance;
    ok = ok && pass;
    fmt::print(out, "{} max_rel_err={:.3e} coordinates={} {}\n", name, r.max_rel_err,
               r.coordinates, pass ? "PASS" : "FAIL");
  }
  return ok ? kOk : kNumericFailure;
}

int run_labels(const LabelsArgs& a) {
  const data::Dataset ds = data::read_ppak(a.data);
  std::ofstream f(a.out, std::ios::trunc);
  if (!f) throw FormatError("cannot open '" + a.out + "' for writing");
  data::write_labels_csv(ds, f);
  if (!f) throw FormatError("write to '" + a.out + "' failed");
  return kOk;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dense, residual and plain CNN patch classifiers", "dnet"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a classifier and write its artifacts");
  train_cmd->add_option("--config", ta.config, "Key/value training config");
  train_cmd->add_option("--data", ta.data, "PPAK dataset")->required();
  train_cmd->add_option("--out", ta.out, "Output directory")->required();
  auto* seed_opt = train_cmd->add_option("--seed", ta.seed, "Overrides the config seed");
  train_cmd->add_flag("--deterministic", ta.deterministic, "Single-threaded, bit-reproducible");
  train_cmd->add_option("--threads", ta.threads, "Worker threads for kernels")
      ->check(CLI::PositiveNumber);

  EvaluateArgs ea;
  auto* eval_cmd = app.add_subcommand("evaluate", "Score a dataset with a checkpoint");
  eval_cmd->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", ea.data, "PPAK dataset")->required();
  eval_cmd->add_option("--batch-size", ea.batch_size, "Evaluation batch size")
      ->check(CLI::PositiveNumber);

  SplitArgs sa;
  auto* split_cmd = app.add_subcommand("split", "Seeded train/test split of a PPAK file");
  split_cmd->add_option("--data", sa.data, "PPAK dataset")->required();
  split_cmd->add_option("--fraction", sa.fraction, "Share of samples for training")
      ->check(CLI::Range(0.0, 1.0));
  split_cmd->add_option("--seed", sa.seed, "Shuffle seed");
  split_cmd->add_option("--out-train", sa.out_train, "Training PPAK output")->required();
  split_cmd->add_option("--out-test", sa.out_test, "Test PPAK output")->required();

  SynthArgs ya;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic patch dataset");
  synth_cmd->add_option("--out", ya.out, "PPAK output")->required();
  synth_cmd->add_option("--n", ya.n, "Number of patches")->required();
  synth_cmd->add_option("--hw", ya.hw, "Patch height and width");
  synth_cmd->add_option("--channels", ya.channels, "Channels per pixel");
  synth_cmd->add_option("--pos-frac", ya.pos_frac, "Fraction of positive patches");
  synth_cmd->add_option("--seed", ya.seed, "Generator seed");
  synth_cmd->add_option("--amplitude", ya.amplitude, "Blob brightness in [0, 1]");

  GradcheckArgs ga;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  grad_cmd->add_option("--preset", ga.preset, "Preset name, or 'all'")->required();
  grad_cmd->add_option("--seed", ga.seed, "Seed for the random point");
  grad_cmd->add_option("--eps", ga.eps, "Relative finite-difference step");

  LabelsArgs la;
  auto* labels_cmd = app.add_subcommand("labels", "Export labels as index,label CSV");
  labels_cmd->add_option("--data", la.data, "PPAK dataset")->required();
  labels_cmd->add_option("--out", la.out, "CSV output")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kUsage;
  }
  ta.seed_given = seed_opt->count() > 0;

  try {
    if (*train_cmd) return run_train(ta, out);
    if (*eval_cmd) return run_evaluate(ea, out);
    if (*split_cmd) return run_split(sa, out);
    if (*synth_cmd) return run_synth(ya, out);
    if (*grad_cmd) return run_gradcheck(ga, out);
    if (*labels_cmd) return run_labels(la);
  } catch (const NumericError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumericFailure;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }
  err << app.help();
  return kUsage;
}

int cli_main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cli_main(args, std::cout, std::cerr);
}

}  // namespace dnet::cli
