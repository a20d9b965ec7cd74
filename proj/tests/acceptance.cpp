// Acceptance gate: one PASS/FAIL line per criterion. Exit status is non-zero
// when any gated criterion fails; criterion 9 is reported only.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "dnet/architectures.hpp"
#include "dnet/checkpoint.hpp"
#include "dnet/dataset.hpp"
#include "dnet/gradcheck.hpp"
#include "dnet/metrics.hpp"
#include "dnet/optimizers.hpp"
#include "dnet/parallel.hpp"
#include "dnet/text_config.hpp"
#include "dnet/trainer.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace dnet;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

int failures = 0;

void report(int id, const char* title, bool gated, const std::function<Outcome()>& body) {
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const char* tag = o.pass ? "PASS" : (gated ? "FAIL" : "WARN");
  if (!o.pass && gated) ++failures;
  fmt::print("[{}] {} {}{}: {}\n", tag, id, title, gated ? "" : " (reported, not gated)", o.detail);
  std::fflush(stdout);
}

/// Criterion 6 run, shared by 6, 7, 8 and 9.
train::TrainConfig desk_config(optim::Kind kind) {
  train::TrainConfig cfg;
  cfg.model.connectivity = nn::Connectivity::Dense;
  cfg.model.input_channels = 8;
  cfg.model.growth_rate = 4;
  cfg.model.block_layer_counts = {2, 2};
  cfg.model.input_h = 16;
  cfg.model.input_w = 16;
  cfg.optimizer.kind = kind;
  cfg.optimizer.lr = 1e-3;
  if (kind == optim::Kind::Sgd) cfg.optimizer.momentum = 0.0;
  cfg.batch_size = 32;
  cfg.epochs = 5;
  cfg.validation_every = 25;
  cfg.seed = 2024;
  return cfg;
}

const data::Dataset& desk_data() {
  static const data::Dataset ds = data::synth_generate(2000, 16, 16, 1, 0.5, 7);
  return ds;
}

struct DeskRun {
  train::RunResult run;
  double seconds = 0;
};

const DeskRun& desk_run() {
  static const DeskRun r = [] {
    const auto start = Clock::now();
    DeskRun d;
    d.run = train::train(desk_config(optim::Kind::RAdam), desk_data());
    d.seconds = seconds_since(start);
    return d;
  }();
  return r;
}

double slope(const std::vector<double>& y, std::size_t begin, std::size_t end) {
  const double n = static_cast<double>(end - begin);
  double mx = 0, my = 0;
  for (std::size_t i = begin; i < end; ++i) {
    mx += static_cast<double>(i);
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = begin; i < end; ++i) {
    sxy += (static_cast<double>(i) - mx) * (y[i] - my);
    sxx += (static_cast<double>(i) - mx) * (static_cast<double>(i) - mx);
  }
  return sxy / sxx;
}

double window_mean(const std::vector<double>& y, std::size_t begin, std::size_t len) {
  return std::accumulate(y.begin() + static_cast<std::ptrdiff_t>(begin),
                         y.begin() + static_cast<std::ptrdiff_t>(begin + len), 0.0) /
         static_cast<double>(len);
}

Outcome criterion1() {
  const auto start = Clock::now();
  double worst = 0;
  std::string worst_name;
  std::size_t coords = 0;
  for (const auto& name : gradcheck::preset_names()) {
    const auto r = gradcheck::run_preset(name);
    coords += r.coordinates;
    if (r.max_rel_err >= worst) {
      worst = r.max_rel_err;
      worst_name = name;
    }
  }
  const double dense = gradcheck::run_preset("dense-small").max_rel_err;
  const double secs = seconds_since(start);
  return {worst < gradcheck::kTolerance && secs < 60.0,
          fmt::format("{} presets, {} coordinates, worst {:.2e} ({}), dense-small {:.2e}; "
                      "tolerance 1e-4; {:.1f} s (limit 60 s)",
                      gradcheck::preset_names().size(), coords, worst, worst_name, dense, secs)};
}

Outcome criterion2() {
  Rng rng(31);
  std::size_t layers_checked = 0, mismatches = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t k0 = support::between(rng, 1, 16), k = support::between(rng, 1, 8),
                      L = support::between(rng, 1, 6);
    std::vector<nn::HParams<double>> params;
    for (std::size_t l = 1; l <= L; ++l)
      params.push_back(nn::HParams<double>::init(k0 + k * (l - 1), k, rng));
    ad::Tape<double> tape;
    const auto x = tape.leaf(support::random_tensor(rng, {1, k0, 2, 2}));
    std::vector<nn::HBinding<double>> hs;
    for (std::size_t l = 0; l < L; ++l)
      hs.push_back(nn::bind_params(tape, params[l], fmt::format("l{}", l)));
    const auto r = nn::dense_block<double>(x, hs, nn::Mode::Train);
    for (std::size_t l = 1; l <= L; ++l, ++layers_checked)
      if (r.layer_inputs[l - 1].shape()[1] != k0 + k * (l - 1) ||
          nn::feature_map_count(k0, k, l) != k0 + k * (l - 1))
        ++mismatches;
  }
  return {mismatches == 0,
          fmt::format("300 random (k0, k, L), {} layers, {} mismatches (exact)", layers_checked,
                      mismatches)};
}

Outcome criterion3() {
  Rng rng(32);
  auto zero = nn::HParams<double>::init(6, 6, rng);
  zero.conv_weight.fill(0);
  zero.conv_bias.fill(0);
  const auto x = support::random_tensor(rng, {3, 6, 5, 5});
  const bool identity = nn::residual_block_forward(x, zero, nn::Mode::Train) == x &&
                        nn::residual_block_forward(x, zero, nn::Mode::Eval) == x;

  std::vector<nn::HParams<double>> layer{nn::HParams<double>::init(6, 4, rng)};
  auto h = layer[0];
  const auto dense = nn::dense_block_forward(x, layer, nn::Mode::Train);
  const auto concat = concat_channels(
      std::vector<Tensor<double>>{x, nn::composite_h_forward(x, h, nn::Mode::Train)});
  const bool eq3 = dense == concat;
  return {identity && eq3, fmt::format("residual with H = 0 returns x exactly: {}; dense L=1 == "
                                       "concat([x, H(x)]) exactly: {}",
                                       identity ? "yes" : "no", eq3 ? "yes" : "no")};
}

Outcome criterion4() {
  optim::Hyper h;
  h.lr = 0.1;
  h.beta1 = 0.9;
  h.beta2 = 0.999;
  h.epsilon = 1e-8;
  double worst = 0;
  for (bool rectified : {false, true}) {
    const auto ref = oracle::ScalarOptimizer{0.1L, 0.9L, 0.999L, 1e-8L, rectified}.run(1.0L, 5);
    std::vector<double> theta{1.0}, m{0.0}, v{0.0};
    for (int t = 1; t <= 5; ++t) {
      const std::vector<double> g{2.0 * theta[0]};
      if (rectified)
        optim::radam_update<double>(theta, g, m, v, t, h);
      else
        optim::adam_update<double>(theta, g, m, v, t, h);
      worst = std::max(worst, static_cast<double>(std::abs((theta[0] - ref[t - 1]) / ref[t - 1])));
    }
  }
  std::uint64_t first = 0;
  for (std::uint64_t t = 1; t <= 10 && first == 0; ++t)
    if (optim::rectification_term(t, 0.999)) first = t;
  const double r4 = optim::rho(4, 0.999), r5 = optim::rho(5, 0.999);
  return {worst <= 1e-10 && first == 5 && r4 < 4 && r5 > 4,
          fmt::format("Adam+RAdam 5-step max rel err {:.2e} (limit 1e-10); rho_4={:.6f}, "
                      "rho_5={:.6f}, first rectified step t={}",
                      worst, r4, r5, first)};
}

Outcome criterion5() {
  Rng rng(33);
  double worst = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + rng.below(199);
    const std::uint64_t levels = 1 + rng.below(trial % 2 ? 6 : 10000);
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(levels));
      y[i] = static_cast<std::uint8_t>(rng.below(2));
    }
    y[0] = 0;
    y[1] = 1;
    worst = std::max(worst, std::abs(metrics::auc(metrics::roc_curve(s, y)) -
                                     oracle::mann_whitney_auc(s, y)));
  }
  struct Hand {
    metrics::ConfusionMatrix cm;
    double fpr, tpr;
  };
  const Hand hand[] = {{{8, 2, 18, 2}, 0.1, 0.8},
                       {{3, 1, 3, 1}, 0.25, 0.75},
                       {{0, 5, 0, 5}, 1.0, 0.0},
                       {{7, 0, 9, 0}, 0.0, 1.0}};
  bool exact = true;
  for (const auto& c : hand) {
    const auto [fpr, tpr] = metrics::fpr_tpr(c.cm);
    exact = exact && fpr == c.fpr && tpr == c.tpr;
  }
  return {worst <= 1e-12 && exact,
          fmt::format("500 instances, max |AUC - Mann-Whitney| = {:.2e} (limit 1e-12); "
                      "hand FPR/TPR exact: {}",
                      worst, exact ? "yes" : "no")};
}

Outcome criterion6() {
  const auto& d = desk_run();
  const auto& r = d.run.report;
  return {r.auc_roc >= 0.95 && r.accuracy >= 0.90 && d.seconds < 600.0,
          fmt::format("held-out n={} AUC {:.4f} (>= 0.95), accuracy {:.4f} (>= 0.90), {} batches, "
                      "{:.1f} s (limit 600 s)",
                      r.samples, r.auc_roc, r.accuracy,
                      d.run.training.curve.of(train::Split::Train).size(), d.seconds)};
}

Outcome criterion7() {
  const auto& d = desk_run();
  const auto rows = d.run.training.curve.of(train::Split::Train);
  std::vector<double> loss;
  for (const auto& r : rows) loss.push_back(r.loss);
  const std::size_t n = loss.size(), q = n / 4;
  const double first = window_mean(loss, 0, 20), last = window_mean(loss, n - 20, 20);
  const double early = slope(loss, 0, q), late = slope(loss, n - q, n);

  const auto val = d.run.training.curve.of(train::Split::Validation);
  const std::size_t every = desk_config(optim::Kind::RAdam).validation_every;
  bool cadence = val.size() == n / every;
  for (std::size_t i = 0; i < val.size(); ++i)
    cadence = cadence && val[i].batches_processed == every * (i + 1);
  return {last < first && std::abs(late) < std::abs(early) && cadence,
          fmt::format("window-20 mean loss {:.4f} -> {:.4f}; slope first quarter {:.3e}, last "
                      "quarter {:.3e}; {} validation rows every {} batches: {}",
                      first, last, early, late, val.size(), every, cadence ? "ok" : "wrong")};
}

Outcome criterion8() {
  set_num_threads(1);
  const auto& d = desk_run();
  const auto again = train::train(desk_config(optim::Kind::RAdam), desk_data());
  const bool same_curve = again.training.curve.to_csv() == d.run.training.curve.to_csv();
  const bool same_ckpt = again.training.checkpoint.encode() == d.run.training.checkpoint.encode();

  const auto dir = std::filesystem::temp_directory_path() / "dnet_acceptance";
  std::filesystem::create_directories(dir);
  const std::string p1 = (dir / "a.pckp").string(), p2 = (dir / "b.pckp").string();
  d.run.training.checkpoint.save(p1);
  train::CheckpointF::load(p1).save(p2);
  const bool ckpt_rt = text::read_file(p1) == text::read_file(p2);

  const std::string d1 = (dir / "a.ppak").string(), d2 = (dir / "b.ppak").string();
  data::write_ppak(desk_data(), d1);
  data::write_ppak(data::read_ppak(d1), d2);
  const bool ppak_rt = text::read_file(d1) == text::read_file(d2);
  std::filesystem::remove_all(dir);

  const auto s = data::split_indices(220025, 0.8, 1);
  const bool counts = s.first.size() == 176020 && s.second.size() == 44005;
  return {same_curve && same_ckpt && ckpt_rt && ppak_rt && counts,
          fmt::format("repeat run: curve identical {}, checkpoint identical {}; checkpoint "
                      "round-trip {}; PPAK round-trip {}; split 220025 @ 0.8 -> {}/{}",
                      same_curve, same_ckpt, ckpt_rt, ppak_rt, s.first.size(), s.second.size())};
}

Outcome criterion9() {
  const auto radam = desk_run().run.training.curve.of(train::Split::Validation);
  const auto sgd_run = train::train(desk_config(optim::Kind::Sgd), desk_data());
  const auto sgd = sgd_run.training.curve.of(train::Split::Validation);
  const double a = radam.back().loss, b = sgd.back().loss;
  return {a <= b, fmt::format("final validation loss RAdam {:.4f} vs plain SGD {:.4f} at lr 1e-3, "
                              "same budget",
                              a, b)};
}

}  // namespace

int main() {
  set_num_threads(1);
  report(1, "gradient correctness", true, criterion1);
  report(2, "connectivity law k0 + k(l-1)", true, criterion2);
  report(3, "identity bypass and dense concatenation", true, criterion3);
  report(4, "optimizer oracle and rectification onset", true, criterion4);
  report(5, "AUC oracle and FPR/TPR definitions", true, criterion5);
  report(6, "desk-scale end-to-end", true, criterion6);
  report(7, "loss curve shape", true, criterion7);
  report(8, "determinism and formats", true, criterion8);
  report(9, "RAdam vs SGD validation loss", false, criterion9);
  fmt::print("{} gated criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
