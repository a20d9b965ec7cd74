#include "dnet/gradcheck.hpp"

#include <functional>
#include <map>
#include <memory>
#include <span>

#include "dnet/architectures.hpp"
#include "dnet/error.hpp"
#include "dnet/layers.hpp"
#include "dnet/rng.hpp"
#include "dnet/trainer.hpp"

namespace dnet::gradcheck {

namespace {

using ad::Var;
using V = Var<double>;
using Params = std::span<const V>;
using Tape = ad::Tape<double>;
using TensorD = Tensor<double>;

struct Setup {
  std::vector<TensorD> params;
  ad::Fragment fragment;
};

TensorD random_tensor(Rng& rng, Shape shape, double lo, double hi) {
  TensorD t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Values spread on a grid with random signs so that no two coincide and none
/// sits near zero; keeps finite differences away from ReLU and max kinks.
TensorD separated_tensor(Rng& rng, Shape shape) {
  TensorD t(std::move(shape));
  const auto order = data::permutation(t.numel(), rng);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const double mag = 0.1 + 0.9 * static_cast<double>(order[i]) / static_cast<double>(t.numel());
    t[i] = (rng.below(2) ? 1.0 : -1.0) * mag;
  }
  return t;
}

/// Scalar loss: <y, W> with W drawn from a fixed stream, so every output
/// coordinate carries a distinct weight.
V project(const V& y, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 99));
  return ad::dot(y, random_tensor(rng, y.shape(), -1.0, 1.0));
}

struct BnSlot {
  TensorD running_mean;
  TensorD running_var;
};

nn::BnBinding<double> bn_binding(const V& gamma, const V& beta, BnSlot& slot) {
  nn::BnBinding<double> b;
  b.gamma = gamma;
  b.beta = beta;
  b.running_mean = &slot.running_mean;
  b.running_var = &slot.running_var;
  return b;
}

/// Appends gamma, beta, conv weight and bias for one composite function.
/// Returns the index of gamma.
std::size_t add_h(Setup& s, Rng& rng, std::size_t cin, std::size_t cout, std::size_t kernel) {
  const std::size_t first = s.params.size();
  s.params.push_back(random_tensor(rng, {cin}, 0.5, 1.5));
  s.params.push_back(random_tensor(rng, {cin}, -0.5, 0.5));
  s.params.push_back(random_tensor(rng, {cout, cin, kernel, kernel}, -0.5, 0.5));
  s.params.push_back(random_tensor(rng, {cout}, -0.1, 0.1));
  return first;
}

nn::HBinding<double> h_binding(Params p, std::size_t first, BnSlot& slot) {
  nn::HBinding<double> h;
  h.bn = bn_binding(p[first], p[first + 1], slot);
  h.weight = p[first + 2];
  h.bias = p[first + 3];
  return h;
}

Setup conv_preset(Rng& rng, std::uint64_t seed, ConvSpec spec) {
  Setup s;
  s.params = {random_tensor(rng, {2, 3, 5, 6}, -1, 1), random_tensor(rng, {4, 3, 3, 3}, -1, 1),
              random_tensor(rng, {4}, -1, 1)};
  s.fragment = [seed, spec](Tape&, Params p) {
    return project(ad::conv2d(p[0], p[1], p[2], spec), seed);
  };
  return s;
}

Setup bn_preset(Rng& rng, std::uint64_t seed, nn::Mode mode) {
  Setup s;
  s.params = {random_tensor(rng, {3, 4, 3, 3}, -2, 2), random_tensor(rng, {4}, 0.5, 1.5),
              random_tensor(rng, {4}, -0.5, 0.5)};
  auto slot = std::make_shared<BnSlot>();
  slot->running_mean = random_tensor(rng, {4}, -0.5, 0.5);
  slot->running_var = random_tensor(rng, {4}, 0.5, 2.0);
  s.fragment = [seed, mode, slot](Tape&, Params p) {
    // Restore the statistics so every evaluation sees the same eval-mode
    // constants regardless of earlier train-mode updates.
    BnSlot local = *slot;
    return project(nn::batchnorm(p[0], bn_binding(p[1], p[2], local), mode), seed);
  };
  return s;
}

Setup unary_preset(TensorD x, std::uint64_t seed, std::function<V(const V&)> op) {
  Setup s;
  s.params = {std::move(x)};
  s.fragment = [seed, op](Tape&, Params p) { return project(op(p[0]), seed); };
  return s;
}

Setup h_preset(Rng& rng, std::uint64_t seed) {
  Setup s;
  s.params.push_back(random_tensor(rng, {2, 3, 4, 4}, -1, 1));
  const std::size_t h = add_h(s, rng, 3, 2, 3);
  s.fragment = [seed, h](Tape&, Params p) {
    BnSlot slot{TensorD({3}), TensorD({3}, 1.0)};
    return project(nn::composite_h(p[0], h_binding(p, h, slot), nn::Mode::Train), seed);
  };
  return s;
}

/// Sequential blocks built from `layers` composite functions.
template <typename Body>
Setup chain_preset(Rng& rng, std::uint64_t seed, std::size_t cin,
                   const std::vector<std::pair<std::size_t, std::size_t>>& layers,
                   std::size_t kernel, Body body) {
  Setup s;
  s.params.push_back(random_tensor(rng, {2, cin, 4, 4}, -1, 1));
  std::vector<std::size_t> firsts;
  for (auto [in, out] : layers) firsts.push_back(add_h(s, rng, in, out, kernel));
  s.fragment = [seed, firsts, layers, body](Tape&, Params p) {
    std::vector<BnSlot> slots(firsts.size());
    std::vector<nn::HBinding<double>> hs;
    for (std::size_t i = 0; i < firsts.size(); ++i) {
      slots[i] = {TensorD({layers[i].first}), TensorD({layers[i].first}, 1.0)};
      hs.push_back(h_binding(p, firsts[i], slots[i]));
    }
    return project(body(p[0], std::span<const nn::HBinding<double>>(hs)), seed);
  };
  return s;
}

Setup model_preset(Rng& rng, std::uint64_t seed) {
  nn::ModelConfig cfg;
  cfg.connectivity = nn::Connectivity::Dense;
  cfg.input_channels = 4;
  cfg.growth_rate = 3;
  cfg.block_layer_counts = {2, 2};
  cfg.image_channels = 1;
  cfg.input_h = 12;
  cfg.input_w = 12;
  auto model = std::make_shared<nn::Classifier<double>>(nn::Classifier<double>::build(cfg, seed));

  Setup s;
  std::vector<std::string> names;
  for (auto& e : model->params().entries()) {
    if (!e.trainable) continue;
    // Move BN and biases off their identity/zero initial values so that
    // every parameter kind is exercised at a generic point.
    if (e.name.ends_with(".gamma"))
      e.value = random_tensor(rng, e.value.shape(), 0.5, 1.5);
    else if (e.name.ends_with(".beta") || e.name.ends_with(".bias"))
      e.value = random_tensor(rng, e.value.shape(), -0.2, 0.2);
    names.push_back(e.name);
    s.params.push_back(e.value);
  }
  s.params.push_back(random_tensor(rng, {2, 1, 12, 12}, 0, 1));
  const std::vector<std::uint8_t> labels{1, 0};
  s.fragment = [model, names, labels](Tape&, Params p) {
    nn::Classifier<double>::Bindings bound;
    for (std::size_t i = 0; i < names.size(); ++i) bound.emplace(names[i], p[i]);
    const V logits = model->forward(p[names.size()], nn::Mode::Train, bound);
    return train::bce_loss(logits, labels);
  };
  return s;
}

Setup make_preset(std::string_view name, std::uint64_t seed) {
  Rng rng(seed);
  using nn::Mode;
  if (name == "conv") return conv_preset(rng, seed, ConvSpec{3, 3, 1, 1});
  if (name == "conv-strided") return conv_preset(rng, seed, ConvSpec{3, 3, 2, 0});
  if (name == "bn-train") return bn_preset(rng, seed, Mode::Train);
  if (name == "bn-eval") return bn_preset(rng, seed, Mode::Eval);
  if (name == "relu")
    return unary_preset(separated_tensor(rng, {2, 3, 4, 4}), seed, [](const V& x) { return ad::relu(x); });
  if (name == "avgpool")
    return unary_preset(random_tensor(rng, {2, 3, 4, 5}, -1, 1), seed,
                        [](const V& x) { return ad::avgpool2(x); });
  if (name == "maxpool")
    return unary_preset(separated_tensor(rng, {2, 3, 4, 5}), seed,
                        [](const V& x) { return ad::maxpool2(x); });
  if (name == "global-avgpool")
    return unary_preset(random_tensor(rng, {2, 3, 3, 4}, -1, 1), seed,
                        [](const V& x) { return ad::global_avg_pool(x); });
  if (name == "slice")
    return unary_preset(random_tensor(rng, {2, 5, 3, 3}, -1, 1), seed,
                        [](const V& x) { return ad::slice_channels(x, 1, 3); });
  if (name == "linear") {
    Setup s;
    s.params = {random_tensor(rng, {3, 5}, -1, 1), random_tensor(rng, {5, 2}, -1, 1),
                random_tensor(rng, {2}, -1, 1)};
    s.fragment = [seed](Tape&, Params p) { return project(ad::linear(p[0], p[1], p[2]), seed); };
    return s;
  }
  if (name == "concat") {
    Setup s;
    s.params = {random_tensor(rng, {2, 2, 3, 3}, -1, 1), random_tensor(rng, {2, 3, 3, 3}, -1, 1)};
    s.fragment = [seed](Tape&, Params p) {
      const V parts[] = {p[0], p[1]};
      return project(ad::concat_channels<double>(parts), seed);
    };
    return s;
  }
  if (name == "bce") {
    Setup s;
    s.params = {random_tensor(rng, {6, 1}, -3, 3)};
    s.fragment = [](Tape&, Params p) {
      const std::vector<std::uint8_t> labels{1, 0, 0, 1, 1, 0};
      return train::bce_loss(p[0], labels);
    };
    return s;
  }
  if (name == "composite") return h_preset(rng, seed);
  if (name == "plain")
    return chain_preset(rng, seed, 3, {{3, 2}, {2, 2}}, 3,
                        [](const V& x, std::span<const nn::HBinding<double>> hs) {
                          return nn::plain_block<double>(x, hs, Mode::Train);
                        });
  if (name == "residual")
    return chain_preset(rng, seed, 3, {{3, 3}}, 3,
                        [](const V& x, std::span<const nn::HBinding<double>> hs) {
                          return nn::residual_block<double>(x, hs[0], Mode::Train);
                        });
  if (name == "dense-block")
    return chain_preset(rng, seed, 3, {{3, 2}, {5, 2}, {7, 2}}, 3,
                        [](const V& x, std::span<const nn::HBinding<double>> hs) {
                          return nn::dense_block<double>(x, hs, Mode::Train).output;
                        });
  if (name == "transition")
    return chain_preset(rng, seed, 4, {{4, 2}}, 1,
                        [](const V& x, std::span<const nn::HBinding<double>> hs) {
                          return nn::transition<double>(x, hs[0], Mode::Train);
                        });
  if (name == "dense-small") return model_preset(rng, seed);
  throw ConfigError("gradcheck: unknown preset '" + std::string(name) + "'");
}

}  // namespace

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{
      "conv",     "conv-strided", "bn-train", "bn-eval",   "relu",        "avgpool",
      "maxpool",  "global-avgpool", "slice",  "linear",    "concat",      "bce",
      "composite", "plain",       "residual", "dense-block", "transition", "dense-small"};
  return names;
}

ad::GradCheckResult run_preset(std::string_view name, std::uint64_t seed, double eps) {
  Setup s = make_preset(name, seed);
  return ad::grad_check(s.fragment, s.params, eps);
}

}  // namespace dnet::gradcheck
