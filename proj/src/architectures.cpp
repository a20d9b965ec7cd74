#include "dnet/architectures.hpp"

#include <charconv>
#include <cmath>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "dnet/text_config.hpp"

namespace dnet::nn {

std::string to_string(Connectivity c) {
  switch (c) {
    case Connectivity::Plain: return "plain";
    case Connectivity::Residual: return "residual";
    case Connectivity::Dense: return "dense";
  }
  return "dense";
}

Connectivity parse_connectivity(std::string_view s) {
  if (s == "plain") return Connectivity::Plain;
  if (s == "residual") return Connectivity::Residual;
  if (s == "dense") return Connectivity::Dense;
  throw ConfigError("unknown connectivity '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  if (input_channels == 0) throw ConfigError("model: input_channels must be positive");
  if (growth_rate == 0) throw ConfigError("model: growth_rate must be positive");
  if (block_layer_counts.empty()) throw ConfigError("model: at least one block is required");
  for (std::size_t n : block_layer_counts)
    if (n == 0) throw ConfigError("model: block layer counts must be positive");
  if (!(transition_compression > 0.0 && transition_compression <= 1.0))
    throw ConfigError("model: compression must lie in (0, 1]");
  if (num_classes == 0) throw ConfigError("model: num_classes must be positive");
  if (image_channels == 0) throw ConfigError("model: image_channels must be positive");
  if (input_h == 0 || input_w == 0) throw ConfigError("model: input extents must be positive");
  if (!(bn_momentum > 0.0 && bn_momentum <= 1.0))
    throw ConfigError("model: bn_momentum must lie in (0, 1]");
  if (!(bn_epsilon > 0.0)) throw ConfigError("model: bn_epsilon must be positive");
}

std::string ModelConfig::to_text() const {
  std::string out;
  out += fmt::format("connectivity={}\n", nn::to_string(connectivity));
  out += fmt::format("input_channels={}\n", input_channels);
  out += fmt::format("growth_rate={}\n", growth_rate);
  out += fmt::format("blocks={}\n", fmt::join(block_layer_counts, ","));
  out += fmt::format("compression={}\n", transition_compression);
  out += fmt::format("num_classes={}\n", num_classes);
  out += fmt::format("image_channels={}\n", image_channels);
  out += fmt::format("input_h={}\n", input_h);
  out += fmt::format("input_w={}\n", input_w);
  out += fmt::format("bn_momentum={}\n", bn_momentum);
  out += fmt::format("bn_epsilon={}\n", bn_epsilon);
  return out;
}

bool ModelConfig::set(std::string_view key, std::string_view value) {
  using namespace dnet::text;
  if (key == "connectivity") connectivity = parse_connectivity(value);
  else if (key == "input_channels") input_channels = parse_size(key, value);
  else if (key == "growth_rate") growth_rate = parse_size(key, value);
  else if (key == "blocks") block_layer_counts = parse_size_list(key, value);
  else if (key == "compression") transition_compression = parse_double(key, value);
  else if (key == "num_classes") num_classes = parse_size(key, value);
  else if (key == "image_channels") image_channels = parse_size(key, value);
  else if (key == "input_h") input_h = parse_size(key, value);
  else if (key == "input_w") input_w = parse_size(key, value);
  else if (key == "bn_momentum") bn_momentum = parse_double(key, value);
  else if (key == "bn_epsilon") bn_epsilon = parse_double(key, value);
  else return false;
  return true;
}

ModelConfig ModelConfig::from_text(std::string_view text) {
  ModelConfig cfg;
  for (const auto& [key, value] : text::parse_pairs(text))
    if (!cfg.set(key, value)) throw ConfigError("model: unknown key '" + key + "'");
  cfg.validate();
  return cfg;
}

std::size_t feature_map_count(std::size_t k0, std::size_t k, std::size_t l) {
  if (k0 == 0 || k == 0 || l == 0)
    throw ShapeError("feature_map_count: k0, k and l must all be positive");
  return k0 + k * (l - 1);
}

std::size_t transition_channels(std::size_t channels, double compression) {
  if (!(compression > 0.0 && compression <= 1.0))
    throw ShapeError("transition: compression must lie in (0, 1]");
  const auto c = static_cast<std::size_t>(std::ceil(compression * static_cast<double>(channels)));
  return std::max<std::size_t>(1, c);
}

template <typename T>
void ParamStore<T>::add(std::string name, Tensor<T> value, bool trainable) {
  if (index_.count(name)) throw ShapeError("ParamStore: duplicate name '" + name + "'");
  index_[name] = entries_.size();
  entries_.push_back(Entry{std::move(name), std::move(value), trainable});
}

template <typename T>
Tensor<T>& ParamStore<T>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("ParamStore: no entry named '" + name + "'");
  return entries_[it->second].value;
}

template <typename T>
const Tensor<T>& ParamStore<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("ParamStore: no entry named '" + name + "'");
  return entries_[it->second].value;
}

template <typename T>
std::size_t ParamStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.trainable) n += e.value.numel();
  return n;
}

template <typename T>
ad::Var<T> plain_block(const ad::Var<T>& x, std::span<const HBinding<T>> layers, Mode mode) {
  ad::Var<T> cur = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (cur.value().dim(1) != layers[l].in_channels())
      throw ShapeError(fmt::format("plain block: layer {} expects {} channels, got {}", l + 1,
                                   layers[l].in_channels(), cur.value().dim(1)));
    cur = composite_h(cur, layers[l], mode);
  }
  return cur;
}

template <typename T>
ad::Var<T> residual_block(const ad::Var<T>& x, const HBinding<T>& h, Mode mode) {
  const std::size_t c = x.value().dim(1);
  if (h.in_channels() != c || h.out_channels() != c)
    throw ShapeError(fmt::format(
        "residual block: H maps {} -> {} channels but the identity shortcut carries {}",
        h.in_channels(), h.out_channels(), c));
  return ad::add(composite_h(x, h, mode), x);
}

template <typename T>
DenseBlockResult<T> dense_block(const ad::Var<T>& x, std::span<const HBinding<T>> layers,
                                Mode mode) {
  DenseBlockResult<T> result;
  std::vector<ad::Var<T>> features{x};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    ad::Var<T> input =
        features.size() == 1 ? x : ad::concat_channels<T>(std::span<const ad::Var<T>>(features));
    if (input.value().dim(1) != layers[l].in_channels())
      throw ShapeError(fmt::format("dense block: layer {} expects {} input channels, got {}", l + 1,
                                   layers[l].in_channels(), input.value().dim(1)));
    result.layer_inputs.push_back(input);
    features.push_back(composite_h(input, layers[l], mode));
  }
  result.output =
      features.size() == 1 ? x : ad::concat_channels<T>(std::span<const ad::Var<T>>(features));
  return result;
}

template <typename T>
ad::Var<T> transition(const ad::Var<T>& x, const HBinding<T>& t, Mode mode) {
  const Tensor<T>& w = t.weight.value();
  if (w.rank() != 4 || w.dim(2) != 1 || w.dim(3) != 1)
    throw ShapeError("transition: conv weight must be Cout x Cin x 1 x 1, got " +
                     shape_str(w.shape()));
  if (x.value().dim(1) != w.dim(1))
    throw ShapeError(fmt::format("transition: expects {} channels, got {}", w.dim(1),
                                 x.value().dim(1)));
  const ad::Var<T> a = ad::relu(batchnorm(x, t.bn, mode));
  return ad::avgpool2(ad::conv2d(a, t.weight, t.bias, ConvSpec{1, 1, 1, 0}));
}

namespace {

template <typename T>
std::vector<HBinding<T>> bind_all(ad::Tape<T>& tape, std::vector<HParams<T>>& layers) {
  std::vector<HBinding<T>> out;
  out.reserve(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l)
    out.push_back(bind_params(tape, layers[l], "layer" + std::to_string(l + 1)));
  return out;
}

}  // namespace

template <typename T>
Tensor<T> plain_block_forward(const Tensor<T>& x, std::vector<HParams<T>>& layers, Mode mode) {
  ad::Tape<T> tape;
  const auto bound = bind_all(tape, layers);
  return plain_block<T>(tape.leaf(x), bound, mode).value();
}

template <typename T>
Tensor<T> residual_block_forward(const Tensor<T>& x, HParams<T>& params, Mode mode) {
  ad::Tape<T> tape;
  const HBinding<T> h = bind_params(tape, params, "h");
  return residual_block(tape.leaf(x), h, mode).value();
}

template <typename T>
Tensor<T> dense_block_forward(const Tensor<T>& x, std::vector<HParams<T>>& layers, Mode mode) {
  ad::Tape<T> tape;
  const auto bound = bind_all(tape, layers);
  return dense_block<T>(tape.leaf(x), bound, mode).output.value();
}

template <typename T>
Tensor<T> transition_forward(const Tensor<T>& x, HParams<T>& params, Mode mode) {
  ad::Tape<T> tape;
  const HBinding<T> h = bind_params(tape, params, "transition");
  return transition(tape.leaf(x), h, mode).value();
}

ModelPlan plan_model(const ModelConfig& cfg) {
  cfg.validate();
  ModelPlan plan;
  std::size_t h = cfg.input_h, w = cfg.input_w;

  StagePlan stem;
  stem.kind = StagePlan::Kind::Stem;
  stem.units.push_back(ConvUnit{"stem", cfg.image_channels, cfg.input_channels, 3, false});
  stem.out_channels = cfg.input_channels;
  stem.out_h = h;
  stem.out_w = w;
  plan.stages.push_back(stem);

  std::size_t channels = cfg.input_channels;
  const std::size_t blocks = cfg.block_layer_counts.size();
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t layers = cfg.block_layer_counts[b];
    StagePlan stage;
    for (std::size_t l = 1; l <= layers; ++l) {
      ConvUnit unit{fmt::format("block{}.layer{}", b, l), 0, 0, 3, true};
      switch (cfg.connectivity) {
        case Connectivity::Dense:
          unit.in_channels = feature_map_count(channels, cfg.growth_rate, l);
          unit.out_channels = cfg.growth_rate;
          break;
        case Connectivity::Residual:
          unit.in_channels = channels;
          unit.out_channels = channels;
          break;
        case Connectivity::Plain:
          unit.in_channels = l == 1 ? channels : cfg.growth_rate;
          unit.out_channels = cfg.growth_rate;
          break;
      }
      stage.units.push_back(unit);
    }
    switch (cfg.connectivity) {
      case Connectivity::Dense:
        stage.kind = StagePlan::Kind::Dense;
        channels += layers * cfg.growth_rate;
        break;
      case Connectivity::Residual:
        stage.kind = StagePlan::Kind::Residual;
        break;
      case Connectivity::Plain:
        stage.kind = StagePlan::Kind::Plain;
        channels = cfg.growth_rate;
        break;
    }
    stage.out_channels = channels;
    stage.out_h = h;
    stage.out_w = w;
    plan.stages.push_back(stage);

    if (b + 1 < blocks) {
      if (h < 2 || w < 2)
        throw ConfigError(fmt::format(
            "model: transition {} would pool a {}x{} map; input {}x{} is too small for {} blocks",
            b, h, w, cfg.input_h, cfg.input_w, blocks));
      StagePlan t;
      t.kind = StagePlan::Kind::Transition;
      const std::size_t out = transition_channels(channels, cfg.transition_compression);
      t.units.push_back(ConvUnit{fmt::format("transition{}", b), channels, out, 1, true});
      channels = out;
      h /= 2;
      w /= 2;
      t.out_channels = channels;
      t.out_h = h;
      t.out_w = w;
      plan.stages.push_back(t);
    }
  }
  plan.head_channels = channels;
  return plan;
}

template <typename T>
Classifier<T>::Classifier(ModelConfig cfg, ParamStore<T> params)
    : cfg_(std::move(cfg)), plan_(plan_model(cfg_)), params_(std::move(params)) {
  const ParamStore<T> expected = build(cfg_, 0).params_;
  if (expected.size() != params_.size())
    throw ShapeError(fmt::format("classifier: config implies {} tensors, store has {}",
                                 expected.size(), params_.size()));
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& want = expected.entries()[i];
    const auto& got = params_.entries()[i];
    if (want.name != got.name || want.value.shape() != got.value.shape() ||
        want.trainable != got.trainable)
      throw ShapeError("classifier: entry '" + got.name + "' " + shape_str(got.value.shape()) +
                       " does not match expected '" + want.name + "' " +
                       shape_str(want.value.shape()));
  }
}

template <typename T>
Classifier<T> Classifier<T>::build(const ModelConfig& cfg, std::uint64_t seed) {
  ModelPlan plan = plan_model(cfg);
  Rng rng(seed);
  ParamStore<T> store;
  auto add_bn = [&](const std::string& prefix, std::size_t c) {
    store.add(prefix + ".gamma", Tensor<T>({c}, T{1}), true);
    store.add(prefix + ".beta", Tensor<T>({c}, T{0}), true);
    store.add(prefix + ".running_mean", Tensor<T>({c}, T{0}), false);
    store.add(prefix + ".running_var", Tensor<T>({c}, T{1}), false);
  };
  for (const StagePlan& stage : plan.stages)
    for (const ConvUnit& u : stage.units) {
      if (u.with_bn) add_bn(u.prefix + ".bn", u.in_channels);
      Tensor<T> weight({u.out_channels, u.in_channels, u.kernel, u.kernel});
      init_uniform_fan_in(weight, u.in_channels * u.kernel * u.kernel, rng);
      store.add(u.prefix + ".conv.weight", std::move(weight), true);
      store.add(u.prefix + ".conv.bias", Tensor<T>({u.out_channels}), true);
    }
  add_bn("head.bn", plan.head_channels);
  Tensor<T> head({plan.head_channels, cfg.num_classes});
  init_uniform_fan_in(head, plan.head_channels, rng);
  store.add("head.linear.weight", std::move(head), true);
  store.add("head.linear.bias", Tensor<T>({cfg.num_classes}), true);

  Classifier c;
  c.cfg_ = cfg;
  c.plan_ = std::move(plan);
  c.params_ = std::move(store);
  return c;
}

template <typename T>
ad::Var<T> Classifier<T>::param_leaf(ad::Tape<T>& tape, const std::string& name,
                                     const Bindings* bound) {
  if (bound) {
    const auto it = bound->find(name);
    if (it == bound->end()) throw ShapeError("classifier: no binding for '" + name + "'");
    if (it->second.shape() != params_.at(name).shape())
      throw ShapeError("classifier: binding for '" + name + "' has shape " +
                       shape_str(it->second.shape()));
    return it->second;
  }
  return tape.leaf(params_.at(name), name);
}

template <typename T>
BnBinding<T> Classifier<T>::bind_bn(ad::Tape<T>& tape, const std::string& prefix,
                                    const Bindings* bound) {
  BnBinding<T> bn;
  bn.gamma = param_leaf(tape, prefix + ".gamma", bound);
  bn.beta = param_leaf(tape, prefix + ".beta", bound);
  bn.running_mean = &params_.at(prefix + ".running_mean");
  bn.running_var = &params_.at(prefix + ".running_var");
  bn.momentum = static_cast<T>(cfg_.bn_momentum);
  bn.epsilon = static_cast<T>(cfg_.bn_epsilon);
  return bn;
}

template <typename T>
HBinding<T> Classifier<T>::bind_unit(ad::Tape<T>& tape, const ConvUnit& unit,
                                     const Bindings* bound) {
  HBinding<T> h;
  if (unit.with_bn) h.bn = bind_bn(tape, unit.prefix + ".bn", bound);
  h.weight = param_leaf(tape, unit.prefix + ".conv.weight", bound);
  h.bias = param_leaf(tape, unit.prefix + ".conv.bias", bound);
  return h;
}

template <typename T>
ad::Var<T> Classifier<T>::forward(ad::Tape<T>& tape, const Tensor<T>& images, Mode mode) {
  return forward_impl(tape, tape.leaf(images), mode, nullptr);
}

template <typename T>
ad::Var<T> Classifier<T>::forward(const ad::Var<T>& images, Mode mode, const Bindings& bound) {
  return forward_impl(images.tape(), images, mode, &bound);
}

template <typename T>
ad::Var<T> Classifier<T>::forward_impl(ad::Tape<T>& tape, ad::Var<T> x, Mode mode,
                                       const Bindings* bound) {
  const Shape expected{cfg_.image_channels, cfg_.input_h, cfg_.input_w};
  const Shape& got = x.shape();
  if (got.size() != 4 || Shape(got.begin() + 1, got.end()) != expected)
    throw ShapeError("classifier: batch " + shape_str(got) + " does not match N x " +
                     shape_str(expected));
  for (const StagePlan& stage : plan_.stages) {
    std::vector<HBinding<T>> units;
    units.reserve(stage.units.size());
    for (const ConvUnit& u : stage.units) units.push_back(bind_unit(tape, u, bound));
    switch (stage.kind) {
      case StagePlan::Kind::Stem:
        x = ad::conv2d(x, units[0].weight, units[0].bias, ConvSpec{3, 3, 1, 1});
        break;
      case StagePlan::Kind::Plain:
        x = plain_block<T>(x, units, mode);
        break;
      case StagePlan::Kind::Residual:
        for (const auto& h : units) x = residual_block(x, h, mode);
        break;
      case StagePlan::Kind::Dense:
        x = dense_block<T>(x, units, mode).output;
        break;
      case StagePlan::Kind::Transition:
        x = transition(x, units[0], mode);
        break;
    }
  }
  x = ad::global_avg_pool(ad::relu(batchnorm(x, bind_bn(tape, "head.bn", bound), mode)));
  const ad::Var<T> w = param_leaf(tape, "head.linear.weight", bound);
  const ad::Var<T> b = param_leaf(tape, "head.linear.bias", bound);
  return ad::linear(x, w, b);
}

template <typename T>
Tensor<T> Classifier<T>::logits(const Tensor<T>& images) {
  ad::Tape<T> tape;
  return forward(tape, images, Mode::Eval).value();
}

#define DNET_INSTANTIATE_ARCH(T)                                                                \
  template class ParamStore<T>;                                                                 \
  template class Classifier<T>;                                                                 \
  template ad::Var<T> plain_block<T>(const ad::Var<T>&, std::span<const HBinding<T>>, Mode);    \
  template ad::Var<T> residual_block<T>(const ad::Var<T>&, const HBinding<T>&, Mode);           \
  template DenseBlockResult<T> dense_block<T>(const ad::Var<T>&, std::span<const HBinding<T>>,  \
                                              Mode);                                            \
  template ad::Var<T> transition<T>(const ad::Var<T>&, const HBinding<T>&, Mode);               \
  template Tensor<T> plain_block_forward<T>(const Tensor<T>&, std::vector<HParams<T>>&, Mode);  \
  template Tensor<T> residual_block_forward<T>(const Tensor<T>&, HParams<T>&, Mode);            \
  template Tensor<T> dense_block_forward<T>(const Tensor<T>&, std::vector<HParams<T>>&, Mode);  \
  template Tensor<T> transition_forward<T>(const Tensor<T>&, HParams<T>&, Mode);

DNET_INSTANTIATE_ARCH(float)
DNET_INSTANTIATE_ARCH(double)

#undef DNET_INSTANTIATE_ARCH

}  // namespace dnet::nn
