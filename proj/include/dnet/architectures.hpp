#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dnet/autodiff.hpp"
#include "dnet/layers.hpp"

namespace dnet::nn {

/// How the layers inside a block are wired.
enum class Connectivity {
  Plain,     ///< x_l = H_l(x_{l-1})
  Residual,  ///< x_l = H_l(x_{l-1}) + x_{l-1}
  Dense,     ///< x_l = H_l([x_0, x_1, ..., x_{l-1}])
};

std::string to_string(Connectivity c);
Connectivity parse_connectivity(std::string_view s);

struct ModelConfig {
  Connectivity connectivity = Connectivity::Dense;
  /// k0: channels produced by the stem and entering the first block.
  std::size_t input_channels = 8;
  /// k: feature maps produced by every composite function of a dense block.
  std::size_t growth_rate = 4;
  std::vector<std::size_t> block_layer_counts{2, 2};
  double transition_compression = 0.5;
  /// One logit fed to a sigmoid for the binary task.
  std::size_t num_classes = 1;
  std::size_t image_channels = 1;
  std::size_t input_h = 16;
  std::size_t input_w = 16;
  double bn_momentum = kDefaultBnMomentum;
  double bn_epsilon = kDefaultBnEpsilon;

  void validate() const;

  /// Canonical `key=value` lines; equal configs give equal text.
  std::string to_text() const;
  static ModelConfig from_text(std::string_view text);
  /// Applies one key; returns false for keys that are not model keys.
  bool set(std::string_view key, std::string_view value);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Input feature maps of layer l (1-based) in a dense block: k0 + k * (l - 1).
std::size_t feature_map_count(std::size_t k0, std::size_t k, std::size_t l);

/// ceil(theta * channels), at least 1.
std::size_t transition_channels(std::size_t channels, double compression);

/// Named tensors of a model in creation order: learnable parameters plus
/// BN running statistics (trainable = false).
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    bool trainable = true;
    friend bool operator==(const Entry&, const Entry&) = default;
  };

  void add(std::string name, Tensor<T> value, bool trainable);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<T>& at(const std::string& name);
  const Tensor<T>& at(const std::string& name) const;
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }
  /// Number of trainable scalars.
  std::size_t parameter_count() const;

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    return a.entries_ == b.entries_;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Plain chain: H applied sequentially; zero layers is the identity.
template <typename T>
ad::Var<T> plain_block(const ad::Var<T>& x, std::span<const HBinding<T>> layers, Mode mode);

/// H(x) + x with an identity shortcut; H must preserve the channel count.
template <typename T>
ad::Var<T> residual_block(const ad::Var<T>& x, const HBinding<T>& h, Mode mode);

template <typename T>
struct DenseBlockResult {
  ad::Var<T> output;
  /// Concatenated input seen by each layer, in layer order.
  std::vector<ad::Var<T>> layer_inputs;
};

/// y_l = H_l(concat(x, y_1, ..., y_{l-1})); returns concat(x, y_1, ..., y_L).
template <typename T>
DenseBlockResult<T> dense_block(const ad::Var<T>& x, std::span<const HBinding<T>> layers,
                                Mode mode);

/// BN -> ReLU -> 1x1 conv -> 2x2 average pool.
template <typename T>
ad::Var<T> transition(const ad::Var<T>& x, const HBinding<T>& t, Mode mode);

template <typename T>
Tensor<T> plain_block_forward(const Tensor<T>& x, std::vector<HParams<T>>& layers, Mode mode);
template <typename T>
Tensor<T> residual_block_forward(const Tensor<T>& x, HParams<T>& params, Mode mode);
template <typename T>
Tensor<T> dense_block_forward(const Tensor<T>& x, std::vector<HParams<T>>& layers, Mode mode);
template <typename T>
Tensor<T> transition_forward(const Tensor<T>& x, HParams<T>& params, Mode mode);

/// One convolution of the model, optionally preceded by BN + ReLU.
struct ConvUnit {
  std::string prefix;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  bool with_bn = true;
};

struct StagePlan {
  enum class Kind { Stem, Plain, Residual, Dense, Transition } kind = Kind::Stem;
  std::vector<ConvUnit> units;
  std::size_t out_channels = 0;
  std::size_t out_h = 0;
  std::size_t out_w = 0;
};

/// The fully resolved stage list of a config. Parameter names, creation order
/// and shapes all derive from it.
struct ModelPlan {
  std::vector<StagePlan> stages;
  std::size_t head_channels = 0;
};

ModelPlan plan_model(const ModelConfig& cfg);

/// Stem conv -> blocks/transitions -> BN -> ReLU -> global average pool ->
/// linear head.
template <typename T>
class Classifier {
 public:
  /// Adopts an existing store after checking that its names and shapes are
  /// exactly those the config implies.
  Classifier(ModelConfig cfg, ParamStore<T> params);

  /// Fresh parameters: conv/linear weights U(-sqrt(1/fan_in), +), BN gamma 1,
  /// beta 0, running mean 0, running variance 1, biases 0.
  static Classifier build(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const ModelPlan& plan() const { return plan_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  /// Records the forward pass of an N x C x H x W batch; returns N x num_classes
  /// logits. Parameters enter the tape as leaves named after their entries.
  ad::Var<T> forward(ad::Tape<T>& tape, const Tensor<T>& images, Mode mode);

  /// Trainable entry name -> caller-owned leaf.
  using Bindings = std::map<std::string, ad::Var<T>>;

  /// Same computation with the input and every trainable tensor supplied by
  /// the caller (all on one tape). BN running statistics still come from the
  /// store.
  ad::Var<T> forward(const ad::Var<T>& images, Mode mode, const Bindings& bound);

  /// Eval-mode logits without keeping the tape.
  Tensor<T> logits(const Tensor<T>& images);

 private:
  Classifier() = default;
  ad::Var<T> param_leaf(ad::Tape<T>& tape, const std::string& name, const Bindings* bound);
  BnBinding<T> bind_bn(ad::Tape<T>& tape, const std::string& prefix, const Bindings* bound);
  HBinding<T> bind_unit(ad::Tape<T>& tape, const ConvUnit& unit, const Bindings* bound);
  ad::Var<T> forward_impl(ad::Tape<T>& tape, ad::Var<T> x, Mode mode, const Bindings* bound);

  ModelConfig cfg_;
  ModelPlan plan_;
  ParamStore<T> params_;
};

template <typename T>
Classifier<T> build_classifier(const ModelConfig& cfg, std::uint64_t seed) {
  return Classifier<T>::build(cfg, seed);
}

}  // namespace dnet::nn
