#pragma once

#include <cstddef>
#include <string>

#include "dnet/autodiff.hpp"
#include "dnet/kernels.hpp"
#include "dnet/rng.hpp"
#include "dnet/tensor.hpp"

namespace dnet::nn {

enum class Mode { Train, Eval };

inline constexpr double kDefaultBnMomentum = 0.1;
inline constexpr double kDefaultBnEpsilon = 1e-5;

/// Batch-normalization parameters and running statistics for C channels.
/// Running variance is the biased batch variance, same as the one used to
/// normalize in train mode.
template <typename T>
struct BnState {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = static_cast<T>(kDefaultBnMomentum);
  T epsilon = static_cast<T>(kDefaultBnEpsilon);

  /// gamma = 1, beta = 0, running mean 0, running variance 1.
  static BnState identity(std::size_t channels);
  std::size_t channels() const { return gamma.numel(); }
  void validate() const;
};

/// One composite function: BN -> ReLU -> Conv (k filters of Cin x 3 x 3).
template <typename T>
struct HParams {
  BnState<T> bn;
  Tensor<T> conv_weight;
  Tensor<T> conv_bias;

  /// Identity BN, fan-in uniform conv weights, zero bias.
  static HParams init(std::size_t in_channels, std::size_t growth, Rng& rng,
                      std::size_t kernel = 3);
  std::size_t in_channels() const { return conv_weight.dim(1); }
  std::size_t out_channels() const { return conv_weight.dim(0); }
};

/// Fills `t` from U(-b, b), b = sqrt(1 / fan_in), in flat order.
template <typename T>
void init_uniform_fan_in(Tensor<T>& t, std::size_t fan_in, Rng& rng);

/// BN as seen by a tape: learnable leaves plus mutable running statistics.
template <typename T>
struct BnBinding {
  ad::Var<T> gamma;
  ad::Var<T> beta;
  Tensor<T>* running_mean = nullptr;
  Tensor<T>* running_var = nullptr;
  T momentum = static_cast<T>(kDefaultBnMomentum);
  T epsilon = static_cast<T>(kDefaultBnEpsilon);
};

template <typename T>
struct HBinding {
  BnBinding<T> bn;
  ad::Var<T> weight;
  ad::Var<T> bias;

  std::size_t in_channels() const { return weight.value().dim(1); }
  std::size_t out_channels() const { return weight.value().dim(0); }
};

/// Leaves named prefix + ".gamma" / ".beta".
template <typename T>
BnBinding<T> bind_params(ad::Tape<T>& tape, BnState<T>& state, const std::string& prefix);

/// Leaves named prefix + ".bn.gamma", ".bn.beta", ".conv.weight", ".conv.bias".
template <typename T>
HBinding<T> bind_params(ad::Tape<T>& tape, HParams<T>& params, const std::string& prefix);

/// Train mode normalizes by batch moments (differentiating through them) and
/// moves the running statistics by `momentum`; eval mode normalizes by the
/// running statistics, treated as constants.
template <typename T>
ad::Var<T> batchnorm(const ad::Var<T>& x, const BnBinding<T>& bn, Mode mode);

/// Conv geometry used by a binding: stride 1, padding (kernel - 1) / 2.
template <typename T>
ConvSpec same_conv_spec(const HBinding<T>& h);

/// conv(relu(bn(x))) with a 3x3, stride 1, pad 1 convolution.
template <typename T>
ad::Var<T> composite_h(const ad::Var<T>& x, const HBinding<T>& h, Mode mode);

// Tensor-level forwards. Train-mode BN updates the running statistics in
// `state` exactly as the tape version does.

template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, BnState<T>& state, Mode mode);

template <typename T>
Tensor<T> composite_h_forward(const Tensor<T>& x, HParams<T>& params, Mode mode);

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

using dnet::avgpool2;
using dnet::maxpool2;
using dnet::relu;

}  // namespace dnet::nn
