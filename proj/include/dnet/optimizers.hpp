#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "dnet/architectures.hpp"
#include "dnet/tensor.hpp"

namespace dnet::optim {

enum class Kind : std::uint8_t { Sgd = 0, Adam = 1, RAdam = 2 };

std::string to_string(Kind k);
Kind parse_kind(std::string_view s);

struct Hyper {
  Kind kind = Kind::RAdam;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Decoupled: param *= 1 - lr * weight_decay before the update.
  double weight_decay = 0.0;
  /// SGD only; 0 gives plain SGD.
  double momentum = 0.9;

  void validate() const;
  friend bool operator==(const Hyper&, const Hyper&) = default;
};

/// Step counter and per-parameter moments. For SGD `first` holds the
/// velocity and `second` stays empty.
template <typename T>
struct OptimState {
  Hyper hyper;
  std::uint64_t step = 0;
  std::map<std::string, Tensor<T>> first;
  std::map<std::string, Tensor<T>> second;

  friend bool operator==(const OptimState&, const OptimState&) = default;
};

template <typename T>
OptimState<T> make_state(const Hyper& hyper);

/// rho_inf = 2 / (1 - beta2) - 1.
double rho_infinity(double beta2);

/// rho_t = rho_inf - 2 t beta2^t / (1 - beta2^t).
double rho(std::uint64_t t, double beta2);

/// Variance-rectification multiplier r_t, or nullopt while rho_t <= 4 (the
/// second-moment estimate is too young to adapt the step).
std::optional<double> rectification_term(std::uint64_t t, double beta2);

// Single-tensor update rules. `t` is the already-incremented step count.

/// velocity = momentum * velocity + g; param -= lr * velocity.
template <typename T>
void sgd_update(std::span<T> param, std::span<const T> grad, std::span<T> velocity,
                const Hyper& h);

template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                 std::uint64_t t, const Hyper& h);

/// Adam moments; rectified adaptive step when available, otherwise the
/// un-adapted momentum step param -= lr * m_hat.
template <typename T>
void radam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                  std::uint64_t t, const Hyper& h);

/// Applies one step of `state.hyper.kind` to every trainable entry of
/// `params`; BN running statistics are skipped. `grads` must hold a
/// shape-matched gradient for each trainable entry.
template <typename T>
void step(nn::ParamStore<T>& params, const std::map<std::string, Tensor<T>>& grads,
          OptimState<T>& state);

template <typename T>
void sgd_step(nn::ParamStore<T>& params, const std::map<std::string, Tensor<T>>& grads,
              OptimState<T>& state);
template <typename T>
void adam_step(nn::ParamStore<T>& params, const std::map<std::string, Tensor<T>>& grads,
               OptimState<T>& state);
template <typename T>
void radam_step(nn::ParamStore<T>& params, const std::map<std::string, Tensor<T>>& grads,
                OptimState<T>& state);

}  // namespace dnet::optim
