#include "dnet/optimizers.hpp"

#include <cmath>

namespace dnet::optim {

std::string to_string(Kind k) {
  switch (k) {
    case Kind::Sgd: return "sgd";
    case Kind::Adam: return "adam";
    case Kind::RAdam: return "radam";
  }
  return "radam";
}

Kind parse_kind(std::string_view s) {
  if (s == "sgd") return Kind::Sgd;
  if (s == "adam") return Kind::Adam;
  if (s == "radam") return Kind::RAdam;
  throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

void Hyper::validate() const {
  if (!(lr > 0.0)) throw ConfigError("optimizer: lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("optimizer: beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optimizer: beta2 must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("optimizer: epsilon must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("optimizer: weight_decay must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw ConfigError("optimizer: momentum must lie in [0, 1)");
}

template <typename T>
OptimState<T> make_state(const Hyper& hyper) {
  hyper.validate();
  OptimState<T> s;
  s.hyper = hyper;
  return s;
}

double rho_infinity(double beta2) {
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("rectification: beta2 must lie in [0, 1)");
  return 2.0 / (1.0 - beta2) - 1.0;
}

double rho(std::uint64_t t, double beta2) {
  const double inf = rho_infinity(beta2);
  if (t == 0) throw ConfigError("rectification: t must be at least 1");
  const double bt = std::pow(beta2, static_cast<double>(t));
  return inf - 2.0 * static_cast<double>(t) * bt / (1.0 - bt);
}

std::optional<double> rectification_term(std::uint64_t t, double beta2) {
  const double inf = rho_infinity(beta2);
  const double r = rho(t, beta2);
  if (r <= 4.0) return std::nullopt;
  return std::sqrt(((r - 4.0) * (r - 2.0) * inf) / ((inf - 4.0) * (inf - 2.0) * r));
}

namespace {

template <typename T>
void check_sizes(std::size_t n, std::initializer_list<std::size_t> others) {
  for (std::size_t o : others)
    if (o != n) throw ShapeError("optimizer: parameter/gradient/moment sizes differ");
}

template <typename T>
void decay(std::span<T> param, const Hyper& h) {
  if (h.weight_decay == 0.0) return;
  const double f = 1.0 - h.lr * h.weight_decay;
  for (auto& p : param) p = static_cast<T>(static_cast<double>(p) * f);
}

template <typename T>
void update_moments(std::span<const T> grad, std::span<T> m, std::span<T> v, const Hyper& h) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double g = grad[i];
    m[i] = static_cast<T>(h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * g);
    v[i] = static_cast<T>(h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * g * g);
  }
}

}  // namespace

template <typename T>
void sgd_update(std::span<T> param, std::span<const T> grad, std::span<T> velocity,
                const Hyper& h) {
  check_sizes<T>(param.size(), {grad.size(), velocity.size()});
  decay(param, h);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double vel = h.momentum * static_cast<double>(velocity[i]) + static_cast<double>(grad[i]);
    velocity[i] = static_cast<T>(vel);
    param[i] = static_cast<T>(static_cast<double>(param[i]) - h.lr * vel);
  }
}

template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                 std::uint64_t t, const Hyper& h) {
  check_sizes<T>(param.size(), {grad.size(), m.size(), v.size()});
  if (t == 0) throw ShapeError("adam: step count must be at least 1");
  decay(param, h);
  update_moments(grad, m, v, h);
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double m_hat = static_cast<double>(m[i]) / c1;
    const double v_hat = static_cast<double>(v[i]) / c2;
    param[i] = static_cast<T>(static_cast<double>(param[i]) -
                              h.lr * m_hat / (std::sqrt(v_hat) + h.epsilon));
  }
}

template <typename T>
void radam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                  std::uint64_t t, const Hyper& h) {
  check_sizes<T>(param.size(), {grad.size(), m.size(), v.size()});
  if (t == 0) throw ShapeError("radam: step count must be at least 1");
  decay(param, h);
  update_moments(grad, m, v, h);
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const std::optional<double> r = rectification_term(t, h.beta2);
  if (!r) {
    for (std::size_t i = 0; i < param.size(); ++i)
      param[i] = static_cast<T>(static_cast<double>(param[i]) -
                                h.lr * static_cast<double>(m[i]) / c1);
    return;
  }
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double m_hat = static_cast<double>(m[i]) / c1;
    const double v_hat = static_cast<double>(v[i]) / c2;
    param[i] = static_cast<T>(static_cast<double>(param[i]) -
                              h.lr * *r * m_hat / (std::sqrt(v_hat) + h.epsilon));
  }
}

namespace {

template <typename T>
const Tensor<T>& grad_for(const std::map<std::string, Tensor<T>>& grads,
                          const typename nn::ParamStore<T>::Entry& e) {
  auto it = grads.find(e.name);
  if (it == grads.end()) throw ShapeError("optimizer: no gradient for '" + e.name + "'");
  if (it->second.shape() != e.value.shape())
    throw ShapeError("optimizer: gradient of '" + e.name + "' has shape " +
                     shape_str(it->second.shape()) + ", parameter " + shape_str(e.value.shape()));
  return it->second;
}

template <typename T>
Tensor<T>& moment(std::map<std::string, Tensor<T>>& moments, const std::string& name,
                  const Shape& shape) {
  auto it = moments.find(name);
  if (it == moments.end()) it = moments.emplace(name, Tensor<T>(shape)).first;
  if (it->second.shape() != shape)
    throw ShapeError("optimizer: moment of '" + name + "' has the wrong shape");
  return it->second;
}

template <typename T>
void check_all(const nn::ParamStore<T>& params, const std::map<std::string, Tensor<T>>& grads) {
  for (const auto& e : params.entries())
    if (e.trainable) grad_for(grads, e);
}

}  // namespace

template <typename T>
void sgd_step(nn::ParamStore<T>& params, const std::map<std::string, Tensor<T>>& grads,
              OptimState<T>& state) {
  check_all(params, grads);
  ++state.step;
  for (auto& e : params.entries()) {
    if (!e.trainable) continue;
    const Tensor<T>& g = grad_for(grads, e);
    Tensor<T>& vel = moment(state.first, e.name, e.value.shape());
    sgd_update<T>(e.value.data(), g.data(), vel.data(), state.hyper);
  }
}

template <typename T>
void adam_step(nn::ParamStore<T>& params, const std::map<std::string, Tensor<T>>& grads,
               OptimState<T>& state) {
  check_all(params, grads);
  ++state.step;
  for (auto& e : params.entries()) {
    if (!e.trainable) continue;
    const Tensor<T>& g = grad_for(grads, e);
    Tensor<T>& m = moment(state.first, e.name, e.value.shape());
    Tensor<T>& v = moment(state.second, e.name, e.value.shape());
    adam_update<T>(e.value.data(), g.data(), m.data(), v.data(), state.step, state.hyper);
  }
}

template <typename T>
void radam_step(nn::ParamStore<T>& params, const std::map<std::string, Tensor<T>>& grads,
                OptimState<T>& state) {
  check_all(params, grads);
  ++state.step;
  for (auto& e : params.entries()) {
    if (!e.trainable) continue;
    const Tensor<T>& g = grad_for(grads, e);
    Tensor<T>& m = moment(state.first, e.name, e.value.shape());
    Tensor<T>& v = moment(state.second, e.name, e.value.shape());
    radam_update<T>(e.value.data(), g.data(), m.data(), v.data(), state.step, state.hyper);
  }
}

template <typename T>
void step(nn::ParamStore<T>& params, const std::map<std::string, Tensor<T>>& grads,
          OptimState<T>& state) {
  switch (state.hyper.kind) {
    case Kind::Sgd: return sgd_step(params, grads, state);
    case Kind::Adam: return adam_step(params, grads, state);
    case Kind::RAdam: return radam_step(params, grads, state);
  }
}

#define DNET_INSTANTIATE_OPTIM(T)                                                              \
  template OptimState<T> make_state<T>(const Hyper&);                                          \
  template void sgd_update<T>(std::span<T>, std::span<const T>, std::span<T>, const Hyper&);   \
  template void adam_update<T>(std::span<T>, std::span<const T>, std::span<T>, std::span<T>,   \
                               std::uint64_t, const Hyper&);                                   \
  template void radam_update<T>(std::span<T>, std::span<const T>, std::span<T>, std::span<T>,  \
                                std::uint64_t, const Hyper&);                                  \
  template void step<T>(nn::ParamStore<T>&, const std::map<std::string, Tensor<T>>&,           \
                        OptimState<T>&);                                                       \
  template void sgd_step<T>(nn::ParamStore<T>&, const std::map<std::string, Tensor<T>>&,       \
                            OptimState<T>&);                                                   \
  template void adam_step<T>(nn::ParamStore<T>&, const std::map<std::string, Tensor<T>>&,      \
                             OptimState<T>&);                                                  \
  template void radam_step<T>(nn::ParamStore<T>&, const std::map<std::string, Tensor<T>>&,     \
                              OptimState<T>&);

DNET_INSTANTIATE_OPTIM(float)
DNET_INSTANTIATE_OPTIM(double)

#undef DNET_INSTANTIATE_OPTIM

}  // namespace dnet::optim
