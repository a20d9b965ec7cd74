#include "dnet/layers.hpp"

#include <cmath>
#include <tuple>

namespace dnet::nn {

template <typename T>
BnState<T> BnState<T>::identity(std::size_t channels) {
  BnState s;
  s.gamma = Tensor<T>({channels}, T{1});
  s.beta = Tensor<T>({channels}, T{0});
  s.running_mean = Tensor<T>({channels}, T{0});
  s.running_var = Tensor<T>({channels}, T{1});
  return s;
}

template <typename T>
void BnState<T>::validate() const {
  const Shape c{gamma.numel()};
  if (gamma.shape() != c || beta.shape() != c || running_mean.shape() != c ||
      running_var.shape() != c)
    throw ShapeError("batchnorm: gamma/beta/running stats must all be [C]");
  for (std::size_t i = 0; i < running_var.numel(); ++i)
    if (!(running_var[i] >= T{0})) throw ShapeError("batchnorm: negative running variance");
  if (!(momentum > T{0} && momentum <= T{1})) throw ShapeError("batchnorm: momentum outside (0,1]");
  if (!(epsilon > T{0})) throw ShapeError("batchnorm: epsilon must be positive");
}

template <typename T>
void init_uniform_fan_in(Tensor<T>& t, std::size_t fan_in, Rng& rng) {
  if (fan_in == 0) throw ShapeError("init: fan_in must be positive");
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
HParams<T> HParams<T>::init(std::size_t in_channels, std::size_t growth, Rng& rng,
                            std::size_t kernel) {
  if (in_channels == 0 || growth == 0 || kernel == 0)
    throw ShapeError("HParams: channels and kernel must be positive");
  HParams p;
  p.bn = BnState<T>::identity(in_channels);
  p.conv_weight = Tensor<T>({growth, in_channels, kernel, kernel});
  init_uniform_fan_in(p.conv_weight, in_channels * kernel * kernel, rng);
  p.conv_bias = Tensor<T>({growth});
  return p;
}

template <typename T>
BnBinding<T> bind_params(ad::Tape<T>& tape, BnState<T>& state, const std::string& prefix) {
  state.validate();
  BnBinding<T> b;
  b.gamma = tape.leaf(state.gamma, prefix + ".gamma");
  b.beta = tape.leaf(state.beta, prefix + ".beta");
  b.running_mean = &state.running_mean;
  b.running_var = &state.running_var;
  b.momentum = state.momentum;
  b.epsilon = state.epsilon;
  return b;
}

template <typename T>
HBinding<T> bind_params(ad::Tape<T>& tape, HParams<T>& params, const std::string& prefix) {
  HBinding<T> h;
  h.bn = bind_params(tape, params.bn, prefix + ".bn");
  h.weight = tape.leaf(params.conv_weight, prefix + ".conv.weight");
  h.bias = tape.leaf(params.conv_bias, prefix + ".conv.bias");
  return h;
}

template <typename T>
ad::Var<T> batchnorm(const ad::Var<T>& x, const BnBinding<T>& bn, Mode mode) {
  const Tensor<T>& in = x.value();
  if (in.rank() != 4) throw ShapeError("batchnorm: expected N x C x H x W, got " + shape_str(in.shape()));
  const std::size_t n = in.dim(0), c = in.dim(1), plane = in.dim(2) * in.dim(3);
  const Tensor<T>& gamma = bn.gamma.value();
  const Tensor<T>& beta = bn.beta.value();
  if (gamma.numel() != c || beta.numel() != c || !bn.running_mean || !bn.running_var ||
      bn.running_mean->numel() != c || bn.running_var->numel() != c)
    throw ShapeError("batchnorm: state has " + std::to_string(gamma.numel()) +
                     " channels, input has " + std::to_string(c));
  if (n * plane == 0) throw ShapeError("batchnorm: empty batch");

  Tensor<T> mean({c}), var({c});
  if (mode == Mode::Train) {
    std::tie(mean, var) = channel_moments(in);
    const T m = bn.momentum;
    for (std::size_t ch = 0; ch < c; ++ch) {
      (*bn.running_mean)[ch] = (T{1} - m) * (*bn.running_mean)[ch] + m * mean[ch];
      (*bn.running_var)[ch] = (T{1} - m) * (*bn.running_var)[ch] + m * var[ch];
    }
  } else {
    mean = *bn.running_mean;
    var = *bn.running_var;
  }

  Tensor<T> inv_std({c});
  for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = T{1} / std::sqrt(var[ch] + bn.epsilon);

  Tensor<T> xhat(in.shape()), out(in.shape());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (s * c + ch) * plane;
      for (std::size_t q = 0; q < plane; ++q) {
        const T h = (in[base + q] - mean[ch]) * inv_std[ch];
        xhat[base + q] = h;
        out[base + q] = gamma[ch] * h + beta[ch];
      }
    }
  ensure_finite(out, "batchnorm");

  const bool train = mode == Mode::Train;
  return x.tape().record(
      ad::OpKind::BatchNorm, {x.id(), bn.gamma.id(), bn.beta.id()}, std::move(out),
      [xhat = std::move(xhat), inv_std = std::move(inv_std), gamma, train, n, c,
       plane](const Tensor<T>& g, ad::GradAccess<T>& ins) {
        const T count = static_cast<T>(n * plane);
        Tensor<T> sum_g({c}), sum_gx({c});
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (s * c + ch) * plane;
            for (std::size_t q = 0; q < plane; ++q) {
              sum_g[ch] += g[base + q];
              sum_gx[ch] += g[base + q] * xhat[base + q];
            }
          }
        Tensor<T>& gx = ins[0];
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (s * c + ch) * plane;
            const T k = gamma[ch] * inv_std[ch];
            if (train) {
              // Full Jacobian through the batch mean and variance.
              const T mg = sum_g[ch] / count;
              const T mgx = sum_gx[ch] / count;
              for (std::size_t q = 0; q < plane; ++q)
                gx[base + q] += k * (g[base + q] - mg - xhat[base + q] * mgx);
            } else {
              for (std::size_t q = 0; q < plane; ++q) gx[base + q] += k * g[base + q];
            }
          }
        Tensor<T>& ggamma = ins[1];
        Tensor<T>& gbeta = ins[2];
        for (std::size_t ch = 0; ch < c; ++ch) {
          ggamma[ch] += sum_gx[ch];
          gbeta[ch] += sum_g[ch];
        }
      });
}

template <typename T>
ConvSpec same_conv_spec(const HBinding<T>& h) {
  const Tensor<T>& w = h.weight.value();
  if (w.rank() != 4 || w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0)
    throw ShapeError("conv: expected an odd square kernel, got " + shape_str(w.shape()));
  return ConvSpec{w.dim(2), w.dim(3), 1, (w.dim(2) - 1) / 2};
}

template <typename T>
ad::Var<T> composite_h(const ad::Var<T>& x, const HBinding<T>& h, Mode mode) {
  const Tensor<T>& w = h.weight.value();
  if (w.rank() != 4 || w.dim(2) != 3 || w.dim(3) != 3)
    throw ShapeError("composite_h: conv weight must be k x Cin x 3 x 3, got " +
                     shape_str(w.shape()));
  if (x.value().rank() != 4 || x.value().dim(1) != w.dim(1))
    throw ShapeError("composite_h: input " + shape_str(x.shape()) + " does not match Cin " +
                     std::to_string(w.dim(1)));
  const ad::Var<T> normalized = batchnorm(x, h.bn, mode);
  const ad::Var<T> activated = ad::relu(normalized);
  return ad::conv2d(activated, h.weight, h.bias, ConvSpec{3, 3, 1, 1});
}

template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, BnState<T>& state, Mode mode) {
  ad::Tape<T> tape;
  const BnBinding<T> b = bind_params(tape, state, "bn");
  return batchnorm(tape.leaf(x), b, mode).value();
}

template <typename T>
Tensor<T> composite_h_forward(const Tensor<T>& x, HParams<T>& params, Mode mode) {
  ad::Tape<T> tape;
  const HBinding<T> h = bind_params(tape, params, "h");
  return composite_h(tape.leaf(x), h, mode).value();
}

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  ad::Tape<T> tape;
  return ad::linear(tape.leaf(x), tape.leaf(w), tape.leaf(b)).value();
}

#define DNET_INSTANTIATE_LAYERS(T)                                                         \
  template struct BnState<T>;                                                              \
  template struct HParams<T>;                                                              \
  template void init_uniform_fan_in<T>(Tensor<T>&, std::size_t, Rng&);                     \
  template BnBinding<T> bind_params<T>(ad::Tape<T>&, BnState<T>&, const std::string&);            \
  template HBinding<T> bind_params<T>(ad::Tape<T>&, HParams<T>&, const std::string&);             \
  template ad::Var<T> batchnorm<T>(const ad::Var<T>&, const BnBinding<T>&, Mode);          \
  template ConvSpec same_conv_spec<T>(const HBinding<T>&);                                 \
  template ad::Var<T> composite_h<T>(const ad::Var<T>&, const HBinding<T>&, Mode);         \
  template Tensor<T> batchnorm_forward<T>(const Tensor<T>&, BnState<T>&, Mode);            \
  template Tensor<T> composite_h_forward<T>(const Tensor<T>&, HParams<T>&, Mode);          \
  template Tensor<T> linear_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);

DNET_INSTANTIATE_LAYERS(float)
DNET_INSTANTIATE_LAYERS(double)

#undef DNET_INSTANTIATE_LAYERS

}  // namespace dnet::nn
