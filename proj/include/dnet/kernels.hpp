#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "dnet/tensor.hpp"

namespace dnet {

/// Geometry of a 2-D cross-correlation with symmetric zero padding.
struct ConvSpec {
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// (in + 2*padding - kernel) / stride + 1; throws ShapeError unless the
/// result is a positive integer.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t padding);

/// Throws NumericError naming `op` if any element is NaN or infinite.
template <typename T>
void ensure_finite(const Tensor<T>& t, const char* op);

/// C[m x n] += A[m x k] * B[k x n], row-major. Tiled over all three
/// dimensions; each C element accumulates over k in increasing order, so the
/// result does not depend on tiling or thread count.
template <typename T>
void gemm_accumulate(std::size_t m, std::size_t n, std::size_t k, std::span<const T> a,
                     std::span<const T> b, std::span<T> c);

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Unfolds N x C x H x W into [C*kh*kw] x [N*Ho*Wo] patch columns.
template <typename T>
Tensor<T> im2col(const Tensor<T>& input, const ConvSpec& spec);

/// Adjoint of im2col: scatters patch columns back into an image tensor.
template <typename T>
Tensor<T> col2im(const Tensor<T>& cols, const Shape& input_shape, const ConvSpec& spec);

/// Cross-correlation of N x Cin x H x W with Cout x Cin x kh x kw plus bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 const ConvSpec& spec);

template <typename T>
struct Conv2dGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

/// Gradients of conv2d given the forward patch columns (im2col of input).
template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& cols, const Shape& input_shape,
                               const Tensor<T>& weight, const Tensor<T>& grad_out,
                               const ConvSpec& spec);

/// Stacks N x Ci x H x W parts along the channel axis, in order.
template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> parts);

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);

/// Channels [begin, begin + count) of an N x C x H x W tensor.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t count);

/// Per-channel mean and biased variance over N, H, W.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> channel_moments(const Tensor<T>& x);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

/// Non-overlapping 2x2 mean; a trailing odd row/column is dropped.
template <typename T>
Tensor<T> avgpool2(const Tensor<T>& x);

template <typename T>
Tensor<T> avgpool2_backward(const Tensor<T>& grad_out, const Shape& input_shape);

/// Non-overlapping 2x2 max; `argmax` receives the flat input offset chosen
/// for every output element (first maximum wins).
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x, std::vector<std::size_t>* argmax = nullptr);

/// N x C x H x W -> N x C spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

}  // namespace dnet
