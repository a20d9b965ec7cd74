#include "dnet/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dnet/parallel.hpp"

namespace dnet {

namespace {

constexpr std::size_t kTileM = 32;
constexpr std::size_t kTileK = 128;
constexpr std::size_t kTileN = 256;

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
}

}  // namespace

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t padding) {
  if (kernel == 0 || stride == 0) throw ShapeError("conv: kernel and stride must be positive");
  const std::size_t padded = in + 2 * padding;
  if (padded < kernel)
    throw ShapeError("conv: kernel " + std::to_string(kernel) + " exceeds padded extent " +
                     std::to_string(padded));
  return (padded - kernel) / stride + 1;
}

template <typename T>
void ensure_finite(const Tensor<T>& t, const char* op) {
  for (std::size_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t[i]))
      throw NumericError(std::string(op) + ": non-finite value at flat index " + std::to_string(i));
}

template <typename T>
void gemm_accumulate(std::size_t m, std::size_t n, std::size_t k, std::span<const T> a,
                     std::span<const T> b, std::span<T> c) {
  if (a.size() != m * k || b.size() != k * n || c.size() != m * n)
    throw ShapeError("gemm: buffer sizes do not match m, n, k");
  const std::size_t row_tiles = (m + kTileM - 1) / kTileM;
  // Only worth threading when each tile carries real work.
  const std::size_t min_chunk = (m * n * k > (1u << 20)) ? 1 : row_tiles + 1;
  parallel_for(row_tiles, min_chunk, [&](std::size_t tile_begin, std::size_t tile_end) {
    for (std::size_t it = tile_begin; it < tile_end; ++it) {
      const std::size_t i0 = it * kTileM;
      const std::size_t i1 = std::min(m, i0 + kTileM);
      for (std::size_t p0 = 0; p0 < k; p0 += kTileK) {
        const std::size_t p1 = std::min(k, p0 + kTileK);
        for (std::size_t j0 = 0; j0 < n; j0 += kTileN) {
          const std::size_t j1 = std::min(n, j0 + kTileN);
          for (std::size_t i = i0; i < i1; ++i) {
            T* crow = c.data() + i * n;
            const T* arow = a.data() + i * k;
            for (std::size_t p = p0; p < p1; ++p) {
              const T av = arow[p];
              const T* brow = b.data() + p * n;
              for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
            }
          }
        }
      }
    }
  });
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  require_rank(a.shape(), 2, "transpose2d");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  Tensor<T> out({cols, rows});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul");
  require_rank(b.shape(), 2, "matmul");
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " * " +
                     shape_str(b.shape()));
  Tensor<T> c({a.dim(0), b.dim(1)});
  gemm_accumulate<T>(a.dim(0), b.dim(1), a.dim(1), a.data(), b.data(), c.data());
  ensure_finite(c, "matmul");
  return c;
}

template <typename T>
Tensor<T> im2col(const Tensor<T>& input, const ConvSpec& spec) {
  require_rank(input.shape(), 4, "im2col");
  const std::size_t n = input.dim(0), ch = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t oh = conv_output_extent(h, spec.kernel_h, spec.stride, spec.padding);
  const std::size_t ow = conv_output_extent(w, spec.kernel_w, spec.stride, spec.padding);
  const std::size_t plane = oh * ow;
  const std::size_t ncols = n * plane;
  Tensor<T> cols({ch * spec.kernel_h * spec.kernel_w, ncols});
  T* out = cols.raw();
  const T* in = input.raw();
  const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t ky = 0; ky < spec.kernel_h; ++ky)
      for (std::size_t kx = 0; kx < spec.kernel_w; ++kx) {
        const std::size_t row = (c * spec.kernel_h + ky) * spec.kernel_w + kx;
        T* dst = out + row * ncols;
        for (std::size_t s = 0; s < n; ++s) {
          const T* src = in + (s * ch + c) * h * w;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ky) - pad;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * spec.stride + kx) - pad;
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                  ix < static_cast<std::ptrdiff_t>(w);
              dst[s * plane + oy * ow + ox] = inside ? src[iy * w + ix] : T{0};
            }
          }
        }
      }
  return cols;
}

template <typename T>
Tensor<T> col2im(const Tensor<T>& cols, const Shape& input_shape, const ConvSpec& spec) {
  require_rank(input_shape, 4, "col2im");
  const std::size_t n = input_shape[0], ch = input_shape[1], h = input_shape[2],
                    w = input_shape[3];
  const std::size_t oh = conv_output_extent(h, spec.kernel_h, spec.stride, spec.padding);
  const std::size_t ow = conv_output_extent(w, spec.kernel_w, spec.stride, spec.padding);
  const std::size_t plane = oh * ow;
  const std::size_t ncols = n * plane;
  if (cols.shape() != Shape{ch * spec.kernel_h * spec.kernel_w, ncols})
    throw ShapeError("col2im: column buffer " + shape_str(cols.shape()) + " does not match input " +
                     shape_str(input_shape));
  Tensor<T> image(input_shape);
  T* out = image.raw();
  const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t ky = 0; ky < spec.kernel_h; ++ky)
      for (std::size_t kx = 0; kx < spec.kernel_w; ++kx) {
        const std::size_t row = (c * spec.kernel_h + ky) * spec.kernel_w + kx;
        const T* src = cols.raw() + row * ncols;
        for (std::size_t s = 0; s < n; ++s) {
          T* dst = out + (s * ch + c) * h * w;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * spec.stride + kx) - pad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              dst[iy * w + ix] += src[s * plane + oy * ow + ox];
            }
          }
        }
      }
  return image;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 const ConvSpec& spec) {
  require_rank(input.shape(), 4, "conv2d");
  require_rank(weight.shape(), 4, "conv2d weight");
  const std::size_t n = input.dim(0), cin = input.dim(1);
  const std::size_t cout = weight.dim(0);
  if (weight.dim(1) != cin || weight.dim(2) != spec.kernel_h || weight.dim(3) != spec.kernel_w)
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(input.shape()));
  if (bias.shape() != Shape{cout})
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(cout) +
                     " output channels");
  const std::size_t oh = conv_output_extent(input.dim(2), spec.kernel_h, spec.stride, spec.padding);
  const std::size_t ow = conv_output_extent(input.dim(3), spec.kernel_w, spec.stride, spec.padding);
  const std::size_t plane = oh * ow;

  const Tensor<T> cols = im2col(input, spec);
  const std::size_t kdim = cols.dim(0);
  Tensor<T> flat({cout, n * plane});
  gemm_accumulate<T>(cout, n * plane, kdim, weight.data(), cols.data(), flat.data());

  Tensor<T> out({n, cout, oh, ow});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < cout; ++o) {
      const T* src = flat.raw() + o * n * plane + s * plane;
      T* dst = out.raw() + (s * cout + o) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bias[o];
    }
  ensure_finite(out, "conv2d");
  return out;
}

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& cols, const Shape& input_shape,
                               const Tensor<T>& weight, const Tensor<T>& grad_out,
                               const ConvSpec& spec) {
  require_rank(grad_out.shape(), 4, "conv2d_backward");
  const std::size_t n = grad_out.dim(0), cout = grad_out.dim(1);
  const std::size_t plane = grad_out.dim(2) * grad_out.dim(3);
  const std::size_t kdim = cols.dim(0);
  if (weight.dim(0) != cout || weight.numel() != cout * kdim || cols.dim(1) != n * plane)
    throw ShapeError("conv2d_backward: inconsistent shapes");

  Tensor<T> g({cout, n * plane});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < cout; ++o) {
      const T* src = grad_out.raw() + (s * cout + o) * plane;
      std::copy(src, src + plane, g.raw() + o * n * plane + s * plane);
    }

  Conv2dGrads<T> grads;
  grads.bias = Tensor<T>({cout});
  for (std::size_t o = 0; o < cout; ++o) {
    T acc{0};
    const T* row = g.raw() + o * n * plane;
    for (std::size_t p = 0; p < n * plane; ++p) acc += row[p];
    grads.bias[o] = acc;
  }

  grads.weight = Tensor<T>(weight.shape());
  const Tensor<T> cols_t = transpose2d(cols);
  gemm_accumulate<T>(cout, kdim, n * plane, g.data(), cols_t.data(), grads.weight.data());

  const Tensor<T> w_t = transpose2d(weight.reshaped({cout, kdim}));
  Tensor<T> dcols({kdim, n * plane});
  gemm_accumulate<T>(kdim, n * plane, cout, w_t.data(), g.data(), dcols.data());
  grads.input = col2im(dcols, input_shape, spec);
  return grads;
}

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: empty part list");
  const Shape& first = parts.front()->shape();
  require_rank(first, 4, "concat_channels");
  std::size_t total = 0;
  for (const Tensor<T>* p : parts) {
    const Shape& s = p->shape();
    require_rank(s, 4, "concat_channels");
    if (s[0] != first[0] || s[2] != first[2] || s[3] != first[3])
      throw ShapeError("concat_channels: part " + shape_str(s) + " does not match " +
                       shape_str(first) + " in N/H/W");
    total += s[1];
  }
  const std::size_t n = first[0], plane = first[2] * first[3];
  Tensor<T> out({n, total, first[2], first[3]});
  for (std::size_t s = 0; s < n; ++s) {
    T* dst = out.raw() + s * total * plane;
    for (const Tensor<T>* p : parts) {
      const std::size_t block = p->dim(1) * plane;
      const T* src = p->raw() + s * block;
      dst = std::copy(src, src + block, dst);
    }
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  std::vector<const Tensor<T>*> ptrs;
  ptrs.reserve(parts.size());
  for (const auto& p : parts) ptrs.push_back(&p);
  return concat_channels<T>(std::span<const Tensor<T>* const>(ptrs));
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  require_rank(x.shape(), 4, "slice_channels");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (begin + count > c) throw ShapeError("slice_channels: range exceeds channel count");
  Tensor<T> out({n, count, x.dim(2), x.dim(3)});
  for (std::size_t s = 0; s < n; ++s) {
    const T* src = x.raw() + (s * c + begin) * plane;
    std::copy(src, src + count * plane, out.raw() + s * count * plane);
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> channel_moments(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "channel_moments");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const std::size_t count = n * plane;
  if (count == 0) throw ShapeError("channel_moments: empty batch");
  Tensor<T> mean({c}), var({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const T* p = x.raw() + (s * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) sum += static_cast<double>(p[i]);
    }
    const double mu = sum / static_cast<double>(count);
    double sq = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const T* p = x.raw() + (s * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = static_cast<double>(p[i]) - mu;
        sq += d * d;
      }
    }
    mean[ch] = static_cast<T>(mu);
    var[ch] = static_cast<T>(sq / static_cast<double>(count));
  }
  return {std::move(mean), std::move(var)};
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  return out;
}

template <typename T>
Tensor<T> avgpool2(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "avgpool2");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 2 || w < 2) throw ShapeError("avgpool2: input " + shape_str(x.shape()) + " below 2x2");
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> out({n, c, oh, ow});
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = x.raw() + plane * h * w;
    T* dst = out.raw() + plane * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const T* p = src + 2 * oy * w + 2 * ox;
        dst[oy * ow + ox] = (p[0] + p[1] + p[w] + p[w + 1]) * T(0.25);
      }
  }
  return out;
}

template <typename T>
Tensor<T> avgpool2_backward(const Tensor<T>& grad_out, const Shape& input_shape) {
  require_rank(input_shape, 4, "avgpool2_backward");
  const std::size_t h = input_shape[2], w = input_shape[3];
  const std::size_t oh = h / 2, ow = w / 2;
  if (grad_out.shape() != Shape{input_shape[0], input_shape[1], oh, ow})
    throw ShapeError("avgpool2_backward: gradient shape mismatch");
  Tensor<T> dx(input_shape);
  for (std::size_t plane = 0; plane < input_shape[0] * input_shape[1]; ++plane) {
    const T* g = grad_out.raw() + plane * oh * ow;
    T* d = dx.raw() + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const T v = g[oy * ow + ox] * T(0.25);
        T* p = d + 2 * oy * w + 2 * ox;
        p[0] += v;
        p[1] += v;
        p[w] += v;
        p[w + 1] += v;
      }
  }
  return dx;
}

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x, std::vector<std::size_t>* argmax) {
  require_rank(x.shape(), 4, "maxpool2");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 2 || w < 2) throw ShapeError("maxpool2: input " + shape_str(x.shape()) + " below 2x2");
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> out({n, c, oh, ow});
  if (argmax) argmax->assign(out.numel(), 0);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t cand[4] = {base + 2 * oy * w + 2 * ox, base + 2 * oy * w + 2 * ox + 1,
                                     base + (2 * oy + 1) * w + 2 * ox,
                                     base + (2 * oy + 1) * w + 2 * ox + 1};
        std::size_t best = cand[0];
        for (std::size_t q = 1; q < 4; ++q)
          if (x[cand[q]] > x[best]) best = cand[q];
        const std::size_t o = plane * oh * ow + oy * ow + ox;
        out[o] = x[best];
        if (argmax) (*argmax)[o] = best;
      }
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (plane == 0) throw ShapeError("global_avg_pool: empty spatial plane");
  Tensor<T> out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    T acc{0};
    const T* p = x.raw() + i * plane;
    for (std::size_t q = 0; q < plane; ++q) acc += p[q];
    out[i] = acc / static_cast<T>(plane);
  }
  return out;
}

#define DNET_INSTANTIATE_KERNELS(T)                                                              \
  template void ensure_finite<T>(const Tensor<T>&, const char*);                                 \
  template void gemm_accumulate<T>(std::size_t, std::size_t, std::size_t, std::span<const T>,    \
                                   std::span<const T>, std::span<T>);                            \
  template Tensor<T> transpose2d<T>(const Tensor<T>&);                                           \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> im2col<T>(const Tensor<T>&, const ConvSpec&);                               \
  template Tensor<T> col2im<T>(const Tensor<T>&, const Shape&, const ConvSpec&);                 \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                               const ConvSpec&);                                                 \
  template Conv2dGrads<T> conv2d_backward<T>(const Tensor<T>&, const Shape&, const Tensor<T>&,   \
                                             const Tensor<T>&, const ConvSpec&);                 \
  template Tensor<T> concat_channels<T>(std::span<const Tensor<T>* const>);                      \
  template Tensor<T> concat_channels<T>(const std::vector<Tensor<T>>&);                          \
  template Tensor<T> slice_channels<T>(const Tensor<T>&, std::size_t, std::size_t);              \
  template std::pair<Tensor<T>, Tensor<T>> channel_moments<T>(const Tensor<T>&);                 \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                  \
  template Tensor<T> avgpool2<T>(const Tensor<T>&);                                              \
  template Tensor<T> avgpool2_backward<T>(const Tensor<T>&, const Shape&);                       \
  template Tensor<T> maxpool2<T>(const Tensor<T>&, std::vector<std::size_t>*);                   \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);

DNET_INSTANTIATE_KERNELS(float)
DNET_INSTANTIATE_KERNELS(double)

#undef DNET_INSTANTIATE_KERNELS

}  // namespace dnet
