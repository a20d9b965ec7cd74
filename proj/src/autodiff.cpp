#include "dnet/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace dnet::ad {

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Dot: return "dot";
    case OpKind::Relu: return "relu";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::BatchNorm: return "batchnorm";
    case OpKind::AvgPool2: return "avgpool2";
    case OpKind::MaxPool2: return "maxpool2";
    case OpKind::GlobalAvgPool: return "global_avg_pool";
    case OpKind::Matmul: return "matmul";
    case OpKind::Linear: return "linear";
    case OpKind::Reshape: return "reshape";
    case OpKind::Detach: return "detach";
    case OpKind::Loss: return "loss";
  }
  return "unknown";
}

template <typename T>
Tensor<T>& GradAccess<T>::operator[](std::size_t k) {
  const NodeId id = inputs_[k];
  auto& slot = grads_[id];
  if (!slot) slot.emplace(tape_.node(id).output.shape());
  return *slot;
}

template <typename T>
const Tensor<T>* GradStore<T>::find(NodeId id) const {
  if (id >= nodes_.size() || !nodes_[id]) return nullptr;
  return &*nodes_[id];
}

template <typename T>
Tensor<T> GradStore<T>::of(const Var<T>& v) const {
  if (const Tensor<T>* g = find(v.id())) return *g;
  if (v.id() >= shapes_.size()) throw ShapeError("GradStore: node not on the swept tape");
  return Tensor<T>(shapes_[v.id()]);
}

template <typename T>
const Tensor<T>& GradStore<T>::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ShapeError("GradStore: no parameter named '" + name + "'");
  return it->second;
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, std::string name) {
  if (!name.empty()) {
    if (names_.count(name)) throw ShapeError("tape: duplicate leaf name '" + name + "'");
    names_[name] = nodes_.size();
  }
  TapeNode<T> node;
  node.op = OpKind::Leaf;
  node.output = std::move(value);
  node.name = std::move(name);
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(OpKind op, std::vector<NodeId> inputs, Tensor<T> output,
                       BackwardFn<T> backward) {
  for (NodeId id : inputs)
    if (id >= nodes_.size())
      throw ShapeError(std::string("tape: input ") + std::to_string(id) + " of " + op_name(op) +
                       " is not on the tape (size " + std::to_string(nodes_.size()) + ")");
  TapeNode<T> node;
  node.op = op;
  node.inputs = std::move(inputs);
  node.output = std::move(output);
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
const TapeNode<T>& Tape<T>::node(NodeId id) const {
  if (id >= nodes_.size()) throw ShapeError("tape: node " + std::to_string(id) + " out of range");
  return nodes_[id];
}

template <typename T>
GradStore<T> Tape<T>::backward(const Var<T>& loss) const {
  if (&loss.tape() != this) throw ShapeError("backward: loss lives on another tape");
  const Tensor<T>& out = node(loss.id()).output;
  if (out.numel() != 1)
    throw ShapeError("backward: loss must be scalar-shaped, got " + shape_str(out.shape()));

  GradStore<T> store;
  store.nodes_.resize(nodes_.size());
  store.shapes_.reserve(nodes_.size());
  for (const auto& n : nodes_) store.shapes_.push_back(n.output.shape());
  store.nodes_[loss.id()].emplace(out.shape(), T{1});

  for (NodeId i = loss.id() + 1; i-- > 0;) {
    const TapeNode<T>& n = nodes_[i];
    if (!store.nodes_[i] || !n.backward) continue;
    // Inputs strictly precede node i, so slot i is never written below.
    const Tensor<T>& grad_out = *store.nodes_[i];
    GradAccess<T> access(*this, n.inputs, store.nodes_);
    n.backward(grad_out, access);
  }
  for (const auto& [name, id] : names_)
    if (store.nodes_[id]) store.params_.emplace(name, *store.nodes_[id]);
  return store;
}

namespace {

template <typename T>
Tape<T>& tape_of(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw ShapeError("ops: operands live on different tapes");
  return a.tape();
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw ShapeError(std::string(op) + ": shape " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = tape_of(a, b);
  const Tensor<T>& x = a.value();
  const Tensor<T>& y = b.value();
  require_same_shape(x.shape(), y.shape(), "add");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] + y[i];
  return tape.record(OpKind::Add, {a.id(), b.id()}, std::move(out),
                     [](const Tensor<T>& g, GradAccess<T>& in) {
                       Tensor<T>& ga = in[0];
                       for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
                       Tensor<T>& gb = in[1];
                       for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
                     });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = tape_of(a, b);
  const Tensor<T>& x = a.value();
  const Tensor<T>& y = b.value();
  require_same_shape(x.shape(), y.shape(), "mul");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * y[i];
  return tape.record(OpKind::Mul, {a.id(), b.id()}, std::move(out),
                     [x, y](const Tensor<T>& g, GradAccess<T>& in) {
                       Tensor<T>& ga = in[0];
                       for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i];
                       Tensor<T>& gb = in[1];
                       for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * x[i];
                     });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  const Tensor<T>& x = a.value();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * factor;
  return a.tape().record(OpKind::Scale, {a.id()}, std::move(out),
                         [factor](const Tensor<T>& g, GradAccess<T>& in) {
                           Tensor<T>& ga = in[0];
                           for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * factor;
                         });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  const Tensor<T>& x = a.value();
  T acc{0};
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
  return a.tape().record(OpKind::Sum, {a.id()}, Tensor<T>::scalar(acc),
                         [](const Tensor<T>& g, GradAccess<T>& in) {
                           Tensor<T>& ga = in[0];
                           for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[0];
                         });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const Tensor<T>& x = a.value();
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  T acc{0};
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
  const T inv = T{1} / static_cast<T>(x.numel());
  return a.tape().record(OpKind::Mean, {a.id()}, Tensor<T>::scalar(acc * inv),
                         [inv](const Tensor<T>& g, GradAccess<T>& in) {
                           Tensor<T>& ga = in[0];
                           for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[0] * inv;
                         });
}

template <typename T>
Var<T> dot(const Var<T>& a, const Tensor<T>& weights) {
  const Tensor<T>& x = a.value();
  require_same_shape(x.shape(), weights.shape(), "dot");
  T acc{0};
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i] * weights[i];
  return a.tape().record(OpKind::Dot, {a.id()}, Tensor<T>::scalar(acc),
                         [weights](const Tensor<T>& g, GradAccess<T>& in) {
                           Tensor<T>& ga = in[0];
                           for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[0] * weights[i];
                         });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  const Tensor<T>& in = x.value();
  std::vector<bool> active(in.numel());
  for (std::size_t i = 0; i < in.numel(); ++i) active[i] = in[i] > T{0};
  return x.tape().record(OpKind::Relu, {x.id()}, dnet::relu(in),
                         [active = std::move(active)](const Tensor<T>& g, GradAccess<T>& ins) {
                           Tensor<T>& gx = ins[0];
                           for (std::size_t i = 0; i < g.numel(); ++i)
                             if (active[i]) gx[i] += g[i];
                         });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvSpec& spec) {
  Tape<T>& tape = tape_of(x, weight);
  tape_of(x, bias);
  const Tensor<T>& w = weight.value();
  Tensor<T> out = dnet::conv2d(x.value(), w, bias.value(), spec);
  Tensor<T> cols = im2col(x.value(), spec);
  return tape.record(
      OpKind::Conv2d, {x.id(), weight.id(), bias.id()}, std::move(out),
      [cols = std::move(cols), in_shape = x.shape(), w, spec](const Tensor<T>& g,
                                                              GradAccess<T>& in) {
        Conv2dGrads<T> grads = conv2d_backward(cols, in_shape, w, g, spec);
        Tensor<T>& gx = in[0];
        for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += grads.input[i];
        Tensor<T>& gw = in[1];
        for (std::size_t i = 0; i < gw.numel(); ++i) gw[i] += grads.weight[i];
        Tensor<T>& gb = in[2];
        for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += grads.bias[i];
      });
}

template <typename T>
Var<T> concat_channels(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: empty part list");
  Tape<T>& tape = parts.front().tape();
  std::vector<const Tensor<T>*> values;
  std::vector<NodeId> ids;
  std::vector<std::size_t> channels;
  for (const Var<T>& p : parts) {
    tape_of(parts.front(), p);
    values.push_back(&p.value());
    ids.push_back(p.id());
    channels.push_back(p.value().rank() == 4 ? p.value().dim(1) : 0);
  }
  Tensor<T> out = dnet::concat_channels<T>(std::span<const Tensor<T>* const>(values));
  return tape.record(OpKind::Concat, std::move(ids), std::move(out),
                     [channels = std::move(channels)](const Tensor<T>& g, GradAccess<T>& in) {
                       // Split the upstream gradient back into each part's channel range.
                       std::size_t begin = 0;
                       for (std::size_t k = 0; k < channels.size(); ++k) {
                         const Tensor<T> piece = dnet::slice_channels(g, begin, channels[k]);
                         Tensor<T>& gk = in[k];
                         for (std::size_t i = 0; i < gk.numel(); ++i) gk[i] += piece[i];
                         begin += channels[k];
                       }
                     });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t count) {
  Tensor<T> out = dnet::slice_channels(x.value(), begin, count);
  return x.tape().record(OpKind::Slice, {x.id()}, std::move(out),
                         [begin, count](const Tensor<T>& g, GradAccess<T>& in) {
                           Tensor<T>& gx = in[0];
                           const std::size_t n = gx.dim(0), c = gx.dim(1),
                                             plane = gx.dim(2) * gx.dim(3);
                           for (std::size_t s = 0; s < n; ++s) {
                             const T* src = g.raw() + s * count * plane;
                             T* dst = gx.raw() + (s * c + begin) * plane;
                             for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
                           }
                         });
}

template <typename T>
Var<T> avgpool2(const Var<T>& x) {
  Tensor<T> out = dnet::avgpool2(x.value());
  return x.tape().record(OpKind::AvgPool2, {x.id()}, std::move(out),
                         [in_shape = x.shape()](const Tensor<T>& g, GradAccess<T>& in) {
                           const Tensor<T> d = avgpool2_backward(g, in_shape);
                           Tensor<T>& gx = in[0];
                           for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += d[i];
                         });
}

template <typename T>
Var<T> maxpool2(const Var<T>& x) {
  std::vector<std::size_t> argmax;
  Tensor<T> out = dnet::maxpool2(x.value(), &argmax);
  return x.tape().record(OpKind::MaxPool2, {x.id()}, std::move(out),
                         [argmax = std::move(argmax)](const Tensor<T>& g, GradAccess<T>& in) {
                           Tensor<T>& gx = in[0];
                           for (std::size_t o = 0; o < g.numel(); ++o) gx[argmax[o]] += g[o];
                         });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  Tensor<T> out = dnet::global_avg_pool(x.value());
  return x.tape().record(OpKind::GlobalAvgPool, {x.id()}, std::move(out),
                         [](const Tensor<T>& g, GradAccess<T>& in) {
                           Tensor<T>& gx = in[0];
                           const std::size_t plane = gx.dim(2) * gx.dim(3);
                           const T inv = T{1} / static_cast<T>(plane);
                           for (std::size_t i = 0; i < g.numel(); ++i)
                             for (std::size_t q = 0; q < plane; ++q) gx[i * plane + q] += g[i] * inv;
                         });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = tape_of(a, b);
  const Tensor<T>& x = a.value();
  const Tensor<T>& y = b.value();
  Tensor<T> out = dnet::matmul(x, y);
  return tape.record(OpKind::Matmul, {a.id(), b.id()}, std::move(out),
                     [x, y](const Tensor<T>& g, GradAccess<T>& in) {
                       const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
                       const Tensor<T> yt = transpose2d(y);
                       gemm_accumulate<T>(m, k, n, g.data(), yt.data(), in[0].data());
                       const Tensor<T> xt = transpose2d(x);
                       gemm_accumulate<T>(k, n, m, xt.data(), g.data(), in[1].data());
                     });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  Tape<T>& tape = tape_of(x, w);
  tape_of(x, b);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  const Tensor<T>& bv = b.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(0))
    throw ShapeError("linear: input " + shape_str(xv.shape()) + " vs weight " +
                     shape_str(wv.shape()));
  if (bv.shape() != Shape{wv.dim(1)})
    throw ShapeError("linear: bias " + shape_str(bv.shape()) + " for " +
                     std::to_string(wv.dim(1)) + " outputs");
  Tensor<T> out = dnet::matmul(xv, wv);
  const std::size_t n = out.dim(0), o = out.dim(1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < o; ++j) out[i * o + j] += bv[j];
  return tape.record(OpKind::Linear, {x.id(), w.id(), b.id()}, std::move(out),
                     [xv, wv](const Tensor<T>& g, GradAccess<T>& in) {
                       const std::size_t n = xv.dim(0), f = xv.dim(1), o = wv.dim(1);
                       const Tensor<T> wt = transpose2d(wv);
                       gemm_accumulate<T>(n, f, o, g.data(), wt.data(), in[0].data());
                       const Tensor<T> xt = transpose2d(xv);
                       gemm_accumulate<T>(f, o, n, xt.data(), g.data(), in[1].data());
                       Tensor<T>& gb = in[2];
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < o; ++j) gb[j] += g[i * o + j];
                     });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape().record(OpKind::Reshape, {x.id()}, std::move(out),
                         [](const Tensor<T>& g, GradAccess<T>& in) {
                           Tensor<T>& gx = in[0];
                           for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g[i];
                         });
}

template <typename T>
Var<T> detach(const Var<T>& x) {
  return x.tape().record(OpKind::Detach, {x.id()}, x.value(), nullptr);
}

GradCheckResult grad_check(const Fragment& fragment, std::vector<Tensor<double>>& params,
                           double eps) {
  if (!(eps > 0.0)) throw ShapeError("grad_check: eps must be positive");
  auto evaluate = [&](bool with_grad) -> std::pair<double, std::vector<Tensor<double>>> {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(tape.leaf(p));
    Var<double> loss = fragment(tape, leaves);
    const double value = loss.value()[0];
    std::vector<Tensor<double>> grads;
    if (with_grad) {
      GradStore<double> store = tape.backward(loss);
      for (const auto& leaf : leaves) grads.push_back(store.of(leaf));
    }
    return {value, std::move(grads)};
  };

  auto [base, analytic] = evaluate(true);
  if (!std::isfinite(base)) throw NumericError("grad_check: non-finite loss at base point");

  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].numel(); ++i) {
      const double theta = params[p][i];
      const double h = eps * std::max(1.0, std::abs(theta));
      params[p][i] = theta + h;
      const double up = evaluate(false).first;
      params[p][i] = theta - h;
      const double down = evaluate(false).first;
      params[p][i] = theta;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw NumericError("grad_check: non-finite loss at perturbed point (param " +
                           std::to_string(p) + ", index " + std::to_string(i) + ")");
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p][i];
      const double err =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (err > result.max_rel_err) {
        result.max_rel_err = err;
        result.worst_param = p;
        result.worst_index = i;
      }
      ++result.coordinates;
    }
  }
  return result;
}

#define DNET_INSTANTIATE_AD(T)                                                                \
  template class GradAccess<T>;                                                               \
  template class GradStore<T>;                                                                \
  template class Tape<T>;                                                                     \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                       \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                       \
  template Var<T> scale<T>(const Var<T>&, T);                                                 \
  template Var<T> sum<T>(const Var<T>&);                                                      \
  template Var<T> mean<T>(const Var<T>&);                                                     \
  template Var<T> dot<T>(const Var<T>&, const Tensor<T>&);                                    \
  template Var<T> relu<T>(const Var<T>&);                                                     \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, const ConvSpec&);    \
  template Var<T> concat_channels<T>(std::span<const Var<T>>);                                \
  template Var<T> slice_channels<T>(const Var<T>&, std::size_t, std::size_t);                 \
  template Var<T> avgpool2<T>(const Var<T>&);                                                 \
  template Var<T> maxpool2<T>(const Var<T>&);                                                 \
  template Var<T> global_avg_pool<T>(const Var<T>&);                                          \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                    \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                     \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                           \
  template Var<T> detach<T>(const Var<T>&);

DNET_INSTANTIATE_AD(float)
DNET_INSTANTIATE_AD(double)

#undef DNET_INSTANTIATE_AD

}  // namespace dnet::ad
