#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dnet/kernels.hpp"
#include "dnet/tensor.hpp"

namespace dnet::ad {

enum class OpKind : std::uint8_t {
  Leaf,
  Add,
  Mul,
  Scale,
  Sum,
  Mean,
  Dot,
  Relu,
  Conv2d,
  Concat,
  Slice,
  BatchNorm,
  AvgPool2,
  MaxPool2,
  GlobalAvgPool,
  Matmul,
  Linear,
  Reshape,
  Detach,
  Loss,
};

const char* op_name(OpKind op);

using NodeId = std::size_t;

template <typename T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, NodeId id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  NodeId id() const { return id_; }
  Tape<T>& tape() const;
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<T>* tape_ = nullptr;
  NodeId id_ = 0;
};

/// Gradient slots of one node's inputs, handed to its backward function.
/// Slots are created as zeros on first access and accumulate additively.
template <typename T>
class GradAccess {
 public:
  GradAccess(const Tape<T>& tape, std::span<const NodeId> inputs,
             std::vector<std::optional<Tensor<T>>>& grads)
      : tape_(tape), inputs_(inputs), grads_(grads) {}

  Tensor<T>& operator[](std::size_t k);

 private:
  const Tape<T>& tape_;
  std::span<const NodeId> inputs_;
  std::vector<std::optional<Tensor<T>>>& grads_;
};

template <typename T>
using BackwardFn = std::function<void(const Tensor<T>& grad_out, GradAccess<T>& inputs)>;

template <typename T>
struct TapeNode {
  OpKind op = OpKind::Leaf;
  std::vector<NodeId> inputs;
  Tensor<T> output;
  /// Closure over the op's saved forward context (masks, patch columns, ...).
  BackwardFn<T> backward;
  /// Non-empty for named leaves (model parameters).
  std::string name;
};

/// Result of a reverse sweep: gradients per node and per named leaf.
template <typename T>
class GradStore {
 public:
  /// nullptr when the node does not influence the loss.
  const Tensor<T>* find(NodeId id) const;
  /// Gradient of `v`; zeros when `v` does not influence the loss.
  Tensor<T> of(const Var<T>& v) const;
  const Tensor<T>& param(const std::string& name) const;
  bool has_param(const std::string& name) const { return params_.count(name) != 0; }
  const std::map<std::string, Tensor<T>>& params() const { return params_; }

 private:
  friend class Tape<T>;
  std::vector<std::optional<Tensor<T>>> nodes_;
  std::vector<Shape> shapes_;
  std::map<std::string, Tensor<T>> params_;
};

/// Define-by-run record of tensor operations in topological order.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf node. Named leaves are reported by name in the GradStore and must
  /// be unique on a tape.
  Var<T> leaf(Tensor<T> value, std::string name = {});

  /// Appends a node; every input must already be on this tape.
  Var<T> record(OpKind op, std::vector<NodeId> inputs, Tensor<T> output,
                BackwardFn<T> backward);

  const TapeNode<T>& node(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a single-element loss node.
  GradStore<T> backward(const Var<T>& loss) const;

 private:
  std::deque<TapeNode<T>> nodes_;
  std::map<std::string, NodeId> names_;
};

template <typename T>
Tape<T>& Var<T>::tape() const {
  if (!tape_) throw ShapeError("Var: not attached to a tape");
  return *tape_;
}

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape().node(id_).output;
}

// Differentiable operations. Shapes follow the tensor kernels.

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T factor);
template <typename T>
Var<T> sum(const Var<T>& a);
template <typename T>
Var<T> mean(const Var<T>& a);
/// Σ a ⊙ weights for a constant weight tensor of a's shape.
template <typename T>
Var<T> dot(const Var<T>& a, const Tensor<T>& weights);
/// Subgradient at exactly 0 is 0.
template <typename T>
Var<T> relu(const Var<T>& x);
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvSpec& spec);
template <typename T>
Var<T> concat_channels(std::span<const Var<T>> parts);
template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t count);
template <typename T>
Var<T> avgpool2(const Var<T>& x);
template <typename T>
Var<T> maxpool2(const Var<T>& x);
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// x[N x F] * w[F x O] + b[O].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);
/// Forward identity that blocks gradient flow.
template <typename T>
Var<T> detach(const Var<T>& x);

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

/// Builds a scalar loss from leaves bound to the given parameter tensors.
using Fragment =
    std::function<Var<double>(Tape<double>& tape, std::span<const Var<double>> params)>;

/// Compares backward() against central differences with step
/// eps * max(1, |theta|) on every coordinate of every parameter. The error of
/// a coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
GradCheckResult grad_check(const Fragment& fragment, std::vector<Tensor<double>>& params,
                           double eps = 1e-4);

}  // namespace dnet::ad
