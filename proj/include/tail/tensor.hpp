#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tail {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Vec = Eigen::VectorXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

enum class OpKind {
  leaf,
  matmul,
  add,
  mul,
  sub,
  scale,
  concat,
  slice,
  reshape,
  transpose,
  softmax,
  layer_norm,
  gelu,
  tanh,
  exp,
  log,
  sum,
  mean,
  embedding_lookup,
  dropout,
  masked_fill,
  softplus,
  logsumexp,
};

std::string_view op_name(OpKind kind);
// Throws std::invalid_argument for names outside the op set.
OpKind op_kind_from_name(std::string_view name);

class Tape;
using NodeId = std::int64_t;

// Immutable dense row-major value. A tensor produced from inputs that require
// grad carries a reference to the tape that recorded it.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Vec data);
  explicit Tensor(Shape shape);  // zeros

  static Tensor scalar(double v);
  static Tensor full(Shape shape, double v);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor from_vector(std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const;
  Index numel() const { return data_ ? data_->size() : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  const Vec& values() const { return *data_; }
  const double* data() const { return data_->data(); }
  double operator[](Index i) const { return (*data_)[i]; }
  double item() const;

  bool requires_grad() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  NodeId node() const { return node_; }

  // Same data, no tape reference.
  Tensor detach() const;

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const Vec> data_;
  Tape* tape_ = nullptr;
  NodeId node_ = -1;
};

// Gradients for every node reached during a backward pass.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Vec> grads) : grads_(std::move(grads)) {}
  // nullptr when the tensor was not reached from the loss.
  const Vec* of(const Tensor& t) const;

 private:
  std::vector<Vec> grads_;
};

// Single-threaded record of differentiable operations, in creation order.
class Tape {
 public:
  using Backward = std::function<void(const Vec& grad_out, std::span<Vec* const> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor variable(const Tensor& value);
  Gradients backward(const Tensor& loss);
  void reset();

  std::size_t size() const { return nodes_.size(); }
  OpKind kind(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).kind; }
  const std::vector<NodeId>& inputs(NodeId id) const {
    return nodes_.at(static_cast<std::size_t>(id)).inputs;
  }

  // Used by op implementations.
  static Tensor record(OpKind kind, Shape shape, Vec data, std::span<const Tensor> inputs,
                       Backward backward);

 private:
  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    Index numel;
    Backward backward;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Dropout mask stream keyed by (seed, step, site). The same key always
// yields the same mask.
struct DropoutKey {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t site = 0;
};

std::uint64_t mix64(std::uint64_t x);
std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b);

// ---- ops -------------------------------------------------------------------
// Elementwise binary ops accept equal shapes or leading-batch expansion (one
// operand's shape is a suffix of the other's). Everything else is a ShapeError.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor concat(std::span<const Tensor> parts, Index axis);
Tensor slice(const Tensor& a, Index axis, Index begin, Index end);
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);  // swaps the last two axes
Tensor transpose(const Tensor& a, std::span<const Index> perm);
Tensor softmax(const Tensor& a, Index axis);
Tensor logsumexp(const Tensor& a, Index axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor gelu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor sum(const Tensor& a, Index axis);
Tensor sum(const Tensor& a);  // all elements, rank-0 result
Tensor mean(const Tensor& a, Index axis);
Tensor mean(const Tensor& a);
Tensor embedding_lookup(const Tensor& table, std::span<const Index> rows);
Tensor dropout(const Tensor& a, double p, const DropoutKey& key, bool train);
Tensor masked_fill(const Tensor& a, const Tensor& mask, double value);

inline Tensor concat(std::initializer_list<Tensor> parts, Index axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

// Generic dispatcher over the op set. Attributes not used by a kind are ignored.
struct OpAttrs {
  Index axis = -1;
  Index begin = 0;
  Index end = 0;
  double value = 0.0;
  double eps = 1e-5;
  Shape shape;
  std::vector<Index> indices;
  DropoutKey key;
  bool train = false;
};
Tensor forward_op(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

}  // namespace tail
