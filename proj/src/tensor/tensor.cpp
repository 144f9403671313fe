#include "tail/tensor.hpp"

#include <sstream>

namespace tail {

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

constexpr std::pair<OpKind, std::string_view> kOpNames[] = {
    {OpKind::leaf, "leaf"},
    {OpKind::matmul, "matmul"},
    {OpKind::add, "add"},
    {OpKind::mul, "mul"},
    {OpKind::sub, "sub"},
    {OpKind::scale, "scale"},
    {OpKind::concat, "concat"},
    {OpKind::slice, "slice"},
    {OpKind::reshape, "reshape"},
    {OpKind::transpose, "transpose"},
    {OpKind::softmax, "softmax"},
    {OpKind::layer_norm, "layer_norm"},
    {OpKind::gelu, "gelu"},
    {OpKind::tanh, "tanh"},
    {OpKind::exp, "exp"},
    {OpKind::log, "log"},
    {OpKind::sum, "sum"},
    {OpKind::mean, "mean"},
    {OpKind::embedding_lookup, "embedding_lookup"},
    {OpKind::dropout, "dropout"},
    {OpKind::masked_fill, "masked_fill"},
    {OpKind::softplus, "softplus"},
    {OpKind::logsumexp, "logsumexp"},
};

}  // namespace

std::string_view op_name(OpKind kind) {
  for (const auto& [k, name] : kOpNames)
    if (k == kind) return name;
  return "unknown";
}

OpKind op_kind_from_name(std::string_view name) {
  for (const auto& [k, n] : kOpNames)
    if (n == name && k != OpKind::leaf) return k;
  throw std::invalid_argument("unknown op kind '" + std::string(name) + "'");
}

// ---- Tensor ------------------------------------------------------------------

Tensor::Tensor(Shape shape, Vec data) : shape_(std::move(shape)) {
  for (Index d : shape_)
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape_));
  if (tail::numel(shape_) != data.size())
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + to_string(shape_));
  data_ = std::make_shared<const Vec>(std::move(data));
}

Tensor::Tensor(Shape shape) : Tensor(shape, Vec::Zero(tail::numel(shape))) {}

Tensor Tensor::scalar(double v) { return Tensor({}, Vec::Constant(1, v)); }

Tensor Tensor::full(Shape shape, double v) {
  const Index n = tail::numel(shape);
  return Tensor(std::move(shape), Vec::Constant(n, v));
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const Index r = static_cast<Index>(rows.size());
  const Index c = r ? static_cast<Index>(rows.begin()->size()) : 0;
  Vec v(r * c);
  Index i = 0;
  for (const auto& row : rows) {
    if (static_cast<Index>(row.size()) != c) throw ShapeError("ragged rows in from_rows");
    for (double x : row) v[i++] = x;
  }
  return Tensor({r, c}, std::move(v));
}

Tensor Tensor::from_vector(std::initializer_list<double> values) {
  Vec v(static_cast<Index>(values.size()));
  Index i = 0;
  for (double x : values) v[i++] = x;
  const Index n = v.size();
  return Tensor({n}, std::move(v));
}

Index Tensor::dim(Index axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw ShapeError("axis out of range for shape " + to_string(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor of shape " + to_string(shape_));
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor t = *this;
  t.tape_ = nullptr;
  t.node_ = -1;
  return t;
}

// ---- Tape --------------------------------------------------------------------

const Vec* Gradients::of(const Tensor& t) const {
  if (t.node() < 0 || static_cast<std::size_t>(t.node()) >= grads_.size()) return nullptr;
  const Vec& g = grads_[static_cast<std::size_t>(t.node())];
  return g.size() ? &g : nullptr;
}

Tensor Tape::variable(const Tensor& value) {
  if (consumed_) throw AutogradError("tape already consumed by backward(); call reset()");
  Tensor t = value.detach();
  t.tape_ = this;
  t.node_ = static_cast<NodeId>(nodes_.size());
  nodes_.push_back(Node{OpKind::leaf, {}, t.numel(), nullptr});
  return t;
}

Tensor Tape::record(OpKind kind, Shape shape, Vec data, std::span<const Tensor> inputs,
                    Backward backward) {
  Tape* tape = nullptr;
  for (const Tensor& in : inputs) {
    if (!in.tape_) continue;
    if (tape && tape != in.tape_)
      throw AutogradError(std::string(op_name(kind)) + ": inputs recorded on different tapes");
    tape = in.tape_;
  }
  Tensor out(std::move(shape), std::move(data));
  if (!tape) return out;
  if (tape->consumed_) throw AutogradError("tape already consumed by backward(); call reset()");
  Node node{kind, {}, out.numel(), std::move(backward)};
  node.inputs.reserve(inputs.size());
  for (const Tensor& in : inputs) node.inputs.push_back(in.tape_ ? in.node_ : -1);
  out.tape_ = tape;
  out.node_ = static_cast<NodeId>(tape->nodes_.size());
  tape->nodes_.push_back(std::move(node));
  return out;
}

Gradients Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw AutogradError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
  if (loss.tape_ != this) throw AutogradError("loss is not recorded on this tape");
  if (consumed_) throw AutogradError("backward already called on this tape; call reset()");
  consumed_ = true;

  std::vector<Vec> grads(nodes_.size());
  grads[static_cast<std::size_t>(loss.node_)] = Vec::Ones(1);
  std::vector<Vec*> ptrs;
  for (NodeId i = loss.node_; i >= 0; --i) {
    auto& g = grads[static_cast<std::size_t>(i)];
    if (!g.size()) continue;
    Node& node = nodes_[static_cast<std::size_t>(i)];
    if (node.kind == OpKind::leaf) continue;
    ptrs.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const NodeId in = node.inputs[k];
      if (in < 0) continue;
      auto& gi = grads[static_cast<std::size_t>(in)];
      if (!gi.size()) gi = Vec::Zero(nodes_[static_cast<std::size_t>(in)].numel);
      ptrs[k] = &gi;
    }
    node.backward(g, ptrs);
    // Intermediate gradients are not kept; only leaves are queried.
    g = Vec();
    node.backward = nullptr;
  }
  return Gradients(std::move(grads));
}

void Tape::reset() {
  nodes_.clear();
  consumed_ = false;
}

// ---- hashing -----------------------------------------------------------------

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) { return mix64(a ^ mix64(b)); }

}  // namespace tail
