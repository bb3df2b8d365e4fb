#include "metaloop/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace metaloop {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Constant: return "constant";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Neg: return "neg";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Square: return "square";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Tanh: return "tanh";
    case OpKind::Relu: return "relu";
    case OpKind::Sin: return "sin";
    case OpKind::Cos: return "cos";
    case OpKind::PowConst: return "pow_const";
    case OpKind::ScalarBroadcast: return "scalar_broadcast";
    case OpKind::Reshape: return "reshape";
    case OpKind::Concat: return "concat";
    case OpKind::IndexSelect: return "index_select";
    case OpKind::ScatterAdd: return "scatter_add";
    case OpKind::StopGradient: return "stop_gradient";
  }
  return "?";
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (values.size() != numel(shape_)) {
    throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape_));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::zeros(Shape shape) {
  std::vector<double> v(numel(shape), 0.0);
  return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::full(Shape shape, double value) {
  std::vector<double> v(numel(shape), value);
  return Tensor(std::move(shape), std::move(v));
}

std::size_t Tensor::size() const { return data_ ? data_->size() : 0; }

std::span<const double> Tensor::values() const {
  if (!data_) throw std::runtime_error("tensor: reading an undefined tensor");
  return {data_->data(), data_->size()};
}

double Tensor::item() const {
  if (size() != 1) {
    throw std::runtime_error("tensor: item() needs exactly one element, shape is " +
                             shape_str(shape_));
  }
  return (*data_)[0];
}

Tensor Tensor::detached() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

TapePtr GradTape::make() { return std::make_shared<GradTape>(); }

const TapeNode& GradTape::at(std::uint32_t id) const {
  if (id >= nodes_.size()) throw std::runtime_error("tape: bad node id");
  return nodes_[id];
}

Tensor GradTape::append(OpKind kind, Shape shape,
                        std::shared_ptr<const std::vector<double>> value,
                        std::vector<std::uint32_t> inputs, OpAttrs attrs) {
  TapeNode node;
  node.kind = kind;
  node.shape = shape;
  node.value = value;
  node.inputs = std::move(inputs);
  node.attrs = std::move(attrs);
  nodes_.push_back(std::move(node));

  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(value);
  t.tape_ = shared_from_this();
  t.node_ = static_cast<std::uint32_t>(nodes_.size() - 1);
  return t;
}

Tensor GradTape::leaf(const Tensor& value) {
  if (!value.defined()) throw std::invalid_argument("tape: leaf of undefined tensor");
  return append(OpKind::Leaf, value.shape(), value.data_, {}, {});
}

Tensor GradTape::intern_constant(const Tensor& constant) {
  return append(OpKind::Constant, constant.shape(), constant.data_, {}, {});
}

Tensor GradTape::tensor_at(std::uint32_t id) {
  const TapeNode& n = at(id);
  Tensor t;
  t.shape_ = n.shape;
  t.data_ = n.value;
  t.tape_ = shared_from_this();
  t.node_ = id;
  return t;
}

}  // namespace metaloop
