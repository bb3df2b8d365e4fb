#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace metaloop {

// Dense row-major shapes. Rank 0 (empty shape) is a scalar with one element;
// an extent of zero makes the tensor empty.
using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool same_shape(const Shape& a, const Shape& b);

class GradTape;
using TapePtr = std::shared_ptr<GradTape>;

// Primitive operation kinds recorded on the tape. Everything the library
// differentiates is built from these.
enum class OpKind : std::uint8_t {
  Leaf,       // explicitly watched value
  Constant,   // interned constant operand
  Add, Sub, Mul, Div, Neg,
  MatMul, Transpose,
  Sum, Mean,
  Square, Sqrt, Exp, Log, Tanh, Relu, Sin, Cos,
  PowConst,        // elementwise x^p for a fixed real p
  ScalarBroadcast, // fill a target shape from a one-element tensor
  Reshape,
  Concat,          // along a fixed axis
  IndexSelect,     // gather slices along an axis
  ScatterAdd,      // adjoint partner of IndexSelect
  StopGradient,    // value-identical, blocks gradient flow
};

const char* op_name(OpKind kind);

// Operation parameters beyond the input tensors. Which fields are meaningful
// depends on the kind; unused fields are ignored.
struct OpAttrs {
  double scalar = 0.0;               // PowConst exponent
  std::size_t axis = 0;              // Concat / IndexSelect / ScatterAdd
  std::vector<std::size_t> indices;  // IndexSelect / ScatterAdd
  std::size_t extent = 0;            // ScatterAdd: target extent along axis
  Shape shape;                       // Reshape / ScalarBroadcast target
};

/// Immutable tensor of 64-bit reals. A Tensor is either a free-standing
/// constant or a lightweight handle to a node on a GradTape; either way the
/// underlying storage is never mutated after construction.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);  // constant tensor

  static Tensor scalar(double v);        // shape {}, one element
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);

  const Shape& shape() const { return shape_; }
  std::size_t size() const;              // element count
  std::span<const double> values() const;
  double item() const;                   // requires exactly one element
  bool defined() const { return data_ != nullptr; }

  bool on_tape() const { return tape_ != nullptr; }
  const TapePtr& tape() const { return tape_; }
  std::uint32_t node() const { return node_; }

  /// Constant tensor sharing the same storage, unhooked from any tape.
  Tensor detached() const;

 private:
  friend class GradTape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  TapePtr tape_;
  std::uint32_t node_ = 0;
};

struct TapeNode {
  OpKind kind = OpKind::Constant;
  Shape shape;
  std::shared_ptr<const std::vector<double>> value;  // forward value, always kept
  std::vector<std::uint32_t> inputs;
  OpAttrs attrs;
};

/// Append-only operation record. Node ids are assigned in program order, so
/// every node's inputs have smaller ids than the node itself; gradient sweeps
/// walk ids in reverse. A tape and the tensors referring to it belong to one
/// unit of work (one training step, one unrolled run) and are dropped
/// together.
class GradTape : public std::enable_shared_from_this<GradTape> {
 public:
  static TapePtr make();

  std::size_t size() const { return nodes_.size(); }
  const TapeNode& at(std::uint32_t id) const;

  /// Register a watched value. Gradients can be requested with respect to the
  /// returned tensor.
  Tensor leaf(const Tensor& value);

  /// Handle to an existing node.
  Tensor tensor_at(std::uint32_t id);

  // Used by apply(); appends a node and returns its handle.
  Tensor append(OpKind kind, Shape shape,
                std::shared_ptr<const std::vector<double>> value,
                std::vector<std::uint32_t> inputs, OpAttrs attrs);

  /// Intern a constant operand as a node so downstream rules can refer to it.
  Tensor intern_constant(const Tensor& constant);

 private:
  std::vector<TapeNode> nodes_;
};

}  // namespace metaloop
