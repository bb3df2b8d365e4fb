#pragma once

#include <functional>
#include <span>

#include "metaloop/tensor.hpp"

namespace metaloop {

// Evaluate one primitive on raw values. Shared by apply() and by tests that
// replay a tape; has no tape side effects.
std::pair<Shape, std::vector<double>> eval_op(
    OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs);

/// Apply a primitive. If `tape` is non-null the result is recorded; constant
/// inputs are interned onto the tape first. With a null tape all inputs must
/// be constants and the result is a constant (plain evaluation).
/// All taped inputs must live on the same tape.
Tensor apply(OpKind kind, std::span<const Tensor> inputs, const TapePtr& tape,
             OpAttrs attrs = {});

// Wrappers. The tape is inferred from the operands: if any operand is taped,
// the result is recorded on that tape, otherwise the operation is evaluated
// as a constant.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);   // strictly 2-D x 2-D
Tensor transpose(const Tensor& a);                 // 2-D
Tensor sum(const Tensor& a);                       // full reduction -> scalar
Tensor mean(const Tensor& a);                      // full reduction -> scalar
Tensor square(const Tensor& a);
Tensor sqrt_(const Tensor& a);
Tensor exp_(const Tensor& a);
Tensor log_(const Tensor& a);
Tensor tanh_(const Tensor& a);
Tensor relu(const Tensor& a);                      // slope at 0 is 0
Tensor sin_(const Tensor& a);
Tensor cos_(const Tensor& a);
Tensor pow_const(const Tensor& a, double p);
Tensor scalar_broadcast(const Tensor& s, Shape shape);  // s has one element
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor index_select(const Tensor& a, std::size_t axis,
                    std::vector<std::size_t> indices);
Tensor scatter_add(const Tensor& src, std::size_t axis,
                   std::vector<std::size_t> indices, std::size_t extent);

/// Value-identical to x; exactly zero gradient flows through it.
Tensor stop_gradient(const Tensor& x);

// Composite helpers (built from primitives, differentiable).
Tensor scale(const Tensor& a, double k);          // a * k elementwise
Tensor add_const(const Tensor& a, double k);      // a + k elementwise
Tensor softplus(const Tensor& a);                 // log(1 + exp(a))
Tensor sigmoid(const Tensor& a);                  // 1 / (1 + exp(-a))
Tensor dot(const Tensor& a, const Tensor& b);     // sum(a * b), same shape

struct BackwardOptions {
  /// Record the gradient computation itself so results can be differentiated
  /// again. When false the returned tensors are detached constants.
  bool create_graph = false;
  /// Nodes at which the sweep records an adjoint but does not continue into
  /// the node's own inputs. Used to take partial derivatives "at" an
  /// intermediate value while freezing everything it was computed from.
  std::vector<Tensor> barriers;
};

struct BackwardDiagnostics {
  /// Entry i is true when no gradient route from the output reaches wrt[i]
  /// (the returned gradient is exact zeros).
  std::vector<bool> unreachable;
  /// Entry i is true when a value route exists but every gradient route
  /// crosses a stop_gradient, i.e. the zero gradient is an intentional
  /// detach rather than structural independence.
  std::vector<bool> detached;
};

struct BackwardResult {
  std::vector<Tensor> grads;  // aligned with wrt; zeros when unreachable
  BackwardDiagnostics diag;
};

/// Reverse-mode sweep from a one-element output to the requested tensors.
/// Every wrt tensor must live on the output's tape. Gradient rules are built
/// from the same primitives as the forward pass, which is what makes
/// higher-order derivatives possible: with create_graph the returned
/// gradients are taped tensors that can be differentiated again.
/// Running backward never invalidates the tape; calling it twice gives
/// identical results.
BackwardResult backward(const Tensor& output, std::span<const Tensor> wrt,
                        const BackwardOptions& opts = {});

/// Is there a route from `from` up to `to` along recorded operations?
/// With `through_stops` false, stop_gradient nodes block the route the same
/// way they block gradients.
bool path_exists(GradTape& tape, std::uint32_t from, std::uint32_t to,
                 bool through_stops);

}  // namespace metaloop
