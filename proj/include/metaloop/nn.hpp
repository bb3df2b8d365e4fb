#pragma once

#include <span>
#include <string>
#include <vector>

#include "metaloop/ops.hpp"
#include "metaloop/rng.hpp"

namespace metaloop {

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct ParamGroup {
  std::string name;
  std::vector<NamedTensor> tensors;
};

/// Named, grouped collection of tensors: model parameters, optimizer slots,
/// meta-parameters. Groups exist so anything keyed per group (one learning
/// rate per layer, say) has a stable unit to attach to.
class ParameterSet {
 public:
  ParameterSet() = default;
  explicit ParameterSet(std::vector<ParamGroup> groups);

  std::size_t group_count() const { return groups_.size(); }
  const std::vector<ParamGroup>& groups() const { return groups_; }
  ParamGroup& group(std::size_t i) { return groups_.at(i); }
  const ParamGroup& group(std::size_t i) const { return groups_.at(i); }

  void add_group(ParamGroup g) { groups_.push_back(std::move(g)); }

  const Tensor& find(const std::string& group, const std::string& name) const;

  std::size_t tensor_count() const;
  std::size_t value_count() const;  // total scalar entries

  /// Tensors in declaration order (group-major). Rebuilding with the same
  /// order round-trips.
  std::vector<Tensor> flat() const;

  /// Same group/tensor structure, values taken from `tensors` in flat order.
  ParameterSet with_flat(std::span<const Tensor> tensors) const;

  ParameterSet detached() const;

  /// Register every tensor as a leaf on the tape (values unchanged).
  ParameterSet attached(const TapePtr& tape) const;

  bool same_structure(const ParameterSet& other) const;

 private:
  std::vector<ParamGroup> groups_;
};

enum class Activation { Tanh, Relu };

/// Fully connected net: widths[0] inputs through widths.back() outputs, the
/// chosen activation on every hidden layer, linear output.
struct ModelSpec {
  std::vector<std::size_t> widths;
  Activation activation = Activation::Tanh;
};

/// One parameter group per layer ("layer0", "layer1", ...), weights "w" of
/// shape [fan_in, fan_out] drawn uniformly from ±sqrt(1/fan_in), biases "b"
/// zero.
ParameterSet init_params(const ModelSpec& spec, Rng& rng);

/// Forward pass for a batch x of shape [n, widths[0]]; returns
/// [n, widths.back()].
Tensor forward(const ModelSpec& spec, const ParameterSet& params,
               const Tensor& x);

/// Mean squared error over all entries; shapes must match exactly.
Tensor mse_loss(const Tensor& prediction, const Tensor& target);

/// Learnable loss: a small head on the per-sample residual features
/// (e, e^2) with e = prediction - target, plus a quadratic term whose
/// coefficient is squared so the surface stays bounded below when the head
/// vanishes:
///   sample loss = uq^2 * e^2 + w2 . tanh(W1 f + b1) + b2,  f = (e, e^2)
/// Parameter order: W1 [2,h], b1 [h], w2 [h,1], b2 [1], uq [] .
Tensor parametric_loss(std::span<const Tensor> phi_loss,
                       const Tensor& prediction, const Tensor& target);

/// Parameters that make parametric_loss coincide with mse_loss exactly:
/// random first layer, zeroed head, uq = 1. The head being zero keeps the
/// value equal to squared error while leaving the feature layer trainable.
std::vector<Tensor> learned_loss_mse_init(std::size_t hidden, Rng& rng);

/// Every parameter zero: the loss is constant, inner gradients vanish, and
/// so do the mixed parameter/loss second derivatives — a degenerate fixed
/// point that meta-training cannot escape (useful as a probe).
std::vector<Tensor> learned_loss_zero_init(std::size_t hidden, Rng& rng);

}  // namespace metaloop
