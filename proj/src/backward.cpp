#include <cmath>
#include <optional>
#include <stdexcept>
#include <unordered_set>

#include "metaloop/ops.hpp"

namespace metaloop {

namespace {

// Snapshot of a node's bookkeeping. The tape vector may reallocate while
// gradient rules append new nodes, so never hold a TapeNode reference across
// an apply(); copy what is needed first.
struct NodeView {
  OpKind kind;
  Shape shape;
  std::vector<std::uint32_t> inputs;
  OpAttrs attrs;
};

NodeView view(GradTape& tape, std::uint32_t id) {
  const TapeNode& n = tape.at(id);
  return {n.kind, n.shape, n.inputs, n.attrs};
}

// Per-input gradient contribution for one node. `g` is the upstream adjoint
// (same shape as the node's output). Returns an empty optional when the
// contribution is identically zero.
std::optional<Tensor> vjp(GradTape& tape, const NodeView& node,
                          std::uint32_t node_id, std::size_t input_index,
                          const Tensor& g) {
  auto in = [&](std::size_t i) { return tape.tensor_at(node.inputs[i]); };
  auto out = [&] { return tape.tensor_at(node_id); };

  switch (node.kind) {
    case OpKind::Leaf:
    case OpKind::Constant:
    case OpKind::StopGradient:
      return std::nullopt;

    case OpKind::Add:
      return g;
    case OpKind::Sub:
      return input_index == 0 ? g : neg(g);
    case OpKind::Mul:
      return mul(g, in(1 - input_index));
    case OpKind::Div:
      if (input_index == 0) return div(g, in(1));
      return neg(div(mul(g, in(0)), square(in(1))));
    case OpKind::Neg:
      return neg(g);

    case OpKind::MatMul:
      if (input_index == 0) return matmul(g, transpose(in(1)));
      return matmul(transpose(in(0)), g);
    case OpKind::Transpose:
      return transpose(g);

    case OpKind::Sum:
      return scalar_broadcast(g, tape.at(node.inputs[0]).shape);
    case OpKind::Mean: {
      const Shape in_shape = tape.at(node.inputs[0]).shape;
      const double n = static_cast<double>(numel(in_shape));
      return scalar_broadcast(scale(g, 1.0 / n), in_shape);
    }

    case OpKind::Square:
      return mul(g, scale(in(0), 2.0));
    case OpKind::Sqrt:
      return div(g, scale(out(), 2.0));
    case OpKind::Exp:
      return mul(g, out());
    case OpKind::Log:
      return div(g, in(0));
    case OpKind::Tanh: {
      const Tensor o = out();
      const Tensor ones = scalar_broadcast(Tensor::scalar(1.0), o.shape());
      return mul(g, sub(ones, square(o)));
    }
    case OpKind::Relu: {
      // Constant 0/1 mask; the slope at exactly 0 is taken as 0.
      const Tensor a = in(0);
      std::vector<double> mask(a.size());
      auto v = a.values();
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = v[i] > 0.0 ? 1.0 : 0.0;
      return mul(g, Tensor(a.shape(), std::move(mask)));
    }
    case OpKind::Sin:
      return mul(g, cos_(in(0)));
    case OpKind::Cos:
      return neg(mul(g, sin_(in(0))));

    case OpKind::PowConst: {
      const double p = node.attrs.scalar;
      if (p == 0.0) return std::nullopt;
      return scale(mul(g, pow_const(in(0), p - 1.0)), p);
    }

    case OpKind::ScalarBroadcast:
      return reshape(sum(g), tape.at(node.inputs[0]).shape);
    case OpKind::Reshape:
      return reshape(g, tape.at(node.inputs[0]).shape);

    case OpKind::Concat: {
      std::size_t offset = 0;
      for (std::size_t i = 0; i < input_index; ++i) {
        offset += tape.at(node.inputs[i]).shape[node.attrs.axis];
      }
      const std::size_t extent =
          tape.at(node.inputs[input_index]).shape[node.attrs.axis];
      std::vector<std::size_t> range(extent);
      for (std::size_t i = 0; i < extent; ++i) range[i] = offset + i;
      return index_select(g, node.attrs.axis, std::move(range));
    }
    case OpKind::IndexSelect: {
      const std::size_t extent =
          tape.at(node.inputs[0]).shape[node.attrs.axis];
      return scatter_add(g, node.attrs.axis, node.attrs.indices, extent);
    }
    case OpKind::ScatterAdd:
      return index_select(g, node.attrs.axis, node.attrs.indices);
  }
  throw std::logic_error("vjp: unhandled kind");
}

}  // namespace

BackwardResult backward(const Tensor& output, std::span<const Tensor> wrt,
                        const BackwardOptions& opts) {
  if (!output.on_tape()) {
    throw std::invalid_argument("backward: output is not on a tape");
  }
  if (output.size() != 1) {
    throw std::invalid_argument("backward: output must have one element, shape is " +
                                shape_str(output.shape()));
  }
  const TapePtr tape = output.tape();
  for (const Tensor& t : wrt) {
    if (!t.on_tape() || t.tape() != tape) {
      throw std::invalid_argument("backward: wrt tensor is not on the output's tape");
    }
  }
  for (const Tensor& t : opts.barriers) {
    if (!t.on_tape() || t.tape() != tape) {
      throw std::invalid_argument("backward: barrier tensor is not on the output's tape");
    }
  }

  const std::uint32_t out_id = output.node();
  std::unordered_set<std::uint32_t> barrier_ids;
  for (const Tensor& t : opts.barriers) barrier_ids.insert(t.node());

  // Which nodes can still lead down to a requested tensor? Propagating
  // adjoints anywhere else is wasted work.
  std::vector<char> useful(out_id + 1, 0);
  for (const Tensor& t : wrt) {
    if (t.node() <= out_id) useful[t.node()] = 1;
  }
  for (std::uint32_t id = 0; id <= out_id; ++id) {
    if (useful[id]) continue;
    for (std::uint32_t inp : tape->at(id).inputs) {
      if (useful[inp]) {
        useful[id] = 1;
        break;
      }
    }
  }

  // Gradient-route reachability, for the diagnostics: `live` respects
  // stop_gradient blocks, `anyp` walks through them.
  std::vector<char> live(out_id + 1, 0), anyp(out_id + 1, 0);
  live[out_id] = anyp[out_id] = 1;
  for (std::uint32_t id = out_id + 1; id-- > 0;) {
    const bool barrier = barrier_ids.count(id) > 0;
    if (anyp[id] && !barrier) {
      for (std::uint32_t inp : tape->at(id).inputs) anyp[inp] = 1;
    }
    if (live[id] && !barrier && tape->at(id).kind != OpKind::StopGradient) {
      for (std::uint32_t inp : tape->at(id).inputs) live[inp] = 1;
    }
  }

  // Reverse sweep. Adjoints are built with the same primitives as the
  // forward values, so with create_graph they remain differentiable.
  std::vector<std::optional<Tensor>> adj(out_id + 1);
  adj[out_id] = Tensor::full(output.shape(), 1.0);
  for (std::uint32_t id = out_id + 1; id-- > 0;) {
    if (!adj[id].has_value()) continue;
    if (barrier_ids.count(id)) continue;
    const NodeView node = view(*tape, id);
    if (node.kind == OpKind::StopGradient) continue;
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      const std::uint32_t inp = node.inputs[i];
      if (!useful[inp]) continue;
      std::optional<Tensor> contrib = vjp(*tape, node, id, i, *adj[id]);
      if (!contrib) continue;
      if (adj[inp].has_value()) {
        adj[inp] = add(*adj[inp], *contrib);
      } else {
        adj[inp] = std::move(*contrib);
      }
    }
  }

  BackwardResult result;
  result.grads.reserve(wrt.size());
  result.diag.unreachable.reserve(wrt.size());
  result.diag.detached.reserve(wrt.size());
  for (const Tensor& t : wrt) {
    const std::uint32_t id = t.node();
    const bool reachable = id <= out_id && live[id];
    result.diag.unreachable.push_back(!reachable);
    result.diag.detached.push_back(!reachable && id <= out_id && anyp[id]);
    if (id <= out_id && adj[id].has_value()) {
      result.grads.push_back(opts.create_graph ? *adj[id] : adj[id]->detached());
    } else {
      result.grads.push_back(Tensor::zeros(t.shape()));
    }
  }
  return result;
}

bool path_exists(GradTape& tape, std::uint32_t from, std::uint32_t to,
                 bool through_stops) {
  if (from > to) return false;
  std::vector<char> seen(to + 1, 0);
  seen[to] = 1;
  for (std::uint32_t id = to + 1; id-- > 0;) {
    if (!seen[id]) continue;
    if (!through_stops && tape.at(id).kind == OpKind::StopGradient) continue;
    for (std::uint32_t inp : tape.at(id).inputs) seen[inp] = 1;
  }
  return seen[from] != 0;
}

}  // namespace metaloop
