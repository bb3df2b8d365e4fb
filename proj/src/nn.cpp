#include "metaloop/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace metaloop {

ParameterSet::ParameterSet(std::vector<ParamGroup> groups)
    : groups_(std::move(groups)) {}

const Tensor& ParameterSet::find(const std::string& group,
                                 const std::string& name) const {
  for (const ParamGroup& g : groups_) {
    if (g.name != group) continue;
    for (const NamedTensor& t : g.tensors) {
      if (t.name == name) return t.value;
    }
  }
  throw std::out_of_range("parameter set: no tensor " + group + "/" + name);
}

std::size_t ParameterSet::tensor_count() const {
  std::size_t n = 0;
  for (const ParamGroup& g : groups_) n += g.tensors.size();
  return n;
}

std::size_t ParameterSet::value_count() const {
  std::size_t n = 0;
  for (const ParamGroup& g : groups_)
    for (const NamedTensor& t : g.tensors) n += t.value.size();
  return n;
}

std::vector<Tensor> ParameterSet::flat() const {
  std::vector<Tensor> out;
  out.reserve(tensor_count());
  for (const ParamGroup& g : groups_)
    for (const NamedTensor& t : g.tensors) out.push_back(t.value);
  return out;
}

ParameterSet ParameterSet::with_flat(std::span<const Tensor> tensors) const {
  if (tensors.size() != tensor_count()) {
    throw std::invalid_argument("parameter set: flat list has " +
                                std::to_string(tensors.size()) + " tensors, need " +
                                std::to_string(tensor_count()));
  }
  ParameterSet out = *this;
  std::size_t i = 0;
  for (ParamGroup& g : out.groups_)
    for (NamedTensor& t : g.tensors) {
      if (!same_shape(t.value.shape(), tensors[i].shape())) {
        throw std::invalid_argument("parameter set: shape changed for " + g.name +
                                    "/" + t.name);
      }
      t.value = tensors[i++];
    }
  return out;
}

ParameterSet ParameterSet::detached() const {
  ParameterSet out = *this;
  for (ParamGroup& g : out.groups_)
    for (NamedTensor& t : g.tensors) t.value = t.value.detached();
  return out;
}

ParameterSet ParameterSet::attached(const TapePtr& tape) const {
  ParameterSet out = *this;
  for (ParamGroup& g : out.groups_)
    for (NamedTensor& t : g.tensors) t.value = tape->leaf(t.value.detached());
  return out;
}

bool ParameterSet::same_structure(const ParameterSet& other) const {
  if (groups_.size() != other.groups_.size()) return false;
  for (std::size_t i = 0; i < groups_.size(); ++i) {
    const ParamGroup &a = groups_[i], &b = other.groups_[i];
    if (a.name != b.name || a.tensors.size() != b.tensors.size()) return false;
    for (std::size_t j = 0; j < a.tensors.size(); ++j) {
      if (a.tensors[j].name != b.tensors[j].name) return false;
      if (!same_shape(a.tensors[j].value.shape(), b.tensors[j].value.shape()))
        return false;
    }
  }
  return true;
}

ParameterSet init_params(const ModelSpec& spec, Rng& rng) {
  if (spec.widths.size() < 2) {
    throw std::invalid_argument("model spec needs at least input and output widths");
  }
  ParameterSet params;
  for (std::size_t layer = 0; layer + 1 < spec.widths.size(); ++layer) {
    const std::size_t fan_in = spec.widths[layer], fan_out = spec.widths[layer + 1];
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    std::vector<double> w(fan_in * fan_out);
    for (double& v : w) v = rng.uniform(-bound, bound);
    ParamGroup g;
    g.name = "layer" + std::to_string(layer);
    g.tensors.push_back({"w", Tensor({fan_in, fan_out}, std::move(w))});
    g.tensors.push_back({"b", Tensor::zeros({fan_out})});
    params.add_group(std::move(g));
  }
  return params;
}

namespace {

// x [n,k] plus bias [k]: replicate the bias over rows with a ones column so
// the whole thing stays inside the primitive set.
Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = x.shape()[0], k = x.shape()[1];
  const Tensor ones = Tensor::full({n, 1}, 1.0);
  return add(x, matmul(ones, reshape(bias, {1, k})));
}

}  // namespace

Tensor forward(const ModelSpec& spec, const ParameterSet& params,
               const Tensor& x) {
  if (x.shape().size() != 2 || x.shape()[1] != spec.widths.front()) {
    throw std::invalid_argument("forward: input must be [n," +
                                std::to_string(spec.widths.front()) + "], got " +
                                shape_str(x.shape()));
  }
  const std::size_t layers = spec.widths.size() - 1;
  if (params.group_count() != layers) {
    throw std::invalid_argument(
        "forward: parameter group count does not match the layer count");
  }
  Tensor h = x;
  for (std::size_t layer = 0; layer < layers; ++layer) {
    const ParamGroup& g = params.group(layer);
    h = add_bias(matmul(h, g.tensors[0].value), g.tensors[1].value);
    if (layer + 1 < layers) {
      h = spec.activation == Activation::Tanh ? tanh_(h) : relu(h);
    }
  }
  return h;
}

Tensor mse_loss(const Tensor& prediction, const Tensor& target) {
  if (!same_shape(prediction.shape(), target.shape())) {
    throw std::invalid_argument("mse: shapes differ, " + shape_str(prediction.shape()) +
                                " vs " + shape_str(target.shape()));
  }
  return mean(square(sub(prediction, target)));
}

Tensor parametric_loss(std::span<const Tensor> phi_loss,
                       const Tensor& prediction, const Tensor& target) {
  if (phi_loss.size() != 5) {
    throw std::invalid_argument("parametric loss: expected 5 parameters, got " +
                                std::to_string(phi_loss.size()));
  }
  if (!same_shape(prediction.shape(), target.shape())) {
    throw std::invalid_argument("parametric loss: prediction and target shapes differ");
  }
  const Tensor &w1 = phi_loss[0], &b1 = phi_loss[1], &w2 = phi_loss[2],
               &b2 = phi_loss[3], &uq = phi_loss[4];
  const std::size_t hidden = w1.shape()[1];
  const std::size_t n = prediction.size();

  const Tensor e = reshape(sub(prediction, target), {n, 1});
  const Tensor e2 = square(e);
  const Tensor feats[] = {e, e2};
  const Tensor f = concat(feats, 1);  // [n,2]

  const Tensor ones = Tensor::full({n, 1}, 1.0);
  Tensor h = add(matmul(f, w1), matmul(ones, reshape(b1, {1, hidden})));
  h = tanh_(h);
  const Tensor head = add(matmul(h, w2), matmul(ones, reshape(b2, {1, 1})));

  const Tensor quad = mul(scalar_broadcast(square(uq), {n, 1}), e2);
  return mean(add(quad, head));
}

std::vector<Tensor> learned_loss_mse_init(std::size_t hidden, Rng& rng) {
  std::vector<double> w1(2 * hidden);
  for (double& v : w1) v = rng.uniform(-0.5, 0.5);
  return {
      Tensor({2, hidden}, std::move(w1)),
      Tensor::zeros({hidden}),
      Tensor::zeros({hidden, 1}),
      Tensor::zeros({1}),
      Tensor::scalar(1.0),
  };
}

std::vector<Tensor> learned_loss_zero_init(std::size_t hidden, Rng&) {
  return {
      Tensor::zeros({2, hidden}),
      Tensor::zeros({hidden}),
      Tensor::zeros({hidden, 1}),
      Tensor::zeros({1}),
      Tensor::scalar(0.0),
  };
}

}  // namespace metaloop
