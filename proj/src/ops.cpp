#include "metaloop/ops.hpp"

#include <cmath>
#include <stdexcept>

namespace metaloop {

namespace {

[[noreturn]] void fail(OpKind kind, const std::string& what) {
  throw std::invalid_argument(std::string(op_name(kind)) + ": " + what);
}

void need_inputs(OpKind kind, std::span<const Tensor> in, std::size_t n) {
  if (in.size() != n) {
    fail(kind, "expected " + std::to_string(n) + " operands, got " +
                   std::to_string(in.size()));
  }
}

void need_same_shape(OpKind kind, const Tensor& a, const Tensor& b) {
  if (!same_shape(a.shape(), b.shape())) {
    fail(kind, "shape mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
  }
}

// outer * extent * inner decomposition of a shape around one axis
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

using Vals = std::vector<double>;

std::pair<Shape, Vals> elementwise1(OpKind kind, const Tensor& a,
                                    double (*f)(double)) {
  auto in = a.values();
  Vals out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  (void)kind;
  return {a.shape(), std::move(out)};
}

}  // namespace

std::pair<Shape, std::vector<double>> eval_op(OpKind kind,
                                              std::span<const Tensor> in,
                                              const OpAttrs& attrs) {
  switch (kind) {
    case OpKind::Leaf:
    case OpKind::Constant:
      need_inputs(kind, in, 1);
      return {in[0].shape(), Vals(in[0].values().begin(), in[0].values().end())};

    case OpKind::Add: {
      need_inputs(kind, in, 2);
      need_same_shape(kind, in[0], in[1]);
      auto a = in[0].values(), b = in[1].values();
      Vals out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
      return {in[0].shape(), std::move(out)};
    }
    case OpKind::Sub: {
      need_inputs(kind, in, 2);
      need_same_shape(kind, in[0], in[1]);
      auto a = in[0].values(), b = in[1].values();
      Vals out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
      return {in[0].shape(), std::move(out)};
    }
    case OpKind::Mul: {
      need_inputs(kind, in, 2);
      need_same_shape(kind, in[0], in[1]);
      auto a = in[0].values(), b = in[1].values();
      Vals out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
      return {in[0].shape(), std::move(out)};
    }
    case OpKind::Div: {
      need_inputs(kind, in, 2);
      need_same_shape(kind, in[0], in[1]);
      auto a = in[0].values(), b = in[1].values();
      Vals out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (b[i] == 0.0) fail(kind, "division by exact zero");
        out[i] = a[i] / b[i];
      }
      return {in[0].shape(), std::move(out)};
    }
    case OpKind::Neg: {
      need_inputs(kind, in, 1);
      auto a = in[0].values();
      Vals out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = -a[i];
      return {in[0].shape(), std::move(out)};
    }

    case OpKind::MatMul: {
      need_inputs(kind, in, 2);
      const Shape &sa = in[0].shape(), &sb = in[1].shape();
      if (sa.size() != 2 || sb.size() != 2) {
        fail(kind, "needs two rank-2 operands, got " + shape_str(sa) + " and " +
                       shape_str(sb));
      }
      if (sa[1] != sb[0]) {
        fail(kind, "inner extents differ: " + shape_str(sa) + " x " +
                       shape_str(sb));
      }
      const std::size_t m = sa[0], k = sa[1], n = sb[1];
      auto a = in[0].values(), b = in[1].values();
      Vals out(m * n, 0.0);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = a[i * k + p];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b[p * n + j];
        }
      }
      return {{m, n}, std::move(out)};
    }
    case OpKind::Transpose: {
      need_inputs(kind, in, 1);
      const Shape& s = in[0].shape();
      if (s.size() != 2) fail(kind, "needs a rank-2 operand, got " + shape_str(s));
      const std::size_t m = s[0], n = s[1];
      auto a = in[0].values();
      Vals out(m * n);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
      return {{n, m}, std::move(out)};
    }

    case OpKind::Sum: {
      need_inputs(kind, in, 1);
      double acc = 0.0;
      for (double v : in[0].values()) acc += v;
      return {{}, {acc}};
    }
    case OpKind::Mean: {
      need_inputs(kind, in, 1);
      const std::size_t n = in[0].size();
      if (n == 0) fail(kind, "mean of an empty tensor");
      double acc = 0.0;
      for (double v : in[0].values()) acc += v;
      return {{}, {acc / static_cast<double>(n)}};
    }

    case OpKind::Square: {
      need_inputs(kind, in, 1);
      auto a = in[0].values();
      Vals out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * a[i];
      return {in[0].shape(), std::move(out)};
    }
    case OpKind::Sqrt: {
      need_inputs(kind, in, 1);
      auto a = in[0].values();
      Vals out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] < 0.0) fail(kind, "negative operand");
        out[i] = std::sqrt(a[i]);
      }
      return {in[0].shape(), std::move(out)};
    }
    case OpKind::Exp: {
      need_inputs(kind, in, 1);
      return elementwise1(kind, in[0], [](double x) { return std::exp(x); });
    }
    case OpKind::Log: {
      need_inputs(kind, in, 1);
      auto a = in[0].values();
      Vals out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] <= 0.0) fail(kind, "non-positive operand");
        out[i] = std::log(a[i]);
      }
      return {in[0].shape(), std::move(out)};
    }
    case OpKind::Tanh: {
      need_inputs(kind, in, 1);
      return elementwise1(kind, in[0], [](double x) { return std::tanh(x); });
    }
    case OpKind::Relu: {
      need_inputs(kind, in, 1);
      return elementwise1(kind, in[0],
                          [](double x) { return x > 0.0 ? x : 0.0; });
    }
    case OpKind::Sin: {
      need_inputs(kind, in, 1);
      return elementwise1(kind, in[0], [](double x) { return std::sin(x); });
    }
    case OpKind::Cos: {
      need_inputs(kind, in, 1);
      return elementwise1(kind, in[0], [](double x) { return std::cos(x); });
    }

    case OpKind::PowConst: {
      need_inputs(kind, in, 1);
      const double p = attrs.scalar;
      auto a = in[0].values();
      Vals out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double v = std::pow(a[i], p);
        if (!std::isfinite(v)) {
          fail(kind, "pow(" + std::to_string(a[i]) + ", " + std::to_string(p) +
                         ") is not finite");
        }
        out[i] = v;
      }
      return {in[0].shape(), std::move(out)};
    }

    case OpKind::ScalarBroadcast: {
      need_inputs(kind, in, 1);
      if (in[0].size() != 1) {
        fail(kind, "operand must have exactly one element, shape is " +
                       shape_str(in[0].shape()));
      }
      const double v = in[0].values()[0];
      return {attrs.shape, Vals(numel(attrs.shape), v)};
    }

    case OpKind::Reshape: {
      need_inputs(kind, in, 1);
      if (numel(attrs.shape) != in[0].size()) {
        fail(kind, "cannot reshape " + shape_str(in[0].shape()) + " to " +
                       shape_str(attrs.shape));
      }
      return {attrs.shape, Vals(in[0].values().begin(), in[0].values().end())};
    }

    case OpKind::Concat: {
      if (in.empty()) fail(kind, "needs at least one operand");
      const Shape& s0 = in[0].shape();
      if (attrs.axis >= s0.size()) fail(kind, "axis out of range");
      std::size_t total = 0;
      for (const Tensor& t : in) {
        const Shape& s = t.shape();
        if (s.size() != s0.size()) fail(kind, "rank mismatch");
        for (std::size_t d = 0; d < s.size(); ++d) {
          if (d != attrs.axis && s[d] != s0[d]) {
            fail(kind, "shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
          }
        }
        total += s[attrs.axis];
      }
      Shape out_shape = s0;
      out_shape[attrs.axis] = total;
      const AxisSplit dst = split_axis(out_shape, attrs.axis);
      Vals out(numel(out_shape));
      std::size_t offset = 0;
      for (const Tensor& t : in) {
        const AxisSplit src = split_axis(t.shape(), attrs.axis);
        auto v = t.values();
        for (std::size_t o = 0; o < src.outer; ++o) {
          for (std::size_t e = 0; e < src.extent; ++e) {
            const double* from = v.data() + (o * src.extent + e) * src.inner;
            double* to =
                out.data() + (o * dst.extent + offset + e) * dst.inner;
            for (std::size_t i = 0; i < src.inner; ++i) to[i] = from[i];
          }
        }
        offset += src.extent;
      }
      return {std::move(out_shape), std::move(out)};
    }

    case OpKind::IndexSelect: {
      need_inputs(kind, in, 1);
      const Shape& s = in[0].shape();
      if (attrs.axis >= s.size()) fail(kind, "axis out of range");
      const AxisSplit src = split_axis(s, attrs.axis);
      for (std::size_t idx : attrs.indices) {
        if (idx >= src.extent) {
          fail(kind, "index " + std::to_string(idx) + " out of range for extent " +
                         std::to_string(src.extent));
        }
      }
      Shape out_shape = s;
      out_shape[attrs.axis] = attrs.indices.size();
      Vals out(numel(out_shape));
      auto v = in[0].values();
      for (std::size_t o = 0; o < src.outer; ++o) {
        for (std::size_t e = 0; e < attrs.indices.size(); ++e) {
          const double* from =
              v.data() + (o * src.extent + attrs.indices[e]) * src.inner;
          double* to = out.data() + (o * attrs.indices.size() + e) * src.inner;
          for (std::size_t i = 0; i < src.inner; ++i) to[i] = from[i];
        }
      }
      return {std::move(out_shape), std::move(out)};
    }

    case OpKind::ScatterAdd: {
      need_inputs(kind, in, 1);
      const Shape& s = in[0].shape();
      if (attrs.axis >= s.size()) fail(kind, "axis out of range");
      if (s[attrs.axis] != attrs.indices.size()) {
        fail(kind, "operand extent along axis must equal the index count");
      }
      for (std::size_t idx : attrs.indices) {
        if (idx >= attrs.extent) fail(kind, "index out of range for target extent");
      }
      Shape out_shape = s;
      out_shape[attrs.axis] = attrs.extent;
      const AxisSplit src = split_axis(s, attrs.axis);
      const AxisSplit dst = split_axis(out_shape, attrs.axis);
      Vals out(numel(out_shape), 0.0);
      auto v = in[0].values();
      for (std::size_t o = 0; o < src.outer; ++o) {
        for (std::size_t e = 0; e < src.extent; ++e) {
          const double* from = v.data() + (o * src.extent + e) * src.inner;
          double* to =
              out.data() + (o * dst.extent + attrs.indices[e]) * dst.inner;
          for (std::size_t i = 0; i < src.inner; ++i) to[i] += from[i];
        }
      }
      return {std::move(out_shape), std::move(out)};
    }

    case OpKind::StopGradient: {
      need_inputs(kind, in, 1);
      return {in[0].shape(), Vals(in[0].values().begin(), in[0].values().end())};
    }
  }
  fail(kind, "unhandled kind");
}

Tensor apply(OpKind kind, std::span<const Tensor> inputs, const TapePtr& tape,
             OpAttrs attrs) {
  for (const Tensor& t : inputs) {
    if (!t.defined()) fail(kind, "undefined operand");
    if (t.on_tape() && tape && t.tape() != tape) {
      fail(kind, "operands must live on one tape");
    }
    if (t.on_tape() && !tape) {
      fail(kind, "taped operand passed to a constant evaluation");
    }
  }

  auto [shape, values] = eval_op(kind, inputs, attrs);
  if (!tape) return Tensor(std::move(shape), std::move(values));

  auto data = std::make_shared<const std::vector<double>>(std::move(values));
  std::vector<std::uint32_t> ids;
  ids.reserve(inputs.size());
  for (const Tensor& t : inputs) {
    if (t.on_tape()) {
      ids.push_back(t.node());
    } else {
      ids.push_back(tape->intern_constant(t).node());
    }
  }
  return tape->append(kind, std::move(shape), std::move(data), std::move(ids),
                      std::move(attrs));
}

namespace {

TapePtr common_tape(std::span<const Tensor> ts) {
  TapePtr tape;
  for (const Tensor& t : ts) {
    if (!t.on_tape()) continue;
    if (!tape) {
      tape = t.tape();
    } else if (tape != t.tape()) {
      throw std::invalid_argument("operands must live on one tape");
    }
  }
  return tape;
}

Tensor apply2(OpKind kind, const Tensor& a, const Tensor& b, OpAttrs attrs = {}) {
  const Tensor in[] = {a, b};
  return apply(kind, in, common_tape(in), std::move(attrs));
}

Tensor apply1(OpKind kind, const Tensor& a, OpAttrs attrs = {}) {
  const Tensor in[] = {a};
  return apply(kind, in, common_tape(in), std::move(attrs));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return apply2(OpKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return apply2(OpKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return apply2(OpKind::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return apply2(OpKind::Div, a, b); }
Tensor neg(const Tensor& a) { return apply1(OpKind::Neg, a); }
Tensor matmul(const Tensor& a, const Tensor& b) { return apply2(OpKind::MatMul, a, b); }
Tensor transpose(const Tensor& a) { return apply1(OpKind::Transpose, a); }
Tensor sum(const Tensor& a) { return apply1(OpKind::Sum, a); }
Tensor mean(const Tensor& a) { return apply1(OpKind::Mean, a); }
Tensor square(const Tensor& a) { return apply1(OpKind::Square, a); }
Tensor sqrt_(const Tensor& a) { return apply1(OpKind::Sqrt, a); }
Tensor exp_(const Tensor& a) { return apply1(OpKind::Exp, a); }
Tensor log_(const Tensor& a) { return apply1(OpKind::Log, a); }
Tensor tanh_(const Tensor& a) { return apply1(OpKind::Tanh, a); }
Tensor relu(const Tensor& a) { return apply1(OpKind::Relu, a); }
Tensor sin_(const Tensor& a) { return apply1(OpKind::Sin, a); }
Tensor cos_(const Tensor& a) { return apply1(OpKind::Cos, a); }

Tensor pow_const(const Tensor& a, double p) {
  OpAttrs attrs;
  attrs.scalar = p;
  return apply1(OpKind::PowConst, a, std::move(attrs));
}

Tensor scalar_broadcast(const Tensor& s, Shape shape) {
  OpAttrs attrs;
  attrs.shape = std::move(shape);
  return apply1(OpKind::ScalarBroadcast, s, std::move(attrs));
}

Tensor reshape(const Tensor& a, Shape shape) {
  OpAttrs attrs;
  attrs.shape = std::move(shape);
  return apply1(OpKind::Reshape, a, std::move(attrs));
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  OpAttrs attrs;
  attrs.axis = axis;
  return apply(OpKind::Concat, parts, common_tape(parts), std::move(attrs));
}

Tensor index_select(const Tensor& a, std::size_t axis,
                    std::vector<std::size_t> indices) {
  OpAttrs attrs;
  attrs.axis = axis;
  attrs.indices = std::move(indices);
  return apply1(OpKind::IndexSelect, a, std::move(attrs));
}

Tensor scatter_add(const Tensor& src, std::size_t axis,
                   std::vector<std::size_t> indices, std::size_t extent) {
  OpAttrs attrs;
  attrs.axis = axis;
  attrs.indices = std::move(indices);
  attrs.extent = extent;
  return apply1(OpKind::ScatterAdd, src, std::move(attrs));
}

Tensor stop_gradient(const Tensor& x) {
  if (!x.on_tape()) return x;  // nothing to block
  return apply1(OpKind::StopGradient, x);
}

Tensor scale(const Tensor& a, double k) {
  return mul(a, scalar_broadcast(Tensor::scalar(k), a.shape()));
}

Tensor add_const(const Tensor& a, double k) {
  return add(a, scalar_broadcast(Tensor::scalar(k), a.shape()));
}

Tensor softplus(const Tensor& a) { return log_(add_const(exp_(a), 1.0)); }

Tensor sigmoid(const Tensor& a) {
  const Tensor one = scalar_broadcast(Tensor::scalar(1.0), a.shape());
  return div(one, add_const(exp_(neg(a)), 1.0));
}

Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

}  // namespace metaloop
