#include "avs/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace avs {

namespace {

constexpr double kLogFloor = 1e-12;
// Keeps sigmoid outputs strictly inside (0, 1) even for saturated logits.
constexpr double kSigmoidFloor = 1e-12;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapConst = Eigen::Map<const RowMatrix>;
using MapMut = Eigen::Map<RowMatrix>;

// Eigen picks kernels by buffer alignment, and its scalar and packet (FMA)
// paths round differently. Products run on Eigen-owned aligned copies so the
// result depends on the values alone.
RowMatrix owned(const double* p, std::size_t rows, std::size_t cols) {
  return MapConst(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

Tape& tape_of(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw TapeError("operands belong to different tapes");
  return *a.tape;
}

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw TapeError("variable is not attached to a tape");
  return *a.tape;
}

// ---------------------------------------------------------------------------
// Broadcasting

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// For each flat index of `out`, the flat index of `in` it reads from.
std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t rank = out.size();
  const std::size_t lead = rank - in.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = rank; i-- > lead;) {
    const std::size_t d = in[i - lead];
    stride[i] = d == 1 ? 0 : s;
    s *= d;
  }
  const std::size_t n = numel_of(out);
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < n; ++k) {
    index[k] = offset;
    for (std::size_t axis = rank; axis-- > 0;) {
      ++counter[axis];
      offset += stride[axis];
      if (counter[axis] < out[axis]) break;
      offset -= stride[axis] * counter[axis];
      counter[axis] = 0;
    }
  }
  return index;
}

struct BinaryPlan {
  Shape out;
  bool same = false;
  std::vector<std::size_t> ia, ib;
};

BinaryPlan plan_binary(const Shape& a, const Shape& b) {
  BinaryPlan plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  plan.out = broadcast_shape(a, b);
  plan.ia = broadcast_index(a, plan.out);
  plan.ib = broadcast_index(b, plan.out);
  return plan;
}

// Generic broadcasting binary op. `fwd(x, y)` computes the value,
// `dx(x, y, z)`/`dy(x, y, z)` the local partials.
template <class Fwd, class Dx, class Dy>
Var binary(Var a, Var b, Fwd fwd, Dx dx, Dy dy) {
  Tape& tape = tape_of(a, b);
  auto plan = std::make_shared<BinaryPlan>(plan_binary(a.dims(), b.dims()));
  const auto& x = a.value().values();
  const auto& y = b.value().values();
  Tensor out(plan->out);
  auto& z = out.values();
  if (plan->same) {
    for (std::size_t k = 0; k < z.size(); ++k) z[k] = fwd(x[k], y[k]);
  } else {
    for (std::size_t k = 0; k < z.size(); ++k) z[k] = fwd(x[plan->ia[k]], y[plan->ib[k]]);
  }
  return tape.record(std::move(out), {a.id, b.id}, [plan, dx, dy](BackwardContext& ctx) {
    const auto g = ctx.grad_out();
    const auto& xv = ctx.input(0).values();
    const auto& yv = ctx.input(1).values();
    const auto& zv = ctx.output().values();
    const std::size_t n = g.size();
    if (ctx.needs(0)) {
      auto ga = ctx.input_grad(0);
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = plan->same ? k : plan->ia[k];
        const std::size_t j = plan->same ? k : plan->ib[k];
        ga[i] += g[k] * dx(xv[i], yv[j], zv[k]);
      }
    }
    if (ctx.needs(1)) {
      auto gb = ctx.input_grad(1);
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = plan->same ? k : plan->ia[k];
        const std::size_t j = plan->same ? k : plan->ib[k];
        gb[j] += g[k] * dy(xv[i], yv[j], zv[k]);
      }
    }
  });
}

// Elementwise unary op; `deriv(x, y)` is dy/dx given input and output.
template <class Fwd, class Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  Tape& tape = tape_of(a);
  const auto& x = a.value().values();
  Tensor out(a.dims());
  auto& y = out.values();
  for (std::size_t k = 0; k < y.size(); ++k) y[k] = fwd(x[k]);
  return tape.record(std::move(out), {a.id}, [deriv](BackwardContext& ctx) {
    if (!ctx.needs(0)) return;
    const auto g = ctx.grad_out();
    const auto& xv = ctx.input(0).values();
    const auto& yv = ctx.output().values();
    auto ga = ctx.input_grad(0);
    for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * deriv(xv[k], yv[k]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const {
  if (tape == nullptr) throw TapeError("variable is not attached to a tape");
  return tape->value(*this);
}

std::span<const double> BackwardContext::grad_out() const { return tape_.nodes_[node_].grad; }

const Tensor& BackwardContext::output() const { return tape_.nodes_[node_].value; }

const Tensor& BackwardContext::input(std::size_t k) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs[k]].value;
}

bool BackwardContext::needs(std::size_t k) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs[k]].needs_grad;
}

std::span<double> BackwardContext::input_grad(std::size_t k) {
  auto& in = tape_.nodes_[tape_.nodes_[node_].inputs[k]];
  if (!in.needs_grad) return {};
  if (in.grad.size() != in.value.numel()) in.grad.assign(in.value.numel(), 0.0);
  return in.grad;
}

Fault BackwardContext::fault() const { return tape_.fault_; }

Var Tape::leaf(Tensor& source) {
  Node node;
  node.value = source;
  node.needs_grad = source.requires_grad();
  node.sink = source.requires_grad() ? &source : nullptr;
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  if (consumed_) throw TapeError("cannot record on a consumed tape");
  Node node;
  node.value = std::move(value);
  for (auto id : inputs) {
    if (id >= nodes_.size()) throw TapeError("input node does not precede its operation");
    node.needs_grad = node.needs_grad || nodes_[id].needs_grad;
  }
  node.inputs = std::move(inputs);
  if (node.needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) throw TapeError("variable does not belong to this tape");
  return nodes_[v.id].value;
}

const std::vector<double>& Tape::grad(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) throw TapeError("variable does not belong to this tape");
  return nodes_[v.id].grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw TapeError("loss does not belong to this tape");
  if (consumed_) throw TapeError("backward called twice on the same tape");
  if (nodes_[loss.id].value.numel() != 1) {
    throw TapeError("backward needs a scalar loss, got dims " + to_string(nodes_[loss.id].value.dims()));
  }
  consumed_ = true;
  auto& root = nodes_[loss.id];
  if (!root.needs_grad) return;
  root.grad.assign(1, 1.0);
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    auto& node = nodes_[id];
    if (!node.needs_grad || node.grad.empty()) continue;
    if (node.backward) {
      BackwardContext ctx(*this, id);
      node.backward(ctx);
    }
    if (node.sink != nullptr) {
      auto& g = node.sink->grad();
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += node.grad[k];
    }
  }
}

void backward(Var loss) { tape_of(loss).backward(loss); }

// ---------------------------------------------------------------------------
// Elementwise

Var add(Var a, Var b) {
  return binary(
      a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Var div(Var a, Var b) {
  return binary(
      a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double z) { return -z / y; });
}

Var scale(Var a, double factor) {
  return unary(
      a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Var add_scalar(Var a, double c) {
  return unary(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
  return unary(
      a,
      [](double x) {
        double y;
        if (x >= 0.0) {
          y = 1.0 / (1.0 + std::exp(-x));
        } else {
          const double e = std::exp(x);
          y = e / (1.0 + e);
        }
        return std::clamp(y, kSigmoidFloor, 1.0 - kSigmoidFloor);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var log(Var a) {
  return unary(
      a, [](double x) { return std::log(std::max(x, kLogFloor)); },
      [](double x, double) { return x > kLogFloor ? 1.0 / x : 0.0; });
}

Var exp(Var a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var clamp(Var a, double lo, double hi) {
  if (lo > hi) throw ArgumentError("clamp bounds reversed");
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Shape ops

Var reshape(Var a, Shape dims) {
  Tape& tape = tape_of(a);
  Tensor out = a.value().reshaped(std::move(dims));
  return tape.record(std::move(out), {a.id}, [](BackwardContext& ctx) {
    const auto g = ctx.grad_out();
    auto ga = ctx.input_grad(0);
    for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
  });
}

Var transpose(Var a) {
  Tape& tape = tape_of(a);
  if (a.value().rank() != 2) throw ShapeError("transpose needs a matrix, got " + to_string(a.dims()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  MapMut(out.data().data(), n, m) = MapConst(a.value().data().data(), m, n).transpose();
  return tape.record(std::move(out), {a.id}, [m, n](BackwardContext& ctx) {
    auto ga = ctx.input_grad(0);
    MapMut(ga.data(), m, n) += MapConst(ctx.grad_out().data(), n, m).transpose();
  });
}

Var broadcast_to(Var a, Shape dims) {
  Tape& tape = tape_of(a);
  if (broadcast_shape(a.dims(), dims) != dims) {
    throw ShapeError("cannot broadcast " + to_string(a.dims()) + " to " + to_string(dims));
  }
  auto index = std::make_shared<std::vector<std::size_t>>(broadcast_index(a.dims(), dims));
  Tensor out(dims);
  const auto& x = a.value().values();
  auto& y = out.values();
  for (std::size_t k = 0; k < y.size(); ++k) y[k] = x[(*index)[k]];
  return tape.record(std::move(out), {a.id}, [index](BackwardContext& ctx) {
    const auto g = ctx.grad_out();
    auto ga = ctx.input_grad(0);
    for (std::size_t k = 0; k < g.size(); ++k) ga[(*index)[k]] += g[k];
  });
}

Var select(Var a, std::span<const std::size_t> rows) {
  Tape& tape = tape_of(a);
  const auto& in = a.value();
  if (in.rank() == 0) throw ShapeError("select needs rank >= 1");
  if (rows.empty()) throw ArgumentError("select needs at least one row");
  const std::size_t stride = in.numel() / in.dim(0);
  Shape dims = in.dims();
  dims[0] = rows.size();
  Tensor out(dims);
  auto picked = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  for (std::size_t r = 0; r < picked->size(); ++r) {
    const std::size_t src = (*picked)[r];
    if (src >= in.dim(0)) throw ShapeError("select row " + std::to_string(src) + " out of range");
    std::copy_n(in.data().begin() + src * stride, stride, out.data().begin() + r * stride);
  }
  return tape.record(std::move(out), {a.id}, [picked, stride](BackwardContext& ctx) {
    const auto g = ctx.grad_out();
    auto ga = ctx.input_grad(0);
    for (std::size_t r = 0; r < picked->size(); ++r) {
      const std::size_t dst = (*picked)[r] * stride;
      for (std::size_t k = 0; k < stride; ++k) ga[dst + k] += g[r * stride + k];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var a) {
  Tape& tape = tape_of(a);
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return tape.record(Tensor::scalar(total), {a.id}, [](BackwardContext& ctx) {
    const double g = ctx.grad_out()[0];
    for (double& v : ctx.input_grad(0)) v += g;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Var sum_axis(Var a, std::size_t axis) {
  Tape& tape = tape_of(a);
  const Shape& in = a.dims();
  if (axis >= in.size()) throw ShapeError("sum_axis: axis out of range for " + to_string(in));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= in[i];
  for (std::size_t i = axis + 1; i < in.size(); ++i) inner *= in[i];
  const std::size_t n = in[axis];
  Shape dims;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (i != axis) dims.push_back(in[i]);
  }
  if (dims.empty()) dims.push_back(1);
  Tensor out(dims);
  const auto& x = a.value().values();
  auto& y = out.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < n; ++j) {
      const double* src = x.data() + (o * n + j) * inner;
      double* dst = y.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  return tape.record(std::move(out), {a.id}, [outer, n, inner](BackwardContext& ctx) {
    const auto g = ctx.grad_out();
    auto ga = ctx.input_grad(0);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < inner; ++i) ga[(o * n + j) * inner + i] += g[o * inner + i];
      }
    }
  });
}

Var log_softmax(Var a) {
  Tape& tape = tape_of(a);
  const auto& in = a.value();
  if (in.rank() == 0) throw ShapeError("log_softmax needs rank >= 1");
  const std::size_t width = in.dims().back();
  const std::size_t rows = in.numel() / width;
  Tensor out(in.dims());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data().data() + r * width;
    double* y = out.data().data() + r * width;
    const double peak = *std::max_element(x, x + width);
    double total = 0.0;
    for (std::size_t c = 0; c < width; ++c) total += std::exp(x[c] - peak);
    const double shift = peak + std::log(total);
    for (std::size_t c = 0; c < width; ++c) y[c] = x[c] - shift;
  }
  return tape.record(std::move(out), {a.id}, [rows, width](BackwardContext& ctx) {
    const auto g = ctx.grad_out();
    const auto& y = ctx.output().values();
    auto ga = ctx.input_grad(0);
    for (std::size_t r = 0; r < rows; ++r) {
      double gsum = 0.0;
      for (std::size_t c = 0; c < width; ++c) gsum += g[r * width + c];
      for (std::size_t c = 0; c < width; ++c) {
        const std::size_t k = r * width + c;
        ga[k] += g[k] - std::exp(y[k]) * gsum;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Matrix product

Var matmul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const auto& x = a.value();
  const auto& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) {
    throw ShapeError("matmul shape mismatch: " + to_string(x.dims()) + " x " + to_string(y.dims()));
  }
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  Tensor out({m, n});
  const RowMatrix product = owned(x.data().data(), m, k) * owned(y.data().data(), k, n);
  MapMut(out.data().data(), m, n) = product;
  return tape.record(std::move(out), {a.id, b.id}, [m, k, n](BackwardContext& ctx) {
    const RowMatrix g = owned(ctx.grad_out().data(), m, n);
    if (ctx.needs(0)) {
      const RowMatrix ga = g * owned(ctx.input(1).data().data(), k, n).transpose();
      MapMut(ctx.input_grad(0).data(), m, k) += ga;
    }
    if (ctx.needs(1)) {
      RowMatrix gb = owned(ctx.input(0).data().data(), m, k).transpose() * g;
      if (ctx.fault() == Fault::matmul_backward) gb *= 1.05;
      MapMut(ctx.input_grad(1).data(), k, n) += gb;
    }
  });
}

// ---------------------------------------------------------------------------
// Gradient check

double grad_check(const ScalarFn& f, std::vector<Tensor> inputs, double epsilon, GradCheckOptions options) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) throw ArgumentError("grad_check epsilon must lie in [1e-7, 1e-3]");

  auto evaluate = [&](std::vector<Tensor>& xs, bool with_grad) {
    Tape tape;
    tape.set_fault(options.fault);
    std::vector<Var> vars;
    vars.reserve(xs.size());
    for (auto& x : xs) vars.push_back(tape.leaf(x));
    Var out = f(tape, vars);
    if (out.tape != &tape || out.numel() != 1) {
      throw ArgumentError("grad_check: function must return a scalar on the supplied tape");
    }
    const double value = out.value()[0];
    if (with_grad) tape.backward(out);
    return value;
  };

  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  evaluate(inputs, true);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& x : inputs) {
    analytic.push_back(x.grad());
    x.set_requires_grad(false);
  }

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& values = inputs[i].values();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double saved = values[k];
      values[k] = saved + epsilon;
      const double up = evaluate(inputs, false);
      values[k] = saved - epsilon;
      const double down = evaluate(inputs, false);
      values[k] = saved;
      const double central = (up - down) / (2.0 * epsilon);
      const double err = std::abs(analytic[i][k] - central) / std::max(1.0, std::abs(central));
      if (!std::isfinite(err)) return std::numeric_limits<double>::infinity();
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace avs
