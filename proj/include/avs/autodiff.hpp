#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "avs/tensor.hpp"

namespace avs {

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& dims() const { return value().dims(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  std::size_t numel() const { return value().numel(); }
};

/// Deliberate corruption of one backward rule, used to prove that the
/// gradient checker catches broken derivatives.
enum class Fault { none, matmul_backward };

/// What a backward rule sees: the upstream gradient, the forward values and
/// writable gradient buffers for inputs that need them (empty span otherwise).
class BackwardContext {
 public:
  BackwardContext(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}

  std::span<const double> grad_out() const;
  const Tensor& output() const;
  const Tensor& input(std::size_t k) const;
  std::span<double> input_grad(std::size_t k);
  bool needs(std::size_t k) const;
  Fault fault() const;

 private:
  Tape& tape_;
  std::size_t node_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

/// Linear record of the operations of one forward pass.
///
/// Nodes are appended in execution order, so the record is topologically
/// sorted by construction. backward() consumes the tape; a second call throws.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `source` as an input. When source.requires_grad() is set the
  /// gradient is added into source.grad() during backward, so `source` must
  /// outlive the backward call.
  Var leaf(Tensor& source);
  Var constant(Tensor value);

  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }

  /// Gradient accumulated for an arbitrary node during the last backward pass.
  /// Empty if the node did not need a gradient.
  const std::vector<double>& grad(Var v) const;

  void backward(Var loss);
  bool consumed() const noexcept { return consumed_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  void set_fault(Fault f) noexcept { fault_ = f; }
  Fault fault() const noexcept { return fault_; }

 private:
  friend class BackwardContext;

  struct Node {
    Tensor value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Tensor* sink = nullptr;
    bool needs_grad = false;
  };

  // deque keeps references to recorded values stable while the tape grows.
  std::deque<Node> nodes_;
  bool consumed_ = false;
  Fault fault_ = Fault::none;
};

/// Convenience: loss.tape->backward(loss).
void backward(Var loss);

// Elementwise binary ops broadcast numpy-style (dims aligned from the right).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double c);
Var neg(Var a);

Var relu(Var a);
Var sigmoid(Var a);
/// Natural log with the argument lower-bounded at 1e-12.
Var log(Var a);
Var exp(Var a);
Var clamp(Var a, double lo, double hi);

Var reshape(Var a, Shape dims);
/// 2-D transpose.
Var transpose(Var a);
Var broadcast_to(Var a, Shape dims);
/// Rows of `a` along axis 0.
Var select(Var a, std::span<const std::size_t> rows);

/// Full reductions produce a {1} tensor.
Var sum(Var a);
Var mean(Var a);
/// Sum over one axis, which is removed from the result.
Var sum_axis(Var a, std::size_t axis);
/// Numerically stable log-softmax over the last axis.
Var log_softmax(Var a);

Var matmul(Var a, Var b);

// Image ops use (T, h, w, C) layout.

/// Patch unfolding: (T,h,w,C) -> (T*h'*w', kh*kw*C) with columns ordered
/// (ky, kx, c). Zero padding.
Var unfold(Var input, std::size_t kh, std::size_t kw, std::size_t stride, std::size_t dilation,
           std::size_t padding);
/// Cross-correlation. weight (kh,kw,Cin,Cout), bias (Cout).
Var conv2d(Var input, Var weight, Var bias, std::size_t stride = 1, std::size_t dilation = 1,
           std::size_t padding = 0);
Var avg_pool2d(Var input, std::size_t kh, std::size_t kw);
/// Bilinear, half-pixel centres, edge clamped.
Var upsample_bilinear(Var input, std::size_t factor);

/// Output extent of a strided window sweep. Throws ShapeError when the sweep
/// would skip real (non-padding) input rows at the trailing edge.
std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t dilation,
                             std::size_t padding);

// Gradient checking.

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckOptions {
  Fault fault = Fault::none;
};

/// Max over all input coordinates of |analytic - central| / max(1, |central|).
/// `f` must return a one-element Var. epsilon must lie in [1e-7, 1e-3].
double grad_check(const ScalarFn& f, std::vector<Tensor> inputs, double epsilon = 1e-6,
                  GradCheckOptions options = {});

}  // namespace avs
