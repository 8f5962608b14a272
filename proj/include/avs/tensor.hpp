#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "avs/error.hpp"

namespace avs {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& dims);
std::size_t numel_of(const Shape& dims);

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// A tensor is a plain value. It takes part in differentiation only when it is
/// registered on a Tape (see autodiff.hpp); the tape then accumulates into
/// grad() if requires_grad() is set.
///
/// Scalars are represented with dims {1}; rank-0 tensors are still accepted
/// and also hold one element.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape dims, double fill = 0.0);
  Tensor(Shape dims, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const Shape& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept { return data_.size(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Multi-index access; bounds checked.
  double& at(std::initializer_list<std::size_t> index);
  double at(std::initializer_list<std::size_t> index) const;

  /// The single value of a one-element tensor.
  double item() const;

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool on);

  bool has_grad() const noexcept { return !grad_.empty(); }
  std::vector<double>& grad();
  const std::vector<double>& grad() const { return grad_; }
  void zero_grad();

  /// Same data with new dims; element count must agree.
  Tensor reshaped(Shape dims) const;

  bool same_values(const Tensor& other) const noexcept {
    return dims_ == other.dims_ && data_ == other.data_;
  }

 private:
  std::size_t offset_of(std::initializer_list<std::size_t> index) const;

  Shape dims_;
  std::vector<double> data_;
  std::vector<double> grad_;
  bool requires_grad_ = false;
};

}  // namespace avs
