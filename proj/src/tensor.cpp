#include "avs/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace avs {

std::string to_string(const Shape& dims) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) out << ',';
    out << dims[i];
  }
  out << ')';
  return out.str();
}

std::size_t numel_of(const Shape& dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

namespace {

void check_dims(const Shape& dims) {
  for (auto d : dims) {
    if (d == 0) throw ShapeError("tensor dims must be positive, got " + to_string(dims));
  }
}

}  // namespace

Tensor::Tensor(Shape dims, double fill) : dims_(std::move(dims)) {
  check_dims(dims_);
  data_.assign(numel_of(dims_), fill);
}

Tensor::Tensor(Shape dims, std::vector<double> data) : dims_(std::move(dims)), data_(std::move(data)) {
  check_dims(dims_);
  if (data_.size() != numel_of(dims_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match dims " +
                     to_string(dims_));
  }
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= dims_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(dims_));
  }
  return dims_[axis];
}

std::size_t Tensor::offset_of(std::initializer_list<std::size_t> index) const {
  if (index.size() != dims_.size()) {
    throw ShapeError("index rank " + std::to_string(index.size()) + " does not match " + to_string(dims_));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= dims_[axis]) throw ShapeError("index out of range for " + to_string(dims_));
    off = off * dims_[axis] + i;
    ++axis;
  }
  return off;
}

double& Tensor::at(std::initializer_list<std::size_t> index) { return data_[offset_of(index)]; }

double Tensor::at(std::initializer_list<std::size_t> index) const { return data_[offset_of(index)]; }

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of dims " + to_string(dims_));
  return data_[0];
}

void Tensor::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (!on) grad_.clear();
}

std::vector<double>& Tensor::grad() {
  if (grad_.size() != data_.size()) grad_.assign(data_.size(), 0.0);
  return grad_;
}

void Tensor::zero_grad() {
  if (!grad_.empty()) std::fill(grad_.begin(), grad_.end(), 0.0);
}

Tensor Tensor::reshaped(Shape dims) const {
  if (numel_of(dims) != data_.size()) {
    throw ShapeError("cannot reshape " + to_string(dims_) + " to " + to_string(dims));
  }
  return Tensor(std::move(dims), data_);
}

}  // namespace avs
