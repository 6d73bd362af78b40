#include "primed/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace primed {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

Tensor::Tensor(Shape shape, Scalar fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (shape_numel(shape_) != static_cast<Index>(data_.size()))
    throw std::invalid_argument("tensor data size does not match shape " + shape_str(shape_));
}

Index Tensor::dim(int i) const {
  if (i < 0) i += rank();
  if (i < 0 || i >= rank()) throw std::out_of_range("tensor dim index out of range");
  return shape_[static_cast<std::size_t>(i)];
}

Index Tensor::rows() const {
  if (shape_.empty()) return 0;
  return numel() / std::max<Index>(shape_.back(), 1);
}

Index Tensor::cols() const { return shape_.empty() ? 0 : shape_.back(); }

Index Tensor::offset(std::initializer_list<Index> idx) const {
  if (static_cast<int>(idx.size()) != rank()) throw std::out_of_range("tensor index rank mismatch");
  Index off = 0;
  std::size_t k = 0;
  for (Index i : idx) {
    if (i < 0 || i >= shape_[k]) throw std::out_of_range("tensor index out of range");
    off = off * shape_[k] + i;
    ++k;
  }
  return off;
}

Scalar& Tensor::at(std::initializer_list<Index> idx) { return data_[static_cast<std::size_t>(offset(idx))]; }
Scalar Tensor::at(std::initializer_list<Index> idx) const { return data_[static_cast<std::size_t>(offset(idx))]; }

Scalar Tensor::item() const {
  if (data_.size() != 1) throw std::logic_error("item() on tensor with " + std::to_string(data_.size()) + " elements");
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  Tensor t = *this;
  t.reshape(std::move(shape));
  return t;
}

void Tensor::reshape(Shape shape) {
  if (shape_numel(shape) != numel())
    throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  shape_ = std::move(shape);
}

void Tensor::fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

Scalar max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw std::invalid_argument("max_abs_diff: size mismatch");
  Scalar m = 0;
  for (Index i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](Scalar v) { return std::isfinite(v); });
}

}  // namespace primed
