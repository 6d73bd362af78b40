#pragma once

#include <cstdint>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace primed {

using Scalar = double;
using Index = std::int64_t;
using Shape = std::vector<Index>;

// Fixed 64-byte alignment keeps vectorised kernels on the same code path for
// every allocation, so results are bitwise reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator&) { return true; }
};

std::string shape_str(const Shape& shape);
Index shape_numel(const Shape& shape);

// Dense row-major array. Matrix-style ops view it as rows() x cols(), where
// cols() is the last dimension and rows() the product of the rest.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = 0);
  Tensor(Shape shape, std::vector<Scalar> data);

  static Tensor scalar(Scalar v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int i) const;
  Index numel() const { return static_cast<Index>(data_.size()); }
  Index rows() const;
  Index cols() const;
  bool empty() const { return data_.empty(); }

  std::span<Scalar> data() { return data_; }
  std::span<const Scalar> data() const { return data_; }
  Scalar* ptr() { return data_.data(); }
  const Scalar* ptr() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  Scalar operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }
  Scalar& at(std::initializer_list<Index> idx);
  Scalar at(std::initializer_list<Index> idx) const;

  Scalar item() const;

  Tensor reshaped(Shape shape) const;
  void reshape(Shape shape);
  void fill(Scalar v);

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Index offset(std::initializer_list<Index> idx) const;

  Shape shape_;
  std::vector<Scalar, AlignedAllocator<Scalar>> data_;
};

Scalar max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& t);

}  // namespace primed
