#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "gridfold/common.hpp"

namespace gridfold::ad {

using Shape = std::vector<std::size_t>;

// Dense row-major tensor of 64-bit reals. Rank 0 is a scalar. Plain value
// type; tape tracking lives in Var (tape.hpp).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);  // zero-filled
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool is_scalar() const { return shape_.empty(); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  // Extent helpers for the rank-1/2 cases that dominate this codebase.
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double item() const;  // value of a one-element tensor

  bool all_finite() const;

  std::string shape_str() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

}  // namespace gridfold::ad
