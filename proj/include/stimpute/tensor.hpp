#ifndef STIMPUTE_TENSOR_HPP
#define STIMPUTE_TENSOR_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stimpute/errors.hpp"

namespace stimpute {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

/**
 * Dense n-dimensional array, row-major, backed by an Eigen vector.
 *
 * A Tensor of rank >= 2 can be viewed as a row-major matrix whose rows are
 * the leading dimension and whose columns are everything else; most kernels
 * operate on that view.
 */
template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Vector::Zero(checked_size(shape_))) {}

  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_size(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                           shape_string(shape_));
    }
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), Vector::Map(values.begin(), static_cast<Index>(values.size()))) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor constant(Shape shape, Scalar value) {
    const Index n = checked_size(shape);
    return Tensor(std::move(shape), Vector::Constant(n, value));
  }

  static Tensor from_matrix(const Eigen::Ref<const RowMatrix>& m) {
    Vector data = Eigen::Map<const Vector>(m.data(), m.size());
    return Tensor({m.rows(), m.cols()}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  bool empty() const { return data_.size() == 0; }

  const Vector& data() const { return data_; }
  Vector& data() { return data_; }

  Scalar operator[](Index i) const { return data_[i]; }
  Scalar& operator[](Index i) { return data_[i]; }

  Scalar at(std::initializer_list<Index> index) const { return data_[offset(index)]; }
  Scalar& at(std::initializer_list<Index> index) { return data_[offset(index)]; }

  /// Row-major matrix view: leading dimension by the product of the rest.
  ConstMatrixMap matrix() const { return ConstMatrixMap(data_.data(), rows(), cols()); }
  MatrixMap matrix() { return MatrixMap(data_.data(), rows(), cols()); }

  Tensor reshaped(Shape shape) const {
    if (checked_size(shape) != size()) {
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.allFinite(); }

 private:
  static Index checked_size(const Shape& shape) {
    for (Index d : shape) {
      if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
    }
    return shape_size(shape);
  }

  Index rows() const { return shape_.empty() ? 1 : shape_.front(); }
  Index cols() const { return shape_.empty() ? 1 : size() / shape_.front(); }

  Index offset(std::initializer_list<Index> index) const {
    if (static_cast<Index>(index.size()) != rank()) {
      throw DimensionError("index rank does not match tensor " + shape_string(shape_));
    }
    Index flat = 0;
    std::size_t axis = 0;
    for (Index i : index) flat = flat * shape_[axis++] + i;
    return flat;
  }

  Shape shape_;
  Vector data_;
};

}  // namespace stimpute

#endif  // STIMPUTE_TENSOR_HPP
