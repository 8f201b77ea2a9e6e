#ifndef STIMPUTE_KNN_HPP
#define STIMPUTE_KNN_HPP

#include <atomic>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "stimpute/tensor.hpp"

namespace stimpute {

struct Neighbor {
  Index index = 0;
  double distance = 0.0;  // Euclidean

  bool operator==(const Neighbor&) const = default;
};

/**
 * Exact k-nearest-neighbour search by full scan over the rows of a reference
 * matrix. Ties in distance go to the lower row index, which for window sets
 * is the earlier window origin.
 */
class BruteForceKnn {
 public:
  explicit BruteForceKnn(Eigen::MatrixXd reference);
  BruteForceKnn(const BruteForceKnn& other) : reference_(other.reference_), comparisons_(other.comparisons()) {}
  BruteForceKnn& operator=(const BruteForceKnn& other) {
    reference_ = other.reference_;
    comparisons_ = other.comparisons();
    return *this;
  }

  Index size() const { return reference_.rows(); }
  Index dims() const { return reference_.cols(); }

  /// Throws ConfigError when k is outside [1, size()].
  std::vector<Neighbor> query(const Eigen::Ref<const Eigen::RowVectorXd>& point, Index k) const;

  /// Coordinate comparisons performed so far (size() * dims() per query).
  std::uint64_t comparisons() const { return comparisons_.load(); }
  void reset_comparisons() { comparisons_ = 0; }

 private:
  Eigen::MatrixXd reference_;
  mutable std::atomic<std::uint64_t> comparisons_{0};
};

}  // namespace stimpute

#endif  // STIMPUTE_KNN_HPP
