#include "stimpute/knn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "stimpute/errors.hpp"

namespace stimpute {

BruteForceKnn::BruteForceKnn(Eigen::MatrixXd reference) : reference_(std::move(reference)) {}

std::vector<Neighbor> BruteForceKnn::query(const Eigen::Ref<const Eigen::RowVectorXd>& point, Index k) const {
  if (k < 1 || k > size()) {
    throw ConfigError("k=" + std::to_string(k) + " must lie in [1, " + std::to_string(size()) + "]");
  }
  if (point.size() != dims()) {
    throw DimensionError("query has " + std::to_string(point.size()) + " dims, index has " + std::to_string(dims()));
  }
  const Eigen::VectorXd squared = (reference_.rowwise() - point).rowwise().squaredNorm();
  comparisons_ += static_cast<std::uint64_t>(size() * dims());

  std::vector<Index> order(static_cast<std::size_t>(size()));
  std::iota(order.begin(), order.end(), Index{0});
  auto closer = [&](Index a, Index b) { return squared[a] < squared[b] || (squared[a] == squared[b] && a < b); };
  std::partial_sort(order.begin(), order.begin() + k, order.end(), closer);

  std::vector<Neighbor> result;
  result.reserve(static_cast<std::size_t>(k));
  for (Index j = 0; j < k; ++j) result.push_back({order[j], std::sqrt(squared[order[j]])});
  return result;
}

}  // namespace stimpute
