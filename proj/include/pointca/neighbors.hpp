#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "pointca/knn.hpp"
#include "pointca/point_cloud.hpp"

namespace pointca {

/// Local density statistics of a cloud and the per-point perturbation budget
/// derived from them: eps_i = eta * (mean_i + t * stddev_i) over the k nearest
/// neighbor distances of point i.
struct NeighborProfile {
  std::size_t k = 0;
  double t = 0.0;
  double eta = 0.0;
  std::vector<std::vector<std::size_t>> neighbor_indices;
  std::vector<std::vector<double>> neighbor_distances;  // ascending per point
  std::vector<double> sparsity;
  std::vector<double> uniformity;
  std::vector<double> density_score;
  std::vector<double> epsilon;

  std::size_t size() const { return epsilon.size(); }

  bool operator==(const NeighborProfile&) const = default;
};

inline constexpr std::size_t kDefaultNeighbors = 8;
inline constexpr double kDefaultUniformityWeight = 3.0;

inline NeighborProfile build_neighbor_profile(const PointCloud& cloud, std::size_t k = kDefaultNeighbors,
                                              double t = kDefaultUniformityWeight, double eta = 1.0) {
  if (k < 2) throw Error(Errc::InvalidParam, "k must be at least 2 (uniformity uses a k-1 divisor)");
  if (!(eta > 0.0)) throw Error(Errc::InvalidParam, "eta must be positive");
  if (!(t >= 0.0)) throw Error(Errc::InvalidParam, "t must be nonnegative");
  if (cloud.size() <= k) {
    throw Error(Errc::TooFewPoints, "cloud has " + std::to_string(cloud.size()) + " points, need more than k=" +
                                        std::to_string(k));
  }

  const auto knn = knn_all(cloud.span(), k);
  const std::size_t m = cloud.size();
  NeighborProfile p;
  p.k = k;
  p.t = t;
  p.eta = eta;
  p.neighbor_indices.resize(m);
  p.neighbor_distances.resize(m);
  p.sparsity.resize(m);
  p.uniformity.resize(m);
  p.density_score.resize(m);
  p.epsilon.resize(m);

  const double kd = static_cast<double>(k);
  for (std::size_t i = 0; i < m; ++i) {
    auto& idx = p.neighbor_indices[i];
    auto& dist = p.neighbor_distances[i];
    idx.reserve(k);
    dist.reserve(k);
    double sum = 0.0;
    for (const auto& nb : knn[i]) {
      idx.push_back(nb.index);
      dist.push_back(std::sqrt(nb.sq_dist));
      sum += dist.back();
    }
    const double mean = sum / kd;
    double ss = 0.0;
    for (double d : dist) ss += (d - mean) * (d - mean);
    const double sd = std::sqrt(ss / (kd - 1.0));
    p.sparsity[i] = mean;
    p.uniformity[i] = sd;
    p.density_score[i] = mean + t * sd;
    p.epsilon[i] = eta * p.density_score[i];
  }
  return p;
}

}  // namespace pointca
