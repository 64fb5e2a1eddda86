#pragma once

// Point-dropping preprocessing defenses: simple random sampling, fixed
// threshold outlier removal and statistical outlier removal. None of them
// moves or creates points.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "pointca/knn.hpp"
#include "pointca/metrics.hpp"
#include "pointca/models.hpp"
#include "pointca/point_cloud.hpp"

namespace pointca {

struct DefenseConfig {
  double srs_drop_rate = 0.3;
  double or_threshold = 0.05;
  std::size_t sor_k = 2;
  double sor_alpha = 1.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(srs_drop_rate >= 0.0 && srs_drop_rate < 1.0)) throw Error(Errc::InvalidConfig, "drop rate must be in [0,1)");
    if (!(or_threshold > 0.0)) throw Error(Errc::InvalidConfig, "outlier threshold must be positive");
    if (sor_k < 1) throw Error(Errc::InvalidConfig, "SOR neighborhood K must be at least 1");
    if (!(sor_alpha >= 0.0)) throw Error(Errc::InvalidConfig, "SOR alpha must be nonnegative");
  }
};

enum class DefenseKind { none, srs, outlier_removal, sor };

inline const char* to_string(DefenseKind kind) {
  switch (kind) {
    case DefenseKind::none: return "none";
    case DefenseKind::srs: return "srs";
    case DefenseKind::outlier_removal: return "or";
    case DefenseKind::sor: return "sor";
  }
  return "none";
}

/// Mean distance of every point to its K nearest other points.
inline std::vector<double> mean_knn_distances(const PointCloud& cloud, std::size_t k) {
  if (k < 1) throw Error(Errc::InvalidParam, "K must be at least 1");
  if (cloud.size() <= k) {
    throw Error(Errc::TooFewPoints, "cloud has " + std::to_string(cloud.size()) + " points, need more than K=" +
                                        std::to_string(k));
  }
  const auto knn = knn_all(cloud.span(), k);
  std::vector<double> d(cloud.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    double s = 0.0;
    for (const auto& nb : knn[i]) s += std::sqrt(nb.sq_dist);
    d[i] = s / static_cast<double>(k);
  }
  return d;
}

namespace detail {

inline PointCloud keep(const PointCloud& cloud, const std::vector<char>& mask) {
  PointCloud out;
  out.label = cloud.label;
  out.kind = cloud.kind;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (mask[i]) out.points.push_back(cloud[i]);
  }
  return out;
}

}  // namespace detail

/// Keeps ceil((1 - drop_rate) * m) points chosen uniformly, in original order.
inline PointCloud srs(const PointCloud& cloud, double drop_rate, std::uint64_t seed) {
  if (!(drop_rate >= 0.0 && drop_rate < 1.0)) throw Error(Errc::InvalidParam, "drop rate must be in [0,1)");
  const auto m = cloud.size();
  // Guard the ceiling against representation error, e.g. (1 - 0.3) * 10.
  const double raw = (1.0 - drop_rate) * static_cast<double>(m);
  auto keep_count = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  keep_count = std::min(keep_count, m);
  std::vector<std::size_t> idx(m);
  for (std::size_t i = 0; i < m; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<char> mask(m, 0);
  for (std::size_t i = 0; i < keep_count; ++i) mask[idx[i]] = 1;
  return detail::keep(cloud, mask);
}

/// Drops points whose mean K-NN distance exceeds `threshold`.
inline PointCloud outlier_removal(const PointCloud& cloud, double threshold, std::size_t k) {
  const auto d = mean_knn_distances(cloud, k);
  std::vector<char> mask(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) mask[i] = d[i] <= threshold;
  auto out = detail::keep(cloud, mask);
  if (out.empty()) throw Error(Errc::AllPointsRemoved, "every point exceeds the outlier threshold");
  return out;
}

struct SorResult {
  PointCloud cloud;
  std::size_t outlier_count = 0;
  double threshold = 0.0;
};

/// Keeps {x_i : d_i < mu + alpha * sigma} with d_i the mean K-NN distance and
/// mu, sigma their mean and population standard deviation. When sigma is zero
/// every d_i equals the threshold and all points are kept.
inline SorResult sor(const PointCloud& cloud, std::size_t k, double alpha) {
  if (!(alpha >= 0.0)) throw Error(Errc::InvalidParam, "alpha must be nonnegative");
  const auto d = mean_knn_distances(cloud, k);
  const double m = static_cast<double>(d.size());
  double mu = 0.0;
  for (double v : d) mu += v;
  mu /= m;
  double var = 0.0;
  for (double v : d) var += (v - mu) * (v - mu);
  const double sigma = std::sqrt(var / m);
  const double threshold = mu + alpha * sigma;
  std::vector<char> mask(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) mask[i] = sigma == 0.0 ? d[i] <= threshold : d[i] < threshold;
  SorResult r;
  r.cloud = detail::keep(cloud, mask);
  r.outlier_count = cloud.size() - r.cloud.size();
  r.threshold = threshold;
  return r;
}

/// Outliers number: points SOR removes with the given (default) parameters.
inline std::size_t count_outliers(const PointCloud& cloud, const DefenseConfig& cfg = {}) {
  return sor(cloud, cfg.sor_k, cfg.sor_alpha).outlier_count;
}

inline PointCloud apply_defense(DefenseKind kind, const PointCloud& cloud, const DefenseConfig& cfg) {
  switch (kind) {
    case DefenseKind::none: return cloud;
    case DefenseKind::srs: return srs(cloud, cfg.srs_drop_rate, cfg.seed);
    case DefenseKind::outlier_removal: return outlier_removal(cloud, cfg.or_threshold, cfg.sor_k);
    case DefenseKind::sor: return sor(cloud, cfg.sor_k, cfg.sor_alpha).cloud;
  }
  return cloud;
}

struct DefendedScore {
  double s_re = 0.0;
  double s_nre = 0.0;
};

/// S-RE = d(f(defense(adv)), X) and S-NRE = S-RE / d(f(X^P), X).
inline DefendedScore evaluate_defended(const CompletionModel& model, const PointCloud& adv, const PointCloud& source_gt,
                                       const PointCloud& clean_output, DefenseKind kind, const DefenseConfig& cfg) {
  if (!model.trained()) throw Error(Errc::ModelUntrained, "defense evaluation needs a trained completion model");
  const auto defended = apply_defense(kind, adv, cfg);
  const auto out = model.complete(defended);
  DefendedScore s;
  s.s_re = chamfer(out, source_gt);
  s.s_nre = normalized_error(s.s_re, chamfer(clean_output, source_gt));
  return s;
}

}  // namespace pointca
