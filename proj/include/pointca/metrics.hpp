#pragma once

#include <algorithm>
#include <cstdio>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pointca/knn.hpp"
#include "pointca/point_cloud.hpp"

namespace pointca {

enum class ChamferVariant { CD_P, CD_T };

namespace detail {

inline void require_nonempty(std::span<const Vec3> a, std::span<const Vec3> b) {
  if (a.empty() || b.empty()) throw Error(Errc::EmptyCloud, "chamfer distance needs two nonempty clouds");
}

}  // namespace detail

/// Nearest-neighbor correspondences in both directions; the shared backbone of
/// the metric and of the differentiable loss.
struct ChamferMatch {
  std::vector<Neighbor> a_to_b;
  std::vector<Neighbor> b_to_a;
};

inline ChamferMatch chamfer_match(std::span<const Vec3> a, std::span<const Vec3> b) {
  detail::require_nonempty(a, b);
  return {nearest_each(a, b), nearest_each(b, a)};
}

inline double chamfer_value(const ChamferMatch& match, ChamferVariant variant) {
  double sa = 0.0;
  double sb = 0.0;
  if (variant == ChamferVariant::CD_P) {
    for (const auto& n : match.a_to_b) sa += std::sqrt(n.sq_dist);
    for (const auto& n : match.b_to_a) sb += std::sqrt(n.sq_dist);
    return 0.5 * (sa / static_cast<double>(match.a_to_b.size()) + sb / static_cast<double>(match.b_to_a.size()));
  }
  for (const auto& n : match.a_to_b) sa += n.sq_dist;
  for (const auto& n : match.b_to_a) sb += n.sq_dist;
  return sa / static_cast<double>(match.a_to_b.size()) + sb / static_cast<double>(match.b_to_a.size());
}

inline double chamfer(std::span<const Vec3> a, std::span<const Vec3> b,
                      ChamferVariant variant = ChamferVariant::CD_P) {
  return chamfer_value(chamfer_match(a, b), variant);
}

inline double chamfer(const PointCloud& a, const PointCloud& b, ChamferVariant variant = ChamferVariant::CD_P) {
  return chamfer(a.span(), b.span(), variant);
}

inline constexpr std::size_t kMaxExactEmdPoints = 512;

/// Optimal assignment on a dense n x n cost matrix (shortest augmenting path
/// with potentials). Returns assignment[row] = column.
inline std::vector<std::size_t> solve_assignment(const std::vector<double>& cost, std::size_t n) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assignment(n);
  for (std::size_t j = 1; j <= n; ++j) assignment[p[j] - 1] = j - 1;
  return assignment;
}

namespace detail {

inline std::vector<double> distance_matrix(std::span<const Vec3> a, std::span<const Vec3> b) {
  std::vector<double> cost(a.size() * b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) cost[i * b.size() + j] = std::sqrt(squared_distance(a[i], b[j]));
  }
  return cost;
}

inline double mean_assigned_cost(const std::vector<double>& cost, const std::vector<std::size_t>& assignment) {
  const std::size_t n = assignment.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += cost[i * n + assignment[i]];
  return total / static_cast<double>(n);
}

inline void require_same_size(std::span<const Vec3> a, std::span<const Vec3> b) {
  if (a.size() != b.size()) {
    throw Error(Errc::SizeMismatch,
                "EMD needs equal sizes, got " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  if (a.empty()) throw Error(Errc::EmptyCloud, "EMD of empty clouds");
}

}  // namespace detail

/// Exact earth mover's distance: minimum mean matched distance over bijections.
inline double emd_exact(std::span<const Vec3> a, std::span<const Vec3> b) {
  detail::require_same_size(a, b);
  if (a.size() > kMaxExactEmdPoints) {
    throw Error(Errc::TooLargeForExact, std::to_string(a.size()) + " points exceeds the exact solver bound of " +
                                            std::to_string(kMaxExactEmdPoints));
  }
  const auto cost = detail::distance_matrix(a, b);
  return detail::mean_assigned_cost(cost, solve_assignment(cost, a.size()));
}

inline double emd_exact(const PointCloud& a, const PointCloud& b) { return emd_exact(a.span(), b.span()); }

inline constexpr std::size_t kDefaultAuctionPhases = 12;

/// Epsilon-scaling auction. The result is the cost of a feasible bijection, so
/// it never undercuts emd_exact; after the last phase it is within eps_final of
/// the optimum in mean cost. `iterations` is the number of scaling phases.
inline double emd_approx(std::span<const Vec3> a, std::span<const Vec3> b,
                         std::size_t iterations = kDefaultAuctionPhases) {
  detail::require_same_size(a, b);
  const std::size_t n = a.size();
  const auto cost = detail::distance_matrix(a, b);
  const double max_cost = *std::max_element(cost.begin(), cost.end());
  if (max_cost == 0.0) return 0.0;
  const std::size_t phases = std::max<std::size_t>(iterations, 1);

  constexpr std::size_t kUnassigned = std::numeric_limits<std::size_t>::max();
  std::vector<double> price(n, 0.0);
  std::vector<std::size_t> owner(n), assigned(n);
  std::vector<std::size_t> queue;
  queue.reserve(n);
  double eps = max_cost / 4.0;
  for (std::size_t phase = 0; phase < phases; ++phase, eps /= 4.0) {
    std::fill(owner.begin(), owner.end(), kUnassigned);
    std::fill(assigned.begin(), assigned.end(), kUnassigned);
    queue.clear();
    for (std::size_t i = n; i-- > 0;) queue.push_back(i);
    while (!queue.empty()) {
      const std::size_t i = queue.back();
      queue.pop_back();
      // Person i maximizes value = -cost - price.
      double best = -std::numeric_limits<double>::infinity();
      double second = best;
      std::size_t best_j = 0;
      const double* row = &cost[i * n];
      for (std::size_t j = 0; j < n; ++j) {
        const double value = -row[j] - price[j];
        if (value > best) {
          second = best;
          best = value;
          best_j = j;
        } else if (value > second) {
          second = value;
        }
      }
      const double increment = (n == 1 ? 0.0 : best - second) + eps;
      price[best_j] += increment;
      if (owner[best_j] != kUnassigned) {
        assigned[owner[best_j]] = kUnassigned;
        queue.push_back(owner[best_j]);
      }
      owner[best_j] = i;
      assigned[i] = best_j;
    }
  }
  return detail::mean_assigned_cost(cost, assigned);
}

inline double emd_approx(const PointCloud& a, const PointCloud& b, std::size_t iterations = kDefaultAuctionPhases) {
  return emd_approx(a.span(), b.span(), iterations);
}

/// EMD that picks the exact solver when it is affordable.
inline double emd(std::span<const Vec3> a, std::span<const Vec3> b) {
  return a.size() <= kMaxExactEmdPoints ? emd_exact(a, b) : emd_approx(a, b);
}

inline double normalized_error(double numerator, double denominator) {
  if (!(denominator > 0.0)) throw Error(Errc::ZeroDenominator, "normalizing distance must be positive");
  return numerator / denominator;
}

/// d(f(X'), Y) / d(f(Y^P), Y), both CD-P.
inline double t_nre(const PointCloud& output_on_adv, const PointCloud& target_gt,
                    const PointCloud& output_on_target_partial) {
  const double den = chamfer(output_on_target_partial, target_gt);
  return normalized_error(chamfer(output_on_adv, target_gt), den);
}

/// d(f(defended X'), X) / d(f(X^P), X), both CD-P.
inline double s_nre(const PointCloud& output_on_defended_adv, const PointCloud& source_gt,
                    const PointCloud& output_on_clean) {
  const double den = chamfer(output_on_clean, source_gt);
  return normalized_error(chamfer(output_on_defended_adv, source_gt), den);
}

struct AsrPoint {
  double threshold = 0.0;
  double fraction = 0.0;
};

/// Fraction of attacks with T-NRE strictly below each threshold.
inline std::vector<AsrPoint> relative_asr(std::span<const double> t_nre_values, std::span<const double> thresholds) {
  if (t_nre_values.empty()) throw Error(Errc::EmptyInput, "no T-NRE values");
  if (!std::is_sorted(thresholds.begin(), thresholds.end())) {
    throw Error(Errc::InvalidParam, "thresholds must be sorted ascending");
  }
  std::vector<double> sorted(t_nre_values.begin(), t_nre_values.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<AsrPoint> curve;
  curve.reserve(thresholds.size());
  for (double tau : thresholds) {
    const auto below = std::lower_bound(sorted.begin(), sorted.end(), tau) - sorted.begin();
    curve.push_back({tau, static_cast<double>(below) / static_cast<double>(sorted.size())});
  }
  return curve;
}

inline double perturbation_budget(const PointCloud& adv, const PointCloud& clean) { return chamfer(adv, clean); }

struct MetricReport {
  double t_re_cd = 0.0;
  double t_re_emd = 0.0;
  double t_nre_cd = 0.0;
  double t_nre_denominator = 0.0;
  double s_re = 0.0;
  double s_nre = 0.0;
  double s_nre_denominator = 0.0;
  double perturbation_budget_cd = 0.0;
  std::size_t outlier_count = 0;

  static constexpr const char* kCsvHeader =
      "t_re_cd,t_re_emd,t_nre_cd,t_nre_denominator,s_re,s_nre,s_nre_denominator,perturbation_budget_cd,"
      "outlier_count";

  std::string csv_row() const;
};

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

inline std::string MetricReport::csv_row() const {
  return format_double(t_re_cd) + "," + format_double(t_re_emd) + "," + format_double(t_nre_cd) + "," +
         format_double(t_nre_denominator) + "," + format_double(s_re) + "," + format_double(s_nre) + "," +
         format_double(s_nre_denominator) + "," + format_double(perturbation_budget_cd) + "," +
         std::to_string(outlier_count);
}

inline void to_json(nlohmann::json& j, const MetricReport& r) {
  j = nlohmann::json{{"t_re_cd", r.t_re_cd},
                     {"t_re_emd", r.t_re_emd},
                     {"t_nre_cd", r.t_nre_cd},
                     {"t_nre_denominator", r.t_nre_denominator},
                     {"s_re", r.s_re},
                     {"s_nre", r.s_nre},
                     {"s_nre_denominator", r.s_nre_denominator},
                     {"perturbation_budget_cd", r.perturbation_budget_cd},
                     {"outlier_count", r.outlier_count}};
}

inline void from_json(const nlohmann::json& j, MetricReport& r) {
  j.at("t_re_cd").get_to(r.t_re_cd);
  j.at("t_re_emd").get_to(r.t_re_emd);
  j.at("t_nre_cd").get_to(r.t_nre_cd);
  j.at("t_nre_denominator").get_to(r.t_nre_denominator);
  j.at("s_re").get_to(r.s_re);
  j.at("s_nre").get_to(r.s_nre);
  j.at("s_nre_denominator").get_to(r.s_nre_denominator);
  j.at("perturbation_budget_cd").get_to(r.perturbation_budget_cd);
  j.at("outlier_count").get_to(r.outlier_count);
}

inline double median(std::vector<double> values) {
  if (values.empty()) throw Error(Errc::EmptyInput, "median of empty sequence");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

inline double mean(std::span<const double> values) {
  if (values.empty()) throw Error(Errc::EmptyInput, "mean of empty sequence");
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

}  // namespace pointca
