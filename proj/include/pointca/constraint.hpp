#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "pointca/neighbors.hpp"
#include "pointca/point_cloud.hpp"

namespace pointca {

enum class BudgetKind { adaptive, pointwise_l2, channelwise_linf };

inline const char* to_string(BudgetKind kind) {
  switch (kind) {
    case BudgetKind::adaptive: return "adaptive";
    case BudgetKind::pointwise_l2: return "pointwise_l2";
    case BudgetKind::channelwise_linf: return "channelwise_linf";
  }
  return "adaptive";
}

inline BudgetKind budget_kind_from_string(const std::string& s) {
  if (s == "adaptive") return BudgetKind::adaptive;
  if (s == "pointwise_l2") return BudgetKind::pointwise_l2;
  if (s == "channelwise_linf") return BudgetKind::channelwise_linf;
  throw Error(Errc::InvalidConfig, "unknown budget kind '" + s + "'");
}

struct Perturbation {
  std::vector<Vec3> delta;
  BudgetKind budget_kind = BudgetKind::adaptive;

  std::size_t size() const { return delta.size(); }
};

namespace detail {

// Scales v onto the ball of radius eps. The factor is nudged down until the
// rounded result is feasible, which also makes a second clip a no-op.
inline Vec3 project_to_ball(const Vec3& v, double eps) {
  const double n = norm(v);
  if (n <= eps) return v;
  double factor = eps / n;
  Vec3 out = v * factor;
  while (norm(out) > eps) {
    factor = std::nextafter(factor, 0.0);
    out = v * factor;
  }
  return out;
}

}  // namespace detail

/// Per-point clip onto the adaptive budget: delta_i <- delta_i * eps_i / |delta_i|
/// whenever |delta_i| > eps_i. Feasible vectors are returned untouched.
inline Perturbation clip_to_budget(Perturbation p, const NeighborProfile& profile) {
  if (p.size() != profile.size()) {
    throw Error(Errc::SizeMismatch, "perturbation has " + std::to_string(p.size()) + " points, profile has " +
                                        std::to_string(profile.size()));
  }
  for (std::size_t i = 0; i < p.size(); ++i) p.delta[i] = detail::project_to_ball(p.delta[i], profile.epsilon[i]);
  return p;
}

inline Perturbation clip_pointwise_l2(Perturbation p, double eps) {
  if (!(eps >= 0.0)) throw Error(Errc::InvalidParam, "eps must be nonnegative");
  for (auto& d : p.delta) d = detail::project_to_ball(d, eps);
  return p;
}

inline Perturbation clip_channelwise(Perturbation p, double eps) {
  if (!(eps >= 0.0)) throw Error(Errc::InvalidParam, "eps must be nonnegative");
  for (auto& d : p.delta) {
    for (double& c : d) c = std::clamp(c, -eps, eps);
  }
  return p;
}

/// Largest violation of the active budget (0 when feasible).
inline double max_budget_violation(std::span<const Vec3> delta, BudgetKind kind, std::span<const double> eps_per_point,
                                   double uniform_eps) {
  double worst = 0.0;
  for (std::size_t i = 0; i < delta.size(); ++i) {
    double excess = 0.0;
    switch (kind) {
      case BudgetKind::adaptive: excess = norm(delta[i]) - eps_per_point[i]; break;
      case BudgetKind::pointwise_l2: excess = norm(delta[i]) - uniform_eps; break;
      case BudgetKind::channelwise_linf:
        for (double c : delta[i]) excess = std::max(excess, std::abs(c) - uniform_eps);
        break;
    }
    worst = std::max(worst, excess);
  }
  return worst;
}

}  // namespace pointca
