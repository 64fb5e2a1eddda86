#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pointca/error.hpp"

namespace pointca {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

// All neighbor searches go through this one expression so that brute force
// and tree search agree bit for bit.
inline double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

enum class CloudKind { partial, complete, adversarial, reconstructed };

inline const char* to_string(CloudKind kind) {
  switch (kind) {
    case CloudKind::partial: return "partial";
    case CloudKind::complete: return "complete";
    case CloudKind::adversarial: return "adversarial";
    case CloudKind::reconstructed: return "reconstructed";
  }
  return "partial";
}

struct PointCloud {
  std::vector<Vec3> points;
  std::optional<int> label;
  CloudKind kind = CloudKind::partial;

  PointCloud() = default;
  explicit PointCloud(std::vector<Vec3> pts, CloudKind k = CloudKind::partial,
                      std::optional<int> lbl = std::nullopt)
      : points(std::move(pts)), label(lbl), kind(k) {}

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  const Vec3& operator[](std::size_t i) const { return points[i]; }
  Vec3& operator[](std::size_t i) { return points[i]; }
  std::span<const Vec3> span() const { return points; }

  /// Throws EmptyCloud / InvalidParam when the cloud breaks its invariants.
  void validate() const {
    if (points.empty()) throw Error(Errc::EmptyCloud, "point cloud has no points");
    for (std::size_t i = 0; i < points.size(); ++i) {
      for (double c : points[i]) {
        if (!std::isfinite(c)) {
          throw Error(Errc::InvalidParam, "non-finite coordinate at point " + std::to_string(i));
        }
      }
    }
  }
};

/// Row-major m x 3 buffer of the cloud's coordinates.
inline std::vector<double> flatten(std::span<const Vec3> points) {
  std::vector<double> out;
  out.reserve(points.size() * 3);
  for (const auto& p : points) out.insert(out.end(), p.begin(), p.end());
  return out;
}

inline std::vector<Vec3> unflatten(std::span<const double> values) {
  std::vector<Vec3> out(values.size() / 3);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {values[3 * i], values[3 * i + 1], values[3 * i + 2]};
  return out;
}

}  // namespace pointca
