#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <optional>
#include <queue>
#include <span>
#include <vector>

#include "pointca/point_cloud.hpp"

namespace pointca {

struct Neighbor {
  std::size_t index = 0;
  double sq_dist = 0.0;
};

// Strict weak order used everywhere: distance first, then lower index.
inline bool closer(const Neighbor& a, const Neighbor& b) {
  return a.sq_dist < b.sq_dist || (a.sq_dist == b.sq_dist && a.index < b.index);
}

/// Clouds above this size use the kd-tree; results are identical either way.
inline constexpr std::size_t kTreeThreshold = 512;

/// Static kd-tree over a point set for exact k-nearest-neighbor queries.
class KdTree {
 public:
  explicit KdTree(std::span<const Vec3> points, std::size_t leaf_size = 8)
      : points_(points.begin(), points.end()), leaf_size_(std::max<std::size_t>(leaf_size, 1)) {
    order_.resize(points_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    if (!points_.empty()) build(0, points_.size());
  }

  std::size_t size() const { return points_.size(); }

  /// The k nearest points to `query` sorted by (distance, index). `exclude`
  /// removes one index from consideration (the query's own slot).
  std::vector<Neighbor> knn(const Vec3& query, std::size_t k,
                            std::optional<std::size_t> exclude = std::nullopt) const {
    Heap heap;
    if (k == 0 || nodes_.empty()) return {};
    search(0, query, k, exclude, heap);
    std::vector<Neighbor> out;
    out.reserve(heap.size());
    while (!heap.empty()) {
      out.push_back(heap.top());
      heap.pop();
    }
    std::reverse(out.begin(), out.end());
    return out;
  }

  Neighbor nearest(const Vec3& query) const {
    Neighbor best{std::numeric_limits<std::size_t>::max(), std::numeric_limits<double>::infinity()};
    if (!nodes_.empty()) search_nearest(0, query, best);
    return best;
  }

 private:
  struct Node {
    std::size_t begin = 0;
    std::size_t end = 0;
    int axis = -1;  // -1 marks a leaf
    double split = 0.0;
    std::size_t left = 0;
    std::size_t right = 0;
  };

  struct Worse {
    bool operator()(const Neighbor& a, const Neighbor& b) const { return closer(a, b); }
  };
  using Heap = std::priority_queue<Neighbor, std::vector<Neighbor>, Worse>;

  std::size_t build(std::size_t begin, std::size_t end) {
    const std::size_t id = nodes_.size();
    nodes_.push_back(Node{begin, end});
    if (end - begin <= leaf_size_) return id;

    Vec3 lo = points_[order_[begin]];
    Vec3 hi = lo;
    for (std::size_t i = begin; i < end; ++i) {
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], points_[order_[i]][a]);
        hi[a] = std::max(hi[a], points_[order_[i]][a]);
      }
    }
    int axis = 0;
    for (int a = 1; a < 3; ++a) {
      if (hi[a] - lo[a] > hi[axis] - lo[axis]) axis = a;
    }
    if (hi[axis] == lo[axis]) return id;  // all coincident: keep as leaf

    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                     order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](std::size_t a, std::size_t b) { return points_[a][axis] < points_[b][axis]; });
    const double split = points_[order_[mid]][axis];
    const std::size_t left = build(begin, mid);
    const std::size_t right = build(mid, end);
    nodes_[id].axis = axis;
    nodes_[id].split = split;
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  void search(std::size_t id, const Vec3& q, std::size_t k, const std::optional<std::size_t>& exclude,
              Heap& heap) const {
    const Node& node = nodes_[id];
    if (node.axis < 0) {
      for (std::size_t i = node.begin; i < node.end; ++i) {
        const std::size_t idx = order_[i];
        if (exclude && *exclude == idx) continue;
        Neighbor cand{idx, squared_distance(q, points_[idx])};
        if (heap.size() < k) {
          heap.push(cand);
        } else if (closer(cand, heap.top())) {
          heap.pop();
          heap.push(cand);
        }
      }
      return;
    }
    const double diff = q[node.axis] - node.split;
    const std::size_t near = diff < 0 ? node.left : node.right;
    const std::size_t far = diff < 0 ? node.right : node.left;
    search(near, q, k, exclude, heap);
    // Equal bounds are still explored so that index tie-breaking stays exact.
    if (heap.size() < k || diff * diff <= heap.top().sq_dist) search(far, q, k, exclude, heap);
  }

  void search_nearest(std::size_t id, const Vec3& q, Neighbor& best) const {
    const Node& node = nodes_[id];
    if (node.axis < 0) {
      for (std::size_t i = node.begin; i < node.end; ++i) {
        const std::size_t idx = order_[i];
        Neighbor cand{idx, squared_distance(q, points_[idx])};
        if (closer(cand, best)) best = cand;
      }
      return;
    }
    const double diff = q[node.axis] - node.split;
    const std::size_t near = diff < 0 ? node.left : node.right;
    const std::size_t far = diff < 0 ? node.right : node.left;
    search_nearest(near, q, best);
    if (diff * diff <= best.sq_dist) search_nearest(far, q, best);
  }

  std::vector<Vec3> points_;
  std::size_t leaf_size_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

/// O(m^2) reference search: the k nearest other points of every point.
inline std::vector<std::vector<Neighbor>> knn_brute_force(std::span<const Vec3> points, std::size_t k) {
  std::vector<std::vector<Neighbor>> out(points.size());
  std::vector<Neighbor> all;
  for (std::size_t i = 0; i < points.size(); ++i) {
    all.clear();
    for (std::size_t j = 0; j < points.size(); ++j) {
      if (j != i) all.push_back({j, squared_distance(points[i], points[j])});
    }
    const std::size_t kk = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(kk), all.end(), closer);
    out[i].assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(kk));
  }
  return out;
}

inline std::vector<std::vector<Neighbor>> knn_tree(std::span<const Vec3> points, std::size_t k) {
  KdTree tree(points);
  std::vector<std::vector<Neighbor>> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) out[i] = tree.knn(points[i], k, i);
  return out;
}

/// k nearest neighbors of every point, excluding the point itself.
inline std::vector<std::vector<Neighbor>> knn_all(std::span<const Vec3> points, std::size_t k) {
  return points.size() > kTreeThreshold ? knn_tree(points, k) : knn_brute_force(points, k);
}

/// Nearest reference point for every query (ties to the lower reference index).
inline std::vector<Neighbor> nearest_each(std::span<const Vec3> queries, std::span<const Vec3> reference) {
  std::vector<Neighbor> out(queries.size());
  if (reference.size() > kTreeThreshold / 8 && queries.size() > 16) {
    KdTree tree(reference);
    for (std::size_t i = 0; i < queries.size(); ++i) out[i] = tree.nearest(queries[i]);
    return out;
  }
  for (std::size_t i = 0; i < queries.size(); ++i) {
    Neighbor best{0, std::numeric_limits<double>::infinity()};
    for (std::size_t j = 0; j < reference.size(); ++j) {
      const double d = squared_distance(queries[i], reference[j]);
      if (d < best.sq_dist) best = {j, d};
    }
    out[i] = best;
  }
  return out;
}

}  // namespace pointca
