#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <limits>
#include <numeric>
#include <queue>
#include <vector>

namespace headtrack {

struct Neighbor {
  std::size_t index = 0;
  double squared_distance = std::numeric_limits<double>::infinity();
};

inline bool closer(const Neighbor& a, const Neighbor& b) {
  return a.squared_distance < b.squared_distance ||
         (a.squared_distance == b.squared_distance && a.index < b.index);
}

/// Static 3-d tree over a point set. Queries return exactly what a linear
/// scan would, with ties on distance resolved to the lowest point index.
class KdTree {
 public:
  KdTree() = default;

  explicit KdTree(std::vector<Eigen::Vector3d> points, std::size_t leaf_size = 8)
      : points_(std::move(points)), leaf_size_(std::max<std::size_t>(leaf_size, 1)) {
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (!points_.empty()) build(0, points_.size());
  }

  std::size_t size() const { return points_.size(); }
  bool empty() const { return points_.empty(); }
  const std::vector<Eigen::Vector3d>& points() const { return points_; }

  Neighbor nearest(const Eigen::Vector3d& q) const {
    Neighbor best;
    if (!nodes_.empty()) search_nearest(0, q, best);
    return best;
  }

  /// Up to k neighbours sorted by (distance, index).
  std::vector<Neighbor> k_nearest(const Eigen::Vector3d& q, std::size_t k) const {
    std::vector<Neighbor> heap;  // max-heap on `closer`
    if (k == 0 || nodes_.empty()) return heap;
    heap.reserve(k + 1);
    search_knn(0, q, k, heap);
    std::sort_heap(heap.begin(), heap.end(), closer);
    return heap;
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

  std::size_t build(std::size_t begin, std::size_t end) {
    const std::size_t id = nodes_.size();
    nodes_.push_back({begin, end});
    if (end - begin <= leaf_size_) return id;

    Eigen::Vector3d lo = points_[order_[begin]];
    Eigen::Vector3d hi = lo;
    for (std::size_t i = begin; i < end; ++i) {
      lo = lo.cwiseMin(points_[order_[i]]);
      hi = hi.cwiseMax(points_[order_[i]]);
    }
    Eigen::Index axis = 0;
    (hi - lo).maxCoeff(&axis);
    if (hi(axis) == lo(axis)) return id;  // all coincident: keep as a leaf

    const std::size_t mid = begin + (end - begin) / 2;
    const auto ax = static_cast<int>(axis);
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                     order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](std::size_t a, std::size_t b) {
                       const double ca = points_[a](ax);
                       const double cb = points_[b](ax);
                       return ca < cb || (ca == cb && a < b);
                     });
    const double split = points_[order_[mid]](ax);
    const std::size_t l = build(begin, mid);
    const std::size_t r = build(mid, end);
    nodes_[id].axis = ax;
    nodes_[id].split = split;
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  void search_nearest(std::size_t node_id, const Eigen::Vector3d& q, Neighbor& best) const {
    const Node& node = nodes_[node_id];
    if (node.axis < 0) {
      for (std::size_t i = node.begin; i < node.end; ++i) {
        const std::size_t idx = order_[i];
        const Neighbor cand{idx, (points_[idx] - q).squaredNorm()};
        if (closer(cand, best)) best = cand;
      }
      return;
    }
    const double diff = q(node.axis) - node.split;
    const std::size_t near_child = diff < 0.0 ? node.left : node.right;
    const std::size_t far_child = diff < 0.0 ? node.right : node.left;
    search_nearest(near_child, q, best);
    // `<=` keeps equidistant points on the far side eligible for the tie-break.
    if (diff * diff <= best.squared_distance) search_nearest(far_child, q, best);
  }

  void search_knn(std::size_t node_id, const Eigen::Vector3d& q, std::size_t k,
                  std::vector<Neighbor>& heap) const {
    const Node& node = nodes_[node_id];
    if (node.axis < 0) {
      for (std::size_t i = node.begin; i < node.end; ++i) {
        const std::size_t idx = order_[i];
        const Neighbor cand{idx, (points_[idx] - q).squaredNorm()};
        if (heap.size() < k) {
          heap.push_back(cand);
          std::push_heap(heap.begin(), heap.end(), closer);
        } else if (closer(cand, heap.front())) {
          std::pop_heap(heap.begin(), heap.end(), closer);
          heap.back() = cand;
          std::push_heap(heap.begin(), heap.end(), closer);
        }
      }
      return;
    }
    const double diff = q(node.axis) - node.split;
    const std::size_t near_child = diff < 0.0 ? node.left : node.right;
    const std::size_t far_child = diff < 0.0 ? node.right : node.left;
    search_knn(near_child, q, k, heap);
    if (heap.size() < k || diff * diff <= heap.front().squared_distance) {
      search_knn(far_child, q, k, heap);
    }
  }

  std::vector<Eigen::Vector3d> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
  std::size_t leaf_size_ = 8;
};

}  // namespace headtrack
