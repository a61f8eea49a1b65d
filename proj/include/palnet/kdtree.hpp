#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "palnet/common.hpp"

namespace palnet {

/// Balanced KD-tree over 3D points, built once per cloud. Queries return hits
/// sorted ascending by distance; exact distance ties break toward the lower
/// original index so results match an exhaustive scan.
class KdTree {
 public:
  struct Hit {
    std::size_t index;
    double distance;
  };

  explicit KdTree(std::vector<Vec3> points) : points_(std::move(points)) {
    const std::size_t n = points_.size();
    order_.resize(n);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    nodes_.reserve(n / kBucket * 2 + 2);
    if (n > 0) root_ = build(0, n);
  }

  std::size_t size() const { return points_.size(); }
  const std::vector<Vec3>& points() const { return points_; }
  const Vec3& point(std::size_t i) const { return points_.at(i); }

  std::vector<Hit> knn(const Vec3& query, std::size_t k) const {
    if (k > points_.size()) throw Error("knn: k exceeds cloud size");
    std::vector<Entry> heap;  // max-heap on (dist2, index)
    heap.reserve(k + 1);
    if (k > 0) search_knn(root_, query, k, heap);
    std::sort_heap(heap.begin(), heap.end());
    std::vector<Hit> out(heap.size());
    for (std::size_t i = 0; i < heap.size(); ++i)
      out[i] = Hit{heap[i].index, std::sqrt(heap[i].dist2)};
    return out;
  }

  /// All points with distance <= r (closed ball).
  std::vector<Hit> radius(const Vec3& query, double r) const {
    if (r < 0.0) throw Error("radius: radius must be non-negative");
    std::vector<Entry> found;
    if (!points_.empty()) search_radius(root_, query, r * r, found);
    std::sort(found.begin(), found.end());
    std::vector<Hit> out(found.size());
    for (std::size_t i = 0; i < found.size(); ++i)
      out[i] = Hit{found[i].index, std::sqrt(found[i].dist2)};
    return out;
  }

  Hit nearest(const Vec3& query) const { return knn(query, 1).front(); }

 private:
  static constexpr std::size_t kBucket = 16;

  struct Entry {
    double dist2;
    std::size_t index;
    bool operator<(const Entry& o) const {
      return dist2 != o.dist2 ? dist2 < o.dist2 : index < o.index;
    }
  };

  struct Node {
    int axis = -1;  // -1 marks a leaf
    double split = 0.0;
    std::int32_t left = -1, right = -1;
    std::uint32_t begin = 0, end = 0;
  };

  std::int32_t build(std::size_t begin, std::size_t end) {
    Node node;
    if (end - begin <= kBucket) {
      node.begin = static_cast<std::uint32_t>(begin);
      node.end = static_cast<std::uint32_t>(end);
      nodes_.push_back(node);
      return static_cast<std::int32_t>(nodes_.size() - 1);
    }
    Vec3 lo = points_[order_[begin]], hi = lo;
    for (std::size_t i = begin + 1; i < end; ++i) {
      lo = lo.cwiseMin(points_[order_[i]]);
      hi = hi.cwiseMax(points_[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::size_t a, std::size_t b) {
                       return points_[a][axis] < points_[b][axis];
                     });
    node.axis = axis;
    node.split = points_[order_[mid]][axis];
    nodes_.push_back(node);
    const std::int32_t self = static_cast<std::int32_t>(nodes_.size() - 1);
    const std::int32_t l = build(begin, mid);
    const std::int32_t r = build(mid, end);
    nodes_[self].left = l;
    nodes_[self].right = r;
    return self;
  }

  void consider(const Vec3& query, std::size_t idx, std::size_t k, std::vector<Entry>& heap) const {
    Entry e{(points_[idx] - query).squaredNorm(), idx};
    if (heap.size() < k) {
      heap.push_back(e);
      std::push_heap(heap.begin(), heap.end());
    } else if (e < heap.front()) {
      std::pop_heap(heap.begin(), heap.end());
      heap.back() = e;
      std::push_heap(heap.begin(), heap.end());
    }
  }

  void search_knn(std::int32_t ni, const Vec3& query, std::size_t k, std::vector<Entry>& heap) const {
    const Node& node = nodes_[ni];
    if (node.axis < 0) {
      for (std::uint32_t i = node.begin; i < node.end; ++i)
        consider(query, order_[i], k, heap);
      return;
    }
    const double delta = query[node.axis] - node.split;
    const std::int32_t near = delta < 0.0 ? node.left : node.right;
    const std::int32_t far = delta < 0.0 ? node.right : node.left;
    search_knn(near, query, k, heap);
    // Explore the far side unless it provably cannot improve the worst hit;
    // equality still explores so index tie-breaks stay exact.
    if (heap.size() < k || delta * delta <= heap.front().dist2)
      search_knn(far, query, k, heap);
  }

  void search_radius(std::int32_t ni, const Vec3& query, double r2, std::vector<Entry>& out) const {
    const Node& node = nodes_[ni];
    if (node.axis < 0) {
      for (std::uint32_t i = node.begin; i < node.end; ++i) {
        const std::size_t idx = order_[i];
        const double d2 = (points_[idx] - query).squaredNorm();
        if (d2 <= r2) out.push_back(Entry{d2, idx});
      }
      return;
    }
    const double delta = query[node.axis] - node.split;
    const std::int32_t near = delta < 0.0 ? node.left : node.right;
    const std::int32_t far = delta < 0.0 ? node.right : node.left;
    search_radius(near, query, r2, out);
    if (delta * delta <= r2) search_radius(far, query, r2, out);
  }

  std::vector<Vec3> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
  std::int32_t root_ = -1;
};

}  // namespace palnet
