#pragma once

#include <algorithm>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "dpcc/common.hpp"

namespace dpcc {

// Same expression in every caller so accelerated and brute-force routes
// produce bit-identical distances.
inline double sq_dist3(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  const double dx = a.x() - b.x();
  const double dy = a.y() - b.y();
  const double dz = a.z() - b.z();
  return dx * dx + dy * dy + dz * dz;
}

// Static kd-tree over 3-D points for nearest-neighbor and k-NN queries.
class KdTree3 {
public:
  explicit KdTree3(const Eigen::Matrix<double, Eigen::Dynamic, 3>& pts) : pts_(pts) {
    require(pts_.rows() > 0, ErrorKind::argument, "KdTree3: empty point set");
    order_.resize(static_cast<std::size_t>(pts_.rows()));
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
    nodes_.reserve(order_.size());
    root_ = build(0, static_cast<int>(order_.size()));
  }

  struct Hit {
    int index = -1;
    double sq_dist = std::numeric_limits<double>::infinity();
  };

  Hit nearest(const Eigen::Vector3d& q) const {
    Hit best;
    search(root_, q, best);
    return best;
  }

  // k nearest (including exact duplicates of q), ascending by distance.
  std::vector<Hit> knn(const Eigen::Vector3d& q, int k) const {
    require(k >= 1 && k <= pts_.rows(), ErrorKind::argument, "KdTree3: k out of range");
    std::vector<Hit> heap;  // max-heap on sq_dist
    heap.reserve(static_cast<std::size_t>(k));
    search_knn(root_, q, k, heap);
    std::sort(heap.begin(), heap.end(), [](const Hit& a, const Hit& b) { return a.sq_dist < b.sq_dist; });
    return heap;
  }

private:
  struct Node {
    int point = -1;
    int axis = 0;
    int left = -1, right = -1;
  };

  int build(int lo, int hi) {
    if (lo >= hi) return -1;
    // split on the widest axis of this range
    Eigen::Vector3d mn = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
    Eigen::Vector3d mx = -mn;
    for (int i = lo; i < hi; ++i) {
      const auto p = pts_.row(order_[static_cast<std::size_t>(i)]);
      for (int a = 0; a < 3; ++a) {
        mn[a] = std::min(mn[a], p[a]);
        mx[a] = std::max(mx[a], p[a]);
      }
    }
    int axis = 0;
    for (int a = 1; a < 3; ++a)
      if (mx[a] - mn[a] > mx[axis] - mn[axis]) axis = a;

    const int mid = (lo + hi) / 2;
    std::nth_element(order_.begin() + lo, order_.begin() + mid, order_.begin() + hi,
                     [&](int a, int b) { return pts_(a, axis) < pts_(b, axis); });
    Node node;
    node.point = order_[static_cast<std::size_t>(mid)];
    node.axis = axis;
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    nodes_[static_cast<std::size_t>(id)].left = build(lo, mid);
    nodes_[static_cast<std::size_t>(id)].right = build(mid + 1, hi);
    return id;
  }

  void search(int id, const Eigen::Vector3d& q, Hit& best) const {
    if (id < 0) return;
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    const double d = sq_dist3(q, pts_.row(n.point).transpose());
    if (d < best.sq_dist) best = {n.point, d};
    const double delta = q[n.axis] - pts_(n.point, n.axis);
    const int near = delta < 0 ? n.left : n.right;
    const int far = delta < 0 ? n.right : n.left;
    search(near, q, best);
    if (delta * delta < best.sq_dist) search(far, q, best);
  }

  void search_knn(int id, const Eigen::Vector3d& q, int k, std::vector<Hit>& heap) const {
    if (id < 0) return;
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    const double d = sq_dist3(q, pts_.row(n.point).transpose());
    auto cmp = [](const Hit& a, const Hit& b) { return a.sq_dist < b.sq_dist; };
    if (static_cast<int>(heap.size()) < k) {
      heap.push_back({n.point, d});
      std::push_heap(heap.begin(), heap.end(), cmp);
    } else if (d < heap.front().sq_dist) {
      std::pop_heap(heap.begin(), heap.end(), cmp);
      heap.back() = {n.point, d};
      std::push_heap(heap.begin(), heap.end(), cmp);
    }
    const double delta = q[n.axis] - pts_(n.point, n.axis);
    const int near = delta < 0 ? n.left : n.right;
    const int far = delta < 0 ? n.right : n.left;
    search_knn(near, q, k, heap);
    const double worst =
        static_cast<int>(heap.size()) < k ? std::numeric_limits<double>::infinity() : heap.front().sq_dist;
    if (delta * delta < worst) search_knn(far, q, k, heap);
  }

  Eigen::Matrix<double, Eigen::Dynamic, 3> pts_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace dpcc
