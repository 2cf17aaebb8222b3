#pragma once

#include <algorithm>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dpcc/codec.hpp"
#include "dpcc/common.hpp"
#include "dpcc/geometry.hpp"
#include "dpcc/kdtree.hpp"

namespace dpcc {

struct MetricReport {
  double chamfer = 0.0;     // squared-distance units
  double emd = 0.0;         // distance units
  double psnr_p2plane = 0.0;  // dB, capped at 100
  double bpp = 0.0;
  bool emd_approximate = false;
};

// Symmetric point-to-point Chamfer distance: sum of the two directed means of
// squared nearest-neighbor distances.
inline double chamfer(const PointCloud& a, const PointCloud& b) {
  require(a.size() > 0 && b.size() > 0, ErrorKind::argument, "chamfer: empty cloud");
  const KdTree3 ta(a.points);
  const KdTree3 tb(b.points);
  double ab = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) ab += tb.nearest(a.points.row(i).transpose()).sq_dist;
  double ba = 0.0;
  for (Eigen::Index i = 0; i < b.size(); ++i) ba += ta.nearest(b.points.row(i).transpose()).sq_dist;
  return ab / static_cast<double>(a.size()) + ba / static_cast<double>(b.size());
}

namespace detail {

// Jonker-Volgenant style shortest augmenting path; O(n^3) min-cost perfect
// matching. Returns row -> column.
inline std::vector<int> solve_assignment(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  require(cost.cols() == n && n >= 1, ErrorKind::contract, "solve_assignment: cost must be square");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> match(static_cast<std::size_t>(n) + 1, 0), way(static_cast<std::size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
    std::vector<bool> used(static_cast<std::size_t>(n) + 1, false);
    do {
      used[static_cast<std::size_t>(j0)] = true;
      const int i0 = match[static_cast<std::size_t>(j0)];
      int j1 = 0;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(match[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (match[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      match[static_cast<std::size_t>(j0)] = match[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j)
    if (match[static_cast<std::size_t>(j)] != 0)
      row_to_col[static_cast<std::size_t>(match[static_cast<std::size_t>(j)]) - 1] = j - 1;
  return row_to_col;
}

inline Eigen::MatrixXd pairwise_distances(const PointCloud& a, const PointCloud& b) {
  Eigen::MatrixXd d(a.size(), b.size());
  for (Eigen::Index i = 0; i < a.size(); ++i)
    for (Eigen::Index j = 0; j < b.size(); ++j)
      d(i, j) = std::sqrt(sq_dist3(a.points.row(i).transpose(), b.points.row(j).transpose()));
  return d;
}

// Entropic regularized transport (Sinkhorn) with uniform marginals.
inline double sinkhorn_cost(const Eigen::MatrixXd& dist, int iters) {
  const Eigen::Index n = dist.rows();
  std::vector<double> flat(dist.data(), dist.data() + dist.size());
  auto mid = flat.begin() + flat.size() / 2;
  std::nth_element(flat.begin(), mid, flat.end());
  const double reg = std::max(0.01 * *mid, 1e-12);
  const Eigen::MatrixXd K = (-dist / reg).array().exp().matrix();
  const Eigen::VectorXd marginal = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  Eigen::VectorXd u = Eigen::VectorXd::Ones(n), v = Eigen::VectorXd::Ones(n);
  for (int it = 0; it < iters; ++it) {
    u = marginal.cwiseQuotient((K * v).cwiseMax(1e-300));
    v = marginal.cwiseQuotient((K.transpose() * u).cwiseMax(1e-300));
  }
  return (u.asDiagonal() * K * v.asDiagonal()).cwiseProduct(dist).sum();
}

}  // namespace detail

constexpr Eigen::Index kEmdExactLimit = 1024;
constexpr int kSinkhornIters = 500;

struct EmdResult {
  double value = 0.0;
  bool approximate = false;
};

// Minimum mean pairwise (unsquared) distance over bijections. Exact cubic
// solver up to kEmdExactLimit points, entropic approximation above.
inline EmdResult emd_ex(const PointCloud& a, const PointCloud& b) {
  require(a.size() > 0, ErrorKind::argument, "emd: empty cloud");
  require(a.size() == b.size(), ErrorKind::argument, "emd: clouds must have equal size");
  const Eigen::MatrixXd dist = detail::pairwise_distances(a, b);
  if (a.size() <= kEmdExactLimit) {
    const auto match = detail::solve_assignment(dist);
    double total = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) total += dist(i, match[static_cast<std::size_t>(i)]);
    return {total / static_cast<double>(a.size()), false};
  }
  return {detail::sinkhorn_cost(dist, kSinkhornIters), true};
}

inline double emd(const PointCloud& a, const PointCloud& b) { return emd_ex(a, b).value; }

constexpr double kPsnrCapDb = 100.0;

// Point-to-plane PSNR: residuals to the nearest reference point projected on
// that point's normal. Peak is the longest bounding-box edge of the reference.
inline double psnr_p2plane(const PointCloud& ref, const PointCloud& rec, const Points& ref_normals) {
  require(ref.size() > 0 && rec.size() > 0, ErrorKind::argument, "psnr_p2plane: empty cloud");
  require(ref_normals.rows() == ref.size(), ErrorKind::argument, "psnr_p2plane: one normal per reference point");
  const Eigen::Vector3d extent = ref.points.colwise().maxCoeff() - ref.points.colwise().minCoeff();
  const double peak = extent.maxCoeff();
  require(peak > 0, ErrorKind::degenerate, "psnr_p2plane: reference bounding box is degenerate");
  const KdTree3 tree(ref.points);
  double mse = 0.0;
  for (Eigen::Index i = 0; i < rec.size(); ++i) {
    const auto hit = tree.nearest(rec.points.row(i).transpose());
    const Eigen::Vector3d residual = rec.points.row(i).transpose() - ref.points.row(hit.index).transpose();
    const double e = residual.dot(ref_normals.row(hit.index).transpose());
    mse += e * e;
  }
  mse /= static_cast<double>(rec.size());
  if (mse < peak * peak * 1e-10) return kPsnrCapDb;
  return 10.0 * std::log10(peak * peak / mse);
}

// All four metrics on original-coordinate clouds.
inline MetricReport evaluate(const PointCloud& ref, const PointCloud& rec, const Bitstream& stream,
                             int normal_k = 16) {
  MetricReport r;
  r.chamfer = chamfer(ref, rec);
  const EmdResult e = emd_ex(ref, rec);
  r.emd = e.value;
  r.emd_approximate = e.approximate;
  const int k = static_cast<int>(std::min<Eigen::Index>(normal_k, ref.size()));
  r.psnr_p2plane = psnr_p2plane(ref, rec, estimate_normals(ref, k));
  r.bpp = bpp(stream);
  return r;
}

inline std::string metric_csv_header() { return "sample_id,P,C,N,bpp,chamfer,emd,psnr_db,flags"; }

inline std::string metric_csv_row(const std::string& sample_id, const MetricReport& r, Eigen::Index P, int C,
                                  int N) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%lld,%d,%d,%.9g,%.9g,%.9g,%.9g,%s", sample_id.c_str(),
                static_cast<long long>(P), C, N, r.bpp, r.chamfer, r.emd, r.psnr_p2plane,
                r.emd_approximate ? "emd_approx" : "");
  return buf;
}

}  // namespace dpcc
