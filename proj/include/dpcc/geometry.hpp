#pragma once

#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "dpcc/common.hpp"
#include "dpcc/kdtree.hpp"

namespace dpcc {

using Points = Eigen::Matrix<double, Eigen::Dynamic, 3>;

struct PointCloud {
  Points points;  // P x 3
  std::string label;

  Eigen::Index size() const { return points.rows(); }
};

struct NormStats {
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  double scale = 1.0;
};

enum class CloudFormat { xyz_text, ply_ascii };

enum class ShapeKind { sphere, torus, box, cylinder, cone };

inline const std::vector<std::string>& shape_kind_names() {
  static const std::vector<std::string> names = {"sphere", "torus", "box", "cylinder", "cone"};
  return names;
}

inline ShapeKind parse_shape_kind(const std::string& name) {
  const auto& names = shape_kind_names();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<ShapeKind>(i);
  fail(ErrorKind::argument, "unknown shape kind: " + name);
}

namespace detail {

inline bool blank_line(const std::string& s) {
  for (char c : s)
    if (!std::isspace(static_cast<unsigned char>(c))) return false;
  return true;
}

inline std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream iss(s);
  std::string tok;
  while (iss >> tok) out.push_back(tok);
  return out;
}

inline double parse_double(const std::string& tok, int line_no, const std::string& path) {
  const char* begin = tok.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0' || !std::isfinite(v))
    fail(ErrorKind::parse, path + ": non-numeric field '" + tok + "' at line " + std::to_string(line_no));
  return v;
}

}  // namespace detail

inline PointCloud load_xyz(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::io, "cannot open " + path);
  std::vector<Eigen::Vector3d> pts;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::blank_line(line)) continue;
    const auto toks = detail::split_ws(line);
    if (toks.size() != 3)
      fail(ErrorKind::parse, path + ": expected 3 fields at line " + std::to_string(line_no));
    pts.emplace_back(detail::parse_double(toks[0], line_no, path), detail::parse_double(toks[1], line_no, path),
                     detail::parse_double(toks[2], line_no, path));
  }
  require(!pts.empty(), ErrorKind::parse, path + ": empty point cloud");
  PointCloud pc;
  pc.points.resize(static_cast<Eigen::Index>(pts.size()), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) pc.points.row(static_cast<Eigen::Index>(i)) = pts[i];
  return pc;
}

// ASCII PLY: x/y/z vertex properties are consumed, everything else is skipped.
inline PointCloud load_ply_ascii(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::io, "cannot open " + path);
  std::string line;
  int line_no = 0;

  auto next_line = [&](std::string& out) {
    if (!std::getline(in, out)) return false;
    ++line_no;
    return true;
  };

  require(next_line(line) && detail::split_ws(line) == std::vector<std::string>{"ply"}, ErrorKind::parse,
          path + ": missing ply magic");

  struct Element {
    std::string name;
    long count = 0;
    std::vector<std::string> properties;
  };
  std::vector<Element> elements;
  bool ascii = false;
  while (next_line(line)) {
    const auto toks = detail::split_ws(line);
    if (toks.empty() || toks[0] == "comment") continue;
    if (toks[0] == "format") {
      ascii = toks.size() >= 2 && toks[1] == "ascii";
    } else if (toks[0] == "element" && toks.size() == 3) {
      elements.push_back({toks[1], std::strtol(toks[2].c_str(), nullptr, 10), {}});
    } else if (toks[0] == "property" && !elements.empty()) {
      // scalar: property <type> <name>; list: property list <ct> <t> <name>
      elements.back().properties.push_back(toks.back());
    } else if (toks[0] == "end_header") {
      break;
    } else {
      fail(ErrorKind::parse, path + ": bad header line " + std::to_string(line_no));
    }
  }
  require(ascii, ErrorKind::parse, path + ": not an ascii PLY");

  PointCloud pc;
  for (const auto& el : elements) {
    if (el.name != "vertex") {
      for (long i = 0; i < el.count; ++i)
        require(next_line(line), ErrorKind::parse, path + ": truncated element " + el.name);
      continue;
    }
    int ix = -1, iy = -1, iz = -1;
    for (std::size_t p = 0; p < el.properties.size(); ++p) {
      if (el.properties[p] == "x") ix = static_cast<int>(p);
      if (el.properties[p] == "y") iy = static_cast<int>(p);
      if (el.properties[p] == "z") iz = static_cast<int>(p);
    }
    require(ix >= 0 && iy >= 0 && iz >= 0, ErrorKind::parse, path + ": vertex element lacks x/y/z");
    pc.points.resize(el.count, 3);
    for (long i = 0; i < el.count; ++i) {
      require(next_line(line), ErrorKind::parse, path + ": truncated vertex list");
      const auto toks = detail::split_ws(line);
      if (toks.size() < el.properties.size())
        fail(ErrorKind::parse, path + ": short vertex line " + std::to_string(line_no));
      pc.points(i, 0) = detail::parse_double(toks[static_cast<std::size_t>(ix)], line_no, path);
      pc.points(i, 1) = detail::parse_double(toks[static_cast<std::size_t>(iy)], line_no, path);
      pc.points(i, 2) = detail::parse_double(toks[static_cast<std::size_t>(iz)], line_no, path);
    }
  }
  require(pc.points.rows() > 0, ErrorKind::parse, path + ": empty point cloud");
  return pc;
}

inline PointCloud load_point_cloud(const std::string& path, CloudFormat format) {
  return format == CloudFormat::xyz_text ? load_xyz(path) : load_ply_ascii(path);
}

// Picks the format from the file extension; ".ply" is PLY, anything else xyz.
inline PointCloud load_point_cloud(const std::string& path) {
  const auto dot = path.rfind('.');
  if (dot != std::string::npos && path.substr(dot) == ".ply") return load_ply_ascii(path);
  return load_xyz(path);
}

inline void save_xyz(const PointCloud& pc, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), ErrorKind::io, "cannot write " + path);
  char buf[128];
  for (Eigen::Index i = 0; i < pc.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g\n", pc.points(i, 0), pc.points(i, 1), pc.points(i, 2));
    out << buf;
  }
  require(out.good(), ErrorKind::io, "write failed: " + path);
}

// P points from pc: without replacement when pc has at least P points
// (a random subset in random order), with replacement otherwise.
inline PointCloud sample_points(const PointCloud& pc, Eigen::Index P, std::uint64_t seed) {
  require(pc.size() > 0, ErrorKind::argument, "sample_points: empty cloud");
  require(P > 0, ErrorKind::argument, "sample_points: P must be positive");
  Rng rng(seed);
  PointCloud out;
  out.label = pc.label;
  out.points.resize(P, 3);
  const auto n = static_cast<std::uint64_t>(pc.size());
  if (pc.size() >= P) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(pc.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<Eigen::Index>(i);
    for (Eigen::Index i = 0; i < P; ++i) {
      const auto j = i + static_cast<Eigen::Index>(rng.below(n - static_cast<std::uint64_t>(i)));
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
      out.points.row(i) = pc.points.row(idx[static_cast<std::size_t>(i)]);
    }
  } else {
    for (Eigen::Index i = 0; i < P; ++i)
      out.points.row(i) = pc.points.row(static_cast<Eigen::Index>(rng.below(n)));
  }
  return out;
}

// Zero-mean, pooled unit-variance transform. One isotropic scalar scale keeps
// aspect ratios intact: sigma^2 = (1/(3P)) sum_i |x_i - mu|^2.
inline std::pair<PointCloud, NormStats> normalize(const PointCloud& pc) {
  require(pc.size() >= 2, ErrorKind::degenerate, "normalize: need at least 2 points");
  NormStats stats;
  stats.centroid = pc.points.colwise().mean().transpose();
  const Points centered = pc.points.rowwise() - stats.centroid.transpose();
  stats.scale = std::sqrt(centered.squaredNorm() / (3.0 * static_cast<double>(pc.size())));
  require(stats.scale >= 1e-12, ErrorKind::degenerate, "normalize: degenerate cloud (zero variance)");
  PointCloud out;
  out.label = pc.label;
  out.points = centered / stats.scale;
  return {out, stats};
}

inline PointCloud denormalize(const PointCloud& pc, const NormStats& stats) {
  require(stats.scale > 0, ErrorKind::argument, "denormalize: scale must be positive");
  PointCloud out;
  out.label = pc.label;
  out.points = (pc.points * stats.scale).rowwise() + stats.centroid.transpose();
  return out;
}

namespace detail {

inline Eigen::Vector3d sphere_point(Rng& rng) {
  const double z = 1.0 - 2.0 * rng.uniform();
  const double phi = 2.0 * M_PI * rng.uniform();
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  return {r * std::cos(phi), r * std::sin(phi), z};
}

inline Eigen::Vector3d torus_point(Rng& rng) {
  const double R = 0.75, r = 0.25;
  const double theta = 2.0 * M_PI * rng.uniform();
  // area density along the tube angle is proportional to R + r*cos(phi)
  double phi;
  for (;;) {
    phi = 2.0 * M_PI * rng.uniform();
    if (rng.uniform() * (R + r) <= R + r * std::cos(phi)) break;
  }
  const double w = R + r * std::cos(phi);
  return {w * std::cos(theta), w * std::sin(theta), r * std::sin(phi)};
}

inline Eigen::Vector3d box_point(Rng& rng) {
  // unit cube centered at the origin; faces have equal area
  const auto face = static_cast<int>(rng.below(6));
  const double u = rng.uniform() - 0.5;
  const double v = rng.uniform() - 0.5;
  const double s = (face % 2 == 0) ? 0.5 : -0.5;
  switch (face / 2) {
    case 0: return {s, u, v};
    case 1: return {u, s, v};
    default: return {u, v, s};
  }
}

inline Eigen::Vector3d cylinder_point(Rng& rng) {
  const double r = 0.5, h = 1.0;
  const double side = 2.0 * M_PI * r * h;
  const double cap = M_PI * r * r;
  const double pick = rng.uniform() * (side + 2.0 * cap);
  const double phi = 2.0 * M_PI * rng.uniform();
  if (pick < side) {
    const double z = (rng.uniform() - 0.5) * h;
    return {r * std::cos(phi), r * std::sin(phi), z};
  }
  const double rr = r * std::sqrt(rng.uniform());
  const double z = pick < side + cap ? 0.5 * h : -0.5 * h;
  return {rr * std::cos(phi), rr * std::sin(phi), z};
}

inline Eigen::Vector3d cone_point(Rng& rng) {
  const double r = 0.5, h = 1.0;  // apex (0,0,0.5), base disk at z = -0.5
  const double slant = std::sqrt(r * r + h * h);
  const double side = M_PI * r * slant;
  const double base = M_PI * r * r;
  const double pick = rng.uniform() * (side + base);
  const double phi = 2.0 * M_PI * rng.uniform();
  if (pick < side) {
    const double s = std::sqrt(rng.uniform());  // fraction of the way from apex to rim
    return {s * r * std::cos(phi), s * r * std::sin(phi), 0.5 - s * h};
  }
  const double rr = r * std::sqrt(rng.uniform());
  return {rr * std::cos(phi), rr * std::sin(phi), -0.5};
}

}  // namespace detail

// P points sampled uniformly by surface area on a unit-scale primitive, plus
// isotropic Gaussian jitter.
inline PointCloud gen_shape(ShapeKind kind, Eigen::Index P, double jitter, std::uint64_t seed) {
  require(P >= 1, ErrorKind::argument, "gen_shape: P must be >= 1");
  require(jitter >= 0, ErrorKind::argument, "gen_shape: jitter must be >= 0");
  Rng rng(seed);
  PointCloud pc;
  pc.label = shape_kind_names()[static_cast<std::size_t>(kind)];
  pc.points.resize(P, 3);
  for (Eigen::Index i = 0; i < P; ++i) {
    Eigen::Vector3d p;
    switch (kind) {
      case ShapeKind::sphere: p = detail::sphere_point(rng); break;
      case ShapeKind::torus: p = detail::torus_point(rng); break;
      case ShapeKind::box: p = detail::box_point(rng); break;
      case ShapeKind::cylinder: p = detail::cylinder_point(rng); break;
      case ShapeKind::cone: p = detail::cone_point(rng); break;
      default: fail(ErrorKind::argument, "gen_shape: unknown kind");
    }
    if (jitter > 0) p += jitter * rng.normal3();
    pc.points.row(i) = p;
  }
  return pc;
}

// Per-point unit normal from the smallest-eigenvalue eigenvector of the k-NN
// covariance (neighborhood includes the point itself). Sign points away from
// the cloud centroid.
inline Points estimate_normals(const PointCloud& pc, int k) {
  require(k >= 3, ErrorKind::argument, "estimate_normals: k must be >= 3");
  require(pc.size() >= k, ErrorKind::argument, "estimate_normals: cloud smaller than k");
  const KdTree3 tree(pc.points);
  const Eigen::Vector3d centroid = pc.points.colwise().mean().transpose();
  Points normals(pc.size(), 3);
  for (Eigen::Index i = 0; i < pc.size(); ++i) {
    const auto hits = tree.knn(pc.points.row(i).transpose(), k);
    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    for (const auto& h : hits) mean += pc.points.row(h.index).transpose();
    mean /= static_cast<double>(hits.size());
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (const auto& h : hits) {
      const Eigen::Vector3d d = pc.points.row(h.index).transpose() - mean;
      cov += d * d.transpose();
    }
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
    Eigen::Vector3d n = eig.eigenvectors().col(0);  // eigenvalues ascending
    n.normalize();
    if (n.dot(pc.points.row(i).transpose() - centroid) < 0) n = -n;
    normals.row(i) = n;
  }
  return normals;
}

}  // namespace dpcc
