#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "dpcc/geometry.hpp"

using namespace dpcc;
namespace fs = std::filesystem;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
  const auto path = fs::temp_directory_path() / name;
  std::ofstream out(path);
  out << content;
  return path.string();
}

}  // namespace

TEST_CASE("xyz loader parses points in file order") {
  const auto path = write_temp("geom_basic.xyz", "0 0 0\n1 2 3\n");
  const PointCloud pc = load_point_cloud(path, CloudFormat::xyz_text);
  REQUIRE(pc.size() == 2);
  CHECK(pc.points.row(0) == Eigen::RowVector3d(0, 0, 0));
  CHECK(pc.points.row(1) == Eigen::RowVector3d(1, 2, 3));
}

TEST_CASE("xyz loader reports the offending line") {
  const auto path = write_temp("geom_bad.xyz", "0 0 0\n0 0 abc\n");
  try {
    load_point_cloud(path, CloudFormat::xyz_text);
    FAIL("expected parse error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::parse);
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("xyz loader rejects empty files") {
  const auto path = write_temp("geom_empty.xyz", "");
  try {
    load_point_cloud(path, CloudFormat::xyz_text);
    FAIL("expected empty-cloud error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::parse);
  }
}

TEST_CASE("ply loader consumes vertices and ignores extras") {
  const auto path = write_temp("geom_tri.ply",
                               "ply\n"
                               "format ascii 1.0\n"
                               "comment made by hand\n"
                               "element vertex 3\n"
                               "property float x\n"
                               "property float y\n"
                               "property float z\n"
                               "property uchar red\n"
                               "element face 1\n"
                               "property list uchar int vertex_indices\n"
                               "end_header\n"
                               "0 0 0 255\n"
                               "1 0 0 255\n"
                               "0 1 0 255\n"
                               "3 0 1 2\n");
  const PointCloud pc = load_point_cloud(path, CloudFormat::ply_ascii);
  REQUIRE(pc.size() == 3);
  CHECK(pc.points.row(1) == Eigen::RowVector3d(1, 0, 0));
}

TEST_CASE("sample_points without replacement is a distinct reproducible subset") {
  PointCloud pc;
  pc.points.resize(4096, 3);
  for (Eigen::Index i = 0; i < 4096; ++i) pc.points.row(i) = Eigen::RowVector3d(double(i), 0, 0);
  const PointCloud a = sample_points(pc, 2048, 7);
  const PointCloud b = sample_points(pc, 2048, 7);
  REQUIRE(a.size() == 2048);
  CHECK(a.points == b.points);
  std::set<double> xs;
  for (Eigen::Index i = 0; i < a.size(); ++i) xs.insert(a.points(i, 0));
  CHECK(xs.size() == 2048);  // all distinct
}

TEST_CASE("sample_points with P equal to size is a permutation") {
  PointCloud pc;
  pc.points.resize(10, 3);
  for (Eigen::Index i = 0; i < 10; ++i) pc.points.row(i) = Eigen::RowVector3d(double(i), double(i), 0);
  const PointCloud s = sample_points(pc, 10, 3);
  std::set<double> xs;
  for (Eigen::Index i = 0; i < 10; ++i) xs.insert(s.points(i, 0));
  CHECK(xs.size() == 10);
}

TEST_CASE("sample_points draws with replacement when the cloud is small") {
  PointCloud pc;
  pc.points.resize(2, 3);
  pc.points << 1, 0, 0, 2, 0, 0;
  const PointCloud s = sample_points(pc, 4, 1);
  REQUIRE(s.size() == 4);
  for (Eigen::Index i = 0; i < 4; ++i) {
    const double x = s.points(i, 0);
    CHECK((x == 1.0 || x == 2.0));
  }
  CHECK_THROWS_AS(sample_points(pc, 0, 1), Error);
}

TEST_CASE("normalize centers and scales to pooled unit variance") {
  PointCloud pc;
  pc.points.resize(2, 3);
  pc.points << 0, 0, 0, 2, 0, 0;
  const auto [normed, stats] = normalize(pc);
  // sigma = sqrt((1 + 1) / (3 * 2)) = 1/sqrt(3), so x maps to +-sqrt(3)
  const double sigma = std::sqrt(2.0 / 6.0);
  CHECK(stats.scale == Catch::Approx(sigma).epsilon(1e-12));
  CHECK(normed.points(0, 0) == Catch::Approx(-std::sqrt(3.0)).epsilon(1e-12));
  CHECK(normed.points(1, 0) == Catch::Approx(std::sqrt(3.0)).epsilon(1e-12));
  CHECK(stats.centroid == Eigen::Vector3d(1, 0, 0));

  const Eigen::Vector3d c = normed.points.colwise().mean().transpose();
  CHECK(c.norm() < 1e-6);
  const double pooled_var = normed.points.squaredNorm() / (3.0 * 2.0);
  CHECK(std::abs(pooled_var - 1.0) < 1e-6);
}

TEST_CASE("normalize is idempotent and denormalize inverts it") {
  const PointCloud pc = gen_shape(ShapeKind::torus, 200, 0.02, 5);
  const auto [normed, stats] = normalize(pc);
  const auto [normed2, stats2] = normalize(normed);
  CHECK((normed2.points - normed.points).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(stats2.centroid.norm() < 1e-6);
  CHECK(stats2.scale == Catch::Approx(1.0).margin(1e-6));

  const PointCloud back = denormalize(normed, stats);
  CHECK((back.points - pc.points).cwiseAbs().maxCoeff() < 1e-6);

  const auto renorm = normalize(denormalize(normed, stats)).first;
  CHECK((renorm.points - normed.points).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("normalize rejects degenerate clouds") {
  PointCloud pc;
  pc.points.resize(3, 3);
  pc.points << 1, 1, 1, 1, 1, 1, 1, 1, 1;
  try {
    normalize(pc);
    FAIL("expected degenerate error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::degenerate);
  }
}

TEST_CASE("denormalize applies the affine transform") {
  PointCloud pc;
  pc.points.resize(1, 3);
  pc.points << 0, 0, 0;
  NormStats stats;
  stats.centroid = Eigen::Vector3d(1, 1, 1);
  stats.scale = 2.0;
  const PointCloud out = denormalize(pc, stats);
  CHECK(out.points.row(0) == Eigen::RowVector3d(1, 1, 1));

  NormStats identity;
  CHECK(denormalize(pc, identity).points == pc.points);
}

TEST_CASE("gen_shape sphere lies on the unit sphere") {
  const PointCloud pc = gen_shape(ShapeKind::sphere, 1000, 0.0, 11);
  for (Eigen::Index i = 0; i < pc.size(); ++i)
    CHECK(std::abs(pc.points.row(i).norm() - 1.0) < 1e-6);
}

TEST_CASE("gen_shape box points sit on the cube boundary") {
  const PointCloud pc = gen_shape(ShapeKind::box, 6, 0.0, 2);
  for (Eigen::Index i = 0; i < pc.size(); ++i) {
    const double m = pc.points.row(i).cwiseAbs().maxCoeff();
    CHECK(m == Catch::Approx(0.5).margin(1e-12));
  }
}

TEST_CASE("gen_shape is a pure function of its arguments") {
  for (const auto kind : {ShapeKind::sphere, ShapeKind::torus, ShapeKind::box, ShapeKind::cylinder, ShapeKind::cone}) {
    const PointCloud a = gen_shape(kind, 64, 0.05, 9);
    const PointCloud b = gen_shape(kind, 64, 0.05, 9);
    CHECK(a.points == b.points);
  }
  CHECK_THROWS_AS(parse_shape_kind("pyramid"), Error);
}

TEST_CASE("estimate_normals on a plane is the plane normal") {
  PointCloud pc;
  pc.points.resize(100, 3);
  Eigen::Index n = 0;
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j) pc.points.row(n++) = Eigen::RowVector3d(i * 0.1, j * 0.1, 0.0);
  const Points normals = estimate_normals(pc, 8);
  const Eigen::Vector3d centroid = pc.points.colwise().mean().transpose();
  for (Eigen::Index i = 0; i < pc.size(); ++i) {
    CHECK(std::abs(normals.row(i).norm() - 1.0) < 1e-9);
    CHECK(std::abs(normals(i, 2)) == Catch::Approx(1.0).margin(1e-9));
    // orthogonal to every centered point
    for (Eigen::Index j = 0; j < pc.size(); ++j) {
      const Eigen::Vector3d d = pc.points.row(j).transpose() - centroid;
      REQUIRE(std::abs(normals.row(i).dot(d.transpose())) < 1e-9);
    }
  }
}

TEST_CASE("estimate_normals on a sphere tracks the radial direction") {
  const PointCloud pc = gen_shape(ShapeKind::sphere, 2000, 0.0, 13);
  const Points normals = estimate_normals(pc, 16);
  Eigen::Index good = 0;
  const double cos15 = std::cos(15.0 * M_PI / 180.0);
  for (Eigen::Index i = 0; i < pc.size(); ++i) {
    const Eigen::Vector3d radial = pc.points.row(i).normalized().transpose();
    if (std::abs(normals.row(i).dot(radial.transpose())) >= cos15) ++good;
  }
  CHECK(static_cast<double>(good) / static_cast<double>(pc.size()) >= 0.95);
  CHECK_THROWS_AS(estimate_normals(pc, static_cast<int>(pc.size()) + 1), Error);
}

TEST_CASE("save_xyz round-trips through the loader") {
  const PointCloud pc = gen_shape(ShapeKind::cone, 50, 0.01, 21);
  const auto path = (fs::temp_directory_path() / "geom_roundtrip.xyz").string();
  save_xyz(pc, path);
  const PointCloud back = load_point_cloud(path);
  REQUIRE(back.size() == pc.size());
  CHECK((back.points - pc.points).cwiseAbs().maxCoeff() == 0.0);  // %.17g round-trips doubles
}
