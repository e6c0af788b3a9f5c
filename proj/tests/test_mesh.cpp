#include <catch2/catch_amalgamated.hpp>

#include <cstdio>

#include "jneus/mesh.hpp"

using namespace jneus;

namespace {

SdfEval sphere_sdf(Vec3 center, double radius) {
  return [center, radius](const Mat<double>& pos) {
    Mat<double> f(pos.rows(), 1);
    for (Eigen::Index i = 0; i < pos.rows(); ++i)
      f(i, 0) = (Vec3(pos(i, 0), pos(i, 1), pos(i, 2)) - center).norm() - radius;
    return f;
  };
}

Aabb unit_box() {
  Aabb b;
  b.lo = Vec3(-1, -1, -1);
  b.hi = Vec3(1, 1, 1);
  return b;
}

std::string temp_path(const char* name) {
  return std::string("/tmp/") + name;
}

}  // namespace

TEST_CASE("sphere extraction: vertex radii near the true radius") {
  const double r = 0.3;
  const int res = 64;
  SceneMesh mesh = extract_mesh(sphere_sdf(Vec3::Zero(), r), unit_box(), res);
  REQUIRE(!mesh.empty());
  const double cell = 2.0 / res;
  for (const Vec3& v : mesh.vertices) {
    REQUIRE(v.norm() > r - 1.5 * cell);
    REQUIRE(v.norm() < r + 1.5 * cell);
  }
}

TEST_CASE("constant positive field gives an empty mesh, not an error") {
  SdfEval f = [](const Mat<double>& pos) { return Mat<double>::Constant(pos.rows(), 1, 2.0); };
  SceneMesh mesh = extract_mesh(f, unit_box(), 16);
  REQUIRE(mesh.empty());
  REQUIRE(mesh.vertices.empty());
}

TEST_CASE("resolution below 8 is rejected") {
  REQUIRE_THROWS_AS(extract_mesh(sphere_sdf(Vec3::Zero(), 0.3), unit_box(), 4),
                    std::invalid_argument);
}

TEST_CASE("plane extraction is exact: linear interpolation of a linear field") {
  SdfEval f = [](const Mat<double>& pos) {
    Mat<double> v(pos.rows(), 1);
    for (Eigen::Index i = 0; i < pos.rows(); ++i) v(i, 0) = pos(i, 2) - 0.1;
    return v;
  };
  SceneMesh mesh = extract_mesh(f, unit_box(), 16);
  REQUIRE(!mesh.empty());
  for (const Vec3& v : mesh.vertices) REQUIRE(std::abs(v[2] - 0.1) < 1e-6 * 2.0);
}

TEST_CASE("triangle orientation: normals point along the field gradient") {
  SceneMesh mesh = extract_mesh(sphere_sdf(Vec3::Zero(), 0.5), unit_box(), 32);
  auto normals = mesh.vertex_normals();
  int outward = 0;
  for (size_t i = 0; i < mesh.vertices.size(); ++i)
    if (normals[i].dot(mesh.vertices[i].normalized()) > 0) ++outward;
  // allow a few slivers near table-case boundaries
  REQUIRE(outward > int(0.99 * double(mesh.vertices.size())));
}

TEST_CASE("no degenerate triangles survive extraction") {
  // field with exact zeros on grid corners: plane through lattice points
  SdfEval f = [](const Mat<double>& pos) {
    Mat<double> v(pos.rows(), 1);
    for (Eigen::Index i = 0; i < pos.rows(); ++i) v(i, 0) = pos(i, 2);
    return v;
  };
  SceneMesh mesh = extract_mesh(f, unit_box(), 16);
  for (const Triangle& t : mesh.triangles) {
    REQUIRE(t.a != t.b);
    REQUIRE(t.b != t.c);
    REQUIRE(t.a != t.c);
    Vec3 n = (mesh.vertices[t.b] - mesh.vertices[t.a])
                 .cross(mesh.vertices[t.c] - mesh.vertices[t.a]);
    REQUIRE(n.norm() > 1e-12);
    REQUIRE(t.a < mesh.vertices.size());
    REQUIRE(t.b < mesh.vertices.size());
    REQUIRE(t.c < mesh.vertices.size());
  }
}

TEST_CASE("extraction is deterministic") {
  SceneMesh a = extract_mesh(sphere_sdf(Vec3(0.1, 0, -0.2), 0.4), unit_box(), 24);
  SceneMesh b = extract_mesh(sphere_sdf(Vec3(0.1, 0, -0.2), 0.4), unit_box(), 24);
  REQUIRE(a.vertices.size() == b.vertices.size());
  REQUIRE(a.triangles.size() == b.triangles.size());
  for (size_t i = 0; i < a.vertices.size(); ++i)
    REQUIRE((a.vertices[i] - b.vertices[i]).norm() == 0.0);
}

TEST_CASE("doubling resolution refines the sphere (Hausdorff bound)") {
  const double r = 0.45;
  SceneMesh coarse = extract_mesh(sphere_sdf(Vec3::Zero(), r), unit_box(), 16);
  SceneMesh fine = extract_mesh(sphere_sdf(Vec3::Zero(), r), unit_box(), 32);
  coarse.build_bvh();
  fine.build_bvh();
  const double bound = 2.0 * (2.0 / 16);
  double h = 0;
  for (const Vec3& v : fine.vertices) h = std::max(h, std::sqrt(coarse.bvh.nearest_sq(v)));
  for (const Vec3& v : coarse.vertices) h = std::max(h, std::sqrt(fine.bvh.nearest_sq(v)));
  REQUIRE(h <= bound);
}

TEST_CASE("colorize with a constant stub paints every vertex") {
  SceneMesh mesh = extract_mesh(sphere_sdf(Vec3::Zero(), 0.4), unit_box(), 16);
  ColorEval red = [](const Mat<double>& pos, const Mat<double>&) {
    Mat<double> c = Mat<double>::Zero(pos.rows(), 3);
    c.col(0).setOnes();
    return c;
  };
  colorize_mesh(mesh, red);
  REQUIRE(mesh.colors.size() == mesh.vertices.size());
  for (const Vec3& c : mesh.colors) REQUIRE((c - Vec3(1, 0, 0)).norm() == 0.0);

  // determinism with a direction-dependent head
  ColorEval shade = [](const Mat<double>& pos, const Mat<double>& dirs) {
    Mat<double> c(pos.rows(), 3);
    for (Eigen::Index i = 0; i < pos.rows(); ++i) {
      c(i, 0) = 0.5 + 0.5 * dirs(i, 2);
      c(i, 1) = 0.5 + 0.5 * pos(i, 0);
      c(i, 2) = 0.25;
    }
    return c;
  };
  SceneMesh m2 = mesh;
  colorize_mesh(mesh, shade);
  colorize_mesh(m2, shade);
  for (size_t i = 0; i < mesh.colors.size(); ++i)
    REQUIRE((mesh.colors[i] - m2.colors[i]).norm() == 0.0);
}

TEST_CASE("ray-mesh depth: direct hit and parallel miss") {
  SceneMesh mesh;
  mesh.vertices = {Vec3(0, 0, 5), Vec3(1, 0, 5), Vec3(0, 1, 5)};
  mesh.triangles = {{0, 1, 2}};
  mesh.build_bvh();

  Ray hit;
  hit.o = Vec3(1.0 / 3, 1.0 / 3, 0);  // through the centroid
  hit.u = Vec3(0, 0, 1);
  REQUIRE(ray_mesh_depth(mesh, hit) == Catch::Approx(5.0));

  Ray parallel;
  parallel.o = Vec3(0, 0, 0);
  parallel.u = Vec3(1, 0, 0);
  REQUIRE(ray_mesh_depth(mesh, parallel) == kMiss);
}

TEST_CASE("bvh raycast agrees with brute force over random rays") {
  SceneMesh mesh = extract_mesh(sphere_sdf(Vec3(0.05, -0.1, 0.0), 0.45), unit_box(), 16);
  mesh.build_bvh();
  CounterRng rng(31, 0);
  int hits = 0;
  for (int i = 0; i < 10000; ++i) {
    Vec3 o(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    Vec3 u(rng.normal(), rng.normal(), rng.normal());
    u.normalize();
    double bvh_t = mesh.bvh.raycast(o, u);
    double brute = kMiss;
    for (const Triangle& t : mesh.triangles) {
      double th;
      if (Bvh::ray_triangle(o, u, mesh.vertices[t.a], mesh.vertices[t.b],
                            mesh.vertices[t.c], th))
        brute = std::min(brute, th);
    }
    if (brute != kMiss) {
      ++hits;
      REQUIRE(bvh_t == Catch::Approx(brute).margin(1e-6));
    } else {
      REQUIRE(bvh_t == kMiss);
    }
  }
  REQUIRE(hits > 1000);  // the scene actually exercises the hit path
}

TEST_CASE("bvh nearest agrees with brute force over random points") {
  SceneMesh mesh = extract_mesh(sphere_sdf(Vec3::Zero(), 0.4), unit_box(), 12);
  mesh.build_bvh();
  CounterRng rng(32, 0);
  for (int i = 0; i < 500; ++i) {
    Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    double brute = std::numeric_limits<double>::max();
    for (const Triangle& t : mesh.triangles) {
      Vec3 q = Bvh::closest_on_triangle(p, mesh.vertices[t.a], mesh.vertices[t.b],
                                        mesh.vertices[t.c]);
      brute = std::min(brute, (q - p).squaredNorm());
    }
    REQUIRE(mesh.bvh.nearest_sq(p) == Catch::Approx(brute).margin(1e-12));
  }
}

TEST_CASE("empty mesh exports to a valid PLY") {
  SceneMesh mesh;
  std::string path = temp_path("jneus_empty.ply");
  export_ply(mesh, path);
  SceneMesh back = import_ply(path);
  REQUIRE(back.vertices.empty());
  REQUIRE(back.triangles.empty());
  std::remove(path.c_str());
}

TEST_CASE("ply export/import round trip") {
  SceneMesh mesh = extract_mesh(sphere_sdf(Vec3::Zero(), 0.35), unit_box(), 12);
  ColorEval shade = [](const Mat<double>& pos, const Mat<double>&) {
    Mat<double> c(pos.rows(), 3);
    for (Eigen::Index i = 0; i < pos.rows(); ++i)
      for (int a = 0; a < 3; ++a) c(i, a) = 0.5 + 0.4 * pos(i, a);
    return c;
  };
  colorize_mesh(mesh, shade);

  std::string path = temp_path("jneus_roundtrip.ply");
  export_ply(mesh, path);
  SceneMesh back = import_ply(path);
  std::remove(path.c_str());

  REQUIRE(back.vertices.size() == mesh.vertices.size());
  REQUIRE(back.triangles.size() == mesh.triangles.size());
  for (size_t i = 0; i < mesh.vertices.size(); ++i)
    for (int a = 0; a < 3; ++a)
      REQUIRE(back.vertices[i][a] == Catch::Approx(mesh.vertices[i][a]).margin(1e-6));
  for (size_t i = 0; i < mesh.triangles.size(); ++i) {
    REQUIRE(back.triangles[i].a == mesh.triangles[i].a);
    REQUIRE(back.triangles[i].b == mesh.triangles[i].b);
    REQUIRE(back.triangles[i].c == mesh.triangles[i].c);
  }
  for (size_t i = 0; i < mesh.colors.size(); ++i)
    for (int a = 0; a < 3; ++a)
      REQUIRE(std::abs(back.colors[i][a] - mesh.colors[i][a]) <= 0.5 / 255 + 1e-9);
}

TEST_CASE("single triangle matches hand-assembled golden bytes") {
  SceneMesh mesh;
  mesh.vertices = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0)};
  mesh.triangles = {{0, 1, 2}};
  std::string path = temp_path("jneus_golden.ply");
  export_ply(mesh, path);

  // expected bytes assembled directly from the PLY 1.0 binary format
  std::string expect =
      "ply\nformat binary_little_endian 1.0\n"
      "element vertex 3\n"
      "property float x\nproperty float y\nproperty float z\n"
      "element face 1\n"
      "property list uchar uint vertex_indices\n"
      "end_header\n";
  auto put_f32 = [&](float f) {
    char b[4];
    std::memcpy(b, &f, 4);
    expect.append(b, 4);
  };
  auto put_u32 = [&](uint32_t u) {
    char b[4];
    std::memcpy(b, &u, 4);
    expect.append(b, 4);
  };
  put_f32(0); put_f32(0); put_f32(0);
  put_f32(1); put_f32(0); put_f32(0);
  put_f32(0); put_f32(1); put_f32(0);
  expect.push_back(char(3));
  put_u32(0); put_u32(1); put_u32(2);

  std::ifstream in(path, std::ios::binary);
  std::string got((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::remove(path.c_str());
  REQUIRE(got == expect);
}
