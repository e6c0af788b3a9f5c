#pragma once

#include <array>
#include <sstream>
#include <fstream>
#include <limits>
#include <unordered_map>
#include <vector>

#include "jneus/core.hpp"
#include "jneus/mc_tables.hpp"
#include "jneus/render.hpp"

namespace jneus {

constexpr double kMiss = std::numeric_limits<double>::infinity();

struct Triangle {
  uint32_t a, b, c;
};

// Median-split BVH over triangles; supports first-hit ray queries and
// nearest-point queries. Owns a copy of the geometry, so it stays valid when
// the surrounding mesh moves. Read-only after build.
class Bvh {
 public:
  struct BvhNode {
    Vec3 lo, hi;
    int left = -1, right = -1;  // internal children, or
    int first = 0, count = 0;   // leaf triangle range in order_
  };

  void build(const std::vector<Vec3>& verts, const std::vector<Triangle>& tris) {
    verts_copy_ = verts;
    tris_copy_ = tris;
    order_.resize(tris.size());
    for (size_t i = 0; i < tris.size(); ++i) order_[i] = int(i);
    nodes_.clear();
    if (!tris.empty()) build_node(0, int(tris.size()));
  }

  bool empty() const { return nodes_.empty(); }

  // Smallest positive hit distance, or kMiss.
  double raycast(const Vec3& o, const Vec3& u) const {
    if (empty()) return kMiss;
    double best = kMiss;
    raycast_node(0, o, u, best);
    return best;
  }

  // Squared distance to the closest point on any triangle.
  double nearest_sq(const Vec3& p) const {
    if (empty()) return kMiss;
    double best = std::numeric_limits<double>::max();
    nearest_node(0, p, best);
    return best;
  }

  static bool ray_triangle(const Vec3& o, const Vec3& u, const Vec3& v0, const Vec3& v1,
                           const Vec3& v2, double& t_out) {
    // Moller-Trumbore with a conservative parallel threshold.
    const double eps = 1e-12;
    Vec3 e1 = v1 - v0, e2 = v2 - v0;
    Vec3 p = u.cross(e2);
    double det = e1.dot(p);
    if (std::abs(det) < eps) return false;
    double inv = 1.0 / det;
    Vec3 s = o - v0;
    double bu = s.dot(p) * inv;
    if (bu < -1e-12 || bu > 1 + 1e-12) return false;
    Vec3 q = s.cross(e1);
    double bv = u.dot(q) * inv;
    if (bv < -1e-12 || bu + bv > 1 + 1e-12) return false;
    double t = e2.dot(q) * inv;
    if (t <= eps) return false;
    t_out = t;
    return true;
  }

  static Vec3 closest_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b,
                                  const Vec3& c) {
    // Ericson, Real-Time Collision Detection, 5.1.5.
    Vec3 ab = b - a, ac = c - a, ap = p - a;
    double d1 = ab.dot(ap), d2 = ac.dot(ap);
    if (d1 <= 0 && d2 <= 0) return a;
    Vec3 bp = p - b;
    double d3 = ab.dot(bp), d4 = ac.dot(bp);
    if (d3 >= 0 && d4 <= d3) return b;
    double vc = d1 * d4 - d3 * d2;
    if (vc <= 0 && d1 >= 0 && d3 <= 0) return a + (d1 / (d1 - d3)) * ab;
    Vec3 cp = p - c;
    double d5 = ab.dot(cp), d6 = ac.dot(cp);
    if (d6 >= 0 && d5 <= d6) return c;
    double vb = d5 * d2 - d1 * d6;
    if (vb <= 0 && d2 >= 0 && d6 <= 0) return a + (d2 / (d2 - d6)) * ac;
    double va = d3 * d6 - d5 * d4;
    if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0)
      return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b);
    double denom = 1.0 / (va + vb + vc);
    return a + ab * (vb * denom) + ac * (vc * denom);
  }

 private:
  int build_node(int first, int count) {
    int idx = int(nodes_.size());
    nodes_.push_back({});
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::max());
    Vec3 hi = Vec3::Constant(std::numeric_limits<double>::lowest());
    for (int i = first; i < first + count; ++i) {
      const Triangle& t = tris_copy_[size_t(order_[size_t(i)])];
      for (uint32_t vi : {t.a, t.b, t.c}) {
        lo = lo.cwiseMin(verts_copy_[vi]);
        hi = hi.cwiseMax(verts_copy_[vi]);
      }
    }
    nodes_[size_t(idx)].lo = lo;
    nodes_[size_t(idx)].hi = hi;
    if (count <= 4) {
      nodes_[size_t(idx)].first = first;
      nodes_[size_t(idx)].count = count;
      return idx;
    }
    Vec3 ext = hi - lo;
    int axis = 0;
    if (ext[1] > ext[axis]) axis = 1;
    if (ext[2] > ext[axis]) axis = 2;
    std::nth_element(order_.begin() + first, order_.begin() + first + count / 2,
                     order_.begin() + first + count,
                     [&](int x, int y) {
                       auto cen = [&](int ti) {
                         const Triangle& t = tris_copy_[size_t(ti)];
                         return (verts_copy_[t.a][axis] + verts_copy_[t.b][axis] +
                                 verts_copy_[t.c][axis]) / 3.0;
                       };
                       return cen(x) < cen(y);
                     });
    int mid = count / 2;
    int l = build_node(first, mid);
    int r = build_node(first + mid, count - mid);
    nodes_[size_t(idx)].left = l;
    nodes_[size_t(idx)].right = r;
    return idx;
  }

  static bool ray_box(const Vec3& o, const Vec3& u, const Vec3& lo, const Vec3& hi,
                      double& t_entry) {
    double t0 = 0.0, t1 = std::numeric_limits<double>::max();
    for (int a = 0; a < 3; ++a) {
      if (std::abs(u[a]) < 1e-300) {
        if (o[a] < lo[a] || o[a] > hi[a]) return false;
        continue;
      }
      double inv = 1.0 / u[a];
      double ta = (lo[a] - o[a]) * inv, tb = (hi[a] - o[a]) * inv;
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
      if (t0 > t1) return false;
    }
    t_entry = t0;
    return true;
  }

  void raycast_node(int ni, const Vec3& o, const Vec3& u, double& best) const {
    const BvhNode& n = nodes_[size_t(ni)];
    double entry;
    if (!ray_box(o, u, n.lo, n.hi, entry) || entry >= best) return;
    if (n.left < 0) {
      for (int i = n.first; i < n.first + n.count; ++i) {
        const Triangle& t = tris_copy_[size_t(order_[size_t(i)])];
        double th;
        if (ray_triangle(o, u, verts_copy_[t.a], verts_copy_[t.b], verts_copy_[t.c], th))
          best = std::min(best, th);
      }
      return;
    }
    raycast_node(n.left, o, u, best);
    raycast_node(n.right, o, u, best);
  }

  static double box_dist_sq(const Vec3& p, const Vec3& lo, const Vec3& hi) {
    double d = 0;
    for (int a = 0; a < 3; ++a) {
      double v = std::max({lo[a] - p[a], 0.0, p[a] - hi[a]});
      d += v * v;
    }
    return d;
  }

  void nearest_node(int ni, const Vec3& p, double& best) const {
    const BvhNode& n = nodes_[size_t(ni)];
    if (box_dist_sq(p, n.lo, n.hi) >= best) return;
    if (n.left < 0) {
      for (int i = n.first; i < n.first + n.count; ++i) {
        const Triangle& t = tris_copy_[size_t(order_[size_t(i)])];
        Vec3 q = closest_on_triangle(p, verts_copy_[t.a], verts_copy_[t.b], verts_copy_[t.c]);
        best = std::min(best, (q - p).squaredNorm());
      }
      return;
    }
    // visit the nearer child first
    double dl = box_dist_sq(p, nodes_[size_t(n.left)].lo, nodes_[size_t(n.left)].hi);
    double dr = box_dist_sq(p, nodes_[size_t(n.right)].lo, nodes_[size_t(n.right)].hi);
    int a = n.left, b = n.right;
    if (dr < dl) std::swap(a, b);
    nearest_node(a, p, best);
    nearest_node(b, p, best);
  }

  std::vector<Vec3> verts_copy_;
  std::vector<Triangle> tris_copy_;
  std::vector<int> order_;
  std::vector<BvhNode> nodes_;
};

struct SceneMesh {
  std::vector<Vec3> vertices;
  std::vector<Triangle> triangles;
  std::vector<Vec3> colors;  // per-vertex, in [0,1]; may be empty
  Bvh bvh;

  bool empty() const { return triangles.empty(); }

  void build_bvh() { bvh.build(vertices, triangles); }

  // Area-weighted vertex normals (un-normalized sums, normalized at the end).
  std::vector<Vec3> vertex_normals() const {
    std::vector<Vec3> n(vertices.size(), Vec3::Zero());
    for (const Triangle& t : triangles) {
      Vec3 fn = (vertices[t.b] - vertices[t.a]).cross(vertices[t.c] - vertices[t.a]);
      n[t.a] += fn;
      n[t.b] += fn;
      n[t.c] += fn;
    }
    for (Vec3& v : n) {
      double l = v.norm();
      if (l > 1e-300) v /= l;
    }
    return n;
  }
};

// Batched SDF evaluator: positions (N,3) -> values (N,1).
using SdfEval = std::function<Mat<double>(const Mat<double>&)>;

// Marching cubes over `resolution`^3 cells of `box`, evaluated one z-slice of
// corner points at a time so the full grid never materializes. Vertices on
// shared edges are merged, so the surface is watertight up to floating point.
// Triangles are oriented so geometric normals point toward increasing f
// (outward for a signed distance field with negative inside).
inline SceneMesh extract_mesh(const SdfEval& eval, const Aabb& box, int resolution) {
  if (resolution < 8) throw std::invalid_argument("extract_mesh: resolution must be >= 8");
  const int R = resolution, N1 = R + 1;
  const Vec3 cell = (box.hi - box.lo) / double(R);

  auto slice_values = [&](int z) {
    Mat<double> pos(int64_t(N1) * N1, 3);
    int64_t row = 0;
    for (int y = 0; y < N1; ++y)
      for (int x = 0; x < N1; ++x, ++row) {
        pos(row, 0) = box.lo[0] + x * cell[0];
        pos(row, 1) = box.lo[1] + y * cell[1];
        pos(row, 2) = box.lo[2] + z * cell[2];
      }
    return eval(pos);
  };

  SceneMesh mesh;
  // Edge key -> vertex index, for merging. Key encodes the lattice coords of
  // the edge's low corner plus the edge axis.
  std::unordered_map<uint64_t, uint32_t> edge_vertex;
  auto edge_key = [N1](int x, int y, int z, int axis) {
    return (uint64_t(axis) << 60) |
           (uint64_t(x) + uint64_t(N1) * (uint64_t(y) + uint64_t(N1) * uint64_t(z)));
  };

  Mat<double> below = slice_values(0);
  for (int z = 0; z < R; ++z) {
    Mat<double> above = slice_values(z + 1);
    auto value_at = [&](int cx, int cy, int cz) {
      const Mat<double>& s = (cz == z) ? below : above;
      return s(int64_t(cy) * N1 + cx, 0);
    };
    for (int y = 0; y < R; ++y) {
      for (int x = 0; x < R; ++x) {
        double v[8];
        int cube = 0;
        for (int c = 0; c < 8; ++c) {
          v[c] = value_at(x + mc::kCornerOffset[c][0], y + mc::kCornerOffset[c][1],
                          z + mc::kCornerOffset[c][2]);
          if (v[c] < 0.0) cube |= (1 << c);
        }
        if (mc::kEdgeTable[cube] == 0) continue;

        uint32_t ev[12];
        for (int e = 0; e < 12; ++e) {
          if (!(mc::kEdgeTable[cube] & (1 << e))) continue;
          int c0 = mc::kEdgeCorner[e][0], c1 = mc::kEdgeCorner[e][1];
          int g0[3] = {x + mc::kCornerOffset[c0][0], y + mc::kCornerOffset[c0][1],
                       z + mc::kCornerOffset[c0][2]};
          int g1[3] = {x + mc::kCornerOffset[c1][0], y + mc::kCornerOffset[c1][1],
                       z + mc::kCornerOffset[c1][2]};
          int axis = 0;
          for (int a = 0; a < 3; ++a)
            if (g0[a] != g1[a]) axis = a;
          bool flip = g0[axis] > g1[axis];
          const int* lo = flip ? g1 : g0;
          uint64_t key = edge_key(lo[0], lo[1], lo[2], axis);
          auto it = edge_vertex.find(key);
          if (it != edge_vertex.end()) {
            ev[e] = it->second;
            continue;
          }
          double f0 = v[c0], f1 = v[c1];
          double t = (std::abs(f0 - f1) < 1e-300) ? 0.5 : f0 / (f0 - f1);
          t = std::clamp(t, 0.0, 1.0);
          Vec3 p0(box.lo[0] + g0[0] * cell[0], box.lo[1] + g0[1] * cell[1],
                  box.lo[2] + g0[2] * cell[2]);
          Vec3 p1(box.lo[0] + g1[0] * cell[0], box.lo[1] + g1[1] * cell[1],
                  box.lo[2] + g1[2] * cell[2]);
          ev[e] = uint32_t(mesh.vertices.size());
          mesh.vertices.push_back(p0 + t * (p1 - p0));
          edge_vertex.emplace(key, ev[e]);
        }

        for (int i = 0; mc::kTriTable[cube][i] != -1; i += 3) {
          uint32_t a = ev[mc::kTriTable[cube][i]];
          uint32_t b = ev[mc::kTriTable[cube][i + 1]];
          uint32_t c = ev[mc::kTriTable[cube][i + 2]];
          if (a == b || b == c || a == c) continue;
          Vec3 n = (mesh.vertices[b] - mesh.vertices[a])
                       .cross(mesh.vertices[c] - mesh.vertices[a]);
          if (n.norm() < 1e-12) continue;
          mesh.triangles.push_back({a, b, c});
        }
      }
    }
    below = std::move(above);
  }

  // The table convention fixes winding relative to the inside/outside split;
  // verify against the field gradient once per mesh and flip globally if the
  // majority disagrees (robust to a few sliver triangles).
  if (!mesh.triangles.empty()) {
    int agree = 0, total = 0;
    const double h = 1e-4 * (box.hi - box.lo).maxCoeff();
    size_t stride = std::max<size_t>(1, mesh.triangles.size() / 64);
    std::vector<Vec3> normals;
    std::vector<Vec3> centers;
    for (size_t i = 0; i < mesh.triangles.size(); i += stride) {
      const Triangle& t = mesh.triangles[i];
      Vec3 n = (mesh.vertices[t.b] - mesh.vertices[t.a])
                   .cross(mesh.vertices[t.c] - mesh.vertices[t.a]);
      if (n.norm() < 1e-12) continue;
      normals.push_back(n.normalized());
      centers.push_back((mesh.vertices[t.a] + mesh.vertices[t.b] + mesh.vertices[t.c]) / 3.0);
    }
    Mat<double> pos(2 * normals.size(), 3);
    for (size_t i = 0; i < normals.size(); ++i) {
      Vec3 p = centers[i] + h * normals[i], m = centers[i] - h * normals[i];
      for (int a = 0; a < 3; ++a) {
        pos(2 * i, a) = p[a];
        pos(2 * i + 1, a) = m[a];
      }
    }
    if (pos.rows() > 0) {
      Mat<double> f = eval(pos);
      for (size_t i = 0; i < normals.size(); ++i) {
        double df = f(2 * i, 0) - f(2 * i + 1, 0);
        if (df == 0) continue;
        ++total;
        if (df > 0) ++agree;
      }
      if (total > 0 && agree * 2 < total)
        for (Triangle& t : mesh.triangles) std::swap(t.b, t.c);
    }
  }
  return mesh;
}

// Batched color query: positions (N,3) and directions (N,3) -> colors (N,3).
using ColorEval = std::function<Mat<double>(const Mat<double>&, const Mat<double>&)>;

// Vertex colors from the field's color head, viewed head-on: the query
// direction is the inward normal (-vertex normal).
inline void colorize_mesh(SceneMesh& mesh, const ColorEval& eval) {
  if (mesh.vertices.empty()) return;
  std::vector<Vec3> normals = mesh.vertex_normals();
  Mat<double> pos(mesh.vertices.size(), 3), dirs(mesh.vertices.size(), 3);
  for (size_t i = 0; i < mesh.vertices.size(); ++i) {
    Vec3 d = -normals[i];
    if (d.norm() < 1e-12) d = Vec3(0, 0, -1);
    for (int a = 0; a < 3; ++a) {
      pos(Eigen::Index(i), a) = mesh.vertices[i][a];
      dirs(Eigen::Index(i), a) = d[a];
    }
  }
  Mat<double> c = eval(pos, dirs);
  mesh.colors.resize(mesh.vertices.size());
  for (size_t i = 0; i < mesh.vertices.size(); ++i)
    for (int a = 0; a < 3; ++a)
      mesh.colors[i][a] = std::clamp(c(Eigen::Index(i), a), 0.0, 1.0);
}

// First-hit distance along the ray, or kMiss. The mesh BVH must be built.
inline double ray_mesh_depth(const SceneMesh& mesh, const Ray& ray) {
  return mesh.bvh.raycast(ray.o, ray.u);
}

inline void export_ply(const SceneMesh& mesh, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  const bool has_color = mesh.colors.size() == mesh.vertices.size();
  out << "ply\nformat binary_little_endian 1.0\n";
  out << "element vertex " << mesh.vertices.size() << "\n";
  out << "property float x\nproperty float y\nproperty float z\n";
  if (has_color)
    out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "element face " << mesh.triangles.size() << "\n";
  out << "property list uchar uint vertex_indices\n";
  out << "end_header\n";
  for (size_t i = 0; i < mesh.vertices.size(); ++i) {
    float xyz[3];
    for (int a = 0; a < 3; ++a) xyz[a] = float(mesh.vertices[i][a]);
    out.write(reinterpret_cast<const char*>(xyz), 12);
    if (has_color) {
      unsigned char rgb[3];
      for (int a = 0; a < 3; ++a)
        rgb[a] = (unsigned char)std::lround(std::clamp(mesh.colors[i][a], 0.0, 1.0) * 255.0);
      out.write(reinterpret_cast<const char*>(rgb), 3);
    }
  }
  for (const Triangle& t : mesh.triangles) {
    unsigned char n = 3;
    uint32_t idx[3] = {t.a, t.b, t.c};
    out.write(reinterpret_cast<const char*>(&n), 1);
    out.write(reinterpret_cast<const char*>(idx), 12);
  }
  if (!out) throw IoError("write failed: " + path);
}

inline SceneMesh import_ply(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::string line;
  size_t n_vertex = 0, n_face = 0;
  bool has_color = false, binary_le = false;
  std::vector<std::string> vertex_props;
  std::string element;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line == "end_header") break;
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "format") {
      std::string fmt;
      ls >> fmt;
      binary_le = (fmt == "binary_little_endian");
    } else if (tok == "element") {
      std::string name;
      size_t count;
      ls >> name >> count;
      element = name;
      if (name == "vertex") n_vertex = count;
      if (name == "face") n_face = count;
    } else if (tok == "property" && element == "vertex") {
      std::string type, name;
      ls >> type >> name;
      vertex_props.push_back(name);
      if (name == "red") has_color = true;
    }
  }
  if (!binary_le) throw IoError("unsupported PLY format (want binary_little_endian): " + path);

  SceneMesh mesh;
  mesh.vertices.resize(n_vertex);
  if (has_color) mesh.colors.resize(n_vertex);
  for (size_t i = 0; i < n_vertex; ++i) {
    float xyz[3];
    in.read(reinterpret_cast<char*>(xyz), 12);
    mesh.vertices[i] = Vec3(xyz[0], xyz[1], xyz[2]);
    if (has_color) {
      unsigned char rgb[3];
      in.read(reinterpret_cast<char*>(rgb), 3);
      mesh.colors[i] = Vec3(rgb[0] / 255.0, rgb[1] / 255.0, rgb[2] / 255.0);
    }
  }
  mesh.triangles.resize(n_face);
  for (size_t i = 0; i < n_face; ++i) {
    unsigned char n;
    in.read(reinterpret_cast<char*>(&n), 1);
    if (n != 3) throw IoError("non-triangle face in PLY: " + path);
    uint32_t idx[3];
    in.read(reinterpret_cast<char*>(idx), 12);
    mesh.triangles[i] = {idx[0], idx[1], idx[2]};
  }
  if (!in) throw IoError("truncated PLY: " + path);
  return mesh;
}

}  // namespace jneus
