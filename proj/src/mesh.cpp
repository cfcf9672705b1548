#include "hface/mesh.hpp"

#include <set>
#include <unordered_set>

namespace hface {

void Topology::validate() const {
  const int v = num_vertices();
  for (int t = 0; t < num_triangles(); ++t) {
    for (int k = 0; k < 3; ++k) {
      const int idx = triangles(t, k);
      if (idx < 0 || idx >= v)
        throw validation_error("triangle " + std::to_string(t) +
                               " references vertex " + std::to_string(idx) +
                               " >= V=" + std::to_string(v));
    }
    const Vec2 a = uv.row(triangles(t, 0));
    const Vec2 b = uv.row(triangles(t, 1));
    const Vec2 c = uv.row(triangles(t, 2));
    const double area2 = (b.x() - a.x()) * (c.y() - a.y()) -
                         (b.y() - a.y()) * (c.x() - a.x());
    if (area2 == 0.0)
      throw validation_error("triangle " + std::to_string(t) +
                             " is degenerate in UV space");
  }
  auto check_indices = [&](const std::vector<int>& ids, const char* name) {
    for (int idx : ids)
      if (idx < 0 || idx >= v)
        throw validation_error(std::string(name) + " index " +
                               std::to_string(idx) + " out of range");
  };
  check_indices(landmarks68, "landmarks68");
  check_indices(landmarks7, "landmarks7");
  check_indices(lower_face_vertices, "lower_face_vertices");
  std::unordered_set<int> lm68(landmarks68.begin(), landmarks68.end());
  for (int idx : landmarks7)
    if (!lm68.count(idx))
      throw validation_error("landmarks7 entry " + std::to_string(idx) +
                             " is not in landmarks68");
}

Vertices face_cross_products(const Vertices& v, const Triangles& tris) {
  Vertices out(tris.rows(), 3);
  for (int t = 0; t < tris.rows(); ++t) {
    const Vec3 a = v.row(tris(t, 0));
    const Vec3 e1 = Vec3(v.row(tris(t, 1))) - a;
    const Vec3 e2 = Vec3(v.row(tris(t, 2))) - a;
    out.row(t) = e1.cross(e2);
  }
  return out;
}

Mesh vertex_normals(const Mesh& m, std::vector<int>* flagged,
                    Vertices* accum) {
  const auto& topo = *m.topology;
  const int v = m.num_vertices();
  const Vertices cross = face_cross_products(m.vertices, topo.triangles);

  Vertices acc = Vertices::Zero(v, 3);
  for (int t = 0; t < topo.num_triangles(); ++t)
    for (int k = 0; k < 3; ++k)
      acc.row(topo.triangles(t, k)) += cross.row(t);
  if (accum) *accum = acc;

  Mesh out = m;
  out.normals.resize(v, 3);
  std::vector<int> invalid;
  for (int i = 0; i < v; ++i) {
    const double len = acc.row(i).norm();
    if (len > 1e-12) {
      out.normals.row(i) = acc.row(i) / len;
    } else {
      invalid.push_back(i);
      out.normals.row(i).setZero();
    }
  }
  if (!invalid.empty()) {
    // Fill from adjacent vertices that have a valid normal.
    std::vector<std::vector<int>> neighbors(v);
    for (int t = 0; t < topo.num_triangles(); ++t) {
      for (int k = 0; k < 3; ++k) {
        const int a = topo.triangles(t, k);
        const int b = topo.triangles(t, (k + 1) % 3);
        neighbors[a].push_back(b);
        neighbors[b].push_back(a);
      }
    }
    std::unordered_set<int> bad(invalid.begin(), invalid.end());
    for (int i : invalid) {
      Vec3 sum = Vec3::Zero();
      for (int nb : neighbors[i])
        if (!bad.count(nb)) sum += Vec3(out.normals.row(nb));
      const double len = sum.norm();
      out.normals.row(i) = len > 1e-12 ? Vec3(sum / len) : Vec3(0, 0, -1);
      if (flagged) flagged->push_back(i);
    }
  }
  out.has_normals = true;
  return out;
}

}  // namespace hface
