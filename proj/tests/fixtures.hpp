#pragma once

#include "hface/camera.hpp"
#include "hface/spatial.hpp"

#include <memory>

namespace hface::testfix {

// Regular grid plane at height z spanning [-extent, extent]^2, +z normals.
inline ScanMesh plane_scan(int side, double extent, double z) {
  ScanMesh s;
  s.vertices.resize(side * side, 3);
  for (int j = 0; j < side; ++j)
    for (int i = 0; i < side; ++i) {
      const double x = -extent + 2.0 * extent * i / (side - 1);
      const double y = -extent + 2.0 * extent * j / (side - 1);
      s.vertices.row(j * side + i) << x, y, z;
    }
  s.triangles.resize(2 * (side - 1) * (side - 1), 3);
  int t = 0;
  for (int j = 0; j + 1 < side; ++j)
    for (int i = 0; i + 1 < side; ++i) {
      const int v00 = j * side + i, v10 = v00 + 1;
      const int v01 = v00 + side, v11 = v01 + 1;
      s.triangles.row(t++) << v00, v10, v11;
      s.triangles.row(t++) << v00, v11, v01;
    }
  return s;
}

inline ScanMesh random_blob(uint64_t seed, int n_verts, int n_tris,
                            double scale) {
  Rng rng(seed);
  ScanMesh s;
  s.vertices.resize(n_verts, 3);
  for (int i = 0; i < n_verts; ++i)
    s.vertices.row(i) << scale * rng.normal(), scale * rng.normal(),
        scale * rng.normal();
  s.triangles.resize(n_tris, 3);
  for (int t = 0; t < n_tris; ++t) {
    int a = rng.uniform_int(0, n_verts - 1);
    int b = rng.uniform_int(0, n_verts - 1);
    int c = rng.uniform_int(0, n_verts - 1);
    while (b == a) b = rng.uniform_int(0, n_verts - 1);
    while (c == a || c == b) c = rng.uniform_int(0, n_verts - 1);
    s.triangles.row(t) << a, b, c;
  }
  return s;
}

// Wraps a scan as a renderable/evaluable Mesh (triangles only, no UV sets).
inline Mesh mesh_from_scan(const ScanMesh& scan) {
  auto topo = std::make_shared<Topology>();
  topo->triangles = scan.triangles;
  topo->uv = UVCoords::Zero(scan.vertices.rows(), 2);
  Mesh m;
  m.vertices = scan.vertices;
  m.topology = topo;
  return m;
}

}  // namespace hface::testfix
