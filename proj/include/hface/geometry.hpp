#pragma once

#include "hface/mesh.hpp"

#include <string>

namespace hface {

// Mid-frequency detail: per-texel 3D offsets in mm, model space, applied to
// every vertex by bilinear lookup at its UV coordinate.
struct DeformationMap {
  Grid data;
  DeformationMap() : data(64, 64, 3) {}
  explicit DeformationMap(int res) : data(res, res, 3) {}
  void validate() const;  // finite, square, power-of-two, 3 channels
};

// High-frequency detail: per-texel scalar offsets in mm along the vertex
// normal (vertex-level) or encoded as shading normals (pixel-level).
struct DisplacementMap {
  Grid data;
  DisplacementMap() : data(256, 256, 1) {}
  explicit DisplacementMap(int res) : data(res, res, 1) {}
  void validate() const;
};

// M1[i] = M0[i] + dfm(uv[i]); topology shared, normals dropped.
Mesh apply_deformation(const Mesh& m0, const DeformationMap& dfm);

// M2[i] = M1[i] + dpm(uv[i]) * normal[i]; requires normals on m1.
Mesh apply_displacement(const Mesh& m1, const DisplacementMap& dpm);

// Per-vertex tangent frame: t_u = dp/du, t_v = dp/dv (mm per UV unit),
// area-weighted over incident triangles, left unnormalized so magnitudes
// carry the UV->model scale. Triangles with degenerate UV are skipped.
void vertex_tangents(const Mesh& m, Vertices* t_u, Vertices* t_v);

// ---------------------------------------------------------------------------
// UV-space rasterization: which triangle covers each texel center, with
// barycentric weights. Triangles are scanned in index order and the first
// claim wins, so the result is deterministic.
// ---------------------------------------------------------------------------
struct UVRaster {
  int res = 0;
  std::vector<int> tri;      // res*res, covering triangle id or -1
  std::vector<double> bary;  // res*res*3
  bool covered(int i, int j) const { return tri[j * res + i] >= 0; }
};
UVRaster rasterize_uv(const Topology& topo, int res);

struct PositionMap {
  Grid positions;  // res x res x 3, model-space mm
  Grid mask;       // res x res x 1, 1 where the atlas covers the texel
};
PositionMap bake_position_map(const Mesh& m, int res);

// ---------------------------------------------------------------------------
// Pixel-level detail normals. A displaced surface S' = S + h*n has tangents
// (t_u + dh/du * n, t_v + dh/dv * n); their cross product tilts the normal by
// h_u*(n x t_v) + h_v*(t_u x n) relative to the undisplaced one. That tilt is
// applied to the smooth interpolated normal (oriented against mirrored UV),
// so zero displacement reproduces the geometric normal exactly.
// ---------------------------------------------------------------------------

// d(h)/du and d(h)/dv per texel (central differences, one-sided at borders),
// in mm per UV unit. Output grid has 2 channels (h_u, h_v).
Grid displacement_derivative_grids(const Grid& dpm);

// Adjoint of sampling (h_u, h_v) from displacement_derivative_grids at (u,v):
// accumulates d(loss)/d(dpm texel) into dpm_grad (same dims as dpm).
void scatter_displacement_derivative(Grid& dpm_grad, double u, double v,
                                     double hu_bar, double hv_bar);

struct DetailSample {
  Vec3 t_u, t_v, n_geom;  // interpolated frame (tangents unnormalized)
  double h_u = 0, h_v = 0;
  double flip = 1.0;      // sign making the tangent cross agree with n_geom
  double c0_len = 0.0;    // |t_u x t_v|
  Vec3 g;                 // n_geom + displacement tilt, before normalization
  Vec3 normal;            // unit shading normal
};
DetailSample detail_normal(const Vec3& t_u, const Vec3& t_v,
                           const Vec3& n_geom, double h_u, double h_v);

// d(loss)/d(h_u), d(loss)/d(h_v) given d(loss)/d(normal). The frame is
// treated as constant (the high-frequency stage optimizes only the map).
void detail_normal_backward(const DetailSample& s, const Vec3& normal_bar,
                            double* hu_bar, double* hv_bar);

struct DetailNormalMap {
  Grid normals;  // res x res x 3, unit where mask=1, zero elsewhere
  Grid mask;     // res x res x 1
};
// Bakes shading normals over the UV atlas: geometric normals and tangents
// interpolated from m1, displacement derivatives sampled from dpm.
DetailNormalMap detail_normal_map(const Mesh& m1, const DisplacementMap& dpm,
                                  int res);

// ---------------------------------------------------------------------------
// Detail-map container: 16-byte header (magic "HFGR", u32 width, height,
// channels) followed by row-major float32 samples.
// ---------------------------------------------------------------------------
void save_grid(const Grid& g, const std::string& path);
Grid load_grid(const std::string& path);

// 16-bit PNG visualization export: affine quantization per file, the scale
// and offset recorded in a JSON sidecar (path + ".json").
void save_grid_png16(const Grid& g, const std::string& path);
Grid load_grid_png16(const std::string& path);

}  // namespace hface
