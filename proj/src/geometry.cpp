#include "hface/geometry.hpp"

#include <cstring>
#include <fstream>

namespace hface {

namespace {

void validate_map(const Grid& g, int channels, const char* name) {
  if (g.channels != channels)
    throw validation_error(std::string(name) + ": expected " +
                           std::to_string(channels) + " channels");
  if (g.width != g.height || g.width < 2 || (g.width & (g.width - 1)) != 0)
    throw validation_error(std::string(name) +
                           ": resolution must be a square power of two");
  if (!g.all_finite())
    throw validation_error(std::string(name) + ": non-finite texels");
}

void require_uv(const Mesh& m, const char* op) {
  if (!m.topology || m.topology->uv.rows() != m.vertices.rows())
    throw config_error(std::string(op) + ": mesh has no UV coordinates");
}

}  // namespace

void DeformationMap::validate() const { validate_map(data, 3, "deformation map"); }
void DisplacementMap::validate() const { validate_map(data, 1, "displacement map"); }

Mesh apply_deformation(const Mesh& m0, const DeformationMap& dfm) {
  require_uv(m0, "apply_deformation");
  Mesh out;
  out.topology = m0.topology;
  out.vertices.resize(m0.vertices.rows(), 3);
  const auto& uv = m0.topology->uv;
  for (int i = 0; i < m0.num_vertices(); ++i) {
    const Vec3 off = sample_bilinear3(dfm.data, uv(i, 0), uv(i, 1));
    out.vertices.row(i) = m0.vertices.row(i) + off.transpose();
  }
  return out;
}

Mesh apply_displacement(const Mesh& m1, const DisplacementMap& dpm) {
  require_uv(m1, "apply_displacement");
  if (!m1.has_normals)
    throw config_error("apply_displacement: mesh has no normals");
  Mesh out;
  out.topology = m1.topology;
  out.vertices.resize(m1.vertices.rows(), 3);
  const auto& uv = m1.topology->uv;
  for (int i = 0; i < m1.num_vertices(); ++i) {
    const double h = sample_bilinear(dpm.data, uv(i, 0), uv(i, 1), 0);
    out.vertices.row(i) = m1.vertices.row(i) + h * m1.normals.row(i);
  }
  return out;
}

void vertex_tangents(const Mesh& m, Vertices* t_u, Vertices* t_v) {
  require_uv(m, "vertex_tangents");
  const auto& topo = *m.topology;
  t_u->setZero(m.num_vertices(), 3);
  t_v->setZero(m.num_vertices(), 3);
  VecX weight = VecX::Zero(m.num_vertices());
  for (int t = 0; t < topo.num_triangles(); ++t) {
    const int a = topo.triangles(t, 0), b = topo.triangles(t, 1),
              c = topo.triangles(t, 2);
    const Vec3 e1 = (m.vertices.row(b) - m.vertices.row(a)).transpose();
    const Vec3 e2 = (m.vertices.row(c) - m.vertices.row(a)).transpose();
    const double du1 = topo.uv(b, 0) - topo.uv(a, 0);
    const double dv1 = topo.uv(b, 1) - topo.uv(a, 1);
    const double du2 = topo.uv(c, 0) - topo.uv(a, 0);
    const double dv2 = topo.uv(c, 1) - topo.uv(a, 1);
    const double det = du1 * dv2 - du2 * dv1;
    if (std::abs(det) < 1e-15) continue;
    const Vec3 tu = (e1 * dv2 - e2 * dv1) / det;  // dp/du
    const Vec3 tv = (e2 * du1 - e1 * du2) / det;  // dp/dv
    const double area = 0.5 * e1.cross(e2).norm();
    for (int k : {a, b, c}) {
      t_u->row(k) += (area * tu).transpose();
      t_v->row(k) += (area * tv).transpose();
      weight[k] += area;
    }
  }
  // weighted mean, not sum: magnitudes must stay in mm per UV unit
  for (int i = 0; i < m.num_vertices(); ++i) {
    if (weight[i] > 1e-15) {
      t_u->row(i) /= weight[i];
      t_v->row(i) /= weight[i];
    }
  }
}

UVRaster rasterize_uv(const Topology& topo, int res) {
  UVRaster r;
  r.res = res;
  r.tri.assign(static_cast<size_t>(res) * res, -1);
  r.bary.assign(static_cast<size_t>(res) * res * 3, 0.0);
  // Triangle order scan with first-claim-wins keeps shared-edge texels
  // deterministic; a tiny inclusive tolerance avoids cracks along edges.
  constexpr double kEps = 1e-12;
  for (int t = 0; t < topo.num_triangles(); ++t) {
    const int ia = topo.triangles(t, 0), ib = topo.triangles(t, 1),
              ic = topo.triangles(t, 2);
    const Vec2 a = topo.uv.row(ia).transpose();
    const Vec2 b = topo.uv.row(ib).transpose();
    const Vec2 c = topo.uv.row(ic).transpose();
    const double area = (b.x() - a.x()) * (c.y() - a.y()) -
                        (c.x() - a.x()) * (b.y() - a.y());
    if (area == 0.0) continue;
    const double lo_u = std::min({a.x(), b.x(), c.x()});
    const double hi_u = std::max({a.x(), b.x(), c.x()});
    const double lo_v = std::min({a.y(), b.y(), c.y()});
    const double hi_v = std::max({a.y(), b.y(), c.y()});
    const int i0 = std::max(0, static_cast<int>(std::floor(lo_u * res - 0.5)));
    const int i1 = std::min(res - 1, static_cast<int>(std::ceil(hi_u * res - 0.5)));
    const int j0 = std::max(0, static_cast<int>(std::floor(lo_v * res - 0.5)));
    const int j1 = std::min(res - 1, static_cast<int>(std::ceil(hi_v * res - 0.5)));
    for (int j = j0; j <= j1; ++j) {
      for (int i = i0; i <= i1; ++i) {
        if (r.tri[j * res + i] >= 0) continue;
        const Vec2 p((i + 0.5) / res, (j + 0.5) / res);
        const double w0 = ((b.x() - p.x()) * (c.y() - p.y()) -
                           (c.x() - p.x()) * (b.y() - p.y())) / area;
        const double w1 = ((c.x() - p.x()) * (a.y() - p.y()) -
                           (a.x() - p.x()) * (c.y() - p.y())) / area;
        const double w2 = 1.0 - w0 - w1;
        if (w0 < -kEps || w1 < -kEps || w2 < -kEps) continue;
        r.tri[j * res + i] = t;
        r.bary[(j * res + i) * 3 + 0] = w0;
        r.bary[(j * res + i) * 3 + 1] = w1;
        r.bary[(j * res + i) * 3 + 2] = w2;
      }
    }
  }
  return r;
}

PositionMap bake_position_map(const Mesh& m, int res) {
  require_uv(m, "bake_position_map");
  const auto raster = rasterize_uv(*m.topology, res);
  PositionMap out;
  out.positions = Grid(res, res, 3);
  out.mask = Grid(res, res, 1);
  for (int j = 0; j < res; ++j) {
    for (int i = 0; i < res; ++i) {
      const int t = raster.tri[j * res + i];
      if (t < 0) continue;
      const double* w = &raster.bary[(j * res + i) * 3];
      Vec3 p = Vec3::Zero();
      for (int k = 0; k < 3; ++k)
        p += w[k] * m.vertices.row(m.topology->triangles(t, k)).transpose();
      for (int c = 0; c < 3; ++c) out.positions.at(i, j, c) = p[c];
      out.mask.at(i, j, 0) = 1.0;
    }
  }
  return out;
}

Grid displacement_derivative_grids(const Grid& dpm) {
  const int w = dpm.width, h = dpm.height;
  Grid out(w, h, 2);
  for (int j = 0; j < h; ++j) {
    for (int i = 0; i < w; ++i) {
      // finite differences across texels, scaled to per-UV-unit slopes
      const int il = std::max(i - 1, 0), ir = std::min(i + 1, w - 1);
      const int jl = std::max(j - 1, 0), jr = std::min(j + 1, h - 1);
      out.at(i, j, 0) = (dpm.at(ir, j, 0) - dpm.at(il, j, 0)) * w / (ir - il);
      out.at(i, j, 1) = (dpm.at(i, jr, 0) - dpm.at(i, jl, 0)) * h / (jr - jl);
    }
  }
  return out;
}

void scatter_displacement_derivative(Grid& dpm_grad, double u, double v,
                                     double hu_bar, double hv_bar) {
  const int w = dpm_grad.width, h = dpm_grad.height;
  // Mirror of sampling displacement_derivative_grids at (u,v): bilinear taps
  // over the derivative grid, each tap a finite-difference stencil on dpm.
  const auto taps = bilinear_taps(w, h, u, v);
  const int is[2] = {taps.i0, taps.i1};
  const int js[2] = {taps.j0, taps.j1};
  const double ws[2][2] = {{taps.w00, taps.w01}, {taps.w10, taps.w11}};
  for (int bi = 0; bi < 2; ++bi) {
    for (int bj = 0; bj < 2; ++bj) {
      const int i = is[bi], j = js[bj];
      const double wt = ws[bi][bj];
      if (wt == 0.0) continue;
      const int il = std::max(i - 1, 0), ir = std::min(i + 1, w - 1);
      const int jl = std::max(j - 1, 0), jr = std::min(j + 1, h - 1);
      const double su = wt * hu_bar * w / (ir - il);
      dpm_grad.at(ir, j, 0) += su;
      dpm_grad.at(il, j, 0) -= su;
      const double sv = wt * hv_bar * h / (jr - jl);
      dpm_grad.at(i, jr, 0) += sv;
      dpm_grad.at(i, jl, 0) -= sv;
    }
  }
}

DetailSample detail_normal(const Vec3& t_u, const Vec3& t_v,
                           const Vec3& n_geom, double h_u, double h_v) {
  DetailSample s;
  s.t_u = t_u;
  s.t_v = t_v;
  s.n_geom = n_geom;
  s.h_u = h_u;
  s.h_v = h_v;
  const Vec3 c0 = t_u.cross(t_v);
  s.c0_len = c0.norm();
  // Mirrored UV parameterizations flip the raw cross product relative to the
  // winding normal; the sign is constant over a patch.
  s.flip = (c0.dot(n_geom) < 0.0) ? -1.0 : 1.0;
  if (s.c0_len < 1e-15) {
    s.g = n_geom;
    s.normal = n_geom;
    return s;
  }
  const Vec3 du = t_u + h_u * n_geom;
  const Vec3 dv = t_v + h_v * n_geom;
  // du x dv - c0 == h_u*(n x t_v) + h_v*(t_u x n), exactly
  s.g = n_geom + s.flip * (du.cross(dv) - c0) / s.c0_len;
  const double len = s.g.norm();
  s.normal = len > 1e-15 ? Vec3(s.g / len) : n_geom;
  return s;
}

void detail_normal_backward(const DetailSample& s, const Vec3& normal_bar,
                            double* hu_bar, double* hv_bar) {
  const double len = s.g.norm();
  if (s.c0_len <= 1e-15 || len <= 1e-15) {
    *hu_bar = 0.0;
    *hv_bar = 0.0;
    return;
  }
  // normalize backward: gbar = (I - n n^T) nbar / |g|
  const Vec3 gbar = (normal_bar - s.normal * s.normal.dot(normal_bar)) / len;
  const Vec3 du = s.t_u + s.h_u * s.n_geom;
  const Vec3 dv = s.t_v + s.h_v * s.n_geom;
  // dg/dh_u = flip * (n x dv) / |c0|; dg/dh_v = flip * (du x n) / |c0|
  *hu_bar = s.flip * s.n_geom.cross(dv).dot(gbar) / s.c0_len;
  *hv_bar = s.flip * du.cross(s.n_geom).dot(gbar) / s.c0_len;
}

DetailNormalMap detail_normal_map(const Mesh& m1, const DisplacementMap& dpm,
                                  int res) {
  require_uv(m1, "detail_normal_map");
  if (!m1.has_normals)
    throw config_error("detail_normal_map: mesh has no normals");
  Vertices t_u, t_v;
  vertex_tangents(m1, &t_u, &t_v);
  const Grid deriv = displacement_derivative_grids(dpm.data);
  const auto raster = rasterize_uv(*m1.topology, res);
  const auto& tris = m1.topology->triangles;

  DetailNormalMap out;
  out.normals = Grid(res, res, 3);
  out.mask = Grid(res, res, 1);
  for (int j = 0; j < res; ++j) {
    for (int i = 0; i < res; ++i) {
      const int t = raster.tri[j * res + i];
      if (t < 0) continue;
      const double* w = &raster.bary[(j * res + i) * 3];
      Vec3 tu = Vec3::Zero(), tv = Vec3::Zero(), ng = Vec3::Zero();
      for (int k = 0; k < 3; ++k) {
        const int v = tris(t, k);
        tu += w[k] * t_u.row(v).transpose();
        tv += w[k] * t_v.row(v).transpose();
        ng += w[k] * m1.normals.row(v).transpose();
      }
      const double nl = ng.norm();
      if (nl < 1e-15) continue;
      ng /= nl;
      const double u = (i + 0.5) / res, v = (j + 0.5) / res;
      const double hu = sample_bilinear(deriv, u, v, 0);
      const double hv = sample_bilinear(deriv, u, v, 1);
      const Vec3 n = detail_normal(tu, tv, ng, hu, hv).normal;
      for (int c = 0; c < 3; ++c) out.normals.at(i, j, c) = n[c];
      out.mask.at(i, j, 0) = 1.0;
    }
  }
  return out;
}

void save_grid(const Grid& g, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  const char magic[4] = {'H', 'F', 'G', 'R'};
  out.write(magic, 4);
  const uint32_t dims[3] = {static_cast<uint32_t>(g.width),
                            static_cast<uint32_t>(g.height),
                            static_cast<uint32_t>(g.channels)};
  out.write(reinterpret_cast<const char*>(dims), 12);
  std::vector<float> tmp(g.data.size());
  for (size_t i = 0; i < tmp.size(); ++i) tmp[i] = static_cast<float>(g.data[i]);
  out.write(reinterpret_cast<const char*>(tmp.data()),
            static_cast<std::streamsize>(tmp.size() * 4));
  if (!out) throw std::runtime_error("write failed: " + path);
}

Grid load_grid(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw parse_error("cannot open grid file: " + path);
  char magic[4];
  uint32_t dims[3];
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(dims), 12);
  if (!in || std::memcmp(magic, "HFGR", 4) != 0)
    throw parse_error(path + ": bad grid header (expected HFGR)");
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0 ||
      dims[0] > 1 << 16 || dims[1] > 1 << 16 || dims[2] > 16)
    throw parse_error(path + ": implausible grid dimensions");
  Grid g(static_cast<int>(dims[0]), static_cast<int>(dims[1]),
         static_cast<int>(dims[2]));
  std::vector<float> tmp(g.data.size());
  in.read(reinterpret_cast<char*>(tmp.data()),
          static_cast<std::streamsize>(tmp.size() * 4));
  if (static_cast<size_t>(in.gcount()) != tmp.size() * 4)
    throw parse_error(path + ": truncated grid payload");
  for (size_t i = 0; i < tmp.size(); ++i) g.data[i] = static_cast<double>(tmp[i]);
  return g;
}

}  // namespace hface
