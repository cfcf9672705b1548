#include "hface/render.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace hface {

namespace {

// Signed edge function: twice the area of triangle (a, b, q), positive when
// q lies left of a->b in the y-down pixel frame.
double edge_function(const Vec2& a, const Vec2& b, double qx, double qy) {
  return (a.x() - qx) * (b.y() - qy) - (b.x() - qx) * (a.y() - qy);
}

}  // namespace

int FragmentBuffer::coverage_count() const {
  int n = 0;
  for (int t : tri) n += (t >= 0);
  return n;
}

PixelCtx pixel_ctx(const Triangles& tris, const ProjectedPoints& pts, int t,
                   double px, double py) {
  PixelCtx ctx;
  for (int k = 0; k < 3; ++k) {
    ctx.v[k] = tris(t, k);
    if (!pts.valid[ctx.v[k]]) return ctx;
    ctx.s[k] = pts.pixel[ctx.v[k]];
    ctx.z[k] = pts.depth[ctx.v[k]];
  }
  ctx.c[0] = edge_function(ctx.s[1], ctx.s[2], px, py);
  ctx.c[1] = edge_function(ctx.s[2], ctx.s[0], px, py);
  ctx.c[2] = edge_function(ctx.s[0], ctx.s[1], px, py);
  ctx.area = (ctx.s[1].x() - ctx.s[0].x()) * (ctx.s[2].y() - ctx.s[0].y()) -
             (ctx.s[2].x() - ctx.s[0].x()) * (ctx.s[1].y() - ctx.s[0].y());
  if (ctx.area == 0.0) return ctx;
  ctx.w_sum = 0.0;
  for (int k = 0; k < 3; ++k) {
    ctx.b[k] = ctx.c[k] / ctx.area;
    ctx.r[k] = ctx.b[k] / ctx.z[k];
    ctx.w_sum += ctx.r[k];
  }
  if (!(ctx.w_sum > 0.0)) return ctx;
  for (int k = 0; k < 3; ++k) ctx.w[k] = ctx.r[k] / ctx.w_sum;
  ctx.depth = 1.0 / ctx.w_sum;
  ctx.ok = true;
  return ctx;
}

FragmentBuffer rasterize_projected(const Triangles& tris,
                                   const ProjectedPoints& pts, int width,
                                   int height) {
  if (width <= 0 || height <= 0)
    throw config_error("rasterize: non-positive frame size");
  FragmentBuffer fb;
  fb.width = width;
  fb.height = height;
  const size_t n = static_cast<size_t>(width) * height;
  fb.tri.assign(n, -1);
  fb.bary.assign(n * 3, 0.0);
  fb.depth.assign(n, std::numeric_limits<double>::infinity());

  // Triangles are scanned in index order; the strict depth test keeps the
  // earlier (lower-id) triangle when depths tie exactly.
  for (int t = 0; t < tris.rows(); ++t) {
    const int v0 = tris(t, 0), v1 = tris(t, 1), v2 = tris(t, 2);
    if (!pts.valid[v0] || !pts.valid[v1] || !pts.valid[v2]) continue;
    const Vec2 s0 = pts.pixel[v0], s1 = pts.pixel[v1], s2 = pts.pixel[v2];
    const double area = (s1.x() - s0.x()) * (s2.y() - s0.y()) -
                        (s2.x() - s0.x()) * (s1.y() - s0.y());
    if (!(area < 0.0)) continue;  // back-facing or degenerate

    const double lox = std::min({s0.x(), s1.x(), s2.x()});
    const double hix = std::max({s0.x(), s1.x(), s2.x()});
    const double loy = std::min({s0.y(), s1.y(), s2.y()});
    const double hiy = std::max({s0.y(), s1.y(), s2.y()});
    const int x0 = std::max(0, static_cast<int>(std::floor(lox - 0.5)));
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(hix - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::floor(loy - 0.5)));
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(hiy - 0.5)));

    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const PixelCtx ctx = pixel_ctx(tris, pts, t, x + 0.5, y + 0.5);
        if (!ctx.ok) continue;
        if (ctx.b[0] < 0.0 || ctx.b[1] < 0.0 || ctx.b[2] < 0.0) continue;
        const size_t idx = static_cast<size_t>(y) * width + x;
        if (ctx.depth < fb.depth[idx]) {
          fb.tri[idx] = t;
          fb.depth[idx] = ctx.depth;
          for (int k = 0; k < 3; ++k) fb.bary[idx * 3 + k] = ctx.w[k];
        }
      }
    }
  }
  return fb;
}

FragmentBuffer rasterize(const Mesh& mesh, const FaceParams& params) {
  params.validate();
  const ProjectedPoints pts = project(params, mesh.vertices);
  return rasterize_projected(mesh.topology->triangles, pts,
                             params.camera.width, params.camera.height);
}

// ---------------------------------------------------------------------------
// Forward rendering
// ---------------------------------------------------------------------------

RenderState render(const MorphableModel& model, const FaceParams& params,
                   const DeformationMap* dfm, const DisplacementMap* dpm,
                   const RenderOptions& opts) {
  params.validate();
  if (opts.detail_normals && !dpm)
    throw config_error("detail normals requested without a displacement map");
  if (opts.albedo_uv && opts.albedo_uv->channels != 3)
    throw config_error("albedo texture must have 3 channels");
  const CameraIntrinsics& cam = params.camera;
  if (opts.background &&
      (opts.background->width != cam.width ||
       opts.background->height != cam.height || opts.background->channels != 3))
    throw config_error("background image does not match the camera frame");

  RenderState st;
  const Mesh m0 = decode_shape(model, params.alpha, params.beta);
  st.m1 = dfm ? apply_deformation(m0, *dfm) : m0;
  st.m1 = vertex_normals(st.m1, &st.normal_flagged, &st.normal_accum);

  if (!opts.albedo_uv) {
    st.albedo = decode_albedo(model, params.gamma);
    st.vertex_albedo_used = true;
  }

  const int nv = st.m1.num_vertices();
  st.rot = rotation_matrix(params.rotation);
  st.cam.resize(nv, 3);
  st.normals_cam.resize(nv, 3);
  for (int i = 0; i < nv; ++i) {
    st.cam.row(i) = st.rot * Vec3(st.m1.vertices.row(i)) + params.translation;
    st.normals_cam.row(i) = st.rot * Vec3(st.m1.normals.row(i));
  }

  if (opts.detail_normals) {
    Vertices tu, tv;
    vertex_tangents(st.m1, &tu, &tv);
    st.tu_cam.resize(nv, 3);
    st.tv_cam.resize(nv, 3);
    for (int i = 0; i < nv; ++i) {
      st.tu_cam.row(i) = st.rot * Vec3(tu.row(i));
      st.tv_cam.row(i) = st.rot * Vec3(tv.row(i));
    }
    st.dpm_deriv = displacement_derivative_grids(dpm->data);
  }

  st.proj = project_camera(cam, st.cam);
  st.frags = rasterize_projected(st.m1.topology->triangles, st.proj, cam.width,
                                 cam.height);

  st.image = opts.background ? *opts.background
                             : Image(cam.width, cam.height, 3);
  const UVCoords& uv = st.m1.topology->uv;
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      if (!st.frags.covered(x, y)) continue;
      const int t = st.frags.tri_at(x, y);
      const double* w = st.frags.bary_at(x, y);
      int v[3];
      for (int k = 0; k < 3; ++k) v[k] = st.m1.topology->triangles(t, k);

      Vec3 n_sum = Vec3::Zero();
      Vec2 uv_px = Vec2::Zero();
      for (int k = 0; k < 3; ++k) {
        n_sum += w[k] * Vec3(st.normals_cam.row(v[k]));
        uv_px += w[k] * Vec2(uv.row(v[k]));
      }
      const double n_len = n_sum.norm();
      if (n_len == 0.0) continue;  // exactly cancelling normals: leave background
      const Vec3 n_geom = n_sum / n_len;

      Vec3 albedo_px;
      if (opts.albedo_uv) {
        albedo_px = sample_bilinear3(*opts.albedo_uv, uv_px.x(), uv_px.y());
      } else {
        albedo_px = Vec3::Zero();
        for (int k = 0; k < 3; ++k)
          albedo_px += w[k] * Vec3(st.albedo.rgb.row(v[k]));
      }

      Vec3 n_shade = n_geom;
      if (opts.detail_normals) {
        Vec3 tu_px = Vec3::Zero(), tv_px = Vec3::Zero();
        for (int k = 0; k < 3; ++k) {
          tu_px += w[k] * Vec3(st.tu_cam.row(v[k]));
          tv_px += w[k] * Vec3(st.tv_cam.row(v[k]));
        }
        const double hu = sample_bilinear(st.dpm_deriv, uv_px.x(), uv_px.y(), 0);
        const double hv = sample_bilinear(st.dpm_deriv, uv_px.x(), uv_px.y(), 1);
        n_shade = detail_normal(tu_px, tv_px, n_geom, hu, hv).normal;
      }

      const Vec3 rgb = sh_shade(albedo_px, n_shade, params.lighting);
      for (int c = 0; c < 3; ++c) st.image.at(x, y, c) = rgb[c];
    }
  }
  return st;
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

RenderGrads::RenderGrads(const MorphableModel& model, const DeformationMap* d,
                         const DisplacementMap* p)
    : alpha(VecX::Zero(model.k_id())),
      beta(VecX::Zero(model.k_exp())),
      gamma(VecX::Zero(model.k_alb())) {
  if (d) dfm = Grid(d->data.width, d->data.height, 3);
  if (p) dpm = Grid(p->data.width, p->data.height, 1);
}

namespace {

// Adjoint accumulators on the geometry pipeline, filled per pixel and
// resolved to parameters once at the end.
struct GeomAccum {
  Vertices cam_bar;       // d/d camera-space position
  Vertices ncam_bar;      // d/d unit camera-space normal
  Vertices pmodel_bar;    // d/d deformed model-space position
  Vertices albedo_bar;    // d/d vertex albedo (pre-clamp handled later)
  std::vector<Vec2> screen_bar;

  explicit GeomAccum(int nv)
      : cam_bar(Vertices::Zero(nv, 3)),
        ncam_bar(Vertices::Zero(nv, 3)),
        pmodel_bar(Vertices::Zero(nv, 3)),
        albedo_bar(Vertices::Zero(nv, 3)),
        screen_bar(nv, Vec2::Zero()) {}
};

// Routes perspective-correct weight adjoints back to screen positions and
// camera depths of the triangle's vertices; q is the pixel center.
void pixel_weights_backward(const PixelCtx& ctx, double qx, double qy,
                            const double w_bar[3], GeomAccum* acc) {
  double dot_ww = 0.0;
  for (int k = 0; k < 3; ++k) dot_ww += w_bar[k] * ctx.w[k];

  double c_bar[3];
  double area_bar = 0.0;
  for (int k = 0; k < 3; ++k) {
    const double r_bar = (w_bar[k] - dot_ww) / ctx.w_sum;
    const double b_bar = r_bar / ctx.z[k];
    acc->cam_bar(ctx.v[k], 2) -= r_bar * ctx.b[k] / (ctx.z[k] * ctx.z[k]);
    c_bar[k] = b_bar / ctx.area;
    area_bar -= b_bar * ctx.b[k] / ctx.area;
  }

  const Vec2 s0 = ctx.s[0], s1 = ctx.s[1], s2 = ctx.s[2];
  Vec2 g[3] = {Vec2::Zero(), Vec2::Zero(), Vec2::Zero()};

  // E = (ax-qx)(by-qy) - (bx-qx)(ay-qy):
  //   dE/dax =  by-qy   dE/day = -(bx-qx)
  //   dE/dbx = -(ay-qy) dE/dby =  ax-qx
  auto edge_adj = [&](double cb, const Vec2& a, const Vec2& b, Vec2* a_bar,
                      Vec2* b_bar) {
    (*a_bar).x() += cb * (b.y() - qy);
    (*a_bar).y() -= cb * (b.x() - qx);
    (*b_bar).x() -= cb * (a.y() - qy);
    (*b_bar).y() += cb * (a.x() - qx);
  };
  edge_adj(c_bar[0], s1, s2, &g[1], &g[2]);
  edge_adj(c_bar[1], s2, s0, &g[2], &g[0]);
  edge_adj(c_bar[2], s0, s1, &g[0], &g[1]);

  // area = (s1-s0) x (s2-s0)
  g[0].x() += area_bar * (s1.y() - s2.y());
  g[0].y() += area_bar * (s2.x() - s1.x());
  g[1].x() += area_bar * (s2.y() - s0.y());
  g[1].y() += area_bar * (s0.x() - s2.x());
  g[2].x() += area_bar * (s0.y() - s1.y());
  g[2].y() += area_bar * (s1.x() - s0.x());

  for (int k = 0; k < 3; ++k) acc->screen_bar[ctx.v[k]] += g[k];
}

// Resolves the accumulated vertex adjoints to parameter gradients: screen ->
// camera, camera normals -> model normals -> vertex positions (through the
// area-weighted normalization), camera positions -> pose, model positions ->
// coefficients and deformation texels, vertex albedo -> gamma.
void finish_geometry(const MorphableModel& model, const FaceParams& params,
                     const DeformationMap* dfm, const RenderState& st,
                     GeomAccum* acc, RenderGrads* grads) {
  const int nv = st.m1.num_vertices();
  const Mat3 rot_t = st.rot.transpose();

  for (int i = 0; i < nv; ++i) {
    if (!st.proj.valid[i]) continue;
    if (acc->screen_bar[i].squaredNorm() == 0.0) continue;
    acc->cam_bar.row(i) += project_point_backward(
        params.camera, Vec3(st.cam.row(i)), acc->screen_bar[i]);
  }

  Mat3 rot_bar = Mat3::Zero();

  // Camera-space normals: n_cam = R * n_model.
  Vertices nmodel_bar = Vertices::Zero(nv, 3);
  bool any_normal = false;
  for (int i = 0; i < nv; ++i) {
    const Vec3 nb = acc->ncam_bar.row(i);
    if (nb.squaredNorm() == 0.0) continue;
    any_normal = true;
    nmodel_bar.row(i) = rot_t * nb;
    rot_bar += nb * Vec3(st.m1.normals.row(i)).transpose();
  }

  // Model normals: n = acc / |acc| with acc the cross-product sums; then the
  // cross products pull back to vertex positions. Fallback normals of
  // zero-area vertices carry no gradient.
  if (any_normal) {
    Vertices accum_bar = Vertices::Zero(nv, 3);
    for (int i = 0; i < nv; ++i) {
      const Vec3 nb = nmodel_bar.row(i);
      if (nb.squaredNorm() == 0.0) continue;
      const Vec3 a = st.normal_accum.row(i);
      const double len = a.norm();
      if (len <= 1e-12) continue;
      const Vec3 n = a / len;
      accum_bar.row(i) = (nb - n * n.dot(nb)) / len;
    }
    const Triangles& tris = st.m1.topology->triangles;
    for (int t = 0; t < tris.rows(); ++t) {
      const int a = tris(t, 0), b = tris(t, 1), c = tris(t, 2);
      const Vec3 cross_bar = Vec3(accum_bar.row(a)) + Vec3(accum_bar.row(b)) +
                             Vec3(accum_bar.row(c));
      if (cross_bar.squaredNorm() == 0.0) continue;
      const Vec3 pa = st.m1.vertices.row(a);
      const Vec3 e1 = Vec3(st.m1.vertices.row(b)) - pa;
      const Vec3 e2 = Vec3(st.m1.vertices.row(c)) - pa;
      const Vec3 e1_bar = e2.cross(cross_bar);   // d(e1 x e2)/d(e1)^T v = e2 x v
      const Vec3 e2_bar = cross_bar.cross(e1);   // d(e1 x e2)/d(e2)^T v = v x e1
      acc->pmodel_bar.row(b) += e1_bar;
      acc->pmodel_bar.row(c) += e2_bar;
      acc->pmodel_bar.row(a) -= e1_bar + e2_bar;
    }
  }

  // Camera-space positions: p_cam = R * p + t.
  for (int i = 0; i < nv; ++i) {
    const Vec3 cb = acc->cam_bar.row(i);
    if (cb.squaredNorm() == 0.0) continue;
    grads->translation += cb;
    rot_bar += cb * Vec3(st.m1.vertices.row(i)).transpose();
    acc->pmodel_bar.row(i) += rot_t * cb;
  }

  // Rotation matrix -> Tait-Bryan angles.
  Mat3 d_r[3];
  rotation_derivatives(params.rotation, d_r);
  for (int i = 0; i < 3; ++i)
    grads->rotation[i] += (rot_bar.array() * d_r[i].array()).sum();

  // Model positions: M1 = M0 + dfm(uv); M0 = mean + S*alpha + E*beta.
  const UVCoords& uv = st.m1.topology->uv;
  VecX pflat = VecX::Zero(3 * nv);
  bool any_pos = false;
  for (int i = 0; i < nv; ++i) {
    const Vec3 pb = acc->pmodel_bar.row(i);
    if (pb.squaredNorm() == 0.0) continue;
    any_pos = true;
    for (int c = 0; c < 3; ++c) pflat[3 * i + c] = pb[c];
    if (dfm && !grads->dfm.empty())
      for (int c = 0; c < 3; ++c)
        scatter_bilinear(grads->dfm, uv(i, 0), uv(i, 1), c, pb[c]);
  }
  if (any_pos) {
    grads->alpha += model.shape_basis.transpose() * pflat;
    grads->beta += model.expr_basis.transpose() * pflat;
  }

  // Vertex albedo: clamped channels have zero derivative.
  if (st.vertex_albedo_used) {
    VecX aflat = VecX::Zero(3 * nv);
    bool any_alb = false;
    for (int i = 0; i < nv; ++i)
      for (int c = 0; c < 3; ++c) {
        const double ab = acc->albedo_bar(i, c);
        if (ab == 0.0 || st.albedo.clamped_channel[3 * i + c]) continue;
        aflat[3 * i + c] = ab;
        any_alb = true;
      }
    if (any_alb) grads->gamma += model.albedo_basis.transpose() * aflat;
  }
}

}  // namespace

void render_backward(const MorphableModel& model, const FaceParams& params,
                     const DeformationMap* dfm, const DisplacementMap* dpm,
                     const RenderOptions& opts, const RenderState& st,
                     const Image& image_bar, RenderGrads* grads) {
  const CameraIntrinsics& cam = params.camera;
  if (image_bar.width != cam.width || image_bar.height != cam.height ||
      image_bar.channels != 3)
    throw config_error("image adjoint does not match the camera frame");
  if (opts.detail_normals && (!dpm || grads->dpm.empty()))
    throw config_error("detail-mode backward needs a displacement map");

  const UVCoords& uv = st.m1.topology->uv;
  GeomAccum acc(st.m1.num_vertices());

  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      if (!st.frags.covered(x, y)) continue;
      const Vec3 out_bar(image_bar.at(x, y, 0), image_bar.at(x, y, 1),
                         image_bar.at(x, y, 2));
      if (out_bar.squaredNorm() == 0.0) continue;

      const int t = st.frags.tri_at(x, y);
      const PixelCtx ctx = pixel_ctx(st.m1.topology->triangles, st.proj, t,
                                     x + 0.5, y + 0.5);
      if (!ctx.ok) continue;

      // Recompute the forward attributes at this pixel.
      Vec3 n_sum = Vec3::Zero();
      Vec2 uv_px = Vec2::Zero();
      for (int k = 0; k < 3; ++k) {
        n_sum += ctx.w[k] * Vec3(st.normals_cam.row(ctx.v[k]));
        uv_px += ctx.w[k] * Vec2(uv.row(ctx.v[k]));
      }
      const double n_len = n_sum.norm();
      if (n_len == 0.0) continue;
      const Vec3 n_geom = n_sum / n_len;

      Vec3 albedo_px;
      if (opts.albedo_uv) {
        albedo_px = sample_bilinear3(*opts.albedo_uv, uv_px.x(), uv_px.y());
      } else {
        albedo_px = Vec3::Zero();
        for (int k = 0; k < 3; ++k)
          albedo_px += ctx.w[k] * Vec3(st.albedo.rgb.row(ctx.v[k]));
      }

      if (opts.detail_normals) {
        // High-frequency stage: the mesh, pose and albedo are held fixed;
        // gradients flow to lighting and displacement texels only.
        Vec3 tu_px = Vec3::Zero(), tv_px = Vec3::Zero();
        for (int k = 0; k < 3; ++k) {
          tu_px += ctx.w[k] * Vec3(st.tu_cam.row(ctx.v[k]));
          tv_px += ctx.w[k] * Vec3(st.tv_cam.row(ctx.v[k]));
        }
        const double hu =
            sample_bilinear(st.dpm_deriv, uv_px.x(), uv_px.y(), 0);
        const double hv =
            sample_bilinear(st.dpm_deriv, uv_px.x(), uv_px.y(), 1);
        const DetailSample ds = detail_normal(tu_px, tv_px, n_geom, hu, hv);

        Vec3 normal_bar = Vec3::Zero();
        sh_shade_backward(albedo_px, ds.normal, params.lighting, out_bar,
                          nullptr, &normal_bar, &grads->lighting);
        double hu_bar = 0.0, hv_bar = 0.0;
        detail_normal_backward(ds, normal_bar, &hu_bar, &hv_bar);
        scatter_displacement_derivative(grads->dpm, uv_px.x(), uv_px.y(),
                                        hu_bar, hv_bar);
        continue;
      }

      Vec3 albedo_px_bar = Vec3::Zero();
      Vec3 normal_bar = Vec3::Zero();
      sh_shade_backward(albedo_px, n_geom, params.lighting, out_bar,
                        &albedo_px_bar, &normal_bar, &grads->lighting);

      double w_bar[3] = {0.0, 0.0, 0.0};

      // Albedo interpolation (vertex) or texture lookup (UV path).
      if (opts.albedo_uv) {
        double u_bar = 0.0, v_bar = 0.0;
        for (int c = 0; c < 3; ++c) {
          double du, dv;
          sample_bilinear_duv(*opts.albedo_uv, uv_px.x(), uv_px.y(), c, &du,
                              &dv);
          u_bar += albedo_px_bar[c] * du;
          v_bar += albedo_px_bar[c] * dv;
        }
        for (int k = 0; k < 3; ++k)
          w_bar[k] += u_bar * uv(ctx.v[k], 0) + v_bar * uv(ctx.v[k], 1);
      } else {
        for (int k = 0; k < 3; ++k) {
          acc.albedo_bar.row(ctx.v[k]) += ctx.w[k] * albedo_px_bar;
          w_bar[k] += albedo_px_bar.dot(Vec3(st.albedo.rgb.row(ctx.v[k])));
        }
      }

      // Normal normalization and interpolation.
      const Vec3 nsum_bar =
          (normal_bar - n_geom * n_geom.dot(normal_bar)) / n_len;
      for (int k = 0; k < 3; ++k) {
        acc.ncam_bar.row(ctx.v[k]) += ctx.w[k] * nsum_bar;
        w_bar[k] += nsum_bar.dot(Vec3(st.normals_cam.row(ctx.v[k])));
      }

      pixel_weights_backward(ctx, x + 0.5, y + 0.5, w_bar, &acc);
    }
  }

  if (!opts.detail_normals)
    finish_geometry(model, params, dfm, st, &acc, grads);
}

void screen_points_backward(const MorphableModel& model,
                            const FaceParams& params, const DeformationMap* dfm,
                            const RenderState& st, const std::vector<int>& verts,
                            const std::vector<Vec2>& screen_bar,
                            RenderGrads* grads) {
  if (verts.size() != screen_bar.size())
    throw std::invalid_argument("screen_points_backward: size mismatch");
  GeomAccum acc(st.m1.num_vertices());
  for (size_t i = 0; i < verts.size(); ++i)
    acc.screen_bar[verts[i]] += screen_bar[i];
  finish_geometry(model, params, dfm, st, &acc, grads);
}

void model_points_backward(const MorphableModel& model,
                           const DeformationMap* dfm,
                           const Vertices& pmodel_bar, RenderGrads* grads) {
  const int nv = model.num_vertices();
  if (pmodel_bar.rows() != nv || pmodel_bar.cols() != 3)
    throw std::invalid_argument("model_points_backward: adjoint size mismatch");
  const UVCoords& uv = model.topology->uv;
  VecX pflat = VecX::Zero(3 * nv);
  bool any = false;
  for (int i = 0; i < nv; ++i) {
    const Vec3 pb = pmodel_bar.row(i);
    if (pb.squaredNorm() == 0.0) continue;
    any = true;
    for (int c = 0; c < 3; ++c) pflat[3 * i + c] = pb[c];
    if (dfm && !grads->dfm.empty())
      for (int c = 0; c < 3; ++c)
        scatter_bilinear(grads->dfm, uv(i, 0), uv(i, 1), c, pb[c]);
  }
  if (any) {
    grads->alpha += model.shape_basis.transpose() * pflat;
    grads->beta += model.expr_basis.transpose() * pflat;
  }
}

void displacement_backward(const Mesh& m1, const Vertices& m2_bar,
                           Grid* dpm_grad) {
  if (!m1.has_normals)
    throw config_error("displacement_backward: mesh has no normals");
  if (m2_bar.rows() != m1.num_vertices())
    throw std::invalid_argument("displacement_backward: adjoint size mismatch");
  const UVCoords& uv = m1.topology->uv;
  for (int i = 0; i < m1.num_vertices(); ++i) {
    const double h_bar = Vec3(m1.normals.row(i)).dot(Vec3(m2_bar.row(i)));
    if (h_bar == 0.0) continue;
    scatter_bilinear(*dpm_grad, uv(i, 0), uv(i, 1), 0, h_bar);
  }
}

// ---------------------------------------------------------------------------
// Texture unwrapping
// ---------------------------------------------------------------------------

TextureUV unwrap_texture(const Image& image, const Mesh& mesh,
                         const FaceParams& params, int res) {
  params.validate();
  const CameraIntrinsics& cam = params.camera;
  if (image.width != cam.width || image.height != cam.height ||
      image.channels != 3)
    throw config_error("unwrap: image does not match the camera frame");
  if (res < 2) throw config_error("unwrap: texture resolution must be >= 2");

  const Mesh m = mesh.has_normals ? mesh : vertex_normals(mesh);
  const Topology& topo = *m.topology;
  const UVRaster ruv = rasterize_uv(topo, res);
  const FragmentBuffer fb = rasterize(m, params);
  const Mat3 rot = rotation_matrix(params.rotation);
  const double kDepthTol = 0.5;  // mm of self-occlusion slack

  TextureUV out;
  out.rgb = Grid(res, res, 3);
  out.visible = Grid(res, res, 1);

  for (int j = 0; j < res; ++j) {
    for (int i = 0; i < res; ++i) {
      if (!ruv.covered(i, j)) continue;
      const int t = ruv.tri[j * res + i];
      const double* b = &ruv.bary[(static_cast<size_t>(j) * res + i) * 3];
      Vec3 p = Vec3::Zero(), n = Vec3::Zero();
      for (int k = 0; k < 3; ++k) {
        const int v = topo.triangles(t, k);
        p += b[k] * Vec3(m.vertices.row(v));
        n += b[k] * Vec3(m.normals.row(v));
      }
      const Vec3 p_cam = rot * p + params.translation;
      if (p_cam.z() <= cam.near_plane) continue;
      const Vec3 n_cam = rot * n;
      if (n_cam.dot(p_cam) >= 0.0) continue;  // facing away

      const double px = cam.cx + cam.focal * p_cam.x() / p_cam.z();
      const double py = cam.cy + cam.focal * p_cam.y() / p_cam.z();
      if (px < 0.0 || px >= cam.width || py < 0.0 || py >= cam.height)
        continue;
      const int ix = std::min(static_cast<int>(px), cam.width - 1);
      const int iy = std::min(static_cast<int>(py), cam.height - 1);
      if (!fb.covered(ix, iy)) continue;
      if (p_cam.z() > fb.depth_at(ix, iy) + kDepthTol) continue;  // occluded

      // Coverage-masked bilinear sample: taps on uncovered pixels are
      // dropped and the weights renormalized, so silhouette-adjacent texels
      // do not bleed background into the texture.
      const BilinearTaps taps =
          bilinear_taps(image.width, image.height, px / cam.width,
                        py / cam.height);
      const int txs[4] = {taps.i0, taps.i1, taps.i0, taps.i1};
      const int tys[4] = {taps.j0, taps.j0, taps.j1, taps.j1};
      const double tws[4] = {taps.w00, taps.w10, taps.w01, taps.w11};
      Vec3 rgb = Vec3::Zero();
      double w_sum = 0.0;
      for (int k = 0; k < 4; ++k) {
        if (!fb.covered(txs[k], tys[k])) continue;
        for (int c = 0; c < 3; ++c)
          rgb[c] += tws[k] * image.at(txs[k], tys[k], c);
        w_sum += tws[k];
      }
      if (w_sum < 1e-12) {
        for (int c = 0; c < 3; ++c) rgb[c] = image.at(ix, iy, c);
      } else {
        rgb /= w_sum;
      }
      for (int c = 0; c < 3; ++c) out.rgb.at(i, j, c) = rgb[c];
      out.visible.at(i, j, 0) = 1.0;
    }
  }

  int n_visible = 0;
  for (double v : out.visible.data) n_visible += (v > 0.0);
  if (n_visible == 0) {
    out.degenerate = true;
    return out;
  }

  // Masked diffusion fill: unknown texels repeatedly take the mean of their
  // valued 4-neighbors; texels sampled from the image never change.
  std::vector<uint8_t> has(out.visible.data.size());
  for (size_t k = 0; k < has.size(); ++k) has[k] = out.visible.data[k] > 0.0;
  Grid cur = out.rgb;
  Grid next = out.rgb;
  std::vector<uint8_t> next_has = has;
  const int kIters = 200;
  for (int it = 0; it < kIters; ++it) {
    for (int j = 0; j < res; ++j) {
      for (int i = 0; i < res; ++i) {
        const size_t idx = static_cast<size_t>(j) * res + i;
        if (out.visible.data[idx] > 0.0) continue;
        double sum[3] = {0, 0, 0};
        int cnt = 0;
        auto tap = [&](int ii, int jj) {
          if (ii < 0 || ii >= res || jj < 0 || jj >= res) return;
          if (!has[static_cast<size_t>(jj) * res + ii]) return;
          for (int c = 0; c < 3; ++c) sum[c] += cur.at(ii, jj, c);
          ++cnt;
        };
        tap(i - 1, j);
        tap(i + 1, j);
        tap(i, j - 1);
        tap(i, j + 1);
        if (cnt > 0) {
          for (int c = 0; c < 3; ++c) next.at(i, j, c) = sum[c] / cnt;
          next_has[idx] = 1;
        }
      }
    }
    cur.data.swap(next.data);
    has = next_has;
  }
  out.rgb = cur;
  return out;
}

}  // namespace hface
