#include "hface/scene.hpp"

#include "hface/camera.hpp"
#include "hface/geometry.hpp"
#include "hface/render.hpp"
#include "hface/shading.hpp"

#include <cmath>
#include <stdexcept>

namespace hface {

namespace {

// Blurred white noise rescaled to a target peak amplitude; the number of
// 1-2-1 passes sets the feature size.
Grid smooth_noise(Rng& rng, int res, int channels, int passes, double amp) {
  Grid g(res, res, channels);
  for (double& v : g.data) v = rng.normal();
  Grid tmp(res, res, channels);
  auto tap = [&](const Grid& src, int i, int j, int c, int di, int dj) {
    const int x = std::clamp(i + di, 0, res - 1);
    const int y = std::clamp(j + dj, 0, res - 1);
    return src.at(x, y, c);
  };
  for (int p = 0; p < passes; ++p) {
    for (int c = 0; c < channels; ++c)
      for (int j = 0; j < res; ++j)
        for (int i = 0; i < res; ++i)
          tmp.at(i, j, c) = 0.25 * (tap(g, i, j, c, -1, 0) +
                                    2.0 * g.at(i, j, c) + tap(g, i, j, c, 1, 0));
    for (int c = 0; c < channels; ++c)
      for (int j = 0; j < res; ++j)
        for (int i = 0; i < res; ++i)
          g.at(i, j, c) = 0.25 * (tap(tmp, i, j, c, 0, -1) +
                                  2.0 * tmp.at(i, j, c) + tap(tmp, i, j, c, 0, 1));
  }
  double peak = 0.0;
  for (double v : g.data) peak = std::max(peak, std::abs(v));
  if (peak > 0)
    for (double& v : g.data) v *= amp / peak;
  return g;
}

VecX ambient(double scale) {
  VecX l = VecX::Zero(27);
  for (int c = 0; c < 3; ++c) l[9 * c] = scale / sh_ambient_basis();
  return l;
}

// Smooth blobs along the base surface's normal field. Centers come from
// face-region anchors (plus jitter), so the deformation reads as cheek, brow
// or jaw shape changes rather than arbitrary noise.
Grid bump_field(Rng& rng, const MorphableModel& model, const Mesh& base,
                int res, double amp, const std::string& style) {
  const UVRaster raster = rasterize_uv(*model.topology, res);
  std::vector<int> flagged;
  const Mesh with_n = vertex_normals(base, &flagged);

  struct Bump {
    double u, v, sigma, amp;
  };
  std::vector<Bump> bumps;
  if (style == "jaw") {
    bumps.push_back({0.5 + rng.uniform(-0.04, 0.04), 0.82, 0.10, amp});
  } else {
    if (style == "bumps_eye")
      bumps.push_back({0.33, 0.385, 0.07, amp * (rng.uniform() < 0.5 ? 1 : -1)});
    const double anchors[4][2] = {
        {0.30, 0.62}, {0.70, 0.62}, {0.50, 0.80}, {0.50, 0.30}};
    for (const auto& a : anchors)
      bumps.push_back({a[0] + rng.uniform(-0.05, 0.05),
                       a[1] + rng.uniform(-0.05, 0.05),
                       rng.uniform(0.07, 0.11),
                       amp * rng.uniform(0.5, 1.0) *
                           (rng.uniform() < 0.5 ? 1.0 : -1.0)});
  }

  Grid g(res, res, 3);
  for (int j = 0; j < res; ++j)
    for (int i = 0; i < res; ++i) {
      if (!raster.covered(i, j)) continue;
      const double u = (i + 0.5) / res, v = (j + 0.5) / res;
      double h = 0.0;
      for (const Bump& b : bumps) {
        const double du = (u - b.u) / b.sigma, dv = (v - b.v) / b.sigma;
        h += b.amp * std::exp(-0.5 * (du * du + dv * dv));
      }
      if (h == 0.0) continue;
      const int t = raster.tri[j * res + i];
      const double* bc = &raster.bary[(static_cast<size_t>(j) * res + i) * 3];
      Vec3 n = Vec3::Zero();
      for (int k = 0; k < 3; ++k)
        n += bc[k] * Vec3(with_n.normals.row(model.topology->triangles(t, k)));
      const double len = n.norm();
      if (len > 0) n /= len;
      for (int c = 0; c < 3; ++c) g.at(i, j, c) = h * n[c];
    }
  return g;
}

}  // namespace

void SceneOptions::validate() const {
  if (n_views < 1) throw config_error("scene: n_views must be >= 1");
  if (image_size < 32) throw config_error("scene: image_size too small");
  if (focal <= 0) throw config_error("scene: focal must be > 0");
  if (dfm_amp_mm < 0 || dpm_amp_mm < 0 || paint_amp < 0)
    throw config_error("scene: amplitudes must be >= 0");
  if (dfm_res < 2 || dpm_res < 2 || texture_res < 2)
    throw config_error("scene: resolutions too small");
  if (v_side < 8 || k_id < 1 || k_exp < 1 || k_alb < 1)
    throw config_error("scene: model sizes too small");
}

SynthScene make_synth_scene(uint64_t seed, const SceneOptions& opts) {
  opts.validate();
  Rng rng(seed ^ 0x5ce9e5u);

  SynthScene sc;
  sc.model = synth_model(seed, opts.v_side, opts.k_id, opts.k_exp, opts.k_alb);

  sc.gt_alpha = VecX(opts.k_id);
  sc.gt_beta = VecX(opts.k_exp);
  sc.gt_gamma = VecX(opts.k_alb);
  for (int i = 0; i < opts.k_id; ++i) sc.gt_alpha[i] = 0.6 * rng.normal();
  for (int i = 0; i < opts.k_exp; ++i) sc.gt_beta[i] = 0.4 * rng.normal();
  for (int i = 0; i < opts.k_alb; ++i) sc.gt_gamma[i] = 0.5 * rng.normal();

  if (!opts.with_dfm) {
    sc.gt_dfm.data = Grid(opts.dfm_res, opts.dfm_res, 3);
  } else if (opts.dfm_style == "noise") {
    sc.gt_dfm.data = smooth_noise(rng, opts.dfm_res, 3, 24, opts.dfm_amp_mm);
  } else if (opts.dfm_style == "bumps" || opts.dfm_style == "bumps_eye" ||
             opts.dfm_style == "jaw") {
    const Mesh base = decode_shape(sc.model, sc.gt_alpha, sc.gt_beta);
    sc.gt_dfm.data = bump_field(rng, sc.model, base, opts.dfm_res,
                                opts.dfm_amp_mm, opts.dfm_style);
  } else {
    throw config_error("scene: unknown dfm_style '" + opts.dfm_style + "'");
  }
  sc.gt_dpm.data = opts.with_dpm
                       ? smooth_noise(rng, opts.dpm_res, 1, 6, opts.dpm_amp_mm)
                       : Grid(opts.dpm_res, opts.dpm_res, 1);

  // Texture: decoded albedo with uncovered texels filled by the covered mean,
  // plus a smooth painted variation the coefficient albedo cannot express.
  sc.gt_texture = bake_albedo_uv(sc.model, sc.gt_gamma, opts.texture_res);
  {
    Grid& rgb = sc.gt_texture.rgb;
    const Grid& vis = sc.gt_texture.visible;
    double mean[3] = {0, 0, 0};
    int covered = 0;
    for (int j = 0; j < rgb.height; ++j)
      for (int i = 0; i < rgb.width; ++i)
        if (vis.at(i, j, 0) > 0) {
          for (int c = 0; c < 3; ++c) mean[c] += rgb.at(i, j, c);
          ++covered;
        }
    for (int c = 0; c < 3; ++c) mean[c] = covered ? mean[c] / covered : 0.5;
    const Grid paint =
        smooth_noise(rng, opts.texture_res, 3, 12, opts.paint_amp);
    for (int j = 0; j < rgb.height; ++j)
      for (int i = 0; i < rgb.width; ++i)
        for (int c = 0; c < 3; ++c) {
          const double base =
              vis.at(i, j, 0) > 0 ? rgb.at(i, j, c) : mean[c];
          rgb.at(i, j, c) = std::clamp(base + paint.at(i, j, c), 0.05, 0.95);
        }
  }

  sc.gt_m0 = decode_shape(sc.model, sc.gt_alpha, sc.gt_beta);
  sc.gt_m1 = vertex_normals(apply_deformation(sc.gt_m0, sc.gt_dfm));
  sc.gt_m2 = apply_displacement(sc.gt_m1, sc.gt_dpm);

  CameraIntrinsics cam;
  cam.focal = opts.focal;
  cam.width = opts.image_size;
  cam.height = opts.image_size;
  cam.cx = opts.image_size / 2.0;
  cam.cy = opts.image_size / 2.0;
  cam.near_plane = 1.0;
  // The face spans roughly 220 mm vertically; place it so it fills most of
  // the frame.
  const double base_z = 0.95 * opts.focal * 220.0 / opts.image_size;

  const std::vector<int>& lm_ids = sc.model.topology->landmarks68;
  Vertices lm_pos(68, 3);
  for (int i = 0; i < 68; ++i)
    lm_pos.row(i) = sc.gt_m1.vertices.row(lm_ids[i]);

  for (int v = 0; v < opts.n_views; ++v) {
    FaceParams p;
    p.alpha = sc.gt_alpha;
    p.beta = sc.gt_beta;
    p.gamma = sc.gt_gamma;
    p.camera = cam;
    const double yaw = opts.view_spread * (v - 0.5 * (opts.n_views - 1));
    p.rotation = Vec3(rng.uniform(-0.06, 0.06), yaw, rng.uniform(-0.04, 0.04));
    p.translation = Vec3(rng.uniform(-8.0, 8.0), rng.uniform(-8.0, 8.0),
                         base_z * rng.uniform(0.97, 1.05));
    p.lighting = ambient(rng.uniform(0.92, 1.05));
    // One directional component shared across channels, strong enough that
    // surface orientation is photometrically observable.
    const double sx = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double sy = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double dir[3] = {sx * rng.uniform(0.15, 0.28),
                           sy * rng.uniform(0.15, 0.28),
                           rng.uniform(-0.28, -0.10)};
    for (int c = 0; c < 3; ++c) {
      const double tint = 1.0 + 0.06 * rng.normal();
      for (int k = 0; k < 3; ++k) p.lighting[9 * c + 1 + k] = tint * dir[k];
    }
    p.validate();

    RenderOptions ro;
    ro.albedo_uv = &sc.gt_texture.rgb;
    ro.detail_normals = opts.with_dpm;
    const DeformationMap* dfm = opts.with_dfm ? &sc.gt_dfm : nullptr;
    const DisplacementMap* dpm = opts.with_dpm ? &sc.gt_dpm : nullptr;
    RenderState st = render(sc.model, p, dfm, dpm, ro);

    ViewInput view;
    view.image = st.image;
    view.camera = cam;
    Grid mg(cam.width, cam.height, 1);
    for (int y = 0; y < cam.height; ++y)
      for (int x = 0; x < cam.width; ++x)
        mg.at(x, y, 0) = st.frags.covered(x, y) ? 1.0 : 0.0;
    view.face_mask = FaceMask::from_grid(mg);

    const ProjectedPoints pp = project(p, lm_pos);
    view.landmarks68.resize(68);
    for (int i = 0; i < 68; ++i) {
      if (!pp.valid[i])
        throw std::runtime_error("scene: landmark fell behind the camera");
      view.landmarks68[i] = pp.pixel[i];
    }
    view.validate();
    sc.views.push_back(std::move(view));
    sc.gt_params.push_back(std::move(p));
  }
  return sc;
}

}  // namespace hface
