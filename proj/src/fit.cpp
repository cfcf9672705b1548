#include "hface/fit.hpp"

#include "hface/camera.hpp"
#include "hface/geometry.hpp"
#include "hface/image_io.hpp"
#include "hface/mesh_io.hpp"
#include "hface/shading.hpp"
#include "hface/spatial.hpp"

#include <json.hpp>

#include <Eigen/Geometry>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <random>
#include <sstream>

namespace hface {

namespace {

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

VecX ambient_lighting() {
  VecX l = VecX::Zero(27);
  for (int c = 0; c < 3; ++c) l[9 * c] = 1.0 / sh_ambient_basis();
  return l;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void add_scaled(Grid* dst, const Grid& src, double s) {
  for (size_t i = 0; i < dst->data.size(); ++i) dst->data[i] += s * src.data[i];
}

void scale_grid(Grid* g, double s) {
  for (double& v : g->data) v *= s;
}

TextureUV clamp_unit(TextureUV t) {
  for (double& v : t.rgb.data) v = std::clamp(v, 0.0, 1.0);
  return t;
}

// ---------------------------------------------------------------------------
// Flat-vector packing
// ---------------------------------------------------------------------------

struct Packer {
  BlockLayout layout;
  std::vector<double> scales;
  int total = 0;

  int add(const std::string& name, int n, double scale) {
    layout.emplace_back(name, n);
    scales.push_back(scale);
    const int off = total;
    total += n;
    return off;
  }

  VecX lr_scale() const {
    VecX s(total);
    int off = 0;
    for (size_t b = 0; b < layout.size(); ++b) {
      s.segment(off, layout[b].second).setConstant(scales[b]);
      off += layout[b].second;
    }
    return s;
  }
};

void put_grid(VecX& x, int off, const Grid& g) {
  for (int i = 0; i < g.size(); ++i) x[off + i] = g.data[i];
}

void take_grid(const VecX& x, int off, Grid* g) {
  for (int i = 0; i < g->size(); ++i) g->data[i] = x[off + i];
}

std::string block_of(const BlockLayout& layout, int index) {
  int off = 0;
  for (const auto& [name, n] : layout) {
    if (index < off + n) return name;
    off += n;
  }
  return "";
}

// ---------------------------------------------------------------------------
// Single-view evaluation: one state, a term selection, weighted loss values
// and gradients routed into parameter space.
// ---------------------------------------------------------------------------

struct SVState {
  FaceParams params;
  DeformationMap dfm;  // empty when the stage has none
  DisplacementMap dpm;
  std::shared_ptr<const TextureUV> albedo_prime;  // frozen de-retouched albedo
};

struct SVSelect {
  // free variables
  bool v_alpha = false, v_beta = false, v_gamma = false, v_pose = false;
  bool v_light = false, v_dfm = false, v_dpm = false;
  // active terms
  bool t_photo0 = false;     // render of the undeformed coarse mesh
  bool t_photo_mid = false;  // render of the deformed mesh (decoded albedo)
  bool t_photo_det = false;  // detail-normal render with albedo_prime
  bool t_lan = false, t_con = false, t_tv = false, t_l1 = false;
  bool t_prior_alpha = false, t_prior_beta = false, t_prior_gamma = false;
};

std::vector<std::string> term_names_for(const SVSelect& s) {
  std::vector<std::string> n;
  if (s.t_photo0) n.push_back("photo");
  if (s.t_photo_mid) n.push_back("photo_mid");
  if (s.t_photo_det) n.push_back("photo_detail");
  if (s.t_lan) n.push_back("landmark");
  if (s.t_con) n.push_back("contour");
  if (s.t_tv) n.push_back("tv");
  if (s.t_l1) n.push_back("l1_detail");
  if (s.t_prior_alpha) n.push_back("prior_alpha");
  if (s.t_prior_beta) n.push_back("prior_beta");
  if (s.t_prior_gamma) n.push_back("prior_gamma");
  return n;
}

struct SVGrads {
  RenderGrads g;
  SVGrads(const MorphableModel& m, const DeformationMap* d,
          const DisplacementMap* p)
      : g(m, d, p) {}
};

// A RenderState with just the fields the screen-point adjoints read; spares
// a full rasterization when no photometric term needs one.
RenderState geometry_state(const MorphableModel& model, const FaceParams& params,
                           const DeformationMap* dfm) {
  RenderState st;
  Mesh m0 = decode_shape(model, params.alpha, params.beta);
  st.m1 = dfm ? apply_deformation(m0, *dfm) : std::move(m0);
  st.rot = rotation_matrix(params.rotation);
  const int nv = st.m1.num_vertices();
  st.cam.resize(nv, 3);
  for (int i = 0; i < nv; ++i)
    st.cam.row(i) =
        (st.rot * Vec3(st.m1.vertices.row(i)) + params.translation).transpose();
  st.proj = project_camera(params.camera, st.cam);
  st.normal_accum = Vertices::Zero(nv, 3);
  return st;
}

double eval_sv(const MorphableModel& model, const ViewInput& view,
               const SVState& s, const SVSelect& sel, const FitConfig& cfg,
               SVGrads* gr, std::vector<double>* terms) {
  const LossWeights& w = cfg.weights;
  const DeformationMap* dfm = s.dfm.data.empty() ? nullptr : &s.dfm;
  const DisplacementMap* dpm = s.dpm.data.empty() ? nullptr : &s.dpm;
  double total = 0.0;
  auto push = [&](double v) {
    if (terms) terms->push_back(v);
    total += v;
  };

  std::optional<RenderState> st0, st_mid, st_det, st_light;
  const RenderState* st_geom = nullptr;

  if (sel.t_photo0) {
    st0 = render(model, s.params, dfm, nullptr, {});
    PhotoLoss pl = photometric_loss(st0->image, view.image, view.face_mask);
    const double wv = w.w_photo;
    push(wv * pl.value);
    if (gr && wv > 0.0) {
      scale_grid(&pl.rendered_bar, wv);
      render_backward(model, s.params, dfm, nullptr, {}, *st0, pl.rendered_bar,
                      &gr->g);
    }
    st_geom = &*st0;
  }

  if (sel.t_photo_mid) {
    st_mid = render(model, s.params, dfm, nullptr, {});
    PhotoLoss pl = photometric_loss(st_mid->image, view.image, view.face_mask);
    const double wv = w.w_photo * w.w_mid;
    push(wv * pl.value);
    if (gr && wv > 0.0) {
      scale_grid(&pl.rendered_bar, wv);
      render_backward(model, s.params, dfm, nullptr, {}, *st_mid,
                      pl.rendered_bar, &gr->g);
    }
    st_geom = &*st_mid;
  }

  if (sel.t_photo_det) {
    if (!dpm) throw config_error("fit: detail term needs a displacement map");
    RenderOptions ro;
    ro.detail_normals = true;
    ro.albedo_uv = &s.albedo_prime->rgb;
    st_det = render(model, s.params, dfm, dpm, ro);
    PhotoLoss pl = photometric_loss(st_det->image, view.image, view.face_mask);
    const double wv = w.w_photo * w.w_high;
    push(wv * pl.value);
    if (gr && wv > 0.0) {
      scale_grid(&pl.rendered_bar, wv);
      render_backward(model, s.params, dfm, dpm, ro, *st_det, pl.rendered_bar,
                      &gr->g);
    }
  }

  if ((sel.t_lan || sel.t_con) && !st_geom) {
    st_light = geometry_state(model, s.params, dfm);
    st_geom = &*st_light;
  }

  if (sel.t_lan) {
    LandmarkLoss ll = landmark_loss(s.params, st_geom->m1, view.landmarks68,
                                    VecX::Ones(68));
    push(w.w_lan * ll.value);
    if (gr && w.w_lan > 0.0 && ll.num_included > 0) {
      for (Vec2& b : ll.screen_bar) b *= w.w_lan;
      screen_points_backward(model, s.params, dfm, *st_geom,
                             st_geom->m1.topology->landmarks68, ll.screen_bar,
                             &gr->g);
    }
  }

  if (sel.t_con) {
    const auto& lower = st_geom->m1.topology->lower_face_vertices;
    ContourLoss cl = contour_loss(st_geom->m1, s.params, view.face_mask.edges,
                                  lower, w.lambda_margin, w.delta_row);
    push(w.w_con * cl.value);
    if (gr && w.w_con > 0.0 && cl.num_included > 0) {
      for (Vec2& b : cl.screen_bar) b *= w.w_con;
      screen_points_backward(model, s.params, dfm, *st_geom, lower,
                             cl.screen_bar, &gr->g);
    }
  }

  if (sel.t_tv) {
    GridLoss gl = tv_loss(s.dfm);
    push(w.w_tv * gl.value);
    if (gr && w.w_tv > 0.0) add_scaled(&gr->g.dfm, gl.grad, w.w_tv);
  }

  if (sel.t_l1) {
    GridLoss gl = l1_reg(s.dpm);
    push(w.w_reg * gl.value);
    if (gr && w.w_reg > 0.0) add_scaled(&gr->g.dpm, gl.grad, w.w_reg);
  }

  if (sel.t_prior_alpha) {
    const double k = static_cast<double>(s.params.alpha.size());
    push(cfg.prior_alpha * s.params.alpha.squaredNorm() / k);
    if (gr) gr->g.alpha += (2.0 * cfg.prior_alpha / k) * s.params.alpha;
  }
  if (sel.t_prior_beta) {
    const double k = static_cast<double>(s.params.beta.size());
    push(cfg.prior_beta * s.params.beta.squaredNorm() / k);
    if (gr) gr->g.beta += (2.0 * cfg.prior_beta / k) * s.params.beta;
  }
  if (sel.t_prior_gamma) {
    const double k = static_cast<double>(s.params.gamma.size());
    push(cfg.prior_gamma * s.params.gamma.squaredNorm() / k);
    if (gr) gr->g.gamma += (2.0 * cfg.prior_gamma / k) * s.params.gamma;
  }

  return total;
}

// ---------------------------------------------------------------------------
// Packed single-view stage builders
// ---------------------------------------------------------------------------

struct Offsets {
  int alpha = -1, beta = -1, gamma = -1, rot = -1, trans = -1;
  int light = -1, dfm = -1, dpm = -1;
};

struct StageCtx {
  PackedObjective po;
  std::function<void(const VecX&, SVState*)> unpack;
};

StageCtx build_sv(const MorphableModel* model, const ViewInput* view,
                  const SVState& base, const SVSelect& sel,
                  const FitConfig& cfg, const std::string& stage) {
  if (sel.t_photo_det && !base.albedo_prime)
    throw config_error("fit: stage '" + stage + "' needs a de-retouched albedo");
  if ((sel.v_dfm || sel.t_tv) && base.dfm.data.empty())
    throw config_error("fit: stage '" + stage + "' needs a deformation map");
  if ((sel.v_dpm || sel.t_l1) && base.dpm.data.empty())
    throw config_error("fit: stage '" + stage + "' needs a displacement map");
  if ((sel.t_photo0 || sel.t_photo_mid || sel.t_photo_det) &&
      view->face_mask.count() == 0)
    warn("fit: stage '" + stage +
         "': empty face mask, photometric terms vanish");

  Packer pk;
  Offsets o;
  if (sel.v_alpha)
    o.alpha = pk.add("alpha", static_cast<int>(base.params.alpha.size()), 1.0);
  if (sel.v_beta)
    o.beta = pk.add("beta", static_cast<int>(base.params.beta.size()), 1.0);
  if (sel.v_gamma)
    o.gamma = pk.add("gamma", static_cast<int>(base.params.gamma.size()), 1.0);
  if (sel.v_pose) {
    o.rot = pk.add("rotation", 3, 1.0);
    o.trans = pk.add("translation", 3, cfg.lr_translation_scale);
  }
  if (sel.v_light) o.light = pk.add("lighting", 27, 1.0);
  if (sel.v_dfm) o.dfm = pk.add("dfm", base.dfm.data.size(), cfg.lr_map_scale);
  if (sel.v_dpm) o.dpm = pk.add("dpm", base.dpm.data.size(), 1.0);

  VecX x0(pk.total);
  if (o.alpha >= 0) x0.segment(o.alpha, base.params.alpha.size()) = base.params.alpha;
  if (o.beta >= 0) x0.segment(o.beta, base.params.beta.size()) = base.params.beta;
  if (o.gamma >= 0) x0.segment(o.gamma, base.params.gamma.size()) = base.params.gamma;
  if (o.rot >= 0) x0.segment<3>(o.rot) = base.params.rotation;
  if (o.trans >= 0) x0.segment<3>(o.trans) = base.params.translation;
  if (o.light >= 0) x0.segment(o.light, 27) = base.params.lighting;
  if (o.dfm >= 0) put_grid(x0, o.dfm, base.dfm.data);
  if (o.dpm >= 0) put_grid(x0, o.dpm, base.dpm.data);

  auto unpack = [sel, o](const VecX& x, SVState* s) {
    if (o.alpha >= 0) s->params.alpha = x.segment(o.alpha, s->params.alpha.size());
    if (o.beta >= 0) s->params.beta = x.segment(o.beta, s->params.beta.size());
    if (o.gamma >= 0) s->params.gamma = x.segment(o.gamma, s->params.gamma.size());
    if (o.rot >= 0) s->params.rotation = x.segment<3>(o.rot);
    if (o.trans >= 0) s->params.translation = x.segment<3>(o.trans);
    if (o.light >= 0) s->params.lighting = x.segment(o.light, 27);
    if (o.dfm >= 0) take_grid(x, o.dfm, &s->dfm.data);
    if (o.dpm >= 0) take_grid(x, o.dpm, &s->dpm.data);
    (void)sel;
  };

  auto base_sp = std::make_shared<const SVState>(base);
  const int n = pk.total;

  StageCtx ctx;
  ctx.po.x0 = std::move(x0);
  ctx.po.layout = pk.layout;
  ctx.po.lr_scale = pk.lr_scale();
  ctx.po.term_names = term_names_for(sel);
  ctx.po.fn = [model, view, base_sp, sel, cfg, unpack, o,
               n](const VecX& x, VecX* grad, std::vector<double>* terms) {
    if (x.size() != n)
      throw std::invalid_argument("objective: wrong parameter vector size");
    SVState s = *base_sp;
    unpack(x, &s);
    if (!grad) return eval_sv(*model, *view, s, sel, cfg, nullptr, terms);

    const DeformationMap* dfm = s.dfm.data.empty() ? nullptr : &s.dfm;
    const DisplacementMap* dpm = s.dpm.data.empty() ? nullptr : &s.dpm;
    SVGrads gr(*model, dfm, dpm);
    const double total = eval_sv(*model, *view, s, sel, cfg, &gr, terms);
    grad->setZero(n);
    if (o.alpha >= 0) grad->segment(o.alpha, gr.g.alpha.size()) = gr.g.alpha;
    if (o.beta >= 0) grad->segment(o.beta, gr.g.beta.size()) = gr.g.beta;
    if (o.gamma >= 0) grad->segment(o.gamma, gr.g.gamma.size()) = gr.g.gamma;
    if (o.rot >= 0) grad->segment<3>(o.rot) = gr.g.rotation;
    if (o.trans >= 0) grad->segment<3>(o.trans) = gr.g.translation;
    if (o.light >= 0) grad->segment(o.light, 27) = gr.g.lighting;
    if (o.dfm >= 0) put_grid(*grad, o.dfm, gr.g.dfm);
    if (o.dpm >= 0) put_grid(*grad, o.dpm, gr.g.dpm);
    return total;
  };
  ctx.unpack = unpack;
  return ctx;
}

SVSelect coarse_select() {
  SVSelect s;
  s.v_alpha = s.v_beta = s.v_gamma = s.v_pose = s.v_light = true;
  s.t_photo0 = s.t_lan = true;
  s.t_prior_alpha = s.t_prior_beta = s.t_prior_gamma = true;
  return s;
}

SVSelect mid_select() {
  SVSelect s;
  s.v_dfm = s.v_pose = s.v_light = true;
  s.t_photo_mid = s.t_lan = s.t_con = s.t_tv = true;
  return s;
}

SVSelect detail_select() {
  SVSelect s;
  s.v_dpm = s.v_light = true;
  s.t_photo_det = s.t_l1 = true;
  return s;
}

SVSelect full_select() {
  SVSelect s;
  s.v_alpha = s.v_beta = s.v_gamma = s.v_pose = s.v_light = true;
  s.v_dfm = s.v_dpm = true;
  s.t_photo_det = s.t_lan = s.t_con = s.t_tv = s.t_l1 = true;
  s.t_prior_alpha = s.t_prior_beta = s.t_prior_gamma = true;
  return s;
}

OptimizeConfig stage_config(const FitConfig& cfg, const std::string& stage,
                            int iters, double lr, const PackedObjective& po) {
  OptimizeConfig oc;
  oc.iterations = iters;
  oc.learning_rate = lr;
  oc.method = cfg.optimizer;
  oc.divergence_factor = cfg.divergence_factor;
  oc.stage = stage;
  oc.term_names = po.term_names;
  oc.layout = po.layout;
  oc.lr_scale = po.lr_scale;
  return oc;
}

}  // namespace

// ---------------------------------------------------------------------------
// Texture pipeline helpers
// ---------------------------------------------------------------------------

TextureUV bake_albedo_uv(const MorphableModel& model, const VecX& gamma,
                         int res) {
  const VertexAlbedo alb = decode_albedo(model, gamma);
  const Topology& topo = *model.topology;
  const UVRaster r = rasterize_uv(topo, res);
  TextureUV out;
  out.rgb = Grid(res, res, 3);
  out.visible = Grid(res, res, 1);
  int covered = 0;
  for (int j = 0; j < res; ++j)
    for (int i = 0; i < res; ++i) {
      if (!r.covered(i, j)) continue;
      const int t = r.tri[j * res + i];
      const double* b = &r.bary[(static_cast<size_t>(j) * res + i) * 3];
      Vec3 c = Vec3::Zero();
      for (int k = 0; k < 3; ++k)
        c += b[k] * Vec3(alb.rgb.row(topo.triangles(t, k)));
      for (int ch = 0; ch < 3; ++ch) out.rgb.at(i, j, ch) = c[ch];
      out.visible.at(i, j, 0) = 1.0;
      ++covered;
    }
  out.degenerate = covered == 0;
  return out;
}

namespace {

Mesh deformed_mesh(const MorphableModel& model, const FaceParams& p,
                   const DeformationMap& dfm) {
  Mesh m0 = decode_shape(model, p.alpha, p.beta);
  return vertex_normals(apply_deformation(m0, dfm));
}

// Unwraps the view image at the current geometry and runs the de-retouching
// chain; both textures are clamped to [0,1] (images may exceed 1 under
// bright lighting, the albedo model does not).
DeretouchOutput detail_albedo(const MorphableModel& model,
                              const ViewInput& view, const FaceParams& p,
                              const DeformationMap& dfm, const FitConfig& cfg,
                              const Grid* retouched, TextureUV* tex_out) {
  const Mesh m1 = deformed_mesh(model, p, dfm);
  TextureUV tp = clamp_unit(unwrap_texture(view.image, m1, p, cfg.texture_res));
  if (tp.degenerate) warn("fit: unwrapped texture is degenerate");
  TextureUV t0;
  if (retouched) {
    if (retouched->width != cfg.texture_res ||
        retouched->height != cfg.texture_res || retouched->channels != 3)
      throw config_error("fit: retouched texture resolution mismatch");
    t0.rgb = *retouched;
    for (double& v : t0.rgb.data) v = std::clamp(v, 0.0, 1.0);
    t0.visible = tp.visible;
    t0.degenerate = tp.degenerate;
  } else {
    t0 = retouch_oracle(tp, cfg.retouch_radius);
  }
  DeretouchInput di;
  di.albedo0_uv = bake_albedo_uv(model, p.gamma, cfg.texture_res);
  di.tex_aligned = tp;
  di.tex_retouched = t0;
  di.epsilon = cfg.weights.epsilon;
  if (tex_out) *tex_out = std::move(tp);
  return deretouch_albedo(di);
}

}  // namespace

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

void ViewInput::validate() const {
  if (image.channels != 3 || image.width <= 0 || image.height <= 0)
    throw validation_error("view: image must be W x H x 3");
  if (!image.all_finite()) throw validation_error("view: image not finite");
  if (image.width != camera.width || image.height != camera.height)
    throw validation_error("view: image does not match the camera frame");
  if (face_mask.width != image.width || face_mask.height != image.height)
    throw validation_error("view: face mask does not match the image");
  if (landmarks68.size() != 68)
    throw validation_error("view: expected 68 landmarks, got " +
                           std::to_string(landmarks68.size()));
  for (const Vec2& l : landmarks68)
    if (!l.allFinite()) throw validation_error("view: landmark not finite");
  if (camera.focal <= 0 || camera.near_plane <= 0)
    throw validation_error("view: bad camera intrinsics");
}

void FitConfig::validate() const {
  if (coarse_iters < 0 || mid_iters < 0 || high_iters < 0 || joint_iters < 0 ||
      scan_icp_iters < 0 || scan_coeff_iters < 0 || scan_mid_iters < 0 ||
      scan_high_iters < 0)
    throw config_error("fit config: iteration budgets must be >= 0");
  if (lr_coarse <= 0 || lr_detail <= 0 || lr_translation_scale <= 0 ||
      lr_map_scale <= 0)
    throw config_error("fit config: step sizes must be > 0");
  if (optimizer != "adam" && optimizer != "gd")
    throw config_error("fit config: unknown optimizer '" + optimizer + "'");
  weights.validate();
  if (prior_alpha < 0 || prior_beta < 0 || prior_gamma < 0)
    throw config_error("fit config: priors must be >= 0");
  if (divergence_factor < 0)
    throw config_error("fit config: divergence factor must be >= 0");
  if (texture_res < 2) throw config_error("fit config: texture_res too small");
  if (!is_pow2(dfm_res) || !is_pow2(dpm_res))
    throw config_error("fit config: map resolutions must be powers of two");
  if (retouch_radius < 1)
    throw config_error("fit config: retouch radius must be >= 1");
  if (scan_cutoff_mm <= 0)
    throw config_error("fit config: scan cutoff must be > 0");
}

void MVState::validate() const {
  if (alpha.size() == 0) throw validation_error("mv state: empty alpha");
  dfm.validate();
  const size_t n = params.size();
  if (dpm.size() != n || albedo_prime.size() != n)
    throw validation_error("mv state: per-view vectors disagree in length");
}

void MVFitResult::validate() const {
  const size_t n = view_params.size();
  if (view_dpm.size() != n || view_albedo_prime.size() != n ||
      view_m2.size() != n)
    throw validation_error("mv result: per-view vectors disagree in length");
  if (alpha.size() == 0) throw validation_error("mv result: empty alpha");
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

OptimizeResult optimize(const Objective& objective, const VecX& x0,
                        const OptimizeConfig& cfg) {
  if (cfg.iterations < 0)
    throw config_error("optimize: negative iteration count");
  if (cfg.learning_rate <= 0) throw config_error("optimize: step size <= 0");
  if (cfg.method != "adam" && cfg.method != "gd")
    throw config_error("optimize: unknown method '" + cfg.method + "'");
  const int n = static_cast<int>(x0.size());
  if (cfg.lr_scale.size() != 0 && cfg.lr_scale.size() != n)
    throw config_error("optimize: lr_scale size mismatch");

  OptimizeResult res;
  res.x = x0;
  res.trace.stage = cfg.stage;
  res.trace.term_names = cfg.term_names;
  res.trace.rows.reserve(cfg.iterations + 1);

  VecX g = VecX::Zero(n);
  VecX m = VecX::Zero(n), v = VecX::Zero(n);
  std::vector<double> terms;

  auto check_finite = [&](int iter, double loss, bool with_grad) {
    if (!std::isfinite(loss)) {
      std::string bad = "total";
      for (size_t t = 0; t < terms.size(); ++t)
        if (!std::isfinite(terms[t])) {
          bad = t < cfg.term_names.size() ? cfg.term_names[t]
                                          : "term " + std::to_string(t);
          break;
        }
      throw optimization_error("stage '" + cfg.stage + "' iteration " +
                               std::to_string(iter) + ": term '" + bad +
                               "' is not finite");
    }
    for (size_t t = 0; t < terms.size(); ++t)
      if (!std::isfinite(terms[t]))
        throw optimization_error(
            "stage '" + cfg.stage + "' iteration " + std::to_string(iter) +
            ": term '" +
            (t < cfg.term_names.size() ? cfg.term_names[t]
                                       : "term " + std::to_string(t)) +
            "' is not finite");
    if (with_grad)
      for (int i = 0; i < n; ++i)
        if (!std::isfinite(g[i]))
          throw optimization_error(
              "stage '" + cfg.stage + "' iteration " + std::to_string(iter) +
              ": gradient of block '" + block_of(cfg.layout, i) +
              "' (coordinate " + std::to_string(i) + ") is not finite");
  };

  auto record = [&](int iter, double loss) {
    TraceRow row;
    row.iter = iter;
    row.total = loss;
    row.terms = terms;
    res.trace.rows.push_back(std::move(row));
  };

  for (int it = 0; it < cfg.iterations; ++it) {
    terms.clear();
    const double loss = objective(res.x, &g, &terms);
    check_finite(it, loss, true);
    record(it, loss);

    VecX step;
    if (cfg.method == "adam") {
      const double t = it + 1;
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
      const VecX mhat = m / (1.0 - std::pow(cfg.beta1, t));
      const VecX vhat = v / (1.0 - std::pow(cfg.beta2, t));
      step = mhat.array() / (vhat.array().sqrt() + cfg.adam_eps);
    } else {
      step = g;
    }
    if (cfg.lr_scale.size() == n) step = step.cwiseProduct(cfg.lr_scale);
    res.x -= cfg.learning_rate * step;
  }

  terms.clear();
  const double final_loss = objective(res.x, nullptr, &terms);
  check_finite(cfg.iterations, final_loss, false);
  record(cfg.iterations, final_loss);

  if (cfg.divergence_factor > 0 && res.trace.rows.size() > 1) {
    const double first = res.trace.rows.front().total;
    const double last = res.trace.rows.back().total;
    if (first > 0 && last > cfg.divergence_factor * first) {
      std::ostringstream os;
      os << "stage '" << cfg.stage << "' diverged: final loss " << last
         << " > " << cfg.divergence_factor << " x initial " << first
         << "; trace tail:";
      const size_t from = res.trace.rows.size() > 4 ? res.trace.rows.size() - 4
                                                    : size_t{0};
      for (size_t r = from; r < res.trace.rows.size(); ++r)
        os << " [" << res.trace.rows[r].iter << "] "
           << res.trace.rows[r].total;
      throw optimization_error(os.str());
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

GradCheckReport grad_check(const Objective& objective, const VecX& x,
                           double step, double tolerance, int sample,
                           uint64_t seed, const BlockLayout& layout) {
  if (step <= 0) throw config_error("grad_check: step must be > 0");
  const int n = static_cast<int>(x.size());
  VecX g = VecX::Zero(n);
  objective(x, &g, nullptr);

  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  if (sample > 0 && sample < n) {
    std::vector<int> chosen;
    chosen.reserve(sample);
    std::mt19937_64 rng(seed);
    std::sample(idx.begin(), idx.end(), std::back_inserter(chosen), sample,
                rng);
    idx = std::move(chosen);
  }

  GradCheckReport rep;
  rep.num_checked = static_cast<int>(idx.size());
  std::vector<GradCheckCoord> all;
  all.reserve(idx.size());
  VecX xp = x;
  for (int i : idx) {
    const double x_i = x[i];
    xp[i] = x_i + step;
    const double lp = objective(xp, nullptr, nullptr);
    xp[i] = x_i - step;
    const double lm = objective(xp, nullptr, nullptr);
    xp[i] = x_i;
    GradCheckCoord c;
    c.index = i;
    c.block = block_of(layout, i);
    c.analytic = g[i];
    c.numeric = (lp - lm) / (2.0 * step);
    c.rel_err = std::abs(c.analytic - c.numeric) /
                std::max({std::abs(c.analytic), std::abs(c.numeric), 1e-6});
    rep.max_rel_err = std::max(rep.max_rel_err, c.rel_err);
    all.push_back(c);
  }
  std::sort(all.begin(), all.end(),
            [](const GradCheckCoord& a, const GradCheckCoord& b) {
              if (a.rel_err != b.rel_err) return a.rel_err > b.rel_err;
              return a.index < b.index;
            });
  if (all.size() > 10) all.resize(10);
  rep.worst = std::move(all);
  rep.flagged = rep.max_rel_err > tolerance;
  return rep;
}

// ---------------------------------------------------------------------------
// Public stage objectives
// ---------------------------------------------------------------------------

PackedObjective coarse_objective(const MorphableModel& model,
                                 const ViewInput& view, const FaceParams& start,
                                 const FitConfig& cfg) {
  SVState s;
  s.params = start;
  return build_sv(&model, &view, s, coarse_select(), cfg, "coarse").po;
}

PackedObjective mid_objective(const MorphableModel& model,
                              const ViewInput& view, const FaceParams& start,
                              const DeformationMap& dfm, const FitConfig& cfg) {
  SVState s;
  s.params = start;
  s.dfm = dfm;
  return build_sv(&model, &view, s, mid_select(), cfg, "mid").po;
}

PackedObjective detail_objective(const MorphableModel& model,
                                 const ViewInput& view,
                                 const FaceParams& start,
                                 const TextureUV& albedo_prime,
                                 const DeformationMap& dfm,
                                 const DisplacementMap& dpm,
                                 const FitConfig& cfg) {
  SVState s;
  s.params = start;
  s.dfm = dfm;
  s.dpm = dpm;
  s.albedo_prime = std::make_shared<const TextureUV>(albedo_prime);
  return build_sv(&model, &view, s, detail_select(), cfg, "detail").po;
}

PackedObjective full_objective(const MorphableModel& model,
                               const ViewInput& view, const FaceParams& start,
                               const TextureUV& albedo_prime,
                               const DeformationMap& dfm,
                               const DisplacementMap& dpm,
                               const FitConfig& cfg) {
  SVState s;
  s.params = start;
  s.dfm = dfm;
  s.dpm = dpm;
  s.albedo_prime = std::make_shared<const TextureUV>(albedo_prime);
  return build_sv(&model, &view, s, full_select(), cfg, "full").po;
}

// ---------------------------------------------------------------------------
// Multi-view joint objective
// ---------------------------------------------------------------------------

namespace {

struct MVOffsets {
  int alpha = 0, dfm = 0;
  struct View {
    int beta = 0, rot = 0, trans = 0, light = 0, gamma = 0, dpm = 0;
  };
  std::vector<View> view;
};

struct MVCtx {
  PackedObjective po;
  std::function<void(const VecX&, MVState*)> unpack;
};

SVSelect mv_view_select() {
  SVSelect s;
  s.t_photo_det = s.t_lan = s.t_con = s.t_l1 = true;
  s.t_prior_beta = s.t_prior_gamma = true;
  return s;
}

MVCtx build_mv(const MorphableModel* model, const std::vector<ViewInput>* views,
               std::vector<int> subset, const MVState& base,
               const FitConfig& cfg) {
  base.validate();
  const int nviews = static_cast<int>(base.params.size());
  if (views->size() != base.params.size())
    throw config_error("mv objective: view count does not match the state");
  for (int v : subset)
    if (v < 0 || v >= nviews)
      throw config_error("mv objective: view index out of range");

  Packer pk;
  MVOffsets o;
  o.alpha = pk.add("alpha", static_cast<int>(base.alpha.size()), 1.0);
  o.dfm = pk.add("dfm", base.dfm.data.size(), cfg.lr_map_scale);
  o.view.resize(nviews);
  for (int v = 0; v < nviews; ++v) {
    const std::string sfx = "[" + std::to_string(v) + "]";
    o.view[v].beta = pk.add("beta" + sfx,
                            static_cast<int>(base.params[v].beta.size()), 1.0);
    o.view[v].rot = pk.add("rotation" + sfx, 3, 1.0);
    o.view[v].trans =
        pk.add("translation" + sfx, 3, cfg.lr_translation_scale);
    o.view[v].light = pk.add("lighting" + sfx, 27, 1.0);
    o.view[v].gamma = pk.add(
        "gamma" + sfx, static_cast<int>(base.params[v].gamma.size()), 1.0);
    o.view[v].dpm = pk.add("dpm" + sfx, base.dpm[v].data.size(), 1.0);
  }

  VecX x0(pk.total);
  x0.segment(o.alpha, base.alpha.size()) = base.alpha;
  put_grid(x0, o.dfm, base.dfm.data);
  for (int v = 0; v < nviews; ++v) {
    x0.segment(o.view[v].beta, base.params[v].beta.size()) =
        base.params[v].beta;
    x0.segment<3>(o.view[v].rot) = base.params[v].rotation;
    x0.segment<3>(o.view[v].trans) = base.params[v].translation;
    x0.segment(o.view[v].light, 27) = base.params[v].lighting;
    x0.segment(o.view[v].gamma, base.params[v].gamma.size()) =
        base.params[v].gamma;
    put_grid(x0, o.view[v].dpm, base.dpm[v].data);
  }

  auto unpack = [o, nviews](const VecX& x, MVState* s) {
    s->alpha = x.segment(o.alpha, s->alpha.size());
    take_grid(x, o.dfm, &s->dfm.data);
    for (int v = 0; v < nviews; ++v) {
      s->params[v].beta = x.segment(o.view[v].beta, s->params[v].beta.size());
      s->params[v].rotation = x.segment<3>(o.view[v].rot);
      s->params[v].translation = x.segment<3>(o.view[v].trans);
      s->params[v].lighting = x.segment(o.view[v].light, 27);
      s->params[v].gamma =
          x.segment(o.view[v].gamma, s->params[v].gamma.size());
      take_grid(x, o.view[v].dpm, &s->dpm[v].data);
    }
  };

  // Frozen per-view de-retouched albedos, shared across evaluations.
  std::vector<std::shared_ptr<const TextureUV>> alb_sp;
  for (int v = 0; v < nviews; ++v)
    alb_sp.push_back(std::make_shared<const TextureUV>(base.albedo_prime[v]));

  std::vector<std::string> names = {"tv", "prior_alpha"};
  const std::vector<std::string> view_names = term_names_for(mv_view_select());
  for (int v : subset)
    for (const std::string& t : view_names)
      names.push_back(t + "[" + std::to_string(v) + "]");

  auto base_sp = std::make_shared<const MVState>(base);
  const int n = pk.total;

  MVCtx ctx;
  ctx.po.x0 = std::move(x0);
  ctx.po.layout = pk.layout;
  ctx.po.lr_scale = pk.lr_scale();
  ctx.po.term_names = std::move(names);
  ctx.po.fn = [model, views, subset, base_sp, cfg, unpack, o, n,
               alb_sp](const VecX& x, VecX* grad,
                       std::vector<double>* terms) -> double {
    if (x.size() != n)
      throw std::invalid_argument("mv objective: wrong parameter vector size");
    MVState s = *base_sp;
    unpack(x, &s);
    double total = 0.0;
    if (grad) grad->setZero(n);
    auto push = [&](double v) {
      if (terms) terms->push_back(v);
      total += v;
    };

    // Shared terms: deformation smoothness and the identity prior, counted
    // once regardless of the view subset.
    {
      GridLoss gl = tv_loss(s.dfm);
      push(cfg.weights.w_tv * gl.value);
      if (grad && cfg.weights.w_tv > 0)
        for (int i = 0; i < gl.grad.size(); ++i)
          (*grad)[o.dfm + i] += cfg.weights.w_tv * gl.grad.data[i];
      const double k = static_cast<double>(s.alpha.size());
      push(cfg.prior_alpha * s.alpha.squaredNorm() / k);
      if (grad)
        grad->segment(o.alpha, s.alpha.size()) +=
            (2.0 * cfg.prior_alpha / k) * s.alpha;
    }

    const SVSelect sel = mv_view_select();
    for (int v : subset) {
      SVState sv;
      sv.params = s.params[v];
      sv.params.alpha = s.alpha;
      sv.dfm = s.dfm;
      sv.dpm = s.dpm[v];
      sv.albedo_prime = alb_sp[v];

      if (!grad) {
        total += eval_sv(*model, (*views)[v], sv, sel, cfg, nullptr, terms);
        continue;
      }
      SVGrads gr(*model, &sv.dfm, &sv.dpm);
      total += eval_sv(*model, (*views)[v], sv, sel, cfg, &gr, terms);
      // Shared blocks receive the sum over views; per-view blocks their own.
      grad->segment(o.alpha, gr.g.alpha.size()) += gr.g.alpha;
      for (int i = 0; i < gr.g.dfm.size(); ++i)
        (*grad)[o.dfm + i] += gr.g.dfm.data[i];
      grad->segment(o.view[v].beta, gr.g.beta.size()) += gr.g.beta;
      grad->template segment<3>(o.view[v].rot) += gr.g.rotation;
      grad->template segment<3>(o.view[v].trans) += gr.g.translation;
      grad->segment(o.view[v].light, 27) += gr.g.lighting;
      grad->segment(o.view[v].gamma, gr.g.gamma.size()) += gr.g.gamma;
      for (int i = 0; i < gr.g.dpm.size(); ++i)
        (*grad)[o.view[v].dpm + i] += gr.g.dpm.data[i];
    }
    return total;
  };
  ctx.unpack = unpack;
  return ctx;
}

}  // namespace

PackedObjective mv_objective(const MorphableModel& model,
                             const std::vector<ViewInput>& views,
                             const std::vector<int>& view_subset,
                             const MVState& start, const FitConfig& cfg) {
  return build_mv(&model, &views, view_subset, start, cfg).po;
}

// ---------------------------------------------------------------------------
// Coarse initialization and fitting
// ---------------------------------------------------------------------------

FaceParams init_coarse(const MorphableModel& model, const ViewInput& view) {
  view.validate();
  FaceParams p;
  p.alpha = VecX::Zero(model.k_id());
  p.beta = VecX::Zero(model.k_exp());
  p.gamma = VecX::Zero(model.k_alb());
  p.camera = view.camera;
  p.lighting = ambient_lighting();

  const Mesh mean = decode_shape(model, p.alpha, p.beta);
  const std::vector<int>& ids = model.topology->landmarks68;
  const int n = static_cast<int>(ids.size());

  Vec3 c3 = Vec3::Zero();
  Vec2 ct = Vec2::Zero();
  for (int i = 0; i < n; ++i) {
    c3 += Vec3(mean.vertices.row(ids[i]));
    ct += view.landmarks68[i];
  }
  c3 /= n;
  ct /= n;

  double num = 0, den = 0, sm2 = 0, st2 = 0;
  for (int i = 0; i < n; ++i) {
    const Vec3 q = Vec3(mean.vertices.row(ids[i])) - c3;
    const Vec2 m(q.x(), q.y());
    const Vec2 t = view.landmarks68[i] - ct;
    num += m.x() * t.y() - m.y() * t.x();
    den += m.x() * t.x() + m.y() * t.y();
    sm2 += m.squaredNorm();
    st2 += t.squaredNorm();
  }
  const double sm = std::sqrt(sm2 / n);
  const double st = std::sqrt(st2 / n);
  if (sm <= 0 || st <= 0)
    throw validation_error("init: degenerate landmark spread");
  const double theta = (num == 0 && den == 0) ? 0.0 : std::atan2(num, den);
  const double tz = view.camera.focal * sm / st;

  p.rotation = Vec3(0, 0, theta);
  const Mat3 r = rotation_matrix(p.rotation);
  const Vec3 rc = r * c3;
  p.translation =
      Vec3((ct.x() - view.camera.cx) * tz / view.camera.focal - rc.x(),
           (ct.y() - view.camera.cy) * tz / view.camera.focal - rc.y(),
           tz - rc.z());
  return p;
}

namespace {

FaceParams run_coarse(const ViewInput& view, const MorphableModel& model,
                      const FitConfig& cfg, LossTrace* trace_out) {
  FaceParams p = init_coarse(model, view);
  if (cfg.coarse_iters == 0) {
    if (trace_out) {
      trace_out->stage = "coarse";
      trace_out->rows.clear();
    }
    return p;
  }
  SVState s;
  s.params = p;
  StageCtx ctx = build_sv(&model, &view, s, coarse_select(), cfg, "coarse");
  OptimizeResult r =
      optimize(ctx.po.fn, ctx.po.x0,
               stage_config(cfg, "coarse", cfg.coarse_iters, cfg.lr_coarse,
                            ctx.po));
  ctx.unpack(r.x, &s);
  if (trace_out) *trace_out = std::move(r.trace);
  return s.params;
}

}  // namespace

FaceParams fit_coarse(const ViewInput& view, const MorphableModel& model,
                      const FitConfig& cfg) {
  cfg.validate();
  view.validate();
  return run_coarse(view, model, cfg, nullptr);
}

FitResult fit_single(const ViewInput& view, const MorphableModel& model,
                     const FitConfig& cfg, const Grid* retouched) {
  cfg.validate();
  view.validate();

  FitResult out;
  LossTrace tr;
  FaceParams p = run_coarse(view, model, cfg, &tr);
  if (!tr.rows.empty()) out.traces.push_back(tr);

  DeformationMap dfm;
  dfm.data = Grid(cfg.dfm_res, cfg.dfm_res, 3);
  DisplacementMap dpm;
  dpm.data = Grid(cfg.dpm_res, cfg.dpm_res, 1);

  if (cfg.simultaneous) {
    // One combined stage: the detail albedo from the coarse geometry, then
    // every variable against every term at once.
    DeretouchOutput de =
        detail_albedo(model, view, p, dfm, cfg, retouched, nullptr);
    out.albedo_prime = de.albedo_prime_uv;
    const int iters = cfg.mid_iters + cfg.high_iters;
    if (iters > 0) {
      SVState s;
      s.params = p;
      s.dfm = dfm;
      s.dpm = dpm;
      s.albedo_prime =
          std::make_shared<const TextureUV>(out.albedo_prime);
      StageCtx ctx = build_sv(&model, &view, s, full_select(), cfg, "full");
      OptimizeResult r = optimize(
          ctx.po.fn, ctx.po.x0,
          stage_config(cfg, "full", iters, cfg.lr_detail, ctx.po));
      ctx.unpack(r.x, &s);
      p = s.params;
      dfm = s.dfm;
      dpm = s.dpm;
      out.traces.push_back(std::move(r.trace));
    }
  } else {
    if (cfg.mid_iters > 0) {
      SVState s;
      s.params = p;
      s.dfm = dfm;
      StageCtx ctx = build_sv(&model, &view, s, mid_select(), cfg, "mid");
      OptimizeResult r = optimize(
          ctx.po.fn, ctx.po.x0,
          stage_config(cfg, "mid", cfg.mid_iters, cfg.lr_detail, ctx.po));
      ctx.unpack(r.x, &s);
      p = s.params;
      dfm = s.dfm;
      out.traces.push_back(std::move(r.trace));
    }

    // Re-unwrap at the refined geometry and build the detail albedo.
    DeretouchOutput de =
        detail_albedo(model, view, p, dfm, cfg, retouched, nullptr);
    out.albedo_prime = de.albedo_prime_uv;

    if (cfg.high_iters > 0) {
      SVState s;
      s.params = p;
      s.dfm = dfm;
      s.dpm = dpm;
      s.albedo_prime =
          std::make_shared<const TextureUV>(out.albedo_prime);
      StageCtx ctx = build_sv(&model, &view, s, detail_select(), cfg, "detail");
      OptimizeResult r = optimize(
          ctx.po.fn, ctx.po.x0,
          stage_config(cfg, "detail", cfg.high_iters, cfg.lr_detail, ctx.po));
      ctx.unpack(r.x, &s);
      p = s.params;
      dpm = s.dpm;
      out.traces.push_back(std::move(r.trace));
    }
  }

  out.params = p;
  out.dfm = dfm;
  out.dpm = dpm;
  out.m0 = decode_shape(model, p.alpha, p.beta);
  out.m1 = vertex_normals(apply_deformation(out.m0, dfm));
  out.m2 = apply_displacement(out.m1, dpm);
  return out;
}

// ---------------------------------------------------------------------------
// Multi-view fitting
// ---------------------------------------------------------------------------

MVFitResult fit_multi(const std::vector<ViewInput>& views,
                      const MorphableModel& model, const FitConfig& cfg) {
  cfg.validate();
  if (views.size() < 2)
    throw config_error("fit_multi: needs at least two views, got " +
                       std::to_string(views.size()));
  for (const ViewInput& v : views) v.validate();
  const int nv = static_cast<int>(views.size());

  MVFitResult out;
  std::vector<FitResult> singles;
  singles.reserve(nv);
  for (int v = 0; v < nv; ++v) {
    FitResult r = fit_single(views[v], model, cfg);
    for (LossTrace& t : r.traces) {
      t.stage += "[" + std::to_string(v) + "]";
      out.traces.push_back(std::move(t));
    }
    singles.push_back(std::move(r));
  }

  // Arithmetic-mean initialization of the shared variables.
  MVState st;
  st.alpha = VecX::Zero(model.k_id());
  st.dfm.data = Grid(cfg.dfm_res, cfg.dfm_res, 3);
  for (const FitResult& r : singles) {
    st.alpha += r.params.alpha;
    add_scaled(&st.dfm.data, r.dfm.data, 1.0);
  }
  st.alpha /= nv;
  scale_grid(&st.dfm.data, 1.0 / nv);
  out.naive_alpha = st.alpha;
  out.naive_dfm = st.dfm;

  // Per-view state; detail albedos rebuilt at the shared initialization so
  // they match the geometry the joint stage starts from.
  for (int v = 0; v < nv; ++v) {
    FaceParams p = singles[v].params;
    p.alpha = st.alpha;
    st.params.push_back(p);
    st.dpm.push_back(singles[v].dpm);
    DeretouchOutput de =
        detail_albedo(model, views[v], p, st.dfm, cfg, nullptr, nullptr);
    st.albedo_prime.push_back(de.albedo_prime_uv);
  }

  if (cfg.joint_iters > 0) {
    std::vector<int> subset(nv);
    for (int v = 0; v < nv; ++v) subset[v] = v;
    MVCtx ctx = build_mv(&model, &views, subset, st, cfg);
    OptimizeResult r = optimize(
        ctx.po.fn, ctx.po.x0,
        stage_config(cfg, "joint", cfg.joint_iters, cfg.lr_detail, ctx.po));
    ctx.unpack(r.x, &st);
    out.traces.push_back(std::move(r.trace));
  }

  out.alpha = st.alpha;
  out.dfm = st.dfm;
  for (int v = 0; v < nv; ++v) {
    FaceParams p = st.params[v];
    p.alpha = st.alpha;
    out.view_params.push_back(p);
    out.view_dpm.push_back(st.dpm[v]);
    out.view_albedo_prime.push_back(st.albedo_prime[v]);
    Mesh m1 = vertex_normals(
        apply_deformation(decode_shape(model, st.alpha, p.beta), st.dfm));
    out.view_m2.push_back(apply_displacement(m1, st.dpm[v]));
  }
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Scan fitting
// ---------------------------------------------------------------------------

SimilarityTransform align_scan(const ScanMesh& scan,
                               const MorphableModel& model, int icp_iters) {
  scan.validate();
  if (!scan.has_landmarks())
    throw config_error("align_scan: scan carries no 7-landmark set");
  const Mesh mean = decode_shape(model, VecX::Zero(model.k_id()),
                                 VecX::Zero(model.k_exp()));
  const std::vector<int>& ids = model.topology->landmarks7;
  Vertices model_lm(7, 3);
  for (int i = 0; i < 7; ++i) model_lm.row(i) = mean.vertices.row(ids[i]);

  SimilarityTransform t = rigid_align_7lm(scan.landmarks7, model_lm, true);

  if (icp_iters <= 0) return t;
  const Triangles& tris = mean.topology->triangles;
  const TriangleBVH bvh(mean.vertices, tris);
  const int n = static_cast<int>(scan.vertices.rows());

  for (int iter = 0; iter < icp_iters; ++iter) {
    // Residuals against the nearest surface point's face plane.
    std::vector<Vec3> pts(n), nrm(n);
    std::vector<double> res(n), absres(n);
    for (int i = 0; i < n; ++i) {
      const Vec3 p = t.apply(Vec3(scan.vertices.row(i)));
      const ClosestHit hit = bvh.closest(p);
      const int a = tris(hit.tri, 0), b = tris(hit.tri, 1),
                c = tris(hit.tri, 2);
      const Vec3 e1 = Vec3(mean.vertices.row(b)) - Vec3(mean.vertices.row(a));
      const Vec3 e2 = Vec3(mean.vertices.row(c)) - Vec3(mean.vertices.row(a));
      Vec3 fn = e1.cross(e2);
      const double len = fn.norm();
      fn = len > 0 ? Vec3(fn / len) : Vec3(0, 0, 1);
      pts[i] = p;
      nrm[i] = fn;
      res[i] = fn.dot(p - hit.point);
      absres[i] = std::abs(res[i]);
    }
    // Trim at the 80th percentile of |residual|.
    std::vector<double> sorted = absres;
    const size_t k = static_cast<size_t>(0.8 * (n - 1));
    std::nth_element(sorted.begin(), sorted.begin() + k, sorted.end());
    const double cut = sorted[k];

    Eigen::Matrix<double, 6, 6> ata = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> atb = Eigen::Matrix<double, 6, 1>::Zero();
    int used = 0;
    for (int i = 0; i < n; ++i) {
      if (absres[i] > cut) continue;
      Eigen::Matrix<double, 6, 1> j;
      j.head<3>() = pts[i].cross(nrm[i]);
      j.tail<3>() = nrm[i];
      ata += j * j.transpose();
      atb -= j * res[i];
      ++used;
    }
    if (used < 6) break;
    const Eigen::Matrix<double, 6, 1> x = ata.ldlt().solve(atb);
    const Vec3 omega = x.head<3>();
    const Vec3 delta = x.tail<3>();
    const double angle = omega.norm();
    Mat3 rd = Mat3::Identity();
    if (angle > 0)
      rd = Eigen::AngleAxisd(angle, omega / angle).toRotationMatrix();
    t.rotation = rd * t.rotation;
    t.translation = rd * t.translation + delta;
    if (angle < 1e-12 && delta.norm() < 1e-10) break;
  }
  return t;
}

namespace {

// Nearest-texel lookup of the detail mask at the displacement-map
// resolution; an absent mask admits every texel.
Grid mask_at_res(const Grid& mask, int res) {
  Grid out(res, res, 1, 1.0);
  if (mask.empty()) return out;
  for (int j = 0; j < res; ++j)
    for (int i = 0; i < res; ++i) {
      const int mi = std::min(mask.width - 1,
                              static_cast<int>((i + 0.5) / res * mask.width));
      const int mj = std::min(
          mask.height - 1, static_cast<int>((j + 0.5) / res * mask.height));
      out.at(i, j, 0) = mask.at(mi, mj, 0) != 0.0 ? 1.0 : 0.0;
    }
  return out;
}

}  // namespace

FitResult fit_scan(const ScanMesh& scan, const std::vector<ViewInput>& views,
                   const MorphableModel& model, const FitConfig& cfg,
                   const SimilarityTransform* user_align) {
  cfg.validate();
  scan.validate();
  for (const ViewInput& v : views) v.validate();

  FitResult out;

  // Stage 0: rigid alignment into model space.
  const SimilarityTransform t =
      user_align ? *user_align : align_scan(scan, model, cfg.scan_icp_iters);
  ScanMesh aligned = scan;
  aligned.vertices = t.apply(scan.vertices);
  if (scan.has_landmarks()) aligned.landmarks7 = t.apply(scan.landmarks7);
  const TriangleBVH bvh(aligned.vertices, aligned.triangles);

  // Views, when present, contribute image-space terms; their pose, albedo
  // and lighting come from per-view coarse fits and stay frozen while the
  // scan stages optimize the shared geometry.
  std::vector<FaceParams> vparams;
  for (const ViewInput& v : views) vparams.push_back(fit_coarse(v, model, cfg));

  VecX alpha = VecX::Zero(model.k_id());
  VecX beta = VecX::Zero(model.k_exp());
  const std::vector<int>& lm_ids = model.topology->landmarks7;
  const LossWeights& w = cfg.weights;

  // Stage 1: coefficients against the scan surface (+ scan landmarks).
  if (cfg.scan_coeff_iters > 0) {
    Packer pk;
    const int o_alpha = pk.add("alpha", static_cast<int>(alpha.size()), 1.0);
    const int o_beta = pk.add("beta", static_cast<int>(beta.size()), 1.0);
    VecX x0(pk.total);
    x0.segment(o_alpha, alpha.size()) = alpha;
    x0.segment(o_beta, beta.size()) = beta;

    std::vector<std::string> names = {"scan", "landmark3d", "prior_alpha",
                                      "prior_beta"};
    for (size_t v = 0; v < views.size(); ++v) {
      names.push_back("photo[" + std::to_string(v) + "]");
      names.push_back("landmark[" + std::to_string(v) + "]");
    }

    Objective fn = [&](const VecX& x, VecX* grad,
                       std::vector<double>* terms) -> double {
      const VecX a = x.segment(o_alpha, alpha.size());
      const VecX b = x.segment(o_beta, beta.size());
      const Mesh m = decode_shape(model, a, b);
      double total = 0.0;
      auto push = [&](double v) {
        if (terms) terms->push_back(v);
        total += v;
      };
      Vertices pbar = Vertices::Zero(m.num_vertices(), 3);

      const ScanVertexLoss sv = scan_vertex_loss(m, bvh, cfg.scan_cutoff_mm);
      push(w.w_scan * sv.value);
      if (grad && w.w_scan > 0) pbar += w.w_scan * sv.vertex_bar;

      double lm_val = 0.0;
      if (aligned.has_landmarks()) {
        for (int i = 0; i < 7; ++i) {
          const Vec3 d = Vec3(m.vertices.row(lm_ids[i])) -
                         Vec3(aligned.landmarks7.row(i));
          lm_val += d.squaredNorm() / 7.0;
          if (grad && w.w_lan > 0)
            pbar.row(lm_ids[i]) += (w.w_lan * 2.0 / 7.0) * d.transpose();
        }
      }
      push(w.w_lan * lm_val);

      push(cfg.prior_alpha * a.squaredNorm() / a.size());
      push(cfg.prior_beta * b.squaredNorm() / b.size());

      RenderGrads g(model);
      if (grad) {
        model_points_backward(model, nullptr, pbar, &g);
        g.alpha += (2.0 * cfg.prior_alpha / a.size()) * a;
        g.beta += (2.0 * cfg.prior_beta / b.size()) * b;
      }
      for (size_t v = 0; v < views.size(); ++v) {
        SVState s;
        s.params = vparams[v];
        s.params.alpha = a;
        s.params.beta = b;
        SVSelect sel;
        sel.t_photo0 = sel.t_lan = true;
        if (!grad) {
          total += eval_sv(model, views[v], s, sel, cfg, nullptr, terms);
        } else {
          SVGrads gr(model, nullptr, nullptr);
          total += eval_sv(model, views[v], s, sel, cfg, &gr, terms);
          g.alpha += gr.g.alpha;
          g.beta += gr.g.beta;
        }
      }
      if (grad) {
        grad->setZero(x.size());
        grad->segment(o_alpha, a.size()) = g.alpha;
        grad->segment(o_beta, b.size()) = g.beta;
      }
      return total;
    };

    OptimizeConfig oc;
    oc.iterations = cfg.scan_coeff_iters;
    oc.learning_rate = cfg.lr_coarse;
    oc.method = cfg.optimizer;
    oc.divergence_factor = cfg.divergence_factor;
    oc.stage = "scan_coeff";
    oc.term_names = names;
    oc.layout = pk.layout;
    oc.lr_scale = pk.lr_scale();
    OptimizeResult r = optimize(fn, x0, oc);
    alpha = r.x.segment(o_alpha, alpha.size());
    beta = r.x.segment(o_beta, beta.size());
    out.traces.push_back(std::move(r.trace));
  }

  // Stage 2: deformation map against the scan surface.
  DeformationMap dfm;
  dfm.data = Grid(cfg.dfm_res, cfg.dfm_res, 3);
  const Mesh m0 = decode_shape(model, alpha, beta);
  if (cfg.scan_mid_iters > 0) {
    Packer pk;
    const int o_dfm = pk.add("dfm", dfm.data.size(), cfg.lr_map_scale);
    VecX x0(pk.total);
    put_grid(x0, o_dfm, dfm.data);
    std::vector<std::string> names = {"scan", "tv"};
    for (size_t v = 0; v < views.size(); ++v)
      names.push_back("photo_mid[" + std::to_string(v) + "]");

    Objective fn = [&](const VecX& x, VecX* grad,
                       std::vector<double>* terms) -> double {
      DeformationMap d;
      d.data = Grid(cfg.dfm_res, cfg.dfm_res, 3);
      take_grid(x, o_dfm, &d.data);
      const Mesh m1 = apply_deformation(m0, d);
      double total = 0.0;
      auto push = [&](double v) {
        if (terms) terms->push_back(v);
        total += v;
      };

      RenderGrads g(model, &d, nullptr);
      const ScanVertexLoss sv = scan_vertex_loss(m1, bvh, cfg.scan_cutoff_mm);
      push(w.w_scan * sv.value);
      if (grad && w.w_scan > 0) {
        Vertices pbar = w.w_scan * sv.vertex_bar;
        model_points_backward(model, &d, pbar, &g);
      }
      const GridLoss gl = tv_loss(d);
      push(w.w_tv * gl.value);
      if (grad && w.w_tv > 0) add_scaled(&g.dfm, gl.grad, w.w_tv);

      for (size_t v = 0; v < views.size(); ++v) {
        SVState s;
        s.params = vparams[v];
        s.params.alpha = alpha;
        s.params.beta = beta;
        s.dfm = d;
        SVSelect sel;
        sel.t_photo_mid = true;
        if (!grad) {
          total += eval_sv(model, views[v], s, sel, cfg, nullptr, terms);
        } else {
          SVGrads gr(model, &d, nullptr);
          total += eval_sv(model, views[v], s, sel, cfg, &gr, terms);
          add_scaled(&g.dfm, gr.g.dfm, 1.0);
        }
      }
      if (grad) {
        grad->setZero(x.size());
        put_grid(*grad, o_dfm, g.dfm);
      }
      return total;
    };

    OptimizeConfig oc;
    oc.iterations = cfg.scan_mid_iters;
    oc.learning_rate = cfg.lr_detail;
    oc.method = cfg.optimizer;
    oc.divergence_factor = cfg.divergence_factor;
    oc.stage = "scan_mid";
    oc.term_names = names;
    oc.layout = pk.layout;
    oc.lr_scale = pk.lr_scale();
    OptimizeResult r = optimize(fn, x0, oc);
    take_grid(r.x, 0, &dfm.data);
    out.traces.push_back(std::move(r.trace));
  }

  // Stage 3: displacement map under the detail mask.
  DisplacementMap dpm;
  dpm.data = Grid(cfg.dpm_res, cfg.dpm_res, 1);
  const Mesh m1f = vertex_normals(apply_deformation(m0, dfm));
  if (cfg.scan_high_iters > 0) {
    const Grid mask = mask_at_res(model.topology->detail_mask_uv, cfg.dpm_res);

    Packer pk;
    const int o_dpm = pk.add("dpm", dpm.data.size(), 1.0);
    VecX x0(pk.total);
    put_grid(x0, o_dpm, dpm.data);

    Objective fn = [&](const VecX& x, VecX* grad,
                       std::vector<double>* terms) -> double {
      DisplacementMap h;
      h.data = Grid(cfg.dpm_res, cfg.dpm_res, 1);
      take_grid(x, o_dpm, &h.data);
      for (int i = 0; i < h.data.size(); ++i) h.data.data[i] *= mask.data[i];
      const Mesh m2 = apply_displacement(m1f, h);
      double total = 0.0;
      auto push = [&](double v) {
        if (terms) terms->push_back(v);
        total += v;
      };
      const ScanVertexLoss sv = scan_vertex_loss(m2, bvh, cfg.scan_cutoff_mm);
      push(w.w_scan * sv.value);
      const GridLoss gl = l1_reg(h);
      push(w.w_reg * gl.value);
      if (grad) {
        Grid hg(cfg.dpm_res, cfg.dpm_res, 1);
        if (w.w_scan > 0) {
          Vertices pbar = w.w_scan * sv.vertex_bar;
          displacement_backward(m1f, pbar, &hg);
        }
        if (w.w_reg > 0) add_scaled(&hg, gl.grad, w.w_reg);
        for (int i = 0; i < hg.size(); ++i) hg.data[i] *= mask.data[i];
        grad->setZero(x.size());
        put_grid(*grad, o_dpm, hg);
      }
      return total;
    };

    OptimizeConfig oc;
    oc.iterations = cfg.scan_high_iters;
    oc.learning_rate = cfg.lr_detail;
    oc.method = cfg.optimizer;
    oc.divergence_factor = cfg.divergence_factor;
    oc.stage = "scan_high";
    oc.term_names = {"scan", "l1_detail"};
    oc.layout = pk.layout;
    oc.lr_scale = pk.lr_scale();
    OptimizeResult r = optimize(fn, x0, oc);
    take_grid(r.x, 0, &dpm.data);
    for (int i = 0; i < dpm.data.size(); ++i) dpm.data.data[i] *= mask.data[i];
    out.traces.push_back(std::move(r.trace));
  }

  out.params.alpha = alpha;
  out.params.beta = beta;
  out.params.gamma = VecX::Zero(model.k_alb());
  out.params.lighting = ambient_lighting();
  if (!views.empty()) out.params.camera = views.front().camera;
  out.dfm = dfm;
  out.dpm = dpm;
  out.m0 = decode_shape(model, alpha, beta);
  out.m1 = vertex_normals(apply_deformation(out.m0, dfm));
  out.m2 = apply_displacement(out.m1, dpm);
  return out;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

void save_fit_result(const FitResult& result, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  nlohmann::json j;
  auto vec = [](const VecX& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
  };
  j["alpha"] = vec(result.params.alpha);
  j["beta"] = vec(result.params.beta);
  j["gamma"] = vec(result.params.gamma);
  j["rotation"] = std::vector<double>{result.params.rotation.x(),
                                      result.params.rotation.y(),
                                      result.params.rotation.z()};
  j["translation"] = std::vector<double>{result.params.translation.x(),
                                         result.params.translation.y(),
                                         result.params.translation.z()};
  j["lighting"] = vec(result.params.lighting);
  j["camera"] = {{"focal", result.params.camera.focal},
                 {"cx", result.params.camera.cx},
                 {"cy", result.params.camera.cy},
                 {"width", result.params.camera.width},
                 {"height", result.params.camera.height},
                 {"near_plane", result.params.camera.near_plane}};
  std::ofstream pj(dir + "/params.json");
  if (!pj) throw config_error("save_fit_result: cannot write " + dir);
  pj << j.dump(2) << "\n";
  pj.close();

  save_grid(result.dfm.data, dir + "/dfm.bin");
  save_grid(result.dpm.data, dir + "/dpm.bin");
  if (!result.albedo_prime.rgb.empty()) {
    save_image(result.albedo_prime.rgb, dir + "/albedo_prime.pfm");
    save_image(result.albedo_prime.rgb, dir + "/albedo_prime.png");
  }
  save_obj(dir + "/m0.obj", result.m0);
  save_obj(dir + "/m1.obj", result.m1);
  save_obj(dir + "/m2.obj", result.m2);

  std::ofstream csv(dir + "/trace.csv");
  csv << "stage,iter,term,value\n";
  for (const LossTrace& t : result.traces)
    for (const TraceRow& row : t.rows) {
      csv << t.stage << "," << row.iter << ",total," << fmt_double(row.total)
          << "\n";
      for (size_t k = 0; k < row.terms.size(); ++k)
        csv << t.stage << "," << row.iter << ","
            << (k < t.term_names.size() ? t.term_names[k]
                                        : "term" + std::to_string(k))
            << "," << fmt_double(row.terms[k]) << "\n";
    }
}

FitResult load_fit_result(const MorphableModel& model, const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream pj(dir + "/params.json");
  if (!pj) throw config_error("load_fit_result: cannot read " + dir);
  nlohmann::json j;
  pj >> j;

  FitResult r;
  auto vecx = [&](const char* key) {
    const std::vector<double> v = j.at(key).get<std::vector<double>>();
    return Eigen::Map<const VecX>(v.data(), v.size()).eval();
  };
  r.params.alpha = vecx("alpha");
  r.params.beta = vecx("beta");
  r.params.gamma = vecx("gamma");
  const VecX rot = vecx("rotation"), tr = vecx("translation");
  r.params.rotation = Vec3(rot[0], rot[1], rot[2]);
  r.params.translation = Vec3(tr[0], tr[1], tr[2]);
  r.params.lighting = vecx("lighting");
  const auto& cj = j.at("camera");
  r.params.camera.focal = cj.at("focal").get<double>();
  r.params.camera.cx = cj.at("cx").get<double>();
  r.params.camera.cy = cj.at("cy").get<double>();
  r.params.camera.width = cj.at("width").get<int>();
  r.params.camera.height = cj.at("height").get<int>();
  r.params.camera.near_plane = cj.at("near_plane").get<double>();

  r.dfm.data = load_grid(dir + "/dfm.bin");
  r.dpm.data = load_grid(dir + "/dpm.bin");
  if (fs::exists(dir + "/albedo_prime.pfm")) {
    r.albedo_prime.rgb = load_image(dir + "/albedo_prime.pfm");
    r.albedo_prime.visible =
        Grid(r.albedo_prime.rgb.width, r.albedo_prime.rgb.height, 1, 1.0);
  }
  // The meshes are a deterministic function of the parameters and maps.
  r.m0 = decode_shape(model, r.params.alpha, r.params.beta);
  r.m1 = vertex_normals(apply_deformation(r.m0, r.dfm));
  r.m2 = apply_displacement(r.m1, r.dpm);
  return r;
}

}  // namespace hface
