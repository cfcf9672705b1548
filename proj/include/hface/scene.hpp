#pragma once

#include "hface/fit.hpp"

#include <cstdint>
#include <vector>

namespace hface {

// ---------------------------------------------------------------------------
// Synthetic ground-truth scenes: a procedural model with known coefficients,
// detail maps and texture, rendered into views whose landmarks and masks are
// derived from the same forward model the fitter inverts. Every quantity a
// fit estimates has a known true value here.
// ---------------------------------------------------------------------------

struct SceneOptions {
  int n_views = 1;
  int image_size = 224;
  double focal = 1015.0;
  bool with_dfm = true;   // mid-frequency ground-truth deformation
  bool with_dpm = true;   // high-frequency ground-truth displacement
  double dfm_amp_mm = 3.0;
  double dpm_amp_mm = 0.35;
  double paint_amp = 0.03;  // painted texture variation outside the albedo span
  // Shape of the ground-truth deformation:
  //   "bumps"      smooth blobs along the surface normal (cheek/brow/jaw)
  //   "bumps_eye"  same, with one blob centered on an eye region (which the
  //                detail mask excludes from displacement fitting)
  //   "jaw"        one outward blob on the jaw line (profile/contour scenes)
  //   "noise"      blurred random 3-channel field
  std::string dfm_style = "bumps";
  int dfm_res = 64;
  int dpm_res = 256;
  int v_side = 24;        // procedural model resolution and basis sizes
  int k_id = 8;
  int k_exp = 6;
  int k_alb = 5;
  double view_spread = 0.35;  // yaw step between adjacent views, radians
  int texture_res = 256;

  void validate() const;
};

struct SynthScene {
  MorphableModel model;
  VecX gt_alpha, gt_beta, gt_gamma;
  DeformationMap gt_dfm;   // all-zero when the scene was built without one
  DisplacementMap gt_dpm;
  TextureUV gt_texture;    // decoded albedo plus smooth painted variation
  Mesh gt_m0, gt_m1, gt_m2;
  std::vector<ViewInput> views;
  std::vector<FaceParams> gt_params;  // true pose and lighting per view
};

SynthScene make_synth_scene(uint64_t seed, const SceneOptions& opts = {});

}  // namespace hface
