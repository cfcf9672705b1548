#pragma once

#include "hface/deretouch.hpp"
#include "hface/eval.hpp"
#include "hface/losses.hpp"
#include "hface/render.hpp"

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace hface {

// Thrown when a fitting stage produces a non-finite loss or gradient, or when
// a stage ends with a loss more than divergence_factor times its starting
// value. The message names the stage and the offending term or block and
// quotes the last trace rows.
class optimization_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Inputs and configuration
// ---------------------------------------------------------------------------

struct ViewInput {
  Image image;                    // W x H x 3, linear RGB
  std::vector<Vec2> landmarks68;  // pixel coordinates, y down
  FaceMask face_mask;             // same frame as the image
  CameraIntrinsics camera;

  void validate() const;  // sizes match, finite values, 68 landmarks
};

struct FitConfig {
  // Iteration budgets. A zero disables the stage (its variables keep their
  // starting values).
  int coarse_iters = 200;   // pose/coefficients against landmarks + photo
  int mid_iters = 150;      // deformation map against photo + contour + tv
  int high_iters = 120;     // displacement map against photo + l1
  int joint_iters = 80;     // multi-view joint refinement
  int scan_icp_iters = 20;  // rigid alignment iterations (scan fitting)
  int scan_coeff_iters = 200;
  int scan_mid_iters = 150;
  int scan_high_iters = 120;

  // Step sizes (adaptive-moment scale). Translation and deformation-map
  // texels live in millimetres and need to travel far, so their effective
  // steps are scaled up by the factors below; displacement texels move
  // sub-millimetre amounts and use the base rate. Tuned on the synthetic
  // suite.
  double lr_coarse = 2e-2;
  double lr_detail = 5e-3;
  double lr_translation_scale = 50.0;
  double lr_map_scale = 10.0;  // deformation-map texels only
  std::string optimizer = "adam";  // "adam" | "gd"

  // Term weights balance pixel-value, pixel-distance and millimetre scales;
  // the photometric term is the unit.
  LossWeights weights{.w_lan = 0.02, .w_con = 0.2, .w_tv = 0.02,
                      .w_reg = 0.02};
  double prior_alpha = 1e-3;  // quadratic coefficient priors (mean over modes)
  double prior_beta = 1e-3;
  double prior_gamma = 1e-3;

  double divergence_factor = 10.0;  // stage-end loss guard; 0 disables
  bool simultaneous = false;  // one combined stage instead of mid+detail
  int texture_res = 256;      // unwrapped-texture resolution
  int dfm_res = 64;
  int dpm_res = 256;
  int retouch_radius = 4;     // smoothing radius of the built-in retoucher
  double scan_cutoff_mm = 20.0;
  uint64_t seed = 0;

  void validate() const;  // budgets >= 0, rates > 0, known optimizer
};

// ---------------------------------------------------------------------------
// Optimizer core: first-order adaptive-moment descent over a flat parameter
// vector, with a full per-term loss trace.
// ---------------------------------------------------------------------------

// L = f(x); when grad is non-null it receives dL/dx, when terms is non-null
// it receives the per-term loss values (aligned with the builder's
// term_names). Both pointers may be null for value-only evaluations.
using Objective =
    std::function<double(const VecX& x, VecX* grad, std::vector<double>* terms)>;

// Names the contiguous blocks a packed vector consists of, in order.
using BlockLayout = std::vector<std::pair<std::string, int>>;

struct TraceRow {
  int iter = 0;
  double total = 0.0;
  std::vector<double> terms;
};

struct LossTrace {
  std::string stage;
  std::vector<std::string> term_names;
  std::vector<TraceRow> rows;  // one per iteration plus a final row
};

struct OptimizeConfig {
  int iterations = 100;
  double learning_rate = 1e-2;
  std::string method = "adam";  // "adam" | "gd"
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double divergence_factor = 10.0;  // 0 disables the stage-end check
  std::string stage = "stage";
  std::vector<std::string> term_names;
  BlockLayout layout;  // names gradient blocks in diagnostics
  VecX lr_scale;       // optional per-coordinate step scale (empty = 1)
};

struct OptimizeResult {
  VecX x;
  LossTrace trace;  // rows[0] is the start, rows.back() the returned point
};

// Deterministic serial descent. Each iteration evaluates loss and gradient at
// the current point, records a trace row, and steps; a final evaluation at
// the returned point closes the trace. Zero iterations returns x0 with its
// loss. Non-finite losses, terms or gradients abort with the term/block name.
OptimizeResult optimize(const Objective& objective, const VecX& x0,
                        const OptimizeConfig& cfg);

// ---------------------------------------------------------------------------
// Gradient verification: central differences per coordinate, or over a
// deterministic random coordinate sample when the vector is large.
// ---------------------------------------------------------------------------

struct GradCheckCoord {
  int index = -1;
  std::string block;  // from the layout, when provided
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  int num_checked = 0;
  bool flagged = false;           // max_rel_err > tolerance
  std::vector<GradCheckCoord> worst;  // descending error, at most 10
};

// rel_err = |analytic - numeric| / max(|analytic|, |numeric|, 1e-6); the
// floor keeps agreeing near-zero pairs from registering as failures.
// sample = 0 checks every coordinate; otherwise a seeded random subset.
GradCheckReport grad_check(const Objective& objective, const VecX& x,
                           double step = 1e-4, double tolerance = 1e-3,
                           int sample = 0, uint64_t seed = 1,
                           const BlockLayout& layout = {});

// ---------------------------------------------------------------------------
// Staged objectives. Each builder packs the stage's free variables into a
// flat vector and returns the exact objective the optimizer sees, so the
// same composition can be gradient-checked.
// ---------------------------------------------------------------------------

struct PackedObjective {
  Objective fn;
  VecX x0;
  BlockLayout layout;
  std::vector<std::string> term_names;
  VecX lr_scale;  // per-coordinate step scaling used by the stages
};

// The returned closures keep references to the model and view(s); both must
// outlive the objective. Textures and maps are copied in.

// Rasterizes the decoded model albedo into UV space (visibility = coverage).
TextureUV bake_albedo_uv(const MorphableModel& model, const VecX& gamma,
                         int res);

// Coarse: photometric on the vertex-albedo render + landmarks + coefficient
// priors; free variables alpha, beta, gamma, pose, lighting.
PackedObjective coarse_objective(const MorphableModel& model,
                                 const ViewInput& view,
                                 const FaceParams& start,
                                 const FitConfig& cfg);

// Mid: photometric on the deformed mesh rendered with the decoded albedo and
// scene lighting (shading is what ties the deformation to the image's
// shadows and highlights) + contour + tv(dfm); free variables dfm, pose and
// lighting.
PackedObjective mid_objective(const MorphableModel& model, const ViewInput& view,
                              const FaceParams& start, const DeformationMap& dfm,
                              const FitConfig& cfg);

// Detail: photometric on the detail-normal render textured with the
// de-retouched albedo + l1(dpm); free variables dpm, scene lighting.
PackedObjective detail_objective(const MorphableModel& model,
                                 const ViewInput& view, const FaceParams& start,
                                 const TextureUV& albedo_prime,
                                 const DeformationMap& dfm,
                                 const DisplacementMap& dpm,
                                 const FitConfig& cfg);

// Everything at once: photometric terms on both the M1 and M2 renders,
// landmarks, contour, tv, l1 and priors with all variables free. Used by
// simultaneous mode and the gradient acceptance suite.
PackedObjective full_objective(const MorphableModel& model, const ViewInput& view,
                               const FaceParams& start,
                               const TextureUV& albedo_prime,
                               const DeformationMap& dfm,
                               const DisplacementMap& dpm, const FitConfig& cfg);

// Multi-view joint state: shared identity + deformation, per-view everything
// else. The de-retouched albedos stay frozen during the joint stage.
struct MVState {
  VecX alpha;
  DeformationMap dfm;
  std::vector<FaceParams> params;    // beta, pose, lighting, gamma per view
  std::vector<DisplacementMap> dpm;
  std::vector<TextureUV> albedo_prime;

  void validate() const;  // parallel vectors, alpha/dfm present
};

// Joint objective: per-view data terms plus shared tv(dfm) and alpha prior.
// views may be any subset of the state's views (by index list), including
// empty — that evaluates only the shared terms, which is how the
// summed-gradient contract is verified.
PackedObjective mv_objective(const MorphableModel& model,
                             const std::vector<ViewInput>& views,
                             const std::vector<int>& view_subset,
                             const MVState& start, const FitConfig& cfg);

// ---------------------------------------------------------------------------
// Fitting pipelines
// ---------------------------------------------------------------------------

struct FitResult {
  FaceParams params;
  DeformationMap dfm;
  DisplacementMap dpm;
  TextureUV albedo_prime;
  Mesh m0, m1, m2;  // model-space meshes of the three hierarchy levels
  std::vector<LossTrace> traces;
};

struct MVFitResult {
  VecX alpha;         // shared identity coefficients
  DeformationMap dfm; // shared deformation map
  VecX naive_alpha;           // the arithmetic-mean initialization, kept as
  DeformationMap naive_dfm;   // the single-view-average baseline
  std::vector<FaceParams> view_params;  // alpha copied in per view
  std::vector<DisplacementMap> view_dpm;
  std::vector<TextureUV> view_albedo_prime;
  std::vector<Mesh> view_m2;
  std::vector<LossTrace> traces;

  void validate() const;
};

// Pose from a similarity fit of the mean-shape landmarks to the detected
// ones, zero coefficients, ambient lighting.
FaceParams init_coarse(const MorphableModel& model, const ViewInput& view);

FaceParams fit_coarse(const ViewInput& view, const MorphableModel& model,
                      const FitConfig& cfg);

// Coarse -> unwrap texture, fit deformation map -> re-unwrap, de-retouch,
// fit displacement map. retouched, when given, replaces the built-in
// retoucher's output (same resolution as the unwrapped texture).
FitResult fit_single(const ViewInput& view, const MorphableModel& model,
                     const FitConfig& cfg, const Grid* retouched = nullptr);

// Per-view single fits, arithmetic-mean initialization of the shared
// variables, then the joint stage. Requires at least two views.
MVFitResult fit_multi(const std::vector<ViewInput>& views,
                      const MorphableModel& model, const FitConfig& cfg);

// Rigid alignment of a scan into model space: exact similarity from the 7
// landmarks, then trimmed point-to-plane ICP against the mean shape.
SimilarityTransform align_scan(const ScanMesh& scan, const MorphableModel& model,
                               int icp_iters);

// Scan fitting: stage 0 alignment (or the caller's), stage 1 coefficients,
// stage 2 deformation map, stage 3 displacement map under the detail mask.
// Views, when present, add their photometric/landmark terms.
FitResult fit_scan(const ScanMesh& scan, const std::vector<ViewInput>& views,
                   const MorphableModel& model, const FitConfig& cfg,
                   const SimilarityTransform* user_align = nullptr);

// ---------------------------------------------------------------------------
// Result persistence: params.json, dfm.bin / dpm.bin, albedo_prime.pfm/.png,
// m0/m1/m2.obj and one trace CSV per stage inside dir (created if needed).
// ---------------------------------------------------------------------------
void save_fit_result(const FitResult& result, const std::string& dir);
FitResult load_fit_result(const MorphableModel& model, const std::string& dir);

}  // namespace hface
