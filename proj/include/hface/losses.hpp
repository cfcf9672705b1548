#pragma once

#include "hface/render.hpp"
#include "hface/spatial.hpp"

namespace hface {

// ---------------------------------------------------------------------------
// Fitting objectives. Each loss returns its scalar value together with the
// exact adjoint in its natural input space (image, projected points, map
// texels or mesh vertices); callers chain those through render_backward /
// screen_points_backward to reach the optimization variables.
// ---------------------------------------------------------------------------

// Per-row edge columns of a binary mask: leftmost and rightmost face pixel
// per row, -1 on rows without face pixels.
struct EdgeTable {
  std::vector<int> left, right;
};

// Binary face-region mask with its edge table (recomputable from the pixels;
// rebuild_edges restores consistency after direct pixel edits).
struct FaceMask {
  int width = 0, height = 0;
  std::vector<uint8_t> face;  // row-major, nonzero = face
  EdgeTable edges;

  FaceMask() = default;
  FaceMask(int w, int h)
      : width(w), height(h), face(static_cast<size_t>(w) * h, 0) {
    rebuild_edges();
  }
  // Any nonzero channel marks a face pixel (8-bit mask files load as grids).
  static FaceMask from_grid(const Grid& g);

  bool at(int x, int y) const { return face[static_cast<size_t>(y) * width + x] != 0; }
  void set(int x, int y, bool v) { face[static_cast<size_t>(y) * width + x] = v ? 1 : 0; }
  void rebuild_edges();
  int count() const;
};

EdgeTable contour_edge_points(const FaceMask& mask);

struct LossWeights {
  double w_photo = 1.0;
  double w_lan = 1.0;
  double w_con = 1.0;
  double w_tv = 1.0;
  double w_reg = 1.0;
  double w_scan = 1.0;
  double w_mid = 1.0;
  double w_high = 1.0;
  double w_per = 0.0;          // perception-level loss slot; inactive (needs a
                               // pretrained network), kept for config parity
  double lambda_margin = 0.01; // contour margin
  double delta_row = 100.0;    // contour: only rows below this participate
  double epsilon = 1e-6;       // de-retouching stabilizer

  void validate() const;  // weights >= 0, epsilon > 0
};

// Mean over masked pixels of the L2 norm of the RGB difference. Gradient is
// with respect to the rendered image; it is zero at pixels where the images
// agree exactly (the norm's non-smooth point). An empty mask yields 0 and
// sets empty_mask (callers warn).
struct PhotoLoss {
  double value = 0.0;
  Image rendered_bar;
  bool empty_mask = false;
};
PhotoLoss photometric_loss(const Image& rendered, const Image& target,
                           const FaceMask& mask);

// Weighted mean squared pixel distance between projected landmark vertices
// and targets, normalized by the included count (so doubling the weights
// doubles the loss). Landmarks whose projection is invalid are skipped and
// reported. screen_bar holds d(loss)/d(projected pixel) per landmark, ready
// for screen_points_backward with Topology::landmarks68.
struct LandmarkLoss {
  double value = 0.0;
  std::vector<Vec2> screen_bar;
  std::vector<uint8_t> included;
  int num_included = 0;
  int num_skipped = 0;
};
LandmarkLoss landmark_loss(const FaceParams& params, const Mesh& mesh,
                           const std::vector<Vec2>& target_lm,
                           const VecX& weights);

// Contour alignment: each lower-face vertex projecting to p' with
// y(p') > delta_row and a face pixel in its row contributes
//   f = | relu( (l·r)/max(|l|,|r|) + lambda ) - lambda |,
// where l and r are the horizontal offsets from p' to the row's left and
// right edge pixel centers. Inside the face the normalized product is <=
// -lambda and f is the constant lambda (no pull); on the contour f = 0; and
// outside it grows linearly. The loss is the mean of f over included
// vertices; a vertex exactly on an edge point (max = 0) contributes 0.
// screen_bar is parallel to lower_face (zero rows for excluded vertices);
// the gradient moves only the horizontal coordinate — row crossings and edge
// column jumps are the documented non-smooth set.
struct ContourLoss {
  double value = 0.0;
  std::vector<Vec2> screen_bar;
  int num_included = 0;
};
ContourLoss contour_loss(const Mesh& m1, const FaceParams& params,
                         const EdgeTable& edges,
                         const std::vector<int>& lower_face,
                         double lambda_margin = 0.01, double delta_row = 100.0);

// Anisotropic total variation: mean over texels and channels of the L1 norms
// of the forward differences in u and v (differences across the boundary are
// omitted; the normalizer stays res*res*channels).
struct GridLoss {
  double value = 0.0;
  Grid grad;
  bool empty_mask = false;
};
GridLoss tv_loss(const Grid& g);
GridLoss tv_loss(const DeformationMap& dfm);

// Mean absolute texel value. Subgradient 0 at exact zeros (documented
// non-smooth set).
GridLoss l1_reg(const DisplacementMap& dpm);

// Mean absolute difference over masked texels (all channels). Empty mask
// yields 0 with empty_mask set. Gradient is with respect to pred.
GridLoss detail_supervision_loss(const Grid& pred, const Grid& gt,
                                 const Grid& mask_uv);

// Mean over mesh vertices of the squared distance to the nearest scan
// surface point. Vertices with no scan triangle within cutoff_mm are
// excluded (and counted); the mean runs over included vertices.
// Correspondences are frozen: vertex_bar = 2*(p - q)/N with q the fixed
// nearest point, the ICP-style alternation used by scan fitting.
struct ScanVertexLoss {
  double value = 0.0;
  Vertices vertex_bar;  // V x 3
  int num_included = 0;
  int num_excluded = 0;
};
ScanVertexLoss scan_vertex_loss(const Mesh& mesh, const TriangleBVH& scan,
                                double cutoff_mm = 20.0);
ScanVertexLoss scan_vertex_loss(const Mesh& mesh, const ScanMesh& scan,
                                double cutoff_mm = 20.0);

}  // namespace hface
