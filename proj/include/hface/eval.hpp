#pragma once

#include "hface/spatial.hpp"

namespace hface {

// ---------------------------------------------------------------------------
// Reconstruction-quality metrics. Chamfer is symmetric over surface (not
// vertex-set) distances, so it is robust to tessellation differences; the
// normal error uses the same nearest-surface correspondence; scan-to-mesh
// follows the NoW convention (ground-truth vertices measured against the
// predicted surface after landmark alignment).
// ---------------------------------------------------------------------------

struct SimilarityTransform {
  double scale = 1.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return scale * rotation * p + translation; }
  Vertices apply(const Vertices& pts) const;
};

// Closed-form least-squares similarity (rigid when with_scale = false)
// mapping pred landmarks onto gt landmarks. Throws validation_error when a
// landmark set is degenerate (collinear or coincident).
SimilarityTransform rigid_align_7lm(const Vertices& pred_lm,
                                    const Vertices& gt_lm,
                                    bool with_scale = true);

// Symmetric Chamfer distance in mm: mean distance from pred vertices to the
// gt surface averaged with the mean from gt vertices to the pred surface.
double chamfer(const Mesh& pred, const ScanMesh& gt);

// Mean normal error in radians: for each pred vertex, the angle between its
// area-weighted vertex normal and the face normal of the nearest gt surface
// point.
double mne(const Mesh& pred, const ScanMesh& gt);

struct ScanToMeshStats {
  double median_mm = 0.0;
  double mean_mm = 0.0;
  double std_mm = 0.0;  // population standard deviation
  int used = 0;
  int excluded = 0;
};

// Applies align to pred, then measures every gt vertex inside pred's
// axis-aligned bounds dilated by 10 mm against the pred surface. Throws
// validation_error when no gt vertex overlaps.
ScanToMeshStats scan_to_mesh(const Mesh& pred, const ScanMesh& gt,
                             const SimilarityTransform& align);

struct MetricReport {
  double chamfer_mm = 0.0;
  double mne_rad = 0.0;
  double s2m_median_mm = 0.0;
  double s2m_mean_mm = 0.0;
  double s2m_std_mm = 0.0;
  int s2m_used = 0;
  int s2m_excluded = 0;

  void validate() const;  // all statistics nonnegative
};

}  // namespace hface
