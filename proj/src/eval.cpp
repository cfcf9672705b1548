#include "hface/eval.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <numeric>

namespace hface {

Vertices SimilarityTransform::apply(const Vertices& pts) const {
  Vertices out(pts.rows(), 3);
  for (int i = 0; i < pts.rows(); ++i) {
    const Vec3 p = pts.row(i).transpose();
    out.row(i) = apply(p).transpose();
  }
  return out;
}

namespace {

void check_spread(const Vertices& lm, const char* name) {
  if (lm.rows() < 3)
    throw validation_error(std::string("rigid_align_7lm: ") + name +
                           " needs at least 3 landmarks");
  if (!lm.allFinite())
    throw validation_error(std::string("rigid_align_7lm: ") + name +
                           " landmarks not finite");
  const Eigen::RowVector3d centroid = lm.colwise().mean();
  const MatX centered = lm.rowwise() - centroid;
  const Eigen::JacobiSVD<MatX> svd(centered);
  // Collinear (or coincident) sets have at most one significant direction.
  const double scale = svd.singularValues()[0];
  if (scale <= 0.0 || svd.singularValues()[1] <= 1e-9 * scale)
    throw validation_error(std::string("rigid_align_7lm: ") + name +
                           " landmarks are collinear or coincident");
}

TriangleBVH pred_surface(const Mesh& pred) {
  if (!pred.topology || pred.topology->triangles.rows() == 0)
    throw validation_error("eval: predicted mesh has no triangles");
  if (pred.vertices.rows() == 0)
    throw validation_error("eval: predicted mesh has no vertices");
  return TriangleBVH(pred.vertices, pred.topology->triangles);
}

double directional_mean(const Vertices& points, const TriangleBVH& surface) {
  double sum = 0.0;
  for (int i = 0; i < points.rows(); ++i)
    sum += std::sqrt(surface.closest(points.row(i).transpose()).dist2);
  return sum / points.rows();
}

}  // namespace

SimilarityTransform rigid_align_7lm(const Vertices& pred_lm,
                                    const Vertices& gt_lm, bool with_scale) {
  if (pred_lm.rows() != gt_lm.rows())
    throw validation_error("rigid_align_7lm: landmark counts differ");
  check_spread(pred_lm, "pred");
  check_spread(gt_lm, "gt");

  // Columns are points for the closed-form Umeyama solve (src -> dst).
  const MatX src = pred_lm.transpose();
  const MatX dst = gt_lm.transpose();
  const Mat4 t = Eigen::umeyama(src, dst, with_scale);

  SimilarityTransform out;
  const Mat3 linear = t.topLeftCorner<3, 3>();
  out.scale = with_scale ? std::cbrt(linear.determinant()) : 1.0;
  out.rotation = linear / out.scale;
  out.translation = t.topRightCorner<3, 1>();
  return out;
}

double chamfer(const Mesh& pred, const ScanMesh& gt) {
  gt.validate();
  const TriangleBVH pred_bvh = pred_surface(pred);
  const TriangleBVH gt_bvh(gt.vertices, gt.triangles);
  const double fwd = directional_mean(pred.vertices, gt_bvh);
  const double bwd = directional_mean(gt.vertices, pred_bvh);
  return 0.5 * (fwd + bwd);
}

double mne(const Mesh& pred, const ScanMesh& gt) {
  gt.validate();
  if (!pred.topology || pred.topology->triangles.rows() == 0)
    throw validation_error("eval: predicted mesh has no triangles");

  Mesh shaded = pred.has_normals ? pred : vertex_normals(pred);
  const TriangleBVH gt_bvh(gt.vertices, gt.triangles);

  double sum = 0.0;
  for (int i = 0; i < shaded.vertices.rows(); ++i) {
    const Vec3 p = shaded.vertices.row(i).transpose();
    const ClosestHit hit = gt_bvh.closest(p);
    const Vec3 a = gt.vertices.row(gt.triangles(hit.tri, 0)).transpose();
    const Vec3 b = gt.vertices.row(gt.triangles(hit.tri, 1)).transpose();
    const Vec3 c = gt.vertices.row(gt.triangles(hit.tri, 2)).transpose();
    const Vec3 cross = (b - a).cross(c - a);
    const double len = cross.norm();
    if (len == 0.0) continue;  // degenerate gt face carries no normal
    const Vec3 n_gt = cross / len;
    const Vec3 n_pred = shaded.normals.row(i).transpose();
    const double d = std::clamp(n_pred.dot(n_gt), -1.0, 1.0);
    sum += std::acos(d);
  }
  return sum / shaded.vertices.rows();
}

ScanToMeshStats scan_to_mesh(const Mesh& pred, const ScanMesh& gt,
                             const SimilarityTransform& align) {
  gt.validate();
  Mesh aligned = pred;
  aligned.vertices = align.apply(pred.vertices);
  const TriangleBVH bvh = pred_surface(aligned);

  const Vec3 lo = aligned.vertices.colwise().minCoeff().transpose() -
                  Vec3::Constant(10.0);
  const Vec3 hi = aligned.vertices.colwise().maxCoeff().transpose() +
                  Vec3::Constant(10.0);

  ScanToMeshStats stats;
  std::vector<double> dists;
  dists.reserve(gt.vertices.rows());
  for (int i = 0; i < gt.vertices.rows(); ++i) {
    const Vec3 p = gt.vertices.row(i).transpose();
    if ((p.array() < lo.array()).any() || (p.array() > hi.array()).any()) {
      ++stats.excluded;
      continue;
    }
    dists.push_back(std::sqrt(bvh.closest(p).dist2));
  }
  if (dists.empty())
    throw validation_error("scan_to_mesh: no gt vertex overlaps the prediction");

  stats.used = static_cast<int>(dists.size());
  std::sort(dists.begin(), dists.end());
  const size_t n = dists.size();
  stats.median_mm = n % 2 ? dists[n / 2]
                          : 0.5 * (dists[n / 2 - 1] + dists[n / 2]);
  stats.mean_mm = std::accumulate(dists.begin(), dists.end(), 0.0) / n;
  double var = 0.0;
  for (double d : dists) var += (d - stats.mean_mm) * (d - stats.mean_mm);
  stats.std_mm = std::sqrt(var / n);
  return stats;
}

void MetricReport::validate() const {
  const double vals[] = {chamfer_mm, mne_rad,    s2m_median_mm,
                         s2m_mean_mm, s2m_std_mm};
  for (double v : vals)
    if (!(v >= 0.0) || !std::isfinite(v))
      throw validation_error("metric report values must be nonnegative");
  if (s2m_used < 0 || s2m_excluded < 0)
    throw validation_error("metric report counts must be nonnegative");
}

}  // namespace hface
