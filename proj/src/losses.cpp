#include "hface/losses.hpp"

namespace hface {

FaceMask FaceMask::from_grid(const Grid& g) {
  FaceMask m;
  m.width = g.width;
  m.height = g.height;
  m.face.assign(static_cast<size_t>(g.width) * g.height, 0);
  for (int y = 0; y < g.height; ++y)
    for (int x = 0; x < g.width; ++x)
      for (int c = 0; c < g.channels; ++c)
        if (g.at(x, y, c) != 0.0) {
          m.face[static_cast<size_t>(y) * g.width + x] = 1;
          break;
        }
  m.rebuild_edges();
  return m;
}

void FaceMask::rebuild_edges() { edges = contour_edge_points(*this); }

int FaceMask::count() const {
  int n = 0;
  for (uint8_t v : face) n += v != 0;
  return n;
}

EdgeTable contour_edge_points(const FaceMask& mask) {
  EdgeTable t;
  t.left.assign(mask.height, -1);
  t.right.assign(mask.height, -1);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x)
      if (mask.face[static_cast<size_t>(y) * mask.width + x] != 0) {
        if (t.left[y] < 0) t.left[y] = x;
        t.right[y] = x;
      }
  }
  return t;
}

void LossWeights::validate() const {
  const double ws[] = {w_photo, w_lan, w_con, w_tv, w_reg,
                       w_scan, w_mid, w_high, w_per, lambda_margin, delta_row};
  for (double w : ws)
    if (!(w >= 0.0) || !std::isfinite(w))
      throw validation_error("loss weights must be nonnegative and finite");
  if (!(epsilon > 0.0)) throw validation_error("epsilon must be positive");
}

PhotoLoss photometric_loss(const Image& rendered, const Image& target,
                           const FaceMask& mask) {
  if (rendered.width != target.width || rendered.height != target.height ||
      rendered.channels != 3 || target.channels != 3)
    throw validation_error("photometric_loss: image dimensions differ");
  if (rendered.width != mask.width || rendered.height != mask.height)
    throw validation_error("photometric_loss: mask dimensions differ");

  PhotoLoss out;
  out.rendered_bar = Image(rendered.width, rendered.height, 3, 0.0);
  const int n = mask.count();
  if (n == 0) {
    warn("photometric_loss: empty mask, loss defined as 0");
    out.empty_mask = true;
    return out;
  }

  double sum = 0.0;
  for (int y = 0; y < rendered.height; ++y)
    for (int x = 0; x < rendered.width; ++x) {
      if (!mask.at(x, y)) continue;
      double d[3], norm2 = 0.0;
      for (int c = 0; c < 3; ++c) {
        d[c] = rendered.at(x, y, c) - target.at(x, y, c);
        norm2 += d[c] * d[c];
      }
      const double norm = std::sqrt(norm2);
      sum += norm;
      if (norm > 0.0)
        for (int c = 0; c < 3; ++c)
          out.rendered_bar.at(x, y, c) = d[c] / (norm * n);
    }
  out.value = sum / n;
  return out;
}

LandmarkLoss landmark_loss(const FaceParams& params, const Mesh& mesh,
                           const std::vector<Vec2>& target_lm,
                           const VecX& weights) {
  const std::vector<int>& lm = mesh.topology->landmarks68;
  const int n = static_cast<int>(lm.size());
  if (static_cast<int>(target_lm.size()) != n)
    throw validation_error("landmark_loss: target count differs from model landmarks");
  if (static_cast<int>(weights.size()) != n)
    throw validation_error("landmark_loss: weight count differs from landmarks");
  for (const Vec2& t : target_lm)
    if (!t.allFinite()) throw validation_error("landmark_loss: target not finite");

  Vertices pts(n, 3);
  for (int i = 0; i < n; ++i) pts.row(i) = mesh.vertices.row(lm[i]);
  const ProjectedPoints proj = project(params, pts);

  LandmarkLoss out;
  out.screen_bar.assign(n, Vec2::Zero());
  out.included.assign(n, 0);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    if (!proj.valid[i]) {
      ++out.num_skipped;
      continue;
    }
    out.included[i] = 1;
    ++out.num_included;
    const Vec2 d = proj.pixel[i] - target_lm[i];
    sum += weights[i] * d.squaredNorm();
    out.screen_bar[i] = 2.0 * weights[i] * d;
  }
  if (out.num_skipped > 0)
    warn("landmark_loss: " + std::to_string(out.num_skipped) +
         " landmark(s) project behind the near plane, skipped");
  if (out.num_included == 0) return out;
  out.value = sum / out.num_included;
  for (Vec2& b : out.screen_bar) b /= out.num_included;
  return out;
}

namespace {

// f, df/dx at a projected x given the two edge-point centers of the row.
// l = lx - x, r = rx - x; g = l*r / max(|l|,|r|); f = |relu(g + margin) -
// margin| which is |g| for g > -margin and the constant margin below it.
void contour_term(double x, double left_center, double right_center,
                  double margin, double* f, double* dfdx) {
  const double l = left_center - x;
  const double r = right_center - x;
  const double al = std::abs(l), ar = std::abs(r);
  const double m = std::max(al, ar);
  *f = 0.0;
  *dfdx = 0.0;
  if (m == 0.0) return;  // on an edge point: 0 by convention

  const double g = l * r / m;
  // d(l)/dx = d(r)/dx = -1; the max picks one magnitude's sign.
  const double dm = al >= ar ? -(l >= 0.0 ? 1.0 : -1.0)
                             : -(r >= 0.0 ? 1.0 : -1.0);
  const double dg = (-(l + r) * m - l * r * dm) / (m * m);
  if (g + margin > 0.0) {
    *f = std::abs(g);
    if (g > 0.0)
      *dfdx = dg;
    else if (g < 0.0)
      *dfdx = -dg;
  } else {
    *f = margin;  // deep interior: constant, no pull
  }
}

}  // namespace

ContourLoss contour_loss(const Mesh& m1, const FaceParams& params,
                         const EdgeTable& edges,
                         const std::vector<int>& lower_face,
                         double lambda_margin, double delta_row) {
  const int n = static_cast<int>(lower_face.size());
  ContourLoss out;
  out.screen_bar.assign(n, Vec2::Zero());
  if (n == 0) return out;

  Vertices pts(n, 3);
  for (int i = 0; i < n; ++i) pts.row(i) = m1.vertices.row(lower_face[i]);
  const ProjectedPoints proj = project(params, pts);
  const int rows = static_cast<int>(edges.left.size());

  double sum = 0.0;
  std::vector<double> dfdx(n, 0.0);
  std::vector<int> term(n, -1);
  for (int i = 0; i < n; ++i) {
    if (!proj.valid[i]) continue;
    const double y = proj.pixel[i].y();
    if (!(y > delta_row)) continue;
    const int row = static_cast<int>(std::floor(y));
    if (row < 0 || row >= rows || edges.left[row] < 0) continue;
    double f = 0.0, d = 0.0;
    contour_term(proj.pixel[i].x(), edges.left[row] + 0.5,
                 edges.right[row] + 0.5, lambda_margin, &f, &d);
    sum += f;
    dfdx[i] = d;
    term[i] = row;
    ++out.num_included;
  }
  if (out.num_included == 0) return out;
  out.value = sum / out.num_included;
  for (int i = 0; i < n; ++i)
    if (term[i] >= 0) out.screen_bar[i].x() = dfdx[i] / out.num_included;
  return out;
}

GridLoss tv_loss(const Grid& g) {
  GridLoss out;
  out.grad = Grid(g.width, g.height, g.channels, 0.0);
  const double norm = static_cast<double>(g.width) * g.height * g.channels;
  double sum = 0.0;
  for (int j = 0; j < g.height; ++j)
    for (int i = 0; i < g.width; ++i)
      for (int c = 0; c < g.channels; ++c) {
        if (i + 1 < g.width) {
          const double d = g.at(i + 1, j, c) - g.at(i, j, c);
          sum += std::abs(d);
          if (d != 0.0) {
            const double s = (d > 0.0 ? 1.0 : -1.0) / norm;
            out.grad.at(i + 1, j, c) += s;
            out.grad.at(i, j, c) -= s;
          }
        }
        if (j + 1 < g.height) {
          const double d = g.at(i, j + 1, c) - g.at(i, j, c);
          sum += std::abs(d);
          if (d != 0.0) {
            const double s = (d > 0.0 ? 1.0 : -1.0) / norm;
            out.grad.at(i, j + 1, c) += s;
            out.grad.at(i, j, c) -= s;
          }
        }
      }
  out.value = sum / norm;
  return out;
}

GridLoss tv_loss(const DeformationMap& dfm) {
  dfm.validate();
  return tv_loss(dfm.data);
}

GridLoss l1_reg(const DisplacementMap& dpm) {
  dpm.validate();
  const Grid& g = dpm.data;
  GridLoss out;
  out.grad = Grid(g.width, g.height, g.channels, 0.0);
  const double norm = static_cast<double>(g.size());
  double sum = 0.0;
  for (int k = 0; k < g.size(); ++k) {
    const double v = g.data[k];
    sum += std::abs(v);
    if (v != 0.0) out.grad.data[k] = (v > 0.0 ? 1.0 : -1.0) / norm;
  }
  out.value = sum / norm;
  return out;
}

GridLoss detail_supervision_loss(const Grid& pred, const Grid& gt,
                                 const Grid& mask_uv) {
  if (pred.width != gt.width || pred.height != gt.height ||
      pred.channels != gt.channels)
    throw validation_error("detail_supervision_loss: map dimensions differ");
  if (mask_uv.width != pred.width || mask_uv.height != pred.height ||
      mask_uv.channels != 1)
    throw validation_error("detail_supervision_loss: mask dimensions differ");

  GridLoss out;
  out.grad = Grid(pred.width, pred.height, pred.channels, 0.0);
  int masked = 0;
  for (int j = 0; j < pred.height; ++j)
    for (int i = 0; i < pred.width; ++i) masked += mask_uv.at(i, j, 0) != 0.0;
  if (masked == 0) {
    warn("detail_supervision_loss: empty mask, loss defined as 0");
    out.empty_mask = true;
    return out;
  }

  const double norm = static_cast<double>(masked) * pred.channels;
  double sum = 0.0;
  for (int j = 0; j < pred.height; ++j)
    for (int i = 0; i < pred.width; ++i) {
      if (mask_uv.at(i, j, 0) == 0.0) continue;
      for (int c = 0; c < pred.channels; ++c) {
        const double d = pred.at(i, j, c) - gt.at(i, j, c);
        sum += std::abs(d);
        if (d != 0.0) out.grad.at(i, j, c) = (d > 0.0 ? 1.0 : -1.0) / norm;
      }
    }
  out.value = sum / norm;
  return out;
}

ScanVertexLoss scan_vertex_loss(const Mesh& mesh, const TriangleBVH& scan,
                                double cutoff_mm) {
  if (scan.empty()) throw validation_error("scan_vertex_loss: empty scan");
  const int n = mesh.num_vertices();
  ScanVertexLoss out;
  out.vertex_bar = Vertices::Zero(n, 3);

  double sum = 0.0;
  std::vector<Vec3> diff(n, Vec3::Zero());
  std::vector<uint8_t> hit(n, 0);
  for (int i = 0; i < n; ++i) {
    const Vec3 p = mesh.vertices.row(i).transpose();
    const ClosestHit h = scan.closest_within(p, cutoff_mm);
    if (h.tri < 0) {
      ++out.num_excluded;
      continue;
    }
    ++out.num_included;
    hit[i] = 1;
    diff[i] = p - h.point;
    sum += h.dist2;
  }
  if (out.num_included == 0) return out;
  out.value = sum / out.num_included;
  for (int i = 0; i < n; ++i)
    if (hit[i])
      out.vertex_bar.row(i) = (2.0 / out.num_included) * diff[i].transpose();
  return out;
}

ScanVertexLoss scan_vertex_loss(const Mesh& mesh, const ScanMesh& scan,
                                double cutoff_mm) {
  scan.validate();
  return scan_vertex_loss(mesh, TriangleBVH(scan.vertices, scan.triangles),
                          cutoff_mm);
}

}  // namespace hface
