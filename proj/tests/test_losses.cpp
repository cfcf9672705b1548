#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hface/losses.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

using namespace hface;

namespace {

// Minimal mesh whose first n vertices double as the 68 landmarks / the
// lower-face set; pose is identity so pixel = (cx + f*x/z, cy + f*y/z).
std::shared_ptr<Topology> point_topology(int n) {
  auto topo = std::make_shared<Topology>();
  topo->uv = UVCoords::Zero(n, 2);
  for (int i = 0; i < std::min(n, 68); ++i) topo->landmarks68.push_back(i);
  return topo;
}

FaceParams identity_params() {
  FaceParams p;
  p.alpha = VecX::Zero(1);
  p.beta = VecX::Zero(1);
  p.gamma = VecX::Zero(1);
  return p;  // default 224x224 camera, f=1015, c=(112,112), near 1mm
}

// Model-space position that projects exactly to pixel (px, py) at depth z.
Vec3 point_for_pixel(const CameraIntrinsics& cam, double px, double py,
                     double z) {
  return {(px - cam.cx) * z / cam.focal, (py - cam.cy) * z / cam.focal, z};
}

// Strip mask: rows [y0, y1) have face pixels in columns [x0, x1].
FaceMask strip_mask(int w, int h, int y0, int y1, int x0, int x1) {
  FaceMask m(w, h);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x <= x1; ++x) m.set(x, y, true);
  m.rebuild_edges();
  return m;
}

// Direct evaluation of the contour residual for one projected x.
double contour_f_ref(double x, double left_center, double right_center,
                     double lambda) {
  const double l = left_center - x, r = right_center - x;
  const double m = std::max(std::abs(l), std::abs(r));
  if (m == 0.0) return 0.0;
  const double relu = std::max(0.0, l * r / m + lambda);
  return std::abs(relu - lambda);
}

// Independent point-to-triangle distance: plane foot if its barycentrics are
// nonnegative, otherwise the closest of the three point-to-segment distances.
double point_triangle_dist_ref(const Vec3& p, const Vec3& a, const Vec3& b,
                               const Vec3& c) {
  const Vec3 n = (b - a).cross(c - a);
  const double n2 = n.squaredNorm();
  if (n2 > 0.0) {
    const Vec3 foot = p - n * n.dot(p - a) / n2;
    const Vec3 w = foot - a;
    const Vec3 e0 = b - a, e1 = c - a;
    const double d00 = e0.dot(e0), d01 = e0.dot(e1), d11 = e1.dot(e1);
    const double det = d00 * d11 - d01 * d01;
    const double v = (d11 * e0.dot(w) - d01 * e1.dot(w)) / det;
    const double u = (d00 * e1.dot(w) - d01 * e0.dot(w)) / det;
    if (v >= 0.0 && u >= 0.0 && v + u <= 1.0) return (p - foot).norm();
  }
  auto seg = [&](const Vec3& s, const Vec3& e) {
    const Vec3 d = e - s;
    const double t = d.squaredNorm() > 0.0
                         ? std::clamp(d.dot(p - s) / d.squaredNorm(), 0.0, 1.0)
                         : 0.0;
    return (p - (s + t * d)).norm();
  };
  return std::min({seg(a, b), seg(b, c), seg(c, a)});
}

// Regular grid plane at height z spanning [-extent, extent]^2.
ScanMesh plane_scan(int side, double extent, double z) {
  ScanMesh s;
  s.vertices.resize(side * side, 3);
  for (int j = 0; j < side; ++j)
    for (int i = 0; i < side; ++i) {
      const double x = -extent + 2.0 * extent * i / (side - 1);
      const double y = -extent + 2.0 * extent * j / (side - 1);
      s.vertices.row(j * side + i) << x, y, z;
    }
  s.triangles.resize(2 * (side - 1) * (side - 1), 3);
  int t = 0;
  for (int j = 0; j + 1 < side; ++j)
    for (int i = 0; i + 1 < side; ++i) {
      const int v00 = j * side + i, v10 = v00 + 1;
      const int v01 = v00 + side, v11 = v01 + 1;
      s.triangles.row(t++) << v00, v10, v11;
      s.triangles.row(t++) << v00, v11, v01;
    }
  return s;
}

ScanMesh random_blob(uint64_t seed, int n_verts, int n_tris, double scale) {
  Rng rng(seed);
  ScanMesh s;
  s.vertices.resize(n_verts, 3);
  for (int i = 0; i < n_verts; ++i)
    s.vertices.row(i) << scale * rng.normal(), scale * rng.normal(),
        scale * rng.normal();
  s.triangles.resize(n_tris, 3);
  for (int t = 0; t < n_tris; ++t) {
    int a = rng.uniform_int(0, n_verts - 1);
    int b = rng.uniform_int(0, n_verts - 1);
    int c = rng.uniform_int(0, n_verts - 1);
    while (b == a) b = rng.uniform_int(0, n_verts - 1);
    while (c == a || c == b) c = rng.uniform_int(0, n_verts - 1);
    s.triangles.row(t) << a, b, c;
  }
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// photometric_loss
// ---------------------------------------------------------------------------

TEST_CASE("photometric: zero when images agree") {
  Rng rng(71);
  Image a(9, 7, 3);
  for (double& v : a.data) v = rng.uniform();
  FaceMask mask = strip_mask(9, 7, 1, 6, 2, 7);
  const PhotoLoss l = photometric_loss(a, a, mask);
  CHECK(l.value == 0.0);
  CHECK(!l.empty_mask);
  for (double v : l.rendered_bar.data) CHECK(v == 0.0);
}

TEST_CASE("photometric: constant difference gives sqrt(3)*|d|") {
  const double d = -0.137;
  Image a(12, 10, 3, 0.4), b(12, 10, 3, 0.4 - d);
  FaceMask mask = strip_mask(12, 10, 2, 9, 3, 8);
  const PhotoLoss l = photometric_loss(a, b, mask);
  CHECK(l.value == doctest::Approx(std::sqrt(3.0) * std::abs(d)).epsilon(1e-12));
}

TEST_CASE("photometric: mask-monotone to an agreeing subset") {
  Image a(8, 8, 3, 0.2), b(8, 8, 3, 0.2);
  // Disagreement only outside the shrunken mask.
  b.at(1, 1, 0) = 0.9;
  FaceMask big = strip_mask(8, 8, 0, 8, 0, 7);
  FaceMask sub = strip_mask(8, 8, 3, 6, 3, 6);
  CHECK(photometric_loss(a, b, big).value > 0.0);
  CHECK(photometric_loss(a, b, sub).value == 0.0);
}

TEST_CASE("photometric: empty mask is 0 and flagged") {
  Image a(4, 4, 3, 0.1), b(4, 4, 3, 0.9);
  FaceMask mask(4, 4);
  const PhotoLoss l = photometric_loss(a, b, mask);
  CHECK(l.value == 0.0);
  CHECK(l.empty_mask);
}

TEST_CASE("photometric: mean over masked pixels matches direct summation") {
  Rng rng(72);
  Image a(15, 11, 3), b(15, 11, 3);
  for (double& v : a.data) v = rng.uniform();
  for (double& v : b.data) v = rng.uniform();
  FaceMask mask(15, 11);
  for (int y = 0; y < 11; ++y)
    for (int x = 0; x < 15; ++x) mask.set(x, y, rng.uniform() < 0.5);
  mask.rebuild_edges();

  double sum = 0.0;
  int n = 0;
  for (int y = 0; y < 11; ++y)
    for (int x = 0; x < 15; ++x) {
      if (!mask.at(x, y)) continue;
      double s2 = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double d = a.at(x, y, c) - b.at(x, y, c);
        s2 += d * d;
      }
      sum += std::sqrt(s2);
      ++n;
    }
  const PhotoLoss l = photometric_loss(a, b, mask);
  CHECK(l.value == doctest::Approx(sum / n).epsilon(1e-12));
}

TEST_CASE("photometric: gradient matches central differences") {
  Rng rng(73);
  Image a(10, 9, 3), b(10, 9, 3);
  for (double& v : a.data) v = rng.uniform(0.1, 0.9);
  for (double& v : b.data) v = rng.uniform(0.1, 0.9);
  FaceMask mask = strip_mask(10, 9, 1, 8, 1, 8);
  const PhotoLoss l = photometric_loss(a, b, mask);

  const double h = 1e-6;
  for (int trial = 0; trial < 30; ++trial) {
    const int x = rng.uniform_int(0, 9), y = rng.uniform_int(0, 8);
    const int c = rng.uniform_int(0, 2);
    Image ap = a, am = a;
    ap.at(x, y, c) += h;
    am.at(x, y, c) -= h;
    const double fd = (photometric_loss(ap, b, mask).value -
                       photometric_loss(am, b, mask).value) /
                      (2.0 * h);
    CHECK(l.rendered_bar.at(x, y, c) == doctest::Approx(fd).epsilon(1e-4));
  }
}

// ---------------------------------------------------------------------------
// landmark_loss
// ---------------------------------------------------------------------------

TEST_CASE("landmark: zero at the targets, 25/68 for one (3,4) offset") {
  Rng rng(74);
  Mesh mesh;
  mesh.topology = point_topology(68);
  mesh.vertices.resize(68, 3);
  FaceParams p = identity_params();
  for (int i = 0; i < 68; ++i)
    mesh.vertices.row(i) = point_for_pixel(p.camera, rng.uniform(20, 200),
                                           rng.uniform(20, 200),
                                           rng.uniform(300, 500))
                               .transpose();

  const ProjectedPoints proj = project(p, mesh.vertices);
  std::vector<Vec2> targets(68);
  for (int i = 0; i < 68; ++i) targets[i] = proj.pixel[i];
  const VecX w = VecX::Ones(68);

  CHECK(landmark_loss(p, mesh, targets, w).value == 0.0);

  targets[13] += Vec2(3.0, 4.0);
  const LandmarkLoss l = landmark_loss(p, mesh, targets, w);
  CHECK(l.value == doctest::Approx(25.0 / 68.0).epsilon(1e-12));
  CHECK(l.num_included == 68);

  // Linearity in the weights.
  const LandmarkLoss l2 = landmark_loss(p, mesh, targets, 2.0 * w);
  CHECK(l2.value == doctest::Approx(2.0 * l.value).epsilon(1e-12));
}

TEST_CASE("landmark: invalid projections are skipped and flagged") {
  Mesh mesh;
  mesh.topology = point_topology(68);
  mesh.vertices.resize(68, 3);
  FaceParams p = identity_params();
  for (int i = 0; i < 68; ++i)
    mesh.vertices.row(i) = point_for_pixel(p.camera, 50.0 + i, 80.0, 400.0)
                               .transpose();
  mesh.vertices(7, 2) = -50.0;  // behind the near plane

  std::vector<Vec2> targets(68, Vec2(60.0, 80.0));
  const LandmarkLoss l = landmark_loss(p, mesh, targets, VecX::Ones(68));
  CHECK(l.num_skipped == 1);
  CHECK(l.num_included == 67);
  CHECK(!l.included[7]);
  CHECK(l.screen_bar[7] == Vec2::Zero());

  // The mean runs over the 67 included landmarks.
  double sum = 0.0;
  const ProjectedPoints proj = project(p, mesh.vertices);
  for (int i = 0; i < 68; ++i) {
    if (i == 7) continue;
    sum += (proj.pixel[i] - targets[i]).squaredNorm();
  }
  CHECK(l.value == doctest::Approx(sum / 67.0).epsilon(1e-12));
}

TEST_CASE("landmark: screen adjoint is minus d(loss)/d(target)") {
  Rng rng(75);
  Mesh mesh;
  mesh.topology = point_topology(68);
  mesh.vertices.resize(68, 3);
  FaceParams p = identity_params();
  for (int i = 0; i < 68; ++i)
    mesh.vertices.row(i) = point_for_pixel(p.camera, rng.uniform(30, 190),
                                           rng.uniform(30, 190),
                                           rng.uniform(350, 450))
                               .transpose();
  std::vector<Vec2> targets(68);
  for (int i = 0; i < 68; ++i)
    targets[i] = Vec2(rng.uniform(30, 190), rng.uniform(30, 190));
  VecX w(68);
  for (int i = 0; i < 68; ++i) w[i] = rng.uniform(0.5, 2.0);

  const LandmarkLoss l = landmark_loss(p, mesh, targets, w);
  const double h = 1e-6;
  for (int trial = 0; trial < 12; ++trial) {
    const int i = rng.uniform_int(0, 67);
    const int axis = rng.uniform_int(0, 1);
    auto tp = targets, tm = targets;
    tp[i][axis] += h;
    tm[i][axis] -= h;
    const double fd = (landmark_loss(p, mesh, tp, w).value -
                       landmark_loss(p, mesh, tm, w).value) /
                      (2.0 * h);
    CHECK(-l.screen_bar[i][axis] == doctest::Approx(fd).epsilon(1e-6));
  }
}

// ---------------------------------------------------------------------------
// contour_edge_points
// ---------------------------------------------------------------------------

TEST_CASE("contour edges: full rows, empty rows, random vs linear scan") {
  FaceMask m(16, 5);
  for (int x = 0; x < 16; ++x) m.set(x, 1, true);  // full-width row
  m.set(4, 3, true);
  m.set(9, 3, true);
  m.rebuild_edges();
  CHECK(m.edges.left[1] == 0);
  CHECK(m.edges.right[1] == 15);
  CHECK(m.edges.left[0] == -1);
  CHECK(m.edges.right[0] == -1);
  CHECK(m.edges.left[3] == 4);
  CHECK(m.edges.right[3] == 9);

  Rng rng(76);
  FaceMask r(33, 21);
  for (int y = 0; y < 21; ++y)
    for (int x = 0; x < 33; ++x) r.set(x, y, rng.uniform() < 0.3);
  r.rebuild_edges();
  const EdgeTable t = contour_edge_points(r);
  for (int y = 0; y < 21; ++y) {
    int lo = -1, hi = -1;
    for (int x = 0; x < 33; ++x)
      if (r.at(x, y)) {
        if (lo < 0) lo = x;
        hi = x;
      }
    CHECK(t.left[y] == lo);
    CHECK(t.right[y] == hi);
    CHECK(r.edges.left[y] == lo);
    CHECK(r.edges.right[y] == hi);
  }
}

// ---------------------------------------------------------------------------
// contour_loss
// ---------------------------------------------------------------------------

namespace {

// One lower-face vertex projecting exactly to (px, py) at depth z.
struct ContourScene {
  Mesh mesh;
  FaceParams params;
  std::vector<int> lower;
};
ContourScene one_vertex_scene(double px, double py, double z = 400.0) {
  ContourScene s;
  s.params = identity_params();
  s.mesh.topology = point_topology(1);
  s.mesh.vertices.resize(1, 3);
  s.mesh.vertices.row(0) = point_for_pixel(s.params.camera, px, py, z).transpose();
  s.lower = {0};
  return s;
}

}  // namespace

TEST_CASE("contour: vertex on the contour contributes zero") {
  // Face occupies columns 40..120 in every row below delta.
  FaceMask mask = strip_mask(224, 224, 0, 224, 40, 120);
  ContourScene s = one_vertex_scene(40.5, 150.5);  // exactly the left center
  const ContourLoss l =
      contour_loss(s.mesh, s.params, mask.edges, s.lower, 0.01, 100.0);
  CHECK(l.num_included == 1);
  CHECK(l.value == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("contour: deep interior locks at lambda with zero gradient") {
  FaceMask mask = strip_mask(224, 224, 0, 224, 10, 210);
  ContourScene s = one_vertex_scene(110.25, 180.5);  // mid-face
  const ContourLoss l =
      contour_loss(s.mesh, s.params, mask.edges, s.lower, 0.01, 100.0);
  CHECK(l.num_included == 1);
  CHECK(l.value == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(l.screen_bar[0].x() == 0.0);
  CHECK(l.screen_bar[0].y() == 0.0);
}

TEST_CASE("contour: outside point with offsets (3,10) evaluates to 3") {
  // Row edges at columns 10 and 17; projected x = 7.5 so l = 3, r = 10.
  FaceMask mask = strip_mask(224, 224, 0, 224, 10, 17);
  ContourScene s = one_vertex_scene(7.5, 140.5);
  const ContourLoss l =
      contour_loss(s.mesh, s.params, mask.edges, s.lower, 0.01, 100.0);
  CHECK(l.num_included == 1);
  CHECK(l.value == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("contour: vertex exactly on a single-pixel row is zero by convention") {
  FaceMask mask(224, 224);
  for (int y = 0; y < 224; ++y) mask.set(77, y, true);  // one-column face
  mask.rebuild_edges();
  ContourScene s = one_vertex_scene(77.5, 160.5);  // l = r = 0
  const ContourLoss l =
      contour_loss(s.mesh, s.params, mask.edges, s.lower, 0.01, 100.0);
  CHECK(l.num_included == 1);
  CHECK(l.value == 0.0);
  CHECK(l.screen_bar[0] == Vec2::Zero());
}

TEST_CASE("contour: rows at or above delta and rows without face are excluded") {
  FaceMask mask = strip_mask(224, 224, 120, 224, 40, 120);  // face below row 120
  ContourScene s = one_vertex_scene(30.5, 90.5);            // above delta
  s.mesh.vertices.conservativeResize(3, 3);
  s.mesh.vertices.row(1) =
      point_for_pixel(s.params.camera, 30.5, 110.5, 400.0).transpose();
  // Included: row 160 has edges.
  s.mesh.vertices.row(2) =
      point_for_pixel(s.params.camera, 30.5, 160.5, 400.0).transpose();
  s.lower = {0, 1, 2};

  const ContourLoss l =
      contour_loss(s.mesh, s.params, mask.edges, s.lower, 0.01, 100.0);
  CHECK(l.num_included == 1);  // vertex 0 fails y > delta; vertex 1's row is empty
  CHECK(l.screen_bar[0] == Vec2::Zero());
  CHECK(l.screen_bar[1] == Vec2::Zero());
  CHECK(l.value ==
        doctest::Approx(contour_f_ref(30.5, 40.5, 120.5, 0.01)).epsilon(1e-12));
}

TEST_CASE("contour: gradient matches finite differences on translation") {
  FaceMask mask = strip_mask(224, 224, 0, 224, 60, 150);
  ContourScene s = one_vertex_scene(0, 0);
  s.mesh.vertices.conservativeResize(4, 3);
  const double z = 400.0;
  // One outside-left, one outside-right, one near each contour (off-center
  // within the pixel so the finite-difference step stays in one column).
  s.mesh.vertices.row(0) = point_for_pixel(s.params.camera, 44.3, 130.4, z).transpose();
  s.mesh.vertices.row(1) = point_for_pixel(s.params.camera, 171.8, 150.6, z).transpose();
  s.mesh.vertices.row(2) = point_for_pixel(s.params.camera, 63.7, 170.4, z).transpose();
  s.mesh.vertices.row(3) = point_for_pixel(s.params.camera, 146.2, 190.6, z).transpose();
  s.lower = {0, 1, 2, 3};

  const ContourLoss l =
      contour_loss(s.mesh, s.params, mask.edges, s.lower, 0.01, 100.0);
  CHECK(l.num_included == 4);

  // d(pixel x)/d(translation x) = f/z for every vertex.
  double analytic = 0.0;
  for (int i = 0; i < 4; ++i)
    analytic += l.screen_bar[i].x() * s.params.camera.focal / z;

  const double h = 1e-4;
  FaceParams pp = s.params, pm = s.params;
  pp.translation.x() += h;
  pm.translation.x() -= h;
  const double fd = (contour_loss(s.mesh, pp, mask.edges, s.lower, 0.01, 100.0).value -
                     contour_loss(s.mesh, pm, mask.edges, s.lower, 0.01, 100.0).value) /
                    (2.0 * h);
  CHECK(analytic == doctest::Approx(fd).epsilon(1e-6));
}

TEST_CASE("contour: invariant under simultaneous horizontal translation") {
  const int shift = 23;
  FaceMask mask = strip_mask(224, 224, 0, 224, 50, 130);
  FaceMask shifted = strip_mask(224, 224, 0, 224, 50 + shift, 130 + shift);

  ContourScene s = one_vertex_scene(0, 0);
  s.mesh.vertices.conservativeResize(3, 3);
  const double z = 380.0;
  s.mesh.vertices.row(0) = point_for_pixel(s.params.camera, 38.2, 140.5, z).transpose();
  s.mesh.vertices.row(1) = point_for_pixel(s.params.camera, 90.7, 155.5, z).transpose();
  s.mesh.vertices.row(2) = point_for_pixel(s.params.camera, 140.4, 200.5, z).transpose();
  s.lower = {0, 1, 2};

  const ContourLoss base =
      contour_loss(s.mesh, s.params, mask.edges, s.lower, 0.01, 100.0);

  // Shift every projection by exactly `shift` pixels: dx = shift * z / f.
  FaceParams moved = s.params;
  moved.translation.x() += shift * z / s.params.camera.focal;
  const ContourLoss trans =
      contour_loss(s.mesh, moved, shifted.edges, s.lower, 0.01, 100.0);

  CHECK(base.num_included == trans.num_included);
  CHECK(base.value == doctest::Approx(trans.value).epsilon(1e-9));
}

TEST_CASE("contour: strip profile is continuous, lambda inside, growing outside") {
  const double lambda = 0.01;
  const int x0 = 60, x1 = 150;
  FaceMask mask = strip_mask(224, 224, 0, 224, x0, x1);

  double prev = -1.0;
  const double step = 0.05;
  for (double x = x0 - 6.0; x <= x1 + 6.0; x += step) {
    ContourScene s = one_vertex_scene(x, 150.5);
    const double f =
        contour_loss(s.mesh, s.params, mask.edges, s.lower, lambda, 100.0).value;
    CHECK(f == doctest::Approx(contour_f_ref(x, x0 + 0.5, x1 + 0.5, lambda))
                   .epsilon(1e-9));
    if (prev >= 0.0) CHECK(std::abs(f - prev) < 3.0 * step);  // continuity
    prev = f;
  }

  // Anchors of the piecewise shape.
  ContourScene mid = one_vertex_scene(0.5 * (x0 + x1) + 0.3, 150.5);
  CHECK(contour_loss(mid.mesh, mid.params, mask.edges, mid.lower, lambda, 100.0)
            .value == doctest::Approx(lambda).epsilon(1e-12));
  ContourScene on = one_vertex_scene(x1 + 0.5, 150.5);
  CHECK(contour_loss(on.mesh, on.params, mask.edges, on.lower, lambda, 100.0)
            .value == doctest::Approx(0.0).epsilon(1e-12));
  ContourScene far_out = one_vertex_scene(x1 + 40.5, 150.5);
  ContourScene near_out = one_vertex_scene(x1 + 10.5, 150.5);
  CHECK(contour_loss(far_out.mesh, far_out.params, mask.edges, far_out.lower,
                     lambda, 100.0)
            .value > contour_loss(near_out.mesh, near_out.params, mask.edges,
                                  near_out.lower, lambda, 100.0)
                         .value);
}

// ---------------------------------------------------------------------------
// tv_loss / l1_reg / detail_supervision_loss
// ---------------------------------------------------------------------------

TEST_CASE("tv: constant map is zero; unit column step sums 64 terms") {
  DeformationMap flat(16);
  flat.data.fill(3.7);
  CHECK(tv_loss(flat).value == 0.0);

  Grid step(64, 64, 1, 0.0);
  for (int j = 0; j < 64; ++j)
    for (int i = 30; i < 64; ++i) step.at(i, j, 0) = 1.0;

  // Direct summation oracle.
  double direct = 0.0;
  for (int j = 0; j < 64; ++j)
    for (int i = 0; i + 1 < 64; ++i)
      direct += std::abs(step.at(i + 1, j, 0) - step.at(i, j, 0));
  CHECK(direct == 64.0);  // one unit edge term per row
  CHECK(tv_loss(step).value == doctest::Approx(64.0 / (64.0 * 64.0)).epsilon(1e-15));
}

TEST_CASE("tv: positive homogeneity and direct-summation oracle") {
  Rng rng(77);
  DeformationMap d(16);
  for (double& v : d.data.data) v = rng.normal();

  double direct = 0.0;
  for (int j = 0; j < 16; ++j)
    for (int i = 0; i < 16; ++i)
      for (int c = 0; c < 3; ++c) {
        if (i + 1 < 16)
          direct += std::abs(d.data.at(i + 1, j, c) - d.data.at(i, j, c));
        if (j + 1 < 16)
          direct += std::abs(d.data.at(i, j + 1, c) - d.data.at(i, j, c));
      }
  direct /= 16.0 * 16.0 * 3.0;
  const GridLoss l = tv_loss(d);
  CHECK(l.value == doctest::Approx(direct).epsilon(1e-12));

  DeformationMap scaled(16);
  for (int k = 0; k < d.data.size(); ++k)
    scaled.data.data[k] = -2.5 * d.data.data[k];
  CHECK(tv_loss(scaled).value == doctest::Approx(2.5 * l.value).epsilon(1e-12));
}

TEST_CASE("tv: gradient matches central differences") {
  Rng rng(78);
  DeformationMap d(8);
  for (double& v : d.data.data) v = rng.normal();
  const GridLoss l = tv_loss(d);

  const double h = 1e-6;
  for (int trial = 0; trial < 40; ++trial) {
    const int k = rng.uniform_int(0, d.data.size() - 1);
    DeformationMap dp = d, dm = d;
    dp.data.data[k] += h;
    dm.data.data[k] -= h;
    const double fd = (tv_loss(dp).value - tv_loss(dm).value) / (2.0 * h);
    CHECK(l.grad.data[k] == doctest::Approx(fd).epsilon(1e-5));
  }
}

TEST_CASE("l1: zero map, constant map, random oracle, gradient") {
  DisplacementMap zero(16);
  CHECK(l1_reg(zero).value == 0.0);

  DisplacementMap c(16);
  c.data.fill(0.1);
  CHECK(l1_reg(c).value == doctest::Approx(0.1).epsilon(1e-15));

  Rng rng(79);
  DisplacementMap r(16);
  for (double& v : r.data.data) v = rng.normal();
  double direct = 0.0;
  for (double v : r.data.data) direct += std::abs(v);
  direct /= r.data.size();
  const GridLoss l = l1_reg(r);
  CHECK(l.value == doctest::Approx(direct).epsilon(1e-12));

  const double h = 1e-6;
  for (int trial = 0; trial < 30; ++trial) {
    const int k = rng.uniform_int(0, r.data.size() - 1);
    DisplacementMap rp = r, rm = r;
    rp.data.data[k] += h;
    rm.data.data[k] -= h;
    const double fd = (l1_reg(rp).value - l1_reg(rm).value) / (2.0 * h);
    CHECK(l.grad.data[k] == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("detail supervision: identities, masked oracle, empty mask") {
  Rng rng(80);
  Grid pred(32, 32, 1), gt(32, 32, 1), mask(32, 32, 1, 1.0);
  for (double& v : pred.data) v = rng.normal();
  gt = pred;
  CHECK(detail_supervision_loss(pred, gt, mask).value == 0.0);

  for (double& v : gt.data) v += 0.5;
  CHECK(detail_supervision_loss(pred, gt, mask).value ==
        doctest::Approx(0.5).epsilon(1e-12));

  // Half mask vs direct masked mean.
  Grid half(32, 32, 1, 0.0);
  for (int j = 0; j < 32; ++j)
    for (int i = 0; i < 16; ++i) half.at(i, j, 0) = 1.0;
  for (double& v : gt.data) v = rng.normal();
  double direct = 0.0;
  int n = 0;
  for (int j = 0; j < 32; ++j)
    for (int i = 0; i < 16; ++i) {
      direct += std::abs(pred.at(i, j, 0) - gt.at(i, j, 0));
      ++n;
    }
  const GridLoss l = detail_supervision_loss(pred, gt, half);
  CHECK(l.value == doctest::Approx(direct / n).epsilon(1e-12));
  for (int j = 0; j < 32; ++j)
    for (int i = 16; i < 32; ++i) CHECK(l.grad.at(i, j, 0) == 0.0);

  Grid none(32, 32, 1, 0.0);
  const GridLoss e = detail_supervision_loss(pred, gt, none);
  CHECK(e.value == 0.0);
  CHECK(e.empty_mask);

  const double h = 1e-6;
  Rng rng2(81);
  for (int trial = 0; trial < 20; ++trial) {
    const int k = rng2.uniform_int(0, pred.size() - 1);
    Grid pp = pred, pm = pred;
    pp.data[k] += h;
    pm.data[k] -= h;
    const double fd = (detail_supervision_loss(pp, gt, half).value -
                       detail_supervision_loss(pm, gt, half).value) /
                      (2.0 * h);
    CHECK(l.grad.data[k] == doctest::Approx(fd).epsilon(1e-6));
  }
}

// ---------------------------------------------------------------------------
// closest-point queries and scan_vertex_loss
// ---------------------------------------------------------------------------

TEST_CASE("closest point on triangle matches the plane/segment oracle") {
  Rng rng(82);
  for (int trial = 0; trial < 500; ++trial) {
    Vec3 a(rng.normal(), rng.normal(), rng.normal());
    Vec3 b(rng.normal(), rng.normal(), rng.normal());
    Vec3 c(rng.normal(), rng.normal(), rng.normal());
    Vec3 p = 2.0 * Vec3(rng.normal(), rng.normal(), rng.normal());
    const Vec3 q = closest_point_triangle(p, a, b, c);
    const double d_ref = point_triangle_dist_ref(p, a, b, c);
    CHECK((p - q).norm() == doctest::Approx(d_ref).epsilon(1e-9));
  }
}

TEST_CASE("BVH nearest matches brute force on a 500-triangle soup") {
  const ScanMesh soup = random_blob(83, 160, 500, 10.0);
  const TriangleBVH bvh(soup.vertices, soup.triangles);
  Rng rng(84);
  for (int trial = 0; trial < 100; ++trial) {
    const Vec3 p(20.0 * rng.normal(), 20.0 * rng.normal(), 20.0 * rng.normal());
    const ClosestHit hit = bvh.closest(p);

    double best = std::numeric_limits<double>::infinity();
    Vec3 best_q = Vec3::Zero();
    for (int t = 0; t < soup.triangles.rows(); ++t) {
      const Vec3 q = closest_point_triangle(
          p, soup.vertices.row(soup.triangles(t, 0)).transpose(),
          soup.vertices.row(soup.triangles(t, 1)).transpose(),
          soup.vertices.row(soup.triangles(t, 2)).transpose());
      const double d2 = (p - q).squaredNorm();
      if (d2 < best) {
        best = d2;
        best_q = q;
      }
    }
    CHECK(hit.dist2 == doctest::Approx(best).epsilon(1e-9));
    CHECK((hit.point - best_q).norm() < 1e-9);
  }
}

TEST_CASE("scan loss: zero on itself, 4 mm^2 at 2 mm plane offset") {
  const ScanMesh scan = plane_scan(9, 100.0, 0.0);
  Mesh mesh;
  mesh.topology = point_topology(0);

  mesh.vertices = scan.vertices;
  CHECK(scan_vertex_loss(mesh, scan).value == doctest::Approx(0.0).epsilon(1e-18));

  // Offset plane kept well inside the scan footprint.
  const ScanMesh inner = plane_scan(7, 60.0, 2.0);
  mesh.vertices = inner.vertices;
  const ScanVertexLoss l = scan_vertex_loss(mesh, scan);
  CHECK(l.num_excluded == 0);
  CHECK(l.value == doctest::Approx(4.0).epsilon(1e-12));
  // Gradient: d(loss)/d(vertex) = 2*(p - q)/N along +z.
  for (int i = 0; i < mesh.vertices.rows(); ++i) {
    CHECK(l.vertex_bar(i, 2) ==
          doctest::Approx(2.0 * 2.0 / l.num_included).epsilon(1e-12));
    CHECK(std::abs(l.vertex_bar(i, 0)) < 1e-12);
  }
}

TEST_CASE("scan loss: surface distance never exceeds nearest-vertex distance") {
  const ScanMesh scan = random_blob(85, 120, 300, 8.0);
  const TriangleBVH bvh(scan.vertices, scan.triangles);
  Rng rng(86);
  for (int trial = 0; trial < 60; ++trial) {
    const Vec3 p(10.0 * rng.normal(), 10.0 * rng.normal(), 10.0 * rng.normal());
    double nearest_vertex = std::numeric_limits<double>::infinity();
    for (int v = 0; v < scan.vertices.rows(); ++v) {
      bool used = false;
      for (int t = 0; t < scan.triangles.rows() && !used; ++t)
        used = scan.triangles(t, 0) == v || scan.triangles(t, 1) == v ||
               scan.triangles(t, 2) == v;
      if (!used) continue;  // isolated vertices are not on the surface
      nearest_vertex = std::min(
          nearest_vertex, (p - scan.vertices.row(v).transpose()).squaredNorm());
    }
    CHECK(bvh.closest(p).dist2 <= nearest_vertex + 1e-12);
  }
}

TEST_CASE("scan loss: cutoff excludes far vertices and counts them") {
  const ScanMesh scan = plane_scan(9, 50.0, 0.0);
  Mesh mesh;
  mesh.topology = point_topology(0);
  mesh.vertices.resize(3, 3);
  mesh.vertices.row(0) << 0.0, 0.0, 3.0;    // included, 9 mm^2
  mesh.vertices.row(1) << 10.0, 5.0, 1.0;   // included, 1 mm^2
  mesh.vertices.row(2) << 0.0, 0.0, 50.0;   // beyond the 20 mm cutoff
  const ScanVertexLoss l = scan_vertex_loss(mesh, scan);
  CHECK(l.num_included == 2);
  CHECK(l.num_excluded == 1);
  CHECK(l.value == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(l.vertex_bar.row(2) == Eigen::RowVector3d::Zero());
}

TEST_CASE("scan loss: gradient matches central differences") {
  const ScanMesh scan = random_blob(87, 100, 260, 9.0);
  const TriangleBVH bvh(scan.vertices, scan.triangles);
  Mesh mesh;
  mesh.topology = point_topology(0);
  Rng rng(88);
  mesh.vertices.resize(12, 3);
  for (int i = 0; i < 12; ++i)
    mesh.vertices.row(i) << 6.0 * rng.normal(), 6.0 * rng.normal(),
        6.0 * rng.normal();

  const ScanVertexLoss l = scan_vertex_loss(mesh, bvh);
  const double h = 1e-5;
  for (int trial = 0; trial < 24; ++trial) {
    const int i = rng.uniform_int(0, 11);
    const int axis = rng.uniform_int(0, 2);
    Mesh mp = mesh, mm = mesh;
    mp.vertices(i, axis) += h;
    mm.vertices(i, axis) -= h;
    const double fd =
        (scan_vertex_loss(mp, bvh).value - scan_vertex_loss(mm, bvh).value) /
        (2.0 * h);
    // The squared distance to a surface has gradient 2*(p - q) even though
    // the foot point moves, so frozen correspondences still match FD.
    CHECK(l.vertex_bar(i, axis) == doctest::Approx(fd).epsilon(2e-4));
  }
}

TEST_CASE("loss weights validate") {
  LossWeights w;
  CHECK_NOTHROW(w.validate());
  w.w_photo = -0.5;
  CHECK_THROWS_AS(w.validate(), validation_error);
  w.w_photo = 1.0;
  w.epsilon = 0.0;
  CHECK_THROWS_AS(w.validate(), validation_error);
}
