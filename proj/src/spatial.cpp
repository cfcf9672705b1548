#include "hface/spatial.hpp"

#include <algorithm>
#include <limits>

namespace hface {

void ScanMesh::validate() const {
  if (vertices.rows() == 0) throw validation_error("scan has no vertices");
  if (triangles.rows() == 0) throw validation_error("scan has no triangles");
  if (!vertices.allFinite()) throw validation_error("scan vertices not finite");
  const int n = static_cast<int>(vertices.rows());
  for (int t = 0; t < triangles.rows(); ++t)
    for (int k = 0; k < 3; ++k) {
      const int v = triangles(t, k);
      if (v < 0 || v >= n) throw validation_error("scan triangle index out of range");
    }
  if (landmarks7.rows() != 0 && landmarks7.rows() != 7)
    throw validation_error("scan landmarks must have 7 rows when present");
  if (landmarks7.rows() == 7 && !landmarks7.allFinite())
    throw validation_error("scan landmarks not finite");
}

Vec3 closest_point_triangle(const Vec3& p, const Vec3& a, const Vec3& b,
                            const Vec3& c) {
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return a;  // vertex region A

  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return b;  // vertex region B

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {  // edge region AB
    const double v = d1 / (d1 - d3);
    return a + v * ab;
  }

  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return c;  // vertex region C

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {  // edge region AC
    const double w = d2 / (d2 - d6);
    return a + w * ac;
  }

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {  // edge region BC
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return b + w * (c - b);
  }

  const double denom = va + vb + vc;  // interior
  const double v = vb / denom, w = vc / denom;
  return a + v * ab + w * ac;
}

TriangleBVH::TriangleBVH(const Vertices& verts, const Triangles& tris)
    : verts_(verts), tris_(tris) {
  const int t = static_cast<int>(tris.rows());
  if (t == 0) return;
  order_.resize(t);
  std::vector<Vec3> centroids(t);
  for (int i = 0; i < t; ++i) {
    order_[i] = i;
    centroids[i] = (verts_.row(tris_(i, 0)) + verts_.row(tris_(i, 1)) +
                    verts_.row(tris_(i, 2))).transpose() / 3.0;
  }
  nodes_.reserve(static_cast<size_t>(2 * t));
  build(0, t, centroids);
}

int TriangleBVH::build(int begin, int end, std::vector<Vec3>& centroids) {
  const int idx = static_cast<int>(nodes_.size());
  nodes_.emplace_back();

  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  Vec3 clo = lo, chi = hi;
  for (int i = begin; i < end; ++i) {
    const int t = order_[i];
    for (int k = 0; k < 3; ++k) {
      const Vec3 v = verts_.row(tris_(t, k)).transpose();
      lo = lo.cwiseMin(v);
      hi = hi.cwiseMax(v);
    }
    clo = clo.cwiseMin(centroids[t]);
    chi = chi.cwiseMax(centroids[t]);
  }
  nodes_[idx].lo = lo;
  nodes_[idx].hi = hi;

  const int count = end - begin;
  if (count <= 4) {
    nodes_[idx].begin = begin;
    nodes_[idx].count = count;
    return idx;
  }

  int axis = 0;
  (chi - clo).maxCoeff(&axis);
  std::sort(order_.begin() + begin, order_.begin() + end, [&](int a, int b) {
    const double ca = centroids[a][axis], cb = centroids[b][axis];
    return ca != cb ? ca < cb : a < b;
  });
  const int mid = begin + count / 2;
  const int left = build(begin, mid, centroids);
  const int right = build(mid, end, centroids);
  nodes_[idx].left = left;
  nodes_[idx].right = right;
  return idx;
}

namespace {

double box_dist2(const Vec3& p, const Vec3& lo, const Vec3& hi) {
  double d2 = 0.0;
  for (int k = 0; k < 3; ++k) {
    const double d = std::max({lo[k] - p[k], 0.0, p[k] - hi[k]});
    d2 += d * d;
  }
  return d2;
}

}  // namespace

void TriangleBVH::search(int node, const Vec3& p, ClosestHit* best) const {
  const Node& n = nodes_[node];
  if (n.count > 0) {
    for (int i = n.begin; i < n.begin + n.count; ++i) {
      const int t = order_[i];
      const Vec3 q = closest_point_triangle(
          p, verts_.row(tris_(t, 0)).transpose(),
          verts_.row(tris_(t, 1)).transpose(),
          verts_.row(tris_(t, 2)).transpose());
      const double d2 = (p - q).squaredNorm();
      if (d2 < best->dist2) {
        best->dist2 = d2;
        best->point = q;
        best->tri = t;
      }
    }
    return;
  }
  const double dl = box_dist2(p, nodes_[n.left].lo, nodes_[n.left].hi);
  const double dr = box_dist2(p, nodes_[n.right].lo, nodes_[n.right].hi);
  const int first = dl <= dr ? n.left : n.right;
  const int second = dl <= dr ? n.right : n.left;
  const double dfirst = std::min(dl, dr), dsecond = std::max(dl, dr);
  if (dfirst < best->dist2) search(first, p, best);
  if (dsecond < best->dist2) search(second, p, best);
}

ClosestHit TriangleBVH::closest(const Vec3& p) const {
  if (empty()) throw validation_error("closest query on empty BVH");
  ClosestHit best;
  best.dist2 = std::numeric_limits<double>::infinity();
  search(0, p, &best);
  return best;
}

ClosestHit TriangleBVH::closest_within(const Vec3& p, double max_dist) const {
  ClosestHit best;
  best.dist2 = max_dist * max_dist;
  if (!empty()) search(0, p, &best);
  if (best.tri < 0) best.dist2 = 0.0;
  return best;
}

}  // namespace hface
