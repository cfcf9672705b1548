#pragma once

#include "hface/mesh.hpp"

namespace hface {

// A raw triangle-soup scan: no UV atlas or semantic sets, optionally seven
// 3D landmark positions (same semantic order as Topology::landmarks7).
struct ScanMesh {
  Vertices vertices;    // N x 3, mm
  Triangles triangles;  // M x 3
  Vertices landmarks7;  // 7 x 3 when present, otherwise 0 rows

  bool has_landmarks() const { return landmarks7.rows() == 7; }
  void validate() const;  // finite, indices in range, nonempty
};

// Closest point on triangle (a, b, c) to p (Ericson's region test).
Vec3 closest_point_triangle(const Vec3& p, const Vec3& a, const Vec3& b,
                            const Vec3& c);

struct ClosestHit {
  Vec3 point = Vec3::Zero();  // closest surface point
  double dist2 = 0.0;         // squared distance, mm^2
  int tri = -1;               // -1 when nothing within the search radius
};

// Axis-aligned BVH over a triangle soup for nearest-surface-point queries.
// Construction is deterministic (median split on the widest centroid axis,
// ties broken by triangle id), so query results do not depend on thread
// count or platform.
class TriangleBVH {
 public:
  TriangleBVH() = default;
  TriangleBVH(const Vertices& verts, const Triangles& tris);

  bool empty() const { return nodes_.empty(); }

  // Nearest point on any triangle. Requires a nonempty tree.
  ClosestHit closest(const Vec3& p) const;

  // Nearest point within max_dist; hit.tri = -1 when none qualifies.
  ClosestHit closest_within(const Vec3& p, double max_dist) const;

  const Vertices& vertices() const { return verts_; }
  const Triangles& triangles() const { return tris_; }

 private:
  struct Node {
    Vec3 lo, hi;      // bounds of all triangles below
    int left = -1;    // internal: child indices
    int right = -1;
    int begin = 0;    // leaf: range into order_
    int count = 0;
  };

  int build(int begin, int end, std::vector<Vec3>& centroids);
  void search(int node, const Vec3& p, ClosestHit* best) const;

  Vertices verts_;
  Triangles tris_;
  std::vector<int> order_;  // triangle ids, leaf ranges index into this
  std::vector<Node> nodes_; // nodes_[0] is the root
};

}  // namespace hface
