#pragma once

#include "hface/common.hpp"

#include <memory>

namespace hface {

// Shared connectivity, UV atlas and semantic vertex sets of a face model.
// Immutable after construction; meshes hold it by shared_ptr.
struct Topology {
  Triangles triangles;                  // T x 3, indices into the vertex list
  UVCoords uv;                          // V x 2, in [0,1]^2
  std::vector<int> landmarks68;         // 68 vertex indices
  std::vector<int> landmarks7;          // 7 vertex indices, subset of landmarks68
  std::vector<int> lower_face_vertices; // eligible for the contour loss
  Grid detail_mask_uv;                  // 1-channel binary map, 0 at eyes/hair

  int num_vertices() const { return static_cast<int>(uv.rows()); }
  int num_triangles() const { return static_cast<int>(triangles.rows()); }

  // Throws validation_error on any broken invariant (bad index, degenerate
  // UV triangle, landmarks7 not a subset of landmarks68).
  void validate() const;
};

struct Mesh {
  Vertices vertices;  // V x 3, mm
  std::shared_ptr<const Topology> topology;
  Vertices normals;   // unit length when has_normals
  bool has_normals = false;

  int num_vertices() const { return static_cast<int>(vertices.rows()); }
};

// Area-weighted vertex normals. A vertex whose incident triangles all have
// zero area gets the average of its valid mesh neighbors and its index is
// appended to *flagged (may be null). *accum (may be null) receives the
// unnormalized per-vertex cross-product sums, which gradient code needs to
// differentiate through the normalization.
Mesh vertex_normals(const Mesh& m, std::vector<int>* flagged = nullptr,
                    Vertices* accum = nullptr);

// Raw face normals (unnormalized cross products; length = 2 * area).
Vertices face_cross_products(const Vertices& v, const Triangles& tris);

}  // namespace hface
