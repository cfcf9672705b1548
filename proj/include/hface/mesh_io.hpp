#pragma once

#include "hface/spatial.hpp"

#include <optional>
#include <string>

namespace hface {

// ---------------------------------------------------------------------------
// Wavefront OBJ (v/f, optional vt/vn). Faces may be polygons (triangulated
// as fans) and use 1-based or negative relative indices. Texture and normal
// arrays are kept only when every face corner references them with the same
// index as its position (the layout save_obj writes); otherwise they are
// dropped with a warning. Floats are written with enough digits to round-trip
// exactly, so save/load is lossless and byte-deterministic.
// ---------------------------------------------------------------------------
struct ObjData {
  Vertices vertices;   // N x 3
  Triangles triangles; // M x 3
  UVCoords uv;         // N x 2 or 0 rows
  Vertices normals;    // N x 3 or 0 rows

  bool has_uv() const { return uv.rows() == vertices.rows() && uv.rows() > 0; }
  bool has_normals() const {
    return normals.rows() == vertices.rows() && normals.rows() > 0;
  }
};

ObjData load_obj(const std::string& path);
void save_obj(const std::string& path, const Vertices& vertices,
              const Triangles& triangles, const UVCoords* uv = nullptr,
              const Vertices* normals = nullptr);

// Convenience: mesh <-> OBJ, scan <-> OBJ.
void save_obj(const std::string& path, const Mesh& mesh);
ScanMesh load_scan_obj(const std::string& path);

// Landmark text files: one whitespace-separated coordinate pair (2D pixels)
// or triple (3D mm) per line; '#' starts a comment. expected_lines = 0
// accepts any count.
std::vector<Vec2> load_landmarks_text(const std::string& path,
                                      int expected_lines = 0);
void save_landmarks_text(const std::string& path,
                         const std::vector<Vec2>& points);
Vertices load_points3_text(const std::string& path, int expected_lines = 0);
void save_points3_text(const std::string& path, const Vertices& points);

}  // namespace hface
