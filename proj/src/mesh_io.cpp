#include "hface/mesh_io.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace hface {

namespace {

// One face corner: v, optional vt, optional vn (0 = absent), already 0-based.
struct Corner {
  int v = 0;
  int vt = -1;
  int vn = -1;
};

int resolve_index(long idx, size_t count, const std::string& path) {
  if (idx > 0 && idx <= static_cast<long>(count)) return static_cast<int>(idx - 1);
  if (idx < 0 && -idx <= static_cast<long>(count))
    return static_cast<int>(count + idx);
  throw parse_error(path + ": OBJ face index out of range");
}

Corner parse_corner(const std::string& tok, size_t nv, size_t nvt, size_t nvn,
                    const std::string& path) {
  Corner c;
  long v = 0, vt = 0, vn = 0;
  int field = 0;
  bool has[3] = {false, false, false};
  size_t pos = 0;
  while (pos <= tok.size()) {
    const size_t slash = tok.find('/', pos);
    const std::string part =
        tok.substr(pos, slash == std::string::npos ? std::string::npos : slash - pos);
    if (!part.empty()) {
      long val = 0;
      try {
        val = std::stol(part);
      } catch (const std::exception&) {
        throw parse_error(path + ": bad OBJ face token '" + tok + "'");
      }
      if (field == 0) v = val;
      if (field == 1) vt = val;
      if (field == 2) vn = val;
      if (field < 3) has[field] = true;
    }
    if (slash == std::string::npos) break;
    pos = slash + 1;
    ++field;
  }
  if (!has[0]) throw parse_error(path + ": OBJ face corner missing vertex index");
  c.v = resolve_index(v, nv, path);
  if (has[1]) c.vt = resolve_index(vt, nvt, path);
  if (has[2]) c.vn = resolve_index(vn, nvn, path);
  return c;
}

void append_double(std::string& out, double v) {
  char buf[32];
  const int n = std::snprintf(buf, sizeof buf, "%.17g", v);
  out.append(buf, static_cast<size_t>(n));
}

}  // namespace

ObjData load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw parse_error(path + ": cannot open OBJ file");

  std::vector<Vec3> vs, vns;
  std::vector<Vec2> vts;
  std::vector<std::array<Corner, 3>> faces;
  bool uv_aligned = true, vn_aligned = true;

  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      Vec3 p;
      if (!(ss >> p.x() >> p.y() >> p.z()))
        throw parse_error(path + ": bad OBJ vertex line");
      vs.push_back(p);
    } else if (tag == "vt") {
      Vec2 t;
      if (!(ss >> t.x() >> t.y()))
        throw parse_error(path + ": bad OBJ texture line");
      vts.push_back(t);
    } else if (tag == "vn") {
      Vec3 n;
      if (!(ss >> n.x() >> n.y() >> n.z()))
        throw parse_error(path + ": bad OBJ normal line");
      vns.push_back(n);
    } else if (tag == "f") {
      std::vector<Corner> poly;
      std::string tok;
      while (ss >> tok)
        poly.push_back(parse_corner(tok, vs.size(), vts.size(), vns.size(), path));
      if (poly.size() < 3) throw parse_error(path + ": OBJ face with < 3 corners");
      for (size_t k = 1; k + 1 < poly.size(); ++k)
        faces.push_back({poly[0], poly[k], poly[k + 1]});
    }
    // Other tags (o, g, s, mtllib, usemtl, ...) are ignored.
  }
  if (vs.empty()) throw parse_error(path + ": OBJ file has no vertices");

  for (const auto& f : faces)
    for (const Corner& c : f) {
      if (c.vt >= 0 && c.vt != c.v) uv_aligned = false;
      if (c.vn >= 0 && c.vn != c.v) vn_aligned = false;
    }

  ObjData out;
  out.vertices.resize(static_cast<int>(vs.size()), 3);
  for (size_t i = 0; i < vs.size(); ++i) out.vertices.row(i) = vs[i].transpose();
  out.triangles.resize(static_cast<int>(faces.size()), 3);
  for (size_t i = 0; i < faces.size(); ++i)
    out.triangles.row(i) << faces[i][0].v, faces[i][1].v, faces[i][2].v;

  if (vts.size() == vs.size() && uv_aligned) {
    out.uv.resize(static_cast<int>(vts.size()), 2);
    for (size_t i = 0; i < vts.size(); ++i) out.uv.row(i) = vts[i].transpose();
  } else if (!vts.empty()) {
    warn(path + ": OBJ texture coordinates not per-vertex aligned, dropped");
  }
  if (vns.size() == vs.size() && vn_aligned) {
    out.normals.resize(static_cast<int>(vns.size()), 3);
    for (size_t i = 0; i < vns.size(); ++i) out.normals.row(i) = vns[i].transpose();
  } else if (!vns.empty()) {
    warn(path + ": OBJ normals not per-vertex aligned, dropped");
  }
  return out;
}

void save_obj(const std::string& path, const Vertices& vertices,
              const Triangles& triangles, const UVCoords* uv,
              const Vertices* normals) {
  if (uv && uv->rows() != vertices.rows())
    throw validation_error("save_obj: uv row count differs from vertices");
  if (normals && normals->rows() != vertices.rows())
    throw validation_error("save_obj: normal row count differs from vertices");

  std::string out;
  out.reserve(static_cast<size_t>(vertices.rows()) * 48);
  for (int i = 0; i < vertices.rows(); ++i) {
    out += "v ";
    append_double(out, vertices(i, 0));
    out += ' ';
    append_double(out, vertices(i, 1));
    out += ' ';
    append_double(out, vertices(i, 2));
    out += '\n';
  }
  if (uv)
    for (int i = 0; i < uv->rows(); ++i) {
      out += "vt ";
      append_double(out, (*uv)(i, 0));
      out += ' ';
      append_double(out, (*uv)(i, 1));
      out += '\n';
    }
  if (normals)
    for (int i = 0; i < normals->rows(); ++i) {
      out += "vn ";
      append_double(out, (*normals)(i, 0));
      out += ' ';
      append_double(out, (*normals)(i, 1));
      out += ' ';
      append_double(out, (*normals)(i, 2));
      out += '\n';
    }
  for (int t = 0; t < triangles.rows(); ++t) {
    out += 'f';
    for (int k = 0; k < 3; ++k) {
      const int idx = triangles(t, k) + 1;
      out += ' ';
      out += std::to_string(idx);
      if (uv && normals)
        out += '/' + std::to_string(idx) + '/' + std::to_string(idx);
      else if (uv)
        out += '/' + std::to_string(idx);
      else if (normals)
        out += "//" + std::to_string(idx);
    }
    out += '\n';
  }

  std::ofstream f(path, std::ios::binary);
  if (!f) throw parse_error(path + ": cannot open for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw parse_error(path + ": write failed");
}

void save_obj(const std::string& path, const Mesh& mesh) {
  const UVCoords* uv =
      mesh.topology && mesh.topology->uv.rows() == mesh.vertices.rows()
          ? &mesh.topology->uv
          : nullptr;
  const Vertices* normals = mesh.has_normals ? &mesh.normals : nullptr;
  save_obj(path, mesh.vertices,
           mesh.topology ? mesh.topology->triangles : Triangles(), uv, normals);
}

ScanMesh load_scan_obj(const std::string& path) {
  const ObjData obj = load_obj(path);
  ScanMesh scan;
  scan.vertices = obj.vertices;
  scan.triangles = obj.triangles;
  scan.validate();
  return scan;
}

namespace {

std::vector<VecX> load_rows(const std::string& path, int dims,
                            int expected_lines) {
  std::ifstream in(path);
  if (!in) throw parse_error(path + ": cannot open landmark file");
  std::vector<VecX> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ss(line);
    VecX row(dims);
    if (!(ss >> row[0])) continue;  // blank line
    for (int d = 1; d < dims; ++d)
      if (!(ss >> row[d]))
        throw parse_error(path + ": line " + std::to_string(lineno) +
                          " has fewer than " + std::to_string(dims) +
                          " coordinates");
    double extra;
    if (ss >> extra)
      throw parse_error(path + ": line " + std::to_string(lineno) +
                        " has more than " + std::to_string(dims) +
                        " coordinates");
    if (!row.allFinite())
      throw parse_error(path + ": line " + std::to_string(lineno) +
                        " is not finite");
    rows.push_back(row);
  }
  if (expected_lines > 0 && static_cast<int>(rows.size()) != expected_lines)
    throw parse_error(path + ": expected " + std::to_string(expected_lines) +
                      " landmarks, found " + std::to_string(rows.size()));
  return rows;
}

}  // namespace

std::vector<Vec2> load_landmarks_text(const std::string& path,
                                      int expected_lines) {
  const std::vector<VecX> rows = load_rows(path, 2, expected_lines);
  std::vector<Vec2> out(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) out[i] = rows[i];
  return out;
}

void save_landmarks_text(const std::string& path,
                         const std::vector<Vec2>& points) {
  std::string out;
  for (const Vec2& p : points) {
    append_double(out, p.x());
    out += ' ';
    append_double(out, p.y());
    out += '\n';
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw parse_error(path + ": cannot open for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw parse_error(path + ": write failed");
}

Vertices load_points3_text(const std::string& path, int expected_lines) {
  const std::vector<VecX> rows = load_rows(path, 3, expected_lines);
  Vertices out(static_cast<int>(rows.size()), 3);
  for (size_t i = 0; i < rows.size(); ++i) out.row(i) = rows[i].transpose();
  return out;
}

void save_points3_text(const std::string& path, const Vertices& points) {
  std::string out;
  for (int i = 0; i < points.rows(); ++i) {
    append_double(out, points(i, 0));
    out += ' ';
    append_double(out, points(i, 1));
    out += ' ';
    append_double(out, points(i, 2));
    out += '\n';
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw parse_error(path + ": cannot open for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw parse_error(path + ": write failed");
}

}  // namespace hface
