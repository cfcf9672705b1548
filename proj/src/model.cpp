#include "hface/model.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace hface {

namespace {

constexpr char kMagic[4] = {'H', 'F', 'M', '1'};

float to_f32(double v) { return static_cast<float>(v); }

// Rounds every entry to float32 precision (the container stores float32;
// synthetic models are generated pre-rounded so save/load is lossless).
template <typename Derived>
void round_f32(Eigen::MatrixBase<Derived>& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.derived().data()[i] = static_cast<double>(to_f32(m.derived().data()[i]));
}

struct ChunkWriter {
  std::ofstream out;
  explicit ChunkWriter(const std::string& path)
      : out(path, std::ios::binary) {
    if (!out) throw std::runtime_error("cannot open for write: " + path);
  }
  void raw(const void* p, size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }
  void u32(uint32_t v) { raw(&v, 4); }
  void u64(uint64_t v) { raw(&v, 8); }
  void chunk_f32(const char tag[4], const double* data, size_t n) {
    raw(tag, 4);
    u64(n * 4);
    std::vector<float> tmp(n);
    for (size_t i = 0; i < n; ++i) tmp[i] = to_f32(data[i]);
    raw(tmp.data(), n * 4);
  }
  void chunk_u32(const char tag[4], const std::vector<uint32_t>& v) {
    raw(tag, 4);
    u64(v.size() * 4);
    raw(v.data(), v.size() * 4);
  }
};

struct ChunkReader {
  std::ifstream in;
  std::string path;
  explicit ChunkReader(const std::string& p) : in(p, std::ios::binary), path(p) {
    if (!in) throw parse_error("cannot open model file: " + p);
  }
  void raw(void* p, size_t n, const char* what) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n)
      throw parse_error(path + ": truncated while reading " + what);
  }
  uint32_t u32(const char* what) {
    uint32_t v;
    raw(&v, 4, what);
    return v;
  }
  // Reads the next chunk header; checks the tag matches.
  uint64_t expect(const char tag[4]) {
    char got[4];
    raw(got, 4, "chunk tag");
    if (std::memcmp(got, tag, 4) != 0)
      throw parse_error(path + ": expected chunk '" + std::string(tag, 4) +
                        "', found '" + std::string(got, 4) + "'");
    uint64_t len;
    raw(&len, 8, "chunk length");
    return len;
  }
  void read_f32(const char tag[4], double* out, size_t n) {
    const uint64_t len = expect(tag);
    if (len != n * 4)
      throw parse_error(path + ": chunk '" + std::string(tag, 4) +
                        "' has wrong size " + std::to_string(len) +
                        " (expected " + std::to_string(n * 4) + ")");
    std::vector<float> tmp(n);
    raw(tmp.data(), n * 4, tag);
    for (size_t i = 0; i < n; ++i) out[i] = static_cast<double>(tmp[i]);
  }
  std::vector<uint32_t> read_u32(const char tag[4], int64_t expected = -1) {
    const uint64_t len = expect(tag);
    if (len % 4 != 0)
      throw parse_error(path + ": chunk '" + std::string(tag, 4) +
                        "' length not a multiple of 4");
    if (expected >= 0 && len != static_cast<uint64_t>(expected) * 4)
      throw parse_error(path + ": chunk '" + std::string(tag, 4) +
                        "' has wrong element count");
    std::vector<uint32_t> v(len / 4);
    raw(v.data(), len, tag);
    return v;
  }
};

std::vector<int> to_ints(const std::vector<uint32_t>& v) {
  return {v.begin(), v.end()};
}
std::vector<uint32_t> to_u32s(const std::vector<int>& v) {
  return {v.begin(), v.end()};
}

MorphableModel load_manifest(const std::string& path);

}  // namespace

void MorphableModel::validate() const {
  const auto v3 = static_cast<Eigen::Index>(num_vertices()) * 3;
  if (mean_shape.size() != v3 || mean_albedo.size() != v3 ||
      shape_basis.rows() != v3 || expr_basis.rows() != v3 ||
      albedo_basis.rows() != v3)
    throw validation_error("model arrays disagree on vertex count");
  if (shape_basis.cols() < 1 || expr_basis.cols() < 1 || albedo_basis.cols() < 1)
    throw validation_error("basis must have at least one mode");
  auto finite = [](const auto& m, const char* name) {
    if (!m.allFinite())
      throw validation_error(std::string("non-finite entries in ") + name);
  };
  finite(mean_shape, "mean_shape");
  finite(shape_basis, "shape_basis");
  finite(expr_basis, "expr_basis");
  finite(mean_albedo, "mean_albedo");
  finite(albedo_basis, "albedo_basis");
  if (mean_albedo.minCoeff() < 0.0 || mean_albedo.maxCoeff() > 1.0)
    throw validation_error("mean_albedo outside [0,1]");
  if (!topology) throw validation_error("missing topology");
  if (topology->num_vertices() != num_vertices())
    throw validation_error("topology vertex count mismatch");
  topology->validate();
}

void FaceParams::validate() const {
  auto finite = [](const auto& m, const char* name) {
    if (!m.allFinite())
      throw validation_error(std::string("non-finite ") + name);
  };
  finite(alpha, "alpha");
  finite(beta, "beta");
  finite(gamma, "gamma");
  finite(rotation, "rotation");
  finite(translation, "translation");
  finite(lighting, "lighting");
  if (lighting.size() != 27) throw validation_error("lighting must have 27 coefficients");
  if (camera.width <= 0 || camera.height <= 0)
    throw validation_error("image size must be positive");
  if (camera.focal <= 0) throw validation_error("focal must be positive");
}

Mesh decode_shape(const MorphableModel& model, const VecX& alpha, const VecX& beta) {
  if (alpha.size() != model.k_id())
    throw std::invalid_argument("alpha length " + std::to_string(alpha.size()) +
                                " != K_id " + std::to_string(model.k_id()));
  if (beta.size() != model.k_exp())
    throw std::invalid_argument("beta length " + std::to_string(beta.size()) +
                                " != K_exp " + std::to_string(model.k_exp()));
  const VecX v = model.mean_shape + model.shape_basis * alpha + model.expr_basis * beta;
  Mesh m;
  m.vertices.resize(model.num_vertices(), 3);
  flat(m.vertices) = v;
  m.topology = model.topology;
  return m;
}

VertexAlbedo decode_albedo(const MorphableModel& model, const VecX& gamma) {
  if (gamma.size() != model.k_alb())
    throw std::invalid_argument("gamma length " + std::to_string(gamma.size()) +
                                " != K_alb " + std::to_string(model.k_alb()));
  const VecX a = model.mean_albedo + model.albedo_basis * gamma;
  VertexAlbedo out;
  out.rgb.resize(model.num_vertices(), 3);
  out.clamped_channel.assign(a.size(), 0);
  for (int i = 0; i < model.num_vertices(); ++i) {
    bool hit = false;
    for (int c = 0; c < 3; ++c) {
      double v = a[3 * i + c];
      if (v < 0.0 || v > 1.0) {
        v = std::clamp(v, 0.0, 1.0);
        hit = true;
        out.clamped_channel[3 * i + c] = 1;
      }
      out.rgb(i, c) = v;
    }
    if (hit) out.clamped.push_back(static_cast<uint32_t>(i));
  }
  return out;
}

void save_model(const MorphableModel& model, const std::string& path) {
  ChunkWriter w(path);
  w.raw(kMagic, 4);
  w.u32(static_cast<uint32_t>(model.num_vertices()));
  w.u32(static_cast<uint32_t>(model.topology->num_triangles()));
  w.u32(static_cast<uint32_t>(model.k_id()));
  w.u32(static_cast<uint32_t>(model.k_exp()));
  w.u32(static_cast<uint32_t>(model.k_alb()));
  w.chunk_f32("MSHP", model.mean_shape.data(), model.mean_shape.size());
  w.chunk_f32("SBAS", model.shape_basis.data(), model.shape_basis.size());
  w.chunk_f32("EBAS", model.expr_basis.data(), model.expr_basis.size());
  w.chunk_f32("MALB", model.mean_albedo.data(), model.mean_albedo.size());
  w.chunk_f32("ABAS", model.albedo_basis.data(), model.albedo_basis.size());
  const auto& topo = *model.topology;
  std::vector<uint32_t> tris(topo.triangles.size());
  for (Eigen::Index i = 0; i < topo.triangles.size(); ++i)
    tris[i] = static_cast<uint32_t>(topo.triangles.data()[i]);
  w.chunk_u32("TRIS", tris);
  w.chunk_f32("UVS0", topo.uv.data(), topo.uv.size());
  w.chunk_u32("LM68", to_u32s(topo.landmarks68));
  w.chunk_u32("LM07", to_u32s(topo.landmarks7));
  w.chunk_u32("LOWF", to_u32s(topo.lower_face_vertices));
  // DMSK: u32 width, u32 height, then width*height bytes (0/1).
  const Grid& mask = topo.detail_mask_uv;
  w.raw("DMSK", 4);
  w.u64(8 + static_cast<uint64_t>(mask.width) * mask.height);
  w.u32(static_cast<uint32_t>(mask.width));
  w.u32(static_cast<uint32_t>(mask.height));
  std::vector<uint8_t> bytes(static_cast<size_t>(mask.width) * mask.height);
  for (size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = mask.data[i] != 0.0 ? 1 : 0;
  w.raw(bytes.data(), bytes.size());
  if (!w.out) throw std::runtime_error("write failed: " + path);
}

MorphableModel load_model(const std::string& path) {
  if (std::filesystem::path(path).extension() == ".json")
    return load_manifest(path);
  ChunkReader r(path);
  char magic[4];
  r.raw(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw parse_error(path + ": bad magic (expected HFM1)");
  const uint32_t v = r.u32("V");
  const uint32_t t = r.u32("T");
  const uint32_t k_id = r.u32("K_id");
  const uint32_t k_exp = r.u32("K_exp");
  const uint32_t k_alb = r.u32("K_alb");

  MorphableModel m;
  m.mean_shape.resize(3 * v);
  m.shape_basis.resize(3 * v, k_id);
  m.expr_basis.resize(3 * v, k_exp);
  m.mean_albedo.resize(3 * v);
  m.albedo_basis.resize(3 * v, k_alb);
  r.read_f32("MSHP", m.mean_shape.data(), 3 * v);
  r.read_f32("SBAS", m.shape_basis.data(), static_cast<size_t>(3) * v * k_id);
  r.read_f32("EBAS", m.expr_basis.data(), static_cast<size_t>(3) * v * k_exp);
  r.read_f32("MALB", m.mean_albedo.data(), 3 * v);
  r.read_f32("ABAS", m.albedo_basis.data(), static_cast<size_t>(3) * v * k_alb);

  auto topo = std::make_shared<Topology>();
  const auto tris = r.read_u32("TRIS", static_cast<int64_t>(t) * 3);
  topo->triangles.resize(t, 3);
  for (size_t i = 0; i < tris.size(); ++i)
    topo->triangles.data()[i] = static_cast<int>(tris[i]);
  topo->uv.resize(v, 2);
  r.read_f32("UVS0", topo->uv.data(), static_cast<size_t>(2) * v);
  topo->landmarks68 = to_ints(r.read_u32("LM68", 68));
  topo->landmarks7 = to_ints(r.read_u32("LM07", 7));
  topo->lower_face_vertices = to_ints(r.read_u32("LOWF"));
  const uint64_t mask_len = r.expect("DMSK");
  const uint32_t mw = r.u32("mask width");
  const uint32_t mh = r.u32("mask height");
  if (mask_len != 8 + static_cast<uint64_t>(mw) * mh)
    throw parse_error(path + ": chunk 'DMSK' has inconsistent size");
  std::vector<uint8_t> bytes(static_cast<size_t>(mw) * mh);
  r.raw(bytes.data(), bytes.size(), "DMSK");
  topo->detail_mask_uv = Grid(static_cast<int>(mw), static_cast<int>(mh), 1);
  for (size_t i = 0; i < bytes.size(); ++i)
    topo->detail_mask_uv.data[i] = bytes[i] ? 1.0 : 0.0;
  m.topology = std::move(topo);
  m.validate();
  return m;
}

namespace {

MorphableModel load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open manifest: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw parse_error(path + ": invalid JSON: " + e.what());
  }
  const auto dir = std::filesystem::path(path).parent_path();
  auto read_bin = [&](const std::string& rel, size_t bytes, void* out,
                      const char* field) {
    const auto p = dir / rel;
    std::ifstream f(p, std::ios::binary);
    if (!f) throw parse_error(std::string("manifest field '") + field +
                              "': cannot open " + p.string());
    f.read(static_cast<char*>(out), static_cast<std::streamsize>(bytes));
    if (static_cast<size_t>(f.gcount()) != bytes)
      throw parse_error(std::string("manifest field '") + field +
                        "': file too short: " + p.string());
  };
  auto read_f32_array = [&](const char* field, size_t n, double* out) {
    std::vector<float> tmp(n);
    read_bin(j.at("arrays").at(field).get<std::string>(), n * 4, tmp.data(), field);
    for (size_t i = 0; i < n; ++i) out[i] = static_cast<double>(tmp[i]);
  };
  auto read_u32_array = [&](const char* field, size_t n) {
    std::vector<uint32_t> tmp(n);
    read_bin(j.at("arrays").at(field).get<std::string>(), n * 4, tmp.data(), field);
    return to_ints(tmp);
  };

  const auto v = j.at("V").get<uint32_t>();
  const auto t = j.at("T").get<uint32_t>();
  const auto k_id = j.at("k_id").get<uint32_t>();
  const auto k_exp = j.at("k_exp").get<uint32_t>();
  const auto k_alb = j.at("k_alb").get<uint32_t>();

  MorphableModel m;
  m.mean_shape.resize(3 * v);
  m.shape_basis.resize(3 * v, k_id);
  m.expr_basis.resize(3 * v, k_exp);
  m.mean_albedo.resize(3 * v);
  m.albedo_basis.resize(3 * v, k_alb);
  read_f32_array("mean_shape", 3 * v, m.mean_shape.data());
  read_f32_array("shape_basis", static_cast<size_t>(3) * v * k_id, m.shape_basis.data());
  read_f32_array("expr_basis", static_cast<size_t>(3) * v * k_exp, m.expr_basis.data());
  read_f32_array("mean_albedo", 3 * v, m.mean_albedo.data());
  read_f32_array("albedo_basis", static_cast<size_t>(3) * v * k_alb, m.albedo_basis.data());

  auto topo = std::make_shared<Topology>();
  const auto tri_ints = read_u32_array("triangles", static_cast<size_t>(3) * t);
  topo->triangles.resize(t, 3);
  std::copy(tri_ints.begin(), tri_ints.end(), topo->triangles.data());
  topo->uv.resize(v, 2);
  read_f32_array("uv", static_cast<size_t>(2) * v, topo->uv.data());
  topo->landmarks68 = read_u32_array("landmarks68", 68);
  topo->landmarks7 = read_u32_array("landmarks7", 7);
  topo->lower_face_vertices =
      read_u32_array("lower_face_vertices",
                     j.at("lower_face_count").get<size_t>());
  const auto& mask = j.at("detail_mask");
  const int mw = mask.at("width").get<int>();
  const int mh = mask.at("height").get<int>();
  std::vector<uint8_t> bytes(static_cast<size_t>(mw) * mh);
  read_bin(mask.at("file").get<std::string>(), bytes.size(), bytes.data(), "detail_mask");
  topo->detail_mask_uv = Grid(mw, mh, 1);
  for (size_t i = 0; i < bytes.size(); ++i)
    topo->detail_mask_uv.data[i] = bytes[i] ? 1.0 : 0.0;
  m.topology = std::move(topo);
  m.validate();
  return m;
}

// Box blur passes on a v_side x v_side x 3 field stored as a flat 3V vector.
void blur_grid_field(VecX& field, int n, int passes) {
  VecX tmp(field.size());
  for (int p = 0; p < passes; ++p) {
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < n; ++i) {
        for (int c = 0; c < 3; ++c) {
          double sum = 0.0;
          int cnt = 0;
          for (int dj = -1; dj <= 1; ++dj) {
            for (int di = -1; di <= 1; ++di) {
              const int ii = i + di, jj = j + dj;
              if (ii < 0 || jj < 0 || ii >= n || jj >= n) continue;
              sum += field[3 * (jj * n + ii) + c];
              ++cnt;
            }
          }
          tmp[3 * (j * n + i) + c] = sum / cnt;
        }
      }
    }
    field.swap(tmp);
  }
}

int grid_index(int n, double u, double v) {
  const int i = std::clamp(static_cast<int>(std::lround(u * (n - 1))), 0, n - 1);
  const int j = std::clamp(static_cast<int>(std::lround(v * (n - 1))), 0, n - 1);
  return j * n + i;
}

}  // namespace

MorphableModel synth_model(uint64_t seed, int v_side, int k_id, int k_exp, int k_alb) {
  if (v_side < 8) throw std::invalid_argument("v_side must be >= 8");
  if (k_id < 1 || k_exp < 1 || k_alb < 1)
    throw std::invalid_argument("basis sizes must be >= 1");
  Rng rng(seed);
  const int n = v_side;
  const int v = n * n;

  MorphableModel m;
  m.mean_shape.resize(3 * v);
  m.mean_albedo.resize(3 * v);
  auto topo = std::make_shared<Topology>();
  topo->uv.resize(v, 2);

  // Open ellipsoid shell, front toward -z; x right, y down (image-aligned).
  const double ax = 80.0, ay = 110.0, az = 90.0;
  const double phi_max = 70.0 * M_PI / 180.0;
  const double theta_max = 80.0 * M_PI / 180.0;
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      const double u = static_cast<double>(i) / (n - 1);
      const double w = static_cast<double>(j) / (n - 1);
      const double phi = (u - 0.5) * 2.0 * phi_max;
      const double theta = (w - 0.5) * 2.0 * theta_max;
      double x = ax * std::sin(phi) * std::cos(theta);
      double y = ay * std::sin(theta);
      double z = -az * std::cos(phi) * std::cos(theta);
      // nose ridge and a gentle chin taper
      z -= 16.0 * std::exp(-((u - 0.5) * (u - 0.5) / 0.004 +
                             (w - 0.55) * (w - 0.55) / 0.010));
      z += 10.0 * std::exp(-((w - 1.0) * (w - 1.0) / 0.02));
      const int idx = j * n + i;
      m.mean_shape[3 * idx + 0] = x;
      m.mean_shape[3 * idx + 1] = y;
      m.mean_shape[3 * idx + 2] = z;
      topo->uv(idx, 0) = u;
      topo->uv(idx, 1) = w;
      // smooth skin-tone mean albedo
      m.mean_albedo[3 * idx + 0] = 0.72 + 0.05 * std::sin(2.1 * u) * std::cos(1.3 * w);
      m.mean_albedo[3 * idx + 1] = 0.55 + 0.05 * std::cos(1.7 * u + 0.4);
      m.mean_albedo[3 * idx + 2] = 0.46 + 0.04 * std::sin(1.1 * w + 0.9);
    }
  }

  topo->triangles.resize(2 * (n - 1) * (n - 1), 3);
  int t = 0;
  for (int j = 0; j + 1 < n; ++j) {
    for (int i = 0; i + 1 < n; ++i) {
      const int v00 = j * n + i, v10 = j * n + i + 1;
      const int v01 = (j + 1) * n + i, v11 = (j + 1) * n + i + 1;
      topo->triangles.row(t++) << v00, v01, v10;
      topo->triangles.row(t++) << v10, v01, v11;
    }
  }

  auto make_basis = [&](int k, double amp) {
    MatX basis(3 * v, k);
    for (int mode = 0; mode < k; ++mode) {
      VecX col(3 * v);
      for (Eigen::Index i = 0; i < col.size(); ++i) col[i] = rng.normal();
      blur_grid_field(col, n, 6);
      const double rms = std::sqrt(col.squaredNorm() / col.size());
      const double sigma = amp / std::pow(1.0 + mode, 0.55);
      basis.col(mode) = col * (sigma / rms);
    }
    return basis;
  };
  m.shape_basis = make_basis(k_id, 6.0);
  m.expr_basis = make_basis(k_exp, 4.0);
  m.albedo_basis = make_basis(k_alb, 0.05);

  // 68 landmarks at face-like grid fractions: 17 jaw, 2x5 brows, 9 nose,
  // 2x6 eyes, 20 mouth (iBUG layout order).
  std::vector<std::pair<double, double>> lm;
  for (int i = 0; i < 17; ++i) {  // jaw, left to right along the lower contour
    const double s = static_cast<double>(i) / 16.0;
    lm.emplace_back(0.08 + 0.84 * s, 0.55 + 0.38 * std::sin(M_PI * s));
  }
  for (int i = 0; i < 5; ++i) lm.emplace_back(0.22 + 0.06 * i, 0.30);  // left brow
  for (int i = 0; i < 5; ++i) lm.emplace_back(0.54 + 0.06 * i, 0.30);  // right brow
  for (int i = 0; i < 4; ++i) lm.emplace_back(0.50, 0.38 + 0.05 * i);  // nose bridge
  for (int i = 0; i < 5; ++i) lm.emplace_back(0.42 + 0.04 * i, 0.56);  // nose base
  for (int i = 0; i < 6; ++i) {  // left eye
    const double a = 2.0 * M_PI * i / 6.0;
    lm.emplace_back(0.33 + 0.05 * std::cos(a), 0.385 + 0.02 * std::sin(a));
  }
  for (int i = 0; i < 6; ++i) {  // right eye
    const double a = 2.0 * M_PI * i / 6.0;
    lm.emplace_back(0.67 + 0.05 * std::cos(a), 0.385 + 0.02 * std::sin(a));
  }
  for (int i = 0; i < 12; ++i) {  // outer mouth
    const double a = 2.0 * M_PI * i / 12.0;
    lm.emplace_back(0.5 + 0.10 * std::cos(a), 0.70 + 0.04 * std::sin(a));
  }
  for (int i = 0; i < 8; ++i) {  // inner mouth
    const double a = 2.0 * M_PI * i / 8.0;
    lm.emplace_back(0.5 + 0.06 * std::cos(a), 0.70 + 0.02 * std::sin(a));
  }
  topo->landmarks68.reserve(68);
  for (const auto& [lu, lv] : lm)
    topo->landmarks68.push_back(grid_index(n, lu, lv));
  // NoW-style subset: eye corners, nose tip, mouth corners.
  for (int k : {36, 39, 42, 45, 33, 48, 54})
    topo->landmarks7.push_back(topo->landmarks68[k]);

  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i)
      if (static_cast<double>(j) / (n - 1) >= 0.5)
        topo->lower_face_vertices.push_back(j * n + i);

  // Detail mask: exclude eye regions and a border band.
  const int mres = 128;
  topo->detail_mask_uv = Grid(mres, mres, 1, 1.0);
  for (int j = 0; j < mres; ++j) {
    for (int i = 0; i < mres; ++i) {
      const double u = (i + 0.5) / mres;
      const double w = (j + 0.5) / mres;
      bool excluded = u < 0.03 || u > 0.97 || w < 0.03 || w > 0.97;
      for (double ex : {0.33, 0.67}) {
        const double du = (u - ex) / 0.09, dv = (w - 0.385) / 0.05;
        if (du * du + dv * dv < 1.0) excluded = true;
      }
      if (excluded) topo->detail_mask_uv.at(i, j, 0) = 0.0;
    }
  }

  round_f32(m.mean_shape);
  round_f32(m.shape_basis);
  round_f32(m.expr_basis);
  round_f32(m.mean_albedo);
  round_f32(m.albedo_basis);
  round_f32(topo->uv);
  m.topology = std::move(topo);
  m.validate();
  return m;
}

}  // namespace hface
