#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hface/model.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>

using namespace hface;
namespace fs = std::filesystem;

namespace {

template <class A, class B>
bool exact_eq(const A& a, const B& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.array() == b.array()).all();
}

fs::path temp_dir() {
  auto p = fs::temp_directory_path() / "hface_test_model";
  fs::create_directories(p);
  return p;
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Hand-sized model (single triangle) for exact-value decode tests.
MorphableModel tiny_model() {
  MorphableModel m;
  m.mean_shape.resize(9);
  m.mean_shape << 0, 0, 0, 10, 0, 0, 0, 10, 0;
  m.shape_basis = MatX::Zero(9, 2);
  m.shape_basis(0, 0) = 1.0;  // mode 0 moves vertex 0 in x
  m.shape_basis(4, 1) = 2.0;  // mode 1 moves vertex 1 in y
  m.expr_basis = MatX::Zero(9, 1);
  m.expr_basis(8, 0) = 3.0;
  m.mean_albedo.resize(9);
  m.mean_albedo << 0.9, 0.5, 0.1, 0.5, 0.5, 0.5, 0.2, 0.2, 0.2;
  m.albedo_basis = MatX::Zero(9, 1);
  m.albedo_basis(0, 0) = 0.4;   // pushes vertex 0 red past 1
  m.albedo_basis(2, 0) = -0.2;  // pushes vertex 0 blue below 0
  auto topo = std::make_shared<Topology>();
  topo->triangles.resize(1, 3);
  topo->triangles << 0, 1, 2;
  topo->uv.resize(3, 2);
  topo->uv << 0, 0, 1, 0, 0, 1;
  m.topology = topo;
  return m;
}

}  // namespace

TEST_CASE("synth_model is deterministic in seed and has grid counts") {
  const auto a = synth_model(1, 32, 4, 3, 4);
  const auto b = synth_model(1, 32, 4, 3, 4);
  CHECK(a.num_vertices() == 1024);
  CHECK(a.topology->num_triangles() == 2 * 31 * 31);
  CHECK(exact_eq(a.mean_shape, b.mean_shape));
  CHECK(exact_eq(a.shape_basis, b.shape_basis));
  CHECK(exact_eq(a.expr_basis, b.expr_basis));
  CHECK(exact_eq(a.mean_albedo, b.mean_albedo));
  CHECK(exact_eq(a.albedo_basis, b.albedo_basis));
  CHECK(exact_eq(a.topology->triangles, b.topology->triangles));
  CHECK(a.topology->landmarks68 == b.topology->landmarks68);

  const auto c = synth_model(2, 32, 4, 3, 4);
  CHECK(!exact_eq(a.shape_basis, c.shape_basis));
}

TEST_CASE("synth_model validates preconditions") {
  CHECK_THROWS_AS(synth_model(1, 7, 4, 3, 4), std::invalid_argument);
  CHECK_THROWS_AS(synth_model(1, 16, 0, 3, 4), std::invalid_argument);
}

TEST_CASE("synth_model basis modes are smoother than unfiltered noise") {
  // Oracle: discrete grid Laplacian energy of each mode, compared against
  // white noise rescaled to the same column norm.
  const int n = 24;
  const auto m = synth_model(7, n, 5, 4, 5);
  Rng noise_rng(99);

  auto laplacian_norm = [&](const VecX& col) {
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < n; ++i) {
        for (int c = 0; c < 3; ++c) {
          double lap = 0.0;
          int cnt = 0;
          const double center = col[3 * (j * n + i) + c];
          const int di[] = {1, -1, 0, 0}, dj[] = {0, 0, 1, -1};
          for (int k = 0; k < 4; ++k) {
            const int ii = i + di[k], jj = j + dj[k];
            if (ii < 0 || jj < 0 || ii >= n || jj >= n) continue;
            lap += col[3 * (jj * n + ii) + c] - center;
            ++cnt;
          }
          if (cnt) sum += lap * lap;
        }
      }
    }
    return std::sqrt(sum);
  };

  for (const MatX* basis : {&m.shape_basis, &m.expr_basis, &m.albedo_basis}) {
    for (int k = 0; k < basis->cols(); ++k) {
      const VecX col = basis->col(k);
      VecX white(col.size());
      for (Eigen::Index i = 0; i < white.size(); ++i) white[i] = noise_rng.normal();
      white *= col.norm() / white.norm();
      CHECK(laplacian_norm(col) < laplacian_norm(white));
    }
  }
}

TEST_CASE("decode_shape matches a dense brute-force oracle") {
  const auto m = synth_model(3, 16, 80, 64, 80);
  CHECK(m.shape_basis.cols() == 80);
  CHECK(m.expr_basis.cols() == 64);
  CHECK(m.albedo_basis.cols() == 80);

  SUBCASE("zero coefficients give the mean exactly") {
    const auto mesh = decode_shape(m, VecX::Zero(80), VecX::Zero(64));
    CHECK(exact_eq(flat(mesh.vertices), m.mean_shape));
  }
  SUBCASE("unit coefficient adds one basis column") {
    VecX alpha = VecX::Zero(80);
    alpha[0] = 1.0;
    const auto mesh = decode_shape(m, alpha, VecX::Zero(64));
    const VecX expect = m.mean_shape + m.shape_basis.col(0);
    CHECK(flat(mesh.vertices).isApprox(expect, 1e-15));
  }
  SUBCASE("random coefficients match explicit per-entry sums") {
    Rng rng(11);
    VecX alpha(80), beta(64);
    for (auto& v : alpha) v = rng.normal();
    for (auto& v : beta) v = rng.normal();
    const auto mesh = decode_shape(m, alpha, beta);
    double max_rel = 0.0;
    for (Eigen::Index r = 0; r < m.mean_shape.size(); ++r) {
      double s = m.mean_shape[r];
      for (int k = 0; k < 80; ++k) s += m.shape_basis(r, k) * alpha[k];
      for (int k = 0; k < 64; ++k) s += m.expr_basis(r, k) * beta[k];
      const double got = flat(mesh.vertices)[r];
      max_rel = std::max(max_rel, std::abs(got - s) / std::max(1.0, std::abs(s)));
    }
    CHECK(max_rel < 1e-9);
  }
  SUBCASE("length mismatch throws") {
    CHECK_THROWS_AS(decode_shape(m, VecX::Zero(81), VecX::Zero(64)),
                    std::invalid_argument);
    CHECK_THROWS_AS(decode_shape(m, VecX::Zero(80), VecX::Zero(63)),
                    std::invalid_argument);
  }
}

TEST_CASE("decode_shape is linear in the coefficients") {
  const auto m = synth_model(5, 12, 6, 5, 4);
  Rng rng(21);
  VecX a1(6), a2(6), b1(5), b2(5);
  for (auto* v : {&a1, &a2})
    for (auto& x : *v) x = rng.normal();
  for (auto* v : {&b1, &b2})
    for (auto& x : *v) x = rng.normal();
  const VecX d12 = flat(decode_shape(m, a1 + a2, b1 + b2).vertices) - m.mean_shape;
  const VecX d1 = flat(decode_shape(m, a1, b1).vertices) - m.mean_shape;
  const VecX d2 = flat(decode_shape(m, a2, b2).vertices) - m.mean_shape;
  CHECK((d12 - (d1 + d2)).norm() <= 1e-9 * std::max(1.0, d12.norm()));
}

TEST_CASE("decode_albedo clamps to [0,1] and reports clamp locations") {
  const auto m = tiny_model();
  SUBCASE("zero gamma returns the mean albedo") {
    const auto a = decode_albedo(m, VecX::Zero(1));
    CHECK(exact_eq(flat(a.rgb), m.mean_albedo));
    CHECK(a.clamped.empty());
  }
  SUBCASE("overshoot clamps with a flag") {
    VecX gamma(1);
    gamma << 1.0;  // vertex 0: red 0.9+0.4=1.3 -> 1.0, blue 0.1-0.2=-0.1 -> 0.0
    const auto a = decode_albedo(m, gamma);
    CHECK(a.rgb(0, 0) == 1.0);
    CHECK(a.rgb(0, 2) == 0.0);
    CHECK(a.rgb(0, 1) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(a.clamped == std::vector<uint32_t>{0});
  }
  SUBCASE("random gamma matches dense oracle away from clamps") {
    const auto big = synth_model(9, 16, 4, 3, 6);
    Rng rng(33);
    VecX gamma(6);
    for (auto& v : gamma) v = 0.1 * rng.normal();  // small: no clamping expected
    const auto a = decode_albedo(big, gamma);
    double max_rel = 0.0;
    for (Eigen::Index r = 0; r < big.mean_albedo.size(); ++r) {
      double s = big.mean_albedo[r];
      for (int k = 0; k < 6; ++k) s += big.albedo_basis(r, k) * gamma[k];
      s = std::clamp(s, 0.0, 1.0);
      max_rel = std::max(max_rel,
                         std::abs(flat(a.rgb)[r] - s) / std::max(1.0, std::abs(s)));
    }
    CHECK(max_rel < 1e-9);
  }
}

TEST_CASE("model file round trip is field-identical and byte-stable") {
  const auto dir = temp_dir();
  const auto m = synth_model(4, 16, 5, 4, 3);
  const auto p1 = (dir / "m1.hfm").string();
  const auto p2 = (dir / "m2.hfm").string();
  save_model(m, p1);
  const auto loaded = load_model(p1);
  CHECK(exact_eq(loaded.mean_shape, m.mean_shape));
  CHECK(exact_eq(loaded.shape_basis, m.shape_basis));
  CHECK(exact_eq(loaded.expr_basis, m.expr_basis));
  CHECK(exact_eq(loaded.mean_albedo, m.mean_albedo));
  CHECK(exact_eq(loaded.albedo_basis, m.albedo_basis));
  CHECK(exact_eq(loaded.topology->triangles, m.topology->triangles));
  CHECK(exact_eq(loaded.topology->uv, m.topology->uv));
  CHECK(loaded.topology->landmarks68 == m.topology->landmarks68);
  CHECK(loaded.topology->landmarks7 == m.topology->landmarks7);
  CHECK(loaded.topology->lower_face_vertices == m.topology->lower_face_vertices);
  CHECK(loaded.topology->detail_mask_uv.data == m.topology->detail_mask_uv.data);

  save_model(loaded, p2);
  CHECK(read_bytes(p1) == read_bytes(p2));
}

TEST_CASE("load_model rejects malformed files") {
  const auto dir = temp_dir();
  SUBCASE("bad magic") {
    const auto p = dir / "bad_magic.hfm";
    std::ofstream(p, std::ios::binary) << "NOPE";
    CHECK_THROWS_AS(load_model(p.string()), parse_error);
  }
  SUBCASE("truncated file") {
    auto m = synth_model(4, 12, 3, 2, 3);
    const auto p = dir / "trunc.hfm";
    save_model(m, p.string());
    auto bytes = read_bytes(p);
    bytes.resize(bytes.size() / 2);
    std::ofstream(p, std::ios::binary)
        .write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_AS(load_model(p.string()), parse_error);
  }
  SUBCASE("triangle index past the vertex count fails validation") {
    auto m = synth_model(4, 12, 3, 2, 3);
    auto topo = std::make_shared<Topology>(*m.topology);
    topo->triangles(0, 0) = m.num_vertices();  // out of range
    m.topology = topo;
    const auto p = (dir / "bad_index.hfm").string();
    save_model(m, p);
    CHECK_THROWS_AS(load_model(p), validation_error);
  }
}

TEST_CASE("JSON manifest variant loads the same model") {
  const auto dir = temp_dir() / "manifest";
  fs::create_directories(dir);
  const auto m = synth_model(8, 16, 4, 3, 5);

  auto write_f32 = [&](const std::string& name, const double* data, size_t n) {
    std::vector<float> tmp(n);
    for (size_t i = 0; i < n; ++i) tmp[i] = static_cast<float>(data[i]);
    std::ofstream(dir / name, std::ios::binary)
        .write(reinterpret_cast<const char*>(tmp.data()),
               static_cast<std::streamsize>(n * 4));
  };
  auto write_u32 = [&](const std::string& name, const std::vector<int>& v) {
    std::vector<uint32_t> tmp(v.begin(), v.end());
    std::ofstream(dir / name, std::ios::binary)
        .write(reinterpret_cast<const char*>(tmp.data()),
               static_cast<std::streamsize>(tmp.size() * 4));
  };

  const auto& topo = *m.topology;
  write_f32("mean_shape.bin", m.mean_shape.data(), m.mean_shape.size());
  write_f32("shape_basis.bin", m.shape_basis.data(), m.shape_basis.size());
  write_f32("expr_basis.bin", m.expr_basis.data(), m.expr_basis.size());
  write_f32("mean_albedo.bin", m.mean_albedo.data(), m.mean_albedo.size());
  write_f32("albedo_basis.bin", m.albedo_basis.data(), m.albedo_basis.size());
  write_f32("uv.bin", topo.uv.data(), topo.uv.size());
  {
    std::vector<int> tris(topo.triangles.data(),
                          topo.triangles.data() + topo.triangles.size());
    write_u32("triangles.bin", tris);
  }
  write_u32("landmarks68.bin", topo.landmarks68);
  write_u32("landmarks7.bin", topo.landmarks7);
  write_u32("lower_face.bin", topo.lower_face_vertices);
  {
    std::vector<uint8_t> mask(topo.detail_mask_uv.data.size());
    for (size_t i = 0; i < mask.size(); ++i)
      mask[i] = topo.detail_mask_uv.data[i] != 0.0 ? 1 : 0;
    std::ofstream(dir / "mask.bin", std::ios::binary)
        .write(reinterpret_cast<const char*>(mask.data()),
               static_cast<std::streamsize>(mask.size()));
  }

  nlohmann::json j;
  j["V"] = m.num_vertices();
  j["T"] = topo.num_triangles();
  j["k_id"] = m.k_id();
  j["k_exp"] = m.k_exp();
  j["k_alb"] = m.k_alb();
  j["lower_face_count"] = topo.lower_face_vertices.size();
  j["arrays"] = {{"mean_shape", "mean_shape.bin"},
                 {"shape_basis", "shape_basis.bin"},
                 {"expr_basis", "expr_basis.bin"},
                 {"mean_albedo", "mean_albedo.bin"},
                 {"albedo_basis", "albedo_basis.bin"},
                 {"uv", "uv.bin"},
                 {"triangles", "triangles.bin"},
                 {"landmarks68", "landmarks68.bin"},
                 {"landmarks7", "landmarks7.bin"},
                 {"lower_face_vertices", "lower_face.bin"}};
  j["detail_mask"] = {{"width", topo.detail_mask_uv.width},
                      {"height", topo.detail_mask_uv.height},
                      {"file", "mask.bin"}};
  std::ofstream(dir / "model.json") << j.dump(2);

  const auto loaded = load_model((dir / "model.json").string());
  CHECK(exact_eq(loaded.mean_shape, m.mean_shape));
  CHECK(exact_eq(loaded.shape_basis, m.shape_basis));
  CHECK(exact_eq(loaded.topology->triangles, m.topology->triangles));
  CHECK(loaded.topology->landmarks7 == m.topology->landmarks7);

  SUBCASE("missing array file names the field") {
    fs::remove(dir / "expr_basis.bin");
    try {
      load_model((dir / "model.json").string());
      FAIL("expected parse_error");
    } catch (const parse_error& e) {
      CHECK(std::string(e.what()).find("expr_basis") != std::string::npos);
    }
  }
}

TEST_CASE("synth_model UV atlas has no overlapping triangles") {
  const auto m = synth_model(6, 8, 2, 2, 2);
  const auto& topo = *m.topology;
  const int t = topo.num_triangles();

  // Strict 2D triangle overlap: proper edge crossings or strict containment.
  auto cross = [](const Vec2& o, const Vec2& a, const Vec2& b) {
    return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
  };
  auto seg_cross = [&](const Vec2& a, const Vec2& b, const Vec2& c, const Vec2& d) {
    const double d1 = cross(a, b, c), d2 = cross(a, b, d);
    const double d3 = cross(c, d, a), d4 = cross(c, d, b);
    return ((d1 > 0) != (d2 > 0)) && ((d3 > 0) != (d4 > 0)) &&
           d1 != 0 && d2 != 0 && d3 != 0 && d4 != 0;
  };
  auto inside = [&](const Vec2& p, const Vec2& a, const Vec2& b, const Vec2& c) {
    const double d1 = cross(a, b, p), d2 = cross(b, c, p), d3 = cross(c, a, p);
    return (d1 > 0 && d2 > 0 && d3 > 0) || (d1 < 0 && d2 < 0 && d3 < 0);
  };
  auto tri_uv = [&](int i, Vec2 out[3]) {
    for (int k = 0; k < 3; ++k)
      out[k] = topo.uv.row(topo.triangles(i, k)).transpose();
  };

  int overlaps = 0;
  for (int i = 0; i < t; ++i) {
    Vec2 p[3], q[3];
    tri_uv(i, p);
    for (int j = i + 1; j < t; ++j) {
      tri_uv(j, q);
      bool hit = false;
      for (int a = 0; a < 3 && !hit; ++a)
        for (int b = 0; b < 3 && !hit; ++b)
          hit = seg_cross(p[a], p[(a + 1) % 3], q[b], q[(b + 1) % 3]);
      for (int k = 0; k < 3 && !hit; ++k)
        hit = inside(p[k], q[0], q[1], q[2]) || inside(q[k], p[0], p[1], p[2]);
      if (hit) ++overlaps;
    }
  }
  CHECK(overlaps == 0);
}

TEST_CASE("FaceParams validation") {
  FaceParams p;
  p.alpha = VecX::Zero(4);
  p.beta = VecX::Zero(3);
  p.gamma = VecX::Zero(2);
  CHECK_NOTHROW(p.validate());
  SUBCASE("non-finite entries rejected") {
    p.translation.z() = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(p.validate(), validation_error);
  }
  SUBCASE("lighting must be 27 long") {
    p.lighting = VecX::Zero(9);
    CHECK_THROWS_AS(p.validate(), validation_error);
  }
  SUBCASE("camera sanity") {
    p.camera.focal = 0.0;
    CHECK_THROWS_AS(p.validate(), validation_error);
  }
}
