#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hface/geometry.hpp"
#include "hface/image_io.hpp"

#include <filesystem>
#include <fstream>

using namespace hface;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

float to_f32(double v) { return static_cast<float>(v); }

}  // namespace

TEST_CASE("png round-trips sRGB-representable values exactly") {
  // Values that sit exactly on the 8-bit sRGB lattice survive the encode /
  // decode pair bit-for-bit (up to the linear<->sRGB double rounding).
  Image img(9, 5, 3);
  Rng rng(51);
  for (double& v : img.data)
    v = srgb_to_linear(rng.uniform_int(0, 255) / 255.0);
  const auto path = temp_file("hface_io_rt.png");
  save_png(img, path.string());
  const Image back = load_png(path.string());
  REQUIRE(back.width == img.width);
  REQUIRE(back.height == img.height);
  REQUIRE(back.channels == 3);
  for (size_t i = 0; i < img.data.size(); ++i)
    CHECK(std::abs(back.data[i] - img.data[i]) < 1e-12);
  std::filesystem::remove(path);
}

TEST_CASE("png quantization error is bounded by one sRGB step") {
  Image img(16, 16, 3);
  Rng rng(52);
  for (double& v : img.data) v = rng.uniform();
  const auto path = temp_file("hface_io_q.png");
  save_png(img, path.string());
  const Image back = load_png(path.string());
  for (size_t i = 0; i < img.data.size(); ++i) {
    // One 8-bit sRGB step maps to at most ~1/117 in linear space (the
    // steepest part of the curve near white).
    CHECK(std::abs(back.data[i] - img.data[i]) < 1.0 / 117.0);
  }
  std::filesystem::remove(path);
}

TEST_CASE("png clamps out-of-range values instead of wrapping") {
  Image img(2, 1, 3);
  img.at(0, 0, 0) = -0.5;
  img.at(0, 0, 1) = 1.7;
  img.at(0, 0, 2) = 0.0;
  img.at(1, 0, 0) = 1.0;
  const auto path = temp_file("hface_io_clamp.png");
  save_png(img, path.string());
  const Image back = load_png(path.string());
  CHECK(back.at(0, 0, 0) == 0.0);
  CHECK(back.at(0, 0, 1) == 1.0);
  CHECK(back.at(0, 0, 2) == 0.0);
  CHECK(back.at(1, 0, 0) == 1.0);
  std::filesystem::remove(path);
}

TEST_CASE("pfm round-trips float32 data exactly, including out-of-range") {
  Image img(7, 11, 3);
  Rng rng(53);
  for (double& v : img.data) v = to_f32(4.0 * rng.normal());  // pre-rounded
  img.at(0, 0, 0) = to_f32(-3.25);
  img.at(1, 0, 1) = to_f32(1e6);
  const auto path = temp_file("hface_io_rt.pfm");
  save_pfm(img, path.string());
  const Image back = load_pfm(path.string());
  REQUIRE(back.width == 7);
  REQUIRE(back.height == 11);
  CHECK(back.data == img.data);
  std::filesystem::remove(path);
}

TEST_CASE("gray pfm round-trips a single-channel grid exactly") {
  Grid g(13, 4, 1);
  Rng rng(54);
  for (double& v : g.data) v = to_f32(rng.normal());
  const auto path = temp_file("hface_io_gray.pfm");
  save_pfm_gray(g, path.string());
  const Grid back = load_pfm_gray(path.string());
  REQUIRE(back.width == 13);
  REQUIRE(back.height == 4);
  REQUIRE(back.channels == 1);
  CHECK(back.data == g.data);
  std::filesystem::remove(path);
}

TEST_CASE("load_image and save_image dispatch on the file extension") {
  Image img(4, 4, 3);
  Rng rng(55);
  for (double& v : img.data) v = to_f32(rng.uniform());
  const auto pfm_path = temp_file("hface_io_dispatch.pfm");
  save_image(img, pfm_path.string());
  CHECK(load_image(pfm_path.string()).data == img.data);
  std::filesystem::remove(pfm_path);

  CHECK_THROWS_AS(save_image(img, temp_file("x.bmp").string()), parse_error);
  CHECK_THROWS_AS(load_image("/nonexistent/file.png"), parse_error);
}

TEST_CASE("16-bit grid png round-trips within the quantization step") {
  Grid g(24, 18, 1);
  Rng rng(56);
  for (double& v : g.data) v = 3.0 * rng.normal() - 1.0;
  const auto path = temp_file("hface_io_grid.png");
  save_grid_png16(g, path.string());
  const Grid back = load_grid_png16(path.string());
  REQUIRE(back.width == g.width);
  REQUIRE(back.height == g.height);
  double lo = g.data[0], hi = g.data[0];
  for (double v : g.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double step = (hi - lo) / 65535.0;
  for (size_t i = 0; i < g.data.size(); ++i)
    CHECK(std::abs(back.data[i] - g.data[i]) <= 0.5 * step + 1e-12);
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".json");
}

TEST_CASE("constant 16-bit grid png reproduces the constant exactly") {
  Grid g(8, 8, 1, 0.37);
  const auto path = temp_file("hface_io_const.png");
  save_grid_png16(g, path.string());
  const Grid back = load_grid_png16(path.string());
  for (double v : back.data) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".json");
}

TEST_CASE("grid png without its sidecar is rejected") {
  Grid g(4, 4, 1);
  Rng rng(57);
  for (double& v : g.data) v = rng.normal();
  const auto path = temp_file("hface_io_nosidecar.png");
  save_grid_png16(g, path.string());
  std::filesystem::remove(path.string() + ".json");
  CHECK_THROWS_AS(load_grid_png16(path.string()), parse_error);
  std::filesystem::remove(path);
}

TEST_CASE("corrupt png and pfm files raise parse errors naming the problem") {
  const auto path = temp_file("hface_io_corrupt.png");
  {
    std::ofstream f(path, std::ios::binary);
    f << "definitely not a png";
  }
  CHECK_THROWS_AS(load_png(path.string()), parse_error);
  std::filesystem::remove(path);

  const auto pfm_path = temp_file("hface_io_corrupt.pfm");
  {
    std::ofstream f(pfm_path, std::ios::binary);
    f << "PF\n4 4\n";  // truncated: no scale line, no data
  }
  CHECK_THROWS_AS(load_pfm(pfm_path.string()), parse_error);
  std::filesystem::remove(pfm_path);
}
