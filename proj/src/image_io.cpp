#include "hface/image_io.hpp"
#include "hface/geometry.hpp"

#include <nlohmann/json.hpp>
#include <png.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>

namespace hface {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

[[noreturn]] void png_fail(const std::string& path, const char* what) {
  throw parse_error(path + ": " + what);
}

// Reads any PNG into 16-bit RGB rows (libpng handles expansion); bit depth
// of the source is returned so callers can rescale.
struct RawPng {
  int width = 0, height = 0, bit_depth = 0, channels = 0;
  std::vector<uint16_t> pixels;  // width*height*channels, native depth values
};

RawPng read_png_raw(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw parse_error("cannot open image: " + path);
  png_byte header[8];
  if (std::fread(header, 1, 8, f.get()) != 8 || png_sig_cmp(header, 0, 8))
    png_fail(path, "not a PNG file");

  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    png_fail(path, "libpng init failed");
  }
  RawPng out;
  std::vector<png_bytep> rows;
  std::vector<png_byte> data;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    png_fail(path, "PNG decode error");
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);

  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && out.bit_depth < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  if (out.bit_depth < 8) out.bit_depth = 8;
  if (out.bit_depth == 16) png_set_swap(png);  // files are big-endian
  png_read_update_info(png, info);

  out.channels = static_cast<int>(png_get_channels(png, info));
  const size_t rowbytes = png_get_rowbytes(png, info);
  data.resize(rowbytes * out.height);
  rows.resize(out.height);
  for (int j = 0; j < out.height; ++j) rows[j] = data.data() + j * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  out.pixels.resize(static_cast<size_t>(out.width) * out.height * out.channels);
  if (out.bit_depth == 16) {
    std::memcpy(out.pixels.data(), data.data(), out.pixels.size() * 2);
  } else {
    for (size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = data[i];
  }
  return out;
}

void write_png_raw(const std::string& path, int width, int height, int channels,
                   int bit_depth, const std::vector<uint16_t>& pixels) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error(path + ": libpng init failed");
  }
  std::vector<png_byte> data;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error(path + ": PNG encode error");
  }
  png_init_io(png, f.get());
  const int color = channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  png_set_IHDR(png, info, width, height, bit_depth, color, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);

  const size_t row_elems = static_cast<size_t>(width) * channels;
  const size_t bytes_per = bit_depth == 16 ? 2 : 1;
  data.resize(row_elems * height * bytes_per);
  rows.resize(height);
  for (int j = 0; j < height; ++j) {
    rows[j] = data.data() + j * row_elems * bytes_per;
    if (bit_depth == 16) {
      std::memcpy(rows[j], pixels.data() + j * row_elems, row_elems * 2);
    } else {
      for (size_t i = 0; i < row_elems; ++i)
        rows[j][i] = static_cast<png_byte>(pixels[j * row_elems + i]);
    }
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(f.get()) != 0)
    throw std::runtime_error("write failed: " + path);
}

bool has_ext(const std::string& path, const char* ext) {
  auto e = std::filesystem::path(path).extension().string();
  for (auto& c : e) c = static_cast<char>(std::tolower(c));
  return e == ext;
}

}  // namespace

Image load_png(const std::string& path) {
  const RawPng raw = read_png_raw(path);
  const double maxval = raw.bit_depth == 16 ? 65535.0 : 255.0;
  Image img(raw.width, raw.height, 3);
  for (int j = 0; j < raw.height; ++j) {
    for (int i = 0; i < raw.width; ++i) {
      for (int c = 0; c < 3; ++c) {
        const int src = raw.channels == 1 ? 0 : c;
        const double s =
            raw.pixels[(static_cast<size_t>(j) * raw.width + i) * raw.channels +
                       src] /
            maxval;
        img.at(i, j, c) = srgb_to_linear(s);
      }
    }
  }
  return img;
}

void save_png(const Image& img, const std::string& path) {
  if (img.channels != 3) throw std::invalid_argument("save_png: need 3 channels");
  std::vector<uint16_t> pixels(static_cast<size_t>(img.width) * img.height * 3);
  for (int j = 0; j < img.height; ++j)
    for (int i = 0; i < img.width; ++i)
      for (int c = 0; c < 3; ++c) {
        const double s = linear_to_srgb(std::clamp(img.at(i, j, c), 0.0, 1.0));
        pixels[(static_cast<size_t>(j) * img.width + i) * 3 + c] =
            static_cast<uint16_t>(std::lround(s * 255.0));
      }
  write_png_raw(path, img.width, img.height, 3, 8, pixels);
}

Image load_pfm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw parse_error("cannot open image: " + path);
  std::string tag;
  int w = 0, h = 0;
  double scale = 0.0;
  in >> tag >> w >> h >> scale;
  if ((tag != "PF" && tag != "Pf") || w <= 0 || h <= 0)
    throw parse_error(path + ": bad PFM header");
  in.get();  // single whitespace after header
  const int channels = tag == "PF" ? 3 : 1;
  std::vector<float> row(static_cast<size_t>(w) * channels);
  Image img(w, h, 3);
  // PFM rows are bottom-up
  for (int j = h - 1; j >= 0; --j) {
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(row.size() * 4));
    if (!in) throw parse_error(path + ": truncated PFM payload");
    for (int i = 0; i < w; ++i)
      for (int c = 0; c < 3; ++c)
        img.at(i, j, c) = row[i * channels + (channels == 3 ? c : 0)];
  }
  return img;
}

void save_pfm(const Image& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << "PF\n" << img.width << " " << img.height << "\n-1.0\n";
  std::vector<float> row(static_cast<size_t>(img.width) * 3);
  for (int j = img.height - 1; j >= 0; --j) {
    for (int i = 0; i < img.width; ++i)
      for (int c = 0; c < 3; ++c)
        row[i * 3 + c] = static_cast<float>(img.at(i, j, c));
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * 4));
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

Grid load_pfm_gray(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw parse_error("cannot open image: " + path);
  std::string tag;
  int w = 0, h = 0;
  double scale = 0.0;
  in >> tag >> w >> h >> scale;
  if (tag != "Pf" || w <= 0 || h <= 0)
    throw parse_error(path + ": bad grayscale PFM header");
  in.get();
  Grid g(w, h, 1);
  std::vector<float> row(w);
  for (int j = h - 1; j >= 0; --j) {
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(row.size() * 4));
    if (!in) throw parse_error(path + ": truncated PFM payload");
    for (int i = 0; i < w; ++i) g.at(i, j, 0) = row[i];
  }
  return g;
}

void save_pfm_gray(const Grid& g, const std::string& path) {
  if (g.channels != 1)
    throw std::invalid_argument("save_pfm_gray: need 1 channel");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << "Pf\n" << g.width << " " << g.height << "\n-1.0\n";
  std::vector<float> row(g.width);
  for (int j = g.height - 1; j >= 0; --j) {
    for (int i = 0; i < g.width; ++i) row[i] = static_cast<float>(g.at(i, j, 0));
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * 4));
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

Image load_image(const std::string& path) {
  if (has_ext(path, ".png")) return load_png(path);
  if (has_ext(path, ".pfm")) return load_pfm(path);
  throw parse_error("unsupported image extension: " + path);
}

void save_image(const Image& img, const std::string& path) {
  if (has_ext(path, ".png")) {
    save_png(img, path);
  } else if (has_ext(path, ".pfm")) {
    save_pfm(img, path);
  } else {
    throw parse_error("unsupported image extension: " + path);
  }
}

// 16-bit PNG export of an arbitrary grid; values are affinely mapped to
// [0, 65535] and the mapping recorded in a JSON sidecar for exact reload.
void save_grid_png16(const Grid& g, const std::string& path) {
  if (g.channels != 1 && g.channels != 3)
    throw std::invalid_argument("save_grid_png16: need 1 or 3 channels");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double v : g.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!(hi > lo)) hi = lo + 1.0;  // constant grid: arbitrary unit span
  const double scale = (hi - lo) / 65535.0;

  std::vector<uint16_t> pixels(g.data.size());
  for (size_t i = 0; i < g.data.size(); ++i)
    pixels[i] = static_cast<uint16_t>(
        std::lround(std::clamp((g.data[i] - lo) / scale, 0.0, 65535.0)));
  write_png_raw(path, g.width, g.height, g.channels, 16, pixels);

  nlohmann::json sidecar;
  sidecar["offset"] = lo;
  sidecar["scale"] = scale;
  sidecar["channels"] = g.channels;
  std::ofstream side(path + ".json");
  side << sidecar.dump(2) << "\n";
  if (!side) throw std::runtime_error("write failed: " + path + ".json");
}

Grid load_grid_png16(const std::string& path) {
  std::ifstream side(path + ".json");
  if (!side) throw parse_error("missing quantization sidecar: " + path + ".json");
  nlohmann::json sidecar;
  try {
    side >> sidecar;
  } catch (const std::exception& e) {
    throw parse_error(path + ".json: invalid JSON: " + e.what());
  }
  const double lo = sidecar.at("offset").get<double>();
  const double scale = sidecar.at("scale").get<double>();

  const RawPng raw = read_png_raw(path);
  if (raw.bit_depth != 16) throw parse_error(path + ": expected 16-bit PNG");
  Grid g(raw.width, raw.height, raw.channels);
  for (size_t i = 0; i < raw.pixels.size(); ++i)
    g.data[i] = lo + scale * raw.pixels[i];
  return g;
}

}  // namespace hface
