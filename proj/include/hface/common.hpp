#pragma once

#include <Eigen/Core>
#include <Eigen/Dense>

#include <cstdint>
#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace hface {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

// V x 3 vertex arrays, row-major so a flat (3V) view is contiguous.
using Vertices = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using UVCoords = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;
using Triangles = Eigen::Matrix<int, Eigen::Dynamic, 3, Eigen::RowMajor>;

inline Eigen::Map<VecX> flat(Vertices& v) { return {v.data(), v.size()}; }
inline Eigen::Map<const VecX> flat(const Vertices& v) { return {v.data(), v.size()}; }

class parse_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class validation_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class config_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void warn(const std::string& msg);

// ---------------------------------------------------------------------------
// Grid: dense row-major float grid, the storage type for detail maps, UV
// textures and images. Texel (i, j) covers uv [i/W,(i+1)/W) x [j/H,(j+1)/H),
// center at ((i+0.5)/W, (j+0.5)/H).
// ---------------------------------------------------------------------------
struct Grid {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  Grid() = default;
  Grid(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c),
        data(static_cast<size_t>(w) * h * c, fill) {}

  bool empty() const { return data.empty(); }
  int size() const { return width * height * channels; }

  double& at(int i, int j, int c) {
    return data[(static_cast<size_t>(j) * width + i) * channels + c];
  }
  double at(int i, int j, int c) const {
    return data[(static_cast<size_t>(j) * width + i) * channels + c];
  }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

using Image = Grid;      // H x W x 3, linear RGB
using TextureGrid = Grid;

// The four taps of a clamp-to-edge bilinear lookup at uv in [0,1]^2.
struct BilinearTaps {
  int i0, i1, j0, j1;
  double w00, w10, w01, w11;  // weights for (i0,j0),(i1,j0),(i0,j1),(i1,j1)
  double fx, fy;              // fractional offsets, for spatial derivatives
};

BilinearTaps bilinear_taps(int width, int height, double u, double v);
inline BilinearTaps bilinear_taps(const Grid& g, double u, double v) {
  return bilinear_taps(g.width, g.height, u, v);
}

// Samples channel c at uv with clamp-to-edge addressing.
double sample_bilinear(const Grid& g, double u, double v, int c);
Vec3 sample_bilinear3(const Grid& g, double u, double v);

// d(sample)/du and d(sample)/dv of the bilinear interpolant (piecewise bilinear).
void sample_bilinear_duv(const Grid& g, double u, double v, int c,
                         double* ddu, double* ddv);

// Adds w * adjoint into the four taps of channel c (transpose of sampling).
void scatter_bilinear(Grid& g, double u, double v, int c, double adjoint);

// ---------------------------------------------------------------------------
// Rng: deterministic random source. Explicit Box-Muller so streams do not
// depend on the standard library's distribution implementation.
// ---------------------------------------------------------------------------
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  double uniform() {  // [0, 1)
    return (engine_() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int uniform_int(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(engine_() % static_cast<uint64_t>(hi - lo + 1));
  }
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 1e-300) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }
  uint64_t raw() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Threading. Chunk layout is fixed (independent of the thread count) and
// reductions combine chunk partials in index order, so results are identical
// for any schedule.
// ---------------------------------------------------------------------------
void set_thread_count(int n);
int thread_count();

// fn(begin, end, chunk_index); chunk count depends only on n.
void parallel_for(int n, const std::function<void(int, int, int)>& fn);
int parallel_chunk_count(int n);

// sRGB transfer functions (images are linear in memory, sRGB in 8-bit files).
double srgb_to_linear(double s);
double linear_to_srgb(double l);

}  // namespace hface
