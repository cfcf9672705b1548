#include "hface/common.hpp"

#include <algorithm>
#include <atomic>
#include <functional>
#include <iostream>
#include <mutex>
#include <thread>

namespace hface {

void warn(const std::string& msg) {
  static std::mutex m;
  std::lock_guard<std::mutex> lock(m);
  std::cerr << "[hface] warning: " << msg << "\n";
}

BilinearTaps bilinear_taps(int width, int height, double u, double v) {
  // Texel centers at ((i+0.5)/W, (j+0.5)/H); clamp-to-edge outside.
  const double x = u * width - 0.5;
  const double y = v * height - 0.5;
  double fi = std::floor(x);
  double fj = std::floor(y);
  BilinearTaps t;
  t.fx = x - fi;
  t.fy = y - fj;
  int i0 = static_cast<int>(fi);
  int j0 = static_cast<int>(fj);
  t.i0 = std::clamp(i0, 0, width - 1);
  t.i1 = std::clamp(i0 + 1, 0, width - 1);
  t.j0 = std::clamp(j0, 0, height - 1);
  t.j1 = std::clamp(j0 + 1, 0, height - 1);
  t.w00 = (1.0 - t.fx) * (1.0 - t.fy);
  t.w10 = t.fx * (1.0 - t.fy);
  t.w01 = (1.0 - t.fx) * t.fy;
  t.w11 = t.fx * t.fy;
  return t;
}

double sample_bilinear(const Grid& g, double u, double v, int c) {
  const BilinearTaps t = bilinear_taps(g, u, v);
  return t.w00 * g.at(t.i0, t.j0, c) + t.w10 * g.at(t.i1, t.j0, c) +
         t.w01 * g.at(t.i0, t.j1, c) + t.w11 * g.at(t.i1, t.j1, c);
}

Vec3 sample_bilinear3(const Grid& g, double u, double v) {
  const BilinearTaps t = bilinear_taps(g, u, v);
  Vec3 out;
  for (int c = 0; c < 3; ++c) {
    out[c] = t.w00 * g.at(t.i0, t.j0, c) + t.w10 * g.at(t.i1, t.j0, c) +
             t.w01 * g.at(t.i0, t.j1, c) + t.w11 * g.at(t.i1, t.j1, c);
  }
  return out;
}

void sample_bilinear_duv(const Grid& g, double u, double v, int c,
                         double* ddu, double* ddv) {
  const BilinearTaps t = bilinear_taps(g, u, v);
  const double g00 = g.at(t.i0, t.j0, c), g10 = g.at(t.i1, t.j0, c);
  const double g01 = g.at(t.i0, t.j1, c), g11 = g.at(t.i1, t.j1, c);
  const double dfx = (g10 - g00) * (1.0 - t.fy) + (g11 - g01) * t.fy;
  const double dfy = (g01 - g00) * (1.0 - t.fx) + (g11 - g10) * t.fx;
  *ddu = dfx * g.width;   // x = u*W - 0.5
  *ddv = dfy * g.height;
}

void scatter_bilinear(Grid& g, double u, double v, int c, double adjoint) {
  const BilinearTaps t = bilinear_taps(g, u, v);
  g.at(t.i0, t.j0, c) += t.w00 * adjoint;
  g.at(t.i1, t.j0, c) += t.w10 * adjoint;
  g.at(t.i0, t.j1, c) += t.w01 * adjoint;
  g.at(t.i1, t.j1, c) += t.w11 * adjoint;
}

namespace {
std::atomic<int> g_threads{0};  // 0 = not initialized yet
}

void set_thread_count(int n) { g_threads = std::max(1, n); }

int thread_count() {
  int t = g_threads.load();
  if (t == 0) {
    if (const char* env = std::getenv("HFACE_THREADS")) {
      t = std::max(1, std::atoi(env));
    } else {
      t = std::max(1u, std::thread::hardware_concurrency());
    }
    g_threads = t;
  }
  return t;
}

int parallel_chunk_count(int n) {
  if (n <= 0) return 0;
  return std::min(n, 64);
}

void parallel_for(int n, const std::function<void(int, int, int)>& fn) {
  if (n <= 0) return;
  const int chunks = parallel_chunk_count(n);
  const int workers = std::min(thread_count(), chunks);
  auto run_chunk = [&](int k) {
    const int begin = static_cast<int>(static_cast<int64_t>(n) * k / chunks);
    const int end = static_cast<int>(static_cast<int64_t>(n) * (k + 1) / chunks);
    if (begin < end) fn(begin, end, k);
  };
  if (workers <= 1) {
    for (int k = 0; k < chunks; ++k) run_chunk(k);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int k = next.fetch_add(1); k < chunks; k = next.fetch_add(1)) run_chunk(k);
    });
  }
  for (auto& th : pool) th.join();
}

double srgb_to_linear(double s) {
  if (s <= 0.04045) return s / 12.92;
  return std::pow((s + 0.055) / 1.055, 2.4);
}

double linear_to_srgb(double l) {
  if (l <= 0.0031308) return 12.92 * l;
  return 1.055 * std::pow(l, 1.0 / 2.4) - 0.055;
}

}  // namespace hface
