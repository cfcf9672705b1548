#include "hface/shading.hpp"

namespace hface {

namespace {

// A_l * Y_lm normalization constants
const double kC0 = M_PI * std::sqrt(1.0 / (4.0 * M_PI));            // 0.886227
const double kC1 = (2.0 * M_PI / 3.0) * std::sqrt(3.0 / (4.0 * M_PI));  // 1.023327
const double kC2 = (M_PI / 4.0) * std::sqrt(15.0 / (4.0 * M_PI));   // 0.858085
const double kC3 = (M_PI / 4.0) * 0.25 * std::sqrt(5.0 / M_PI);     // 0.247708
const double kC4 = (M_PI / 4.0) * 0.25 * std::sqrt(15.0 / M_PI);    // 0.429043

}  // namespace

std::array<double, 9> sh_basis(const Vec3& n) {
  const double x = n.x(), y = n.y(), z = n.z();
  return {kC0,
          kC1 * y,
          kC1 * z,
          kC1 * x,
          kC2 * x * y,
          kC2 * y * z,
          kC3 * (3.0 * z * z - 1.0),
          kC2 * x * z,
          kC4 * (x * x - y * y)};
}

std::array<Vec3, 9> sh_basis_gradient(const Vec3& n) {
  const double x = n.x(), y = n.y(), z = n.z();
  return {Vec3(0, 0, 0),
          Vec3(0, kC1, 0),
          Vec3(0, 0, kC1),
          Vec3(kC1, 0, 0),
          Vec3(kC2 * y, kC2 * x, 0),
          Vec3(0, kC2 * z, kC2 * y),
          Vec3(0, 0, 6.0 * kC3 * z),
          Vec3(kC2 * z, 0, kC2 * x),
          Vec3(2.0 * kC4 * x, -2.0 * kC4 * y, 0)};
}

Vec3 sh_shade(const Vec3& albedo, const Vec3& normal, const VecX& lighting) {
  const auto b = sh_basis(normal);
  Vec3 out;
  for (int c = 0; c < 3; ++c) {
    double irr = 0.0;
    for (int k = 0; k < 9; ++k) irr += lighting[c * 9 + k] * b[k];
    out[c] = albedo[c] * irr;
  }
  return out;
}

void sh_shade_backward(const Vec3& albedo, const Vec3& normal,
                       const VecX& lighting, const Vec3& out_bar,
                       Vec3* albedo_bar, Vec3* normal_bar, VecX* lighting_bar) {
  const auto b = sh_basis(normal);
  const auto db = sh_basis_gradient(normal);
  for (int c = 0; c < 3; ++c) {
    double irr = 0.0;
    for (int k = 0; k < 9; ++k) irr += lighting[c * 9 + k] * b[k];
    if (albedo_bar) (*albedo_bar)[c] += out_bar[c] * irr;
    const double scale = out_bar[c] * albedo[c];
    if (lighting_bar)
      for (int k = 0; k < 9; ++k) (*lighting_bar)[c * 9 + k] += scale * b[k];
    if (normal_bar)
      for (int k = 0; k < 9; ++k)
        *normal_bar += scale * lighting[c * 9 + k] * db[k];
  }
}

}  // namespace hface
