#pragma once

#include "hface/common.hpp"

#include <array>

namespace hface {

// Band-2 real spherical harmonics with the Lambertian irradiance convolution
// constants folded in (A0=pi, A1=2pi/3, A2=pi/4). B[0] is the ambient basis:
// lighting L[c*9+0] = 1/B[0] with all else zero reproduces albedo exactly.
std::array<double, 9> sh_basis(const Vec3& n);

// d(B_k)/d(n) for each of the nine basis functions.
std::array<Vec3, 9> sh_basis_gradient(const Vec3& n);

constexpr double sh_ambient_basis() {
  // pi * sqrt(1/(4*pi)) = sqrt(pi)/2
  return 0.88622692545275801;
}

// out_c = albedo_c * sum_k L[c*9+k] * B_k(n); no clamping.
Vec3 sh_shade(const Vec3& albedo, const Vec3& normal, const VecX& lighting);

// Adjoints of sh_shade; any output pointer may be null. lighting_bar
// accumulates into 27 entries, normal/albedo bars accumulate into Vec3.
void sh_shade_backward(const Vec3& albedo, const Vec3& normal,
                       const VecX& lighting, const Vec3& out_bar,
                       Vec3* albedo_bar, Vec3* normal_bar, VecX* lighting_bar);

}  // namespace hface
