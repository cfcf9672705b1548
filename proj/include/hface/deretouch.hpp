#pragma once

#include "hface/render.hpp"

namespace hface {

// ---------------------------------------------------------------------------
// De-retouching albedo refinement. Under the shading-consistency assumption
// the aligned texture T' and its retouched version T0 share one shading map,
// so their ratio transfers high-frequency skin detail onto the coarse albedo:
//   B  = (T' + phi(T0)) / (T0 + phi(T0)),   A' = clamp(A0 * B, 0, 1),
// applied per texel and per channel. phi keeps the ratio finite where T0
// approaches zero.
// ---------------------------------------------------------------------------

// phi(t0) = 1 / (t0^3 / eps + eps); equals 1/eps at t0 = 0 and decays like
// eps / t0^3, so it only matters near zero.
double phi(double t0, double epsilon);

struct DeretouchInput {
  TextureUV albedo0_uv;     // A0, the coarse albedo rasterized to UV
  TextureUV tex_aligned;    // T', the unwrapped (detailed) texture
  TextureUV tex_retouched;  // T0, retouched texture (file or retouch_oracle)
  double epsilon = 1e-6;

  // Same resolution, values in [0,1], finite, epsilon > 0.
  void validate() const;
};

struct DeretouchOutput {
  TextureUV albedo_prime_uv;  // A'; visibility copied from tex_aligned
  Grid ratio_uv;              // B, finite everywhere including T0 = 0
};

DeretouchOutput deretouch_albedo(const DeretouchInput& input);

// Deterministic stand-in for the retouching step: an iterated edge-preserving
// smoother (two passes of a bilateral-style filter with spatial sigma
// radius/2, range sigma 0.25, window half-width = radius). Low-amplitude
// detail is averaged away while strong edges survive; the visibility mask is
// passed through unchanged.
TextureUV retouch_oracle(const TextureUV& tex, int radius);

}  // namespace hface
