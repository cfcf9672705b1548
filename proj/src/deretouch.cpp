#include "hface/deretouch.hpp"

namespace hface {

double phi(double t0, double epsilon) {
  return 1.0 / (t0 * t0 * t0 / epsilon + epsilon);
}

namespace {

void check_texture(const TextureUV& t, int w, int h, const char* name) {
  if (t.rgb.width != w || t.rgb.height != h || t.rgb.channels != 3)
    throw validation_error(std::string("deretouch: ") + name +
                           " resolution differs");
  for (double v : t.rgb.data)
    if (!std::isfinite(v) || v < 0.0 || v > 1.0)
      throw validation_error(std::string("deretouch: ") + name +
                             " values must be finite in [0,1]");
}

}  // namespace

void DeretouchInput::validate() const {
  const int w = albedo0_uv.rgb.width, h = albedo0_uv.rgb.height;
  if (w <= 0 || h <= 0)
    throw validation_error("deretouch: empty albedo texture");
  check_texture(albedo0_uv, w, h, "albedo0_uv");
  check_texture(tex_aligned, w, h, "tex_aligned");
  check_texture(tex_retouched, w, h, "tex_retouched");
  if (!(epsilon > 0.0)) throw validation_error("deretouch: epsilon must be positive");
}

DeretouchOutput deretouch_albedo(const DeretouchInput& input) {
  input.validate();
  const Grid& a0 = input.albedo0_uv.rgb;
  const Grid& tp = input.tex_aligned.rgb;
  const Grid& t0 = input.tex_retouched.rgb;

  DeretouchOutput out;
  out.albedo_prime_uv.rgb = Grid(a0.width, a0.height, 3, 0.0);
  out.albedo_prime_uv.visible = input.tex_aligned.visible;
  out.albedo_prime_uv.degenerate = input.tex_aligned.degenerate;
  out.ratio_uv = Grid(a0.width, a0.height, 3, 0.0);

  for (int k = 0; k < a0.size(); ++k) {
    const double guard = phi(t0.data[k], input.epsilon);
    const double b = (tp.data[k] + guard) / (t0.data[k] + guard);
    out.ratio_uv.data[k] = b;
    out.albedo_prime_uv.rgb.data[k] = std::clamp(a0.data[k] * b, 0.0, 1.0);
  }
  return out;
}

TextureUV retouch_oracle(const TextureUV& tex, int radius) {
  if (radius < 1) throw validation_error("retouch_oracle: radius must be >= 1");
  const Grid& src = tex.rgb;
  if (src.channels != 3)
    throw validation_error("retouch_oracle: texture must have 3 channels");

  const double sigma_s = radius / 2.0;
  const double sigma_r = 0.25;
  const int iterations = 2;

  std::vector<double> spatial(static_cast<size_t>(2 * radius + 1) *
                              (2 * radius + 1));
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      spatial[(dy + radius) * (2 * radius + 1) + (dx + radius)] =
          std::exp(-(dx * dx + dy * dy) / (2.0 * sigma_s * sigma_s));

  TextureUV out = tex;
  Grid cur = src;
  Grid next(src.width, src.height, src.channels, 0.0);
  for (int it = 0; it < iterations; ++it) {
    for (int y = 0; y < src.height; ++y)
      for (int x = 0; x < src.width; ++x)
        for (int c = 0; c < src.channels; ++c) {
          const double center = cur.at(x, y, c);
          double acc = 0.0, wsum = 0.0;
          for (int dy = -radius; dy <= radius; ++dy) {
            const int yy = y + dy;
            if (yy < 0 || yy >= src.height) continue;
            for (int dx = -radius; dx <= radius; ++dx) {
              const int xx = x + dx;
              if (xx < 0 || xx >= src.width) continue;
              const double v = cur.at(xx, yy, c);
              const double d = v - center;
              const double w =
                  spatial[(dy + radius) * (2 * radius + 1) + (dx + radius)] *
                  std::exp(-d * d / (2.0 * sigma_r * sigma_r));
              acc += w * v;
              wsum += w;
            }
          }
          next.at(x, y, c) = acc / wsum;
        }
    std::swap(cur, next);
  }
  out.rgb = cur;
  return out;
}

}  // namespace hface
