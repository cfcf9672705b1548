#pragma once

#include "hface/camera.hpp"
#include "hface/geometry.hpp"
#include "hface/image_io.hpp"
#include "hface/shading.hpp"

namespace hface {

// ---------------------------------------------------------------------------
// Rasterization. Pixel (x, y) is sampled at center (x+0.5, y+0.5). A triangle
// is front-facing when its projected signed area is negative (y grows down).
// The z-buffer uses strict less-than, so at exactly equal depth the lowest
// triangle id (drawn first) keeps the pixel. Triangles with any vertex behind
// the near plane are dropped (no clipping).
// ---------------------------------------------------------------------------
struct FragmentBuffer {
  int width = 0, height = 0;
  std::vector<int> tri;       // -1 where empty
  std::vector<double> bary;   // 3 per pixel, perspective-correct
  std::vector<double> depth;  // mm

  bool covered(int x, int y) const { return tri[y * width + x] >= 0; }
  int tri_at(int x, int y) const { return tri[y * width + x]; }
  const double* bary_at(int x, int y) const {
    return &bary[(static_cast<size_t>(y) * width + x) * 3];
  }
  double depth_at(int x, int y) const { return depth[y * width + x]; }
  int coverage_count() const;
};

FragmentBuffer rasterize_projected(const Triangles& tris,
                                   const ProjectedPoints& pts, int width,
                                   int height);

// Poses and projects the mesh, then rasterizes.
FragmentBuffer rasterize(const Mesh& mesh, const FaceParams& params);

// Per-pixel rasterization math shared by the forward pass and the gradients:
// edge functions C_k, signed area A, screen barycentrics b, perspective
// weights w and depth, all recomputed from the current projections.
struct PixelCtx {
  int v[3];      // vertex indices
  Vec2 s[3];     // screen positions
  double z[3];   // camera-space depths
  double c[3];   // edge functions at the pixel center
  double area;   // signed area (negative when front-facing)
  double b[3];   // screen barycentrics
  double r[3];   // b_k / z_k
  double w_sum;  // sum of r
  double w[3];   // perspective-correct weights
  double depth;  // 1 / w_sum
  bool ok = false;
};
PixelCtx pixel_ctx(const Triangles& tris, const ProjectedPoints& pts, int t,
                   double px, double py);

// ---------------------------------------------------------------------------
// Forward rendering: decode -> deformation -> pose -> rasterize -> shade.
// ---------------------------------------------------------------------------
struct RenderOptions {
  bool detail_normals = false;        // shade with dpm-driven normals
  const Grid* albedo_uv = nullptr;    // UV texture overrides vertex albedo
  const Image* background = nullptr;  // under uncovered pixels (else black)
};

struct RenderState {
  Mesh m1;                      // deformed model-space mesh with normals
  Vertices normal_accum;        // unnormalized normal sums (for gradients)
  std::vector<int> normal_flagged;
  VertexAlbedo albedo;          // decoded when no UV texture is used
  bool vertex_albedo_used = false;
  Mat3 rot;
  Vertices cam;                 // camera-space positions
  Vertices normals_cam;
  Vertices tu_cam, tv_cam;      // camera-space tangent frame (detail mode)
  Grid dpm_deriv;               // displacement derivative grids (detail mode)
  ProjectedPoints proj;
  FragmentBuffer frags;
  Image image;
};

RenderState render(const MorphableModel& model, const FaceParams& params,
                   const DeformationMap* dfm, const DisplacementMap* dpm,
                   const RenderOptions& opts = {});

// ---------------------------------------------------------------------------
// Gradients. Visibility (fragment assignment) is frozen at the forward pass;
// everything downstream of it — barycentrics, attribute interpolation,
// shading — is differentiated exactly. In detail-normal mode the geometry is
// treated as fixed (the high-frequency fitting stage optimizes the
// displacement map and lighting only), so gradients flow to dpm texels and
// lighting; in the standard mode they flow to coefficients, pose, lighting
// and the deformation map.
// ---------------------------------------------------------------------------
struct RenderGrads {
  VecX alpha, beta, gamma;  // sized to the model
  Vec3 rotation = Vec3::Zero();
  Vec3 translation = Vec3::Zero();
  VecX lighting = VecX::Zero(27);
  Grid dfm;  // sized to the deformation map when provided
  Grid dpm;  // sized to the displacement map when provided

  explicit RenderGrads(const MorphableModel& model, const DeformationMap* d = nullptr,
                       const DisplacementMap* p = nullptr);
};

void render_backward(const MorphableModel& model, const FaceParams& params,
                     const DeformationMap* dfm, const DisplacementMap* dpm,
                     const RenderOptions& opts, const RenderState& st,
                     const Image& image_bar, RenderGrads* grads);

// Adjoint from screen-space point adjoints (landmark/contour residuals on
// projected vertices) back to coefficients, pose and the deformation map.
void screen_points_backward(const MorphableModel& model,
                            const FaceParams& params, const DeformationMap* dfm,
                            const RenderState& st, const std::vector<int>& verts,
                            const std::vector<Vec2>& screen_bar,
                            RenderGrads* grads);

// Adjoint from model-space vertex adjoints on the deformed surface (scan
// residuals, no pose or projection involved) back to the shape/expression
// coefficients and the deformation map.
void model_points_backward(const MorphableModel& model,
                           const DeformationMap* dfm,
                           const Vertices& pmodel_bar, RenderGrads* grads);

// Adjoint from detailed-vertex adjoints through p2 = p1 + dpm(uv) * n with
// the base positions and normals held fixed; accumulates into dpm_grad
// (same resolution as the displacement map).
void displacement_backward(const Mesh& m1, const Vertices& m2_bar,
                           Grid* dpm_grad);

// ---------------------------------------------------------------------------
// Texture unwrapping: image space -> UV space through a posed mesh.
// ---------------------------------------------------------------------------
struct TextureUV {
  Grid rgb;      // res x res x 3, linear
  Grid visible;  // res x res x 1, 1 where sampled from the image
  bool degenerate = false;  // no texel was visible
};

// Projects each covered UV texel's surface point; where front-facing and not
// occluded (depth within 0.5 mm of the rasterized surface) the image is
// sampled bilinearly. Remaining texels are filled by iterative masked
// 4-neighbor diffusion.
TextureUV unwrap_texture(const Image& image, const Mesh& mesh,
                         const FaceParams& params, int res);

}  // namespace hface
