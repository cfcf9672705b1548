#pragma once

#include "hface/mesh.hpp"

#include <string>

namespace hface {

// Linear morphable model: mean + basis * coefficients for shape, expression
// and albedo. Basis columns are pre-scaled by per-mode standard deviations,
// so coefficients are std-normalized.
struct MorphableModel {
  VecX mean_shape;   // 3V, mm, (x,y,z) interleaved per vertex
  MatX shape_basis;  // 3V x K_id
  MatX expr_basis;   // 3V x K_exp
  VecX mean_albedo;  // 3V, linear RGB in [0,1]
  MatX albedo_basis; // 3V x K_alb
  std::shared_ptr<const Topology> topology;

  int num_vertices() const { return static_cast<int>(mean_shape.size() / 3); }
  int k_id() const { return static_cast<int>(shape_basis.cols()); }
  int k_exp() const { return static_cast<int>(expr_basis.cols()); }
  int k_alb() const { return static_cast<int>(albedo_basis.cols()); }

  void validate() const;
};

struct CameraIntrinsics {
  double focal = 1015.0;   // pixels
  double cx = 112.0;       // principal point, pixels
  double cy = 112.0;
  int width = 224;
  int height = 224;
  double near_plane = 1.0; // mm
};

// One view's optimizable state. Rotation is Tait-Bryan angles (rx, ry, rz)
// with R = Rz * Ry * Rx applied to model points; translation in mm.
// Lighting is 27 SH coefficients: 9 per channel, channel-major.
struct FaceParams {
  VecX alpha;
  VecX beta;
  VecX gamma;
  Vec3 rotation = Vec3::Zero();
  Vec3 translation = Vec3::Zero();
  VecX lighting = VecX::Zero(27);
  CameraIntrinsics camera;

  void validate() const;
};

struct VertexAlbedo {
  Vertices rgb;                  // V x 3, clamped to [0,1]
  std::vector<uint32_t> clamped; // vertex indices where any channel clamped
  std::vector<uint8_t> clamped_channel; // 3V flags; clamped channels have
                                        // zero gradient w.r.t. gamma
};

Mesh decode_shape(const MorphableModel& model, const VecX& alpha, const VecX& beta);
VertexAlbedo decode_albedo(const MorphableModel& model, const VecX& gamma);

// Model container I/O. Binary format: magic "HFM1", u32 dims
// (V, T, K_id, K_exp, K_alb), then tagged chunks (tag[4], u64 byte length,
// payload) holding float32 arrays per field in declared order followed by
// uint32 index arrays. load_model also accepts a JSON manifest referencing
// raw .bin arrays (see README).
MorphableModel load_model(const std::string& path);
void save_model(const MorphableModel& model, const std::string& path);

// Deterministic face-like synthetic model: an open ellipsoid shell gridded
// V_side x V_side with smooth (low-pass filtered) random basis modes, a grid
// UV atlas, designated landmarks, a lower-face vertex set and a detail mask.
// Model frame is image-aligned: x right, y down, z away from the camera;
// outward normals face -z.
MorphableModel synth_model(uint64_t seed, int v_side, int k_id, int k_exp, int k_alb);

}  // namespace hface
