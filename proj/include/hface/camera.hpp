#pragma once

#include "hface/model.hpp"

namespace hface {

// Camera frame: x right, y down, z forward (into the screen). Model points
// are mapped by p_cam = R * p + t with R = Rz(rz) * Ry(ry) * Rx(rx), then
// projected with u = cx + f*x/z, v = cy + f*y/z (origin top-left, y down).

Mat3 rotation_matrix(const Vec3& angles);

// d(R)/d(rx), d(R)/d(ry), d(R)/d(rz)
void rotation_derivatives(const Vec3& angles, Mat3 d_r[3]);

struct ProjectedPoints {
  std::vector<Vec2> pixel;      // valid entries only are meaningful
  VecX depth;                   // camera-space z, mm
  std::vector<uint8_t> valid;   // 0 when depth <= near plane
  int num_valid = 0;
};

// Applies the pose in params and projects; points are N x 3 model space.
ProjectedPoints project(const FaceParams& params, const Vertices& points);

// Projects camera-space points (pose already applied).
ProjectedPoints project_camera(const CameraIntrinsics& cam, const Vertices& cam_points);

// Adjoint of project_camera for valid points: accumulates d(loss)/d(cam point)
// given d(loss)/d(pixel).
Vec3 project_point_backward(const CameraIntrinsics& cam, const Vec3& cam_point,
                            const Vec2& pixel_bar);

}  // namespace hface
