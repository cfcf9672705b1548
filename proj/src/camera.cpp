#include "hface/camera.hpp"

namespace hface {

namespace {

Mat3 rot_x(double a) {
  Mat3 m;
  m << 1, 0, 0, 0, std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a);
  return m;
}
Mat3 rot_y(double a) {
  Mat3 m;
  m << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
  return m;
}
Mat3 rot_z(double a) {
  Mat3 m;
  m << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
  return m;
}
Mat3 drot_x(double a) {
  Mat3 m;
  m << 0, 0, 0, 0, -std::sin(a), -std::cos(a), 0, std::cos(a), -std::sin(a);
  return m;
}
Mat3 drot_y(double a) {
  Mat3 m;
  m << -std::sin(a), 0, std::cos(a), 0, 0, 0, -std::cos(a), 0, -std::sin(a);
  return m;
}
Mat3 drot_z(double a) {
  Mat3 m;
  m << -std::sin(a), -std::cos(a), 0, std::cos(a), -std::sin(a), 0, 0, 0, 0;
  return m;
}

}  // namespace

Mat3 rotation_matrix(const Vec3& angles) {
  return rot_z(angles[2]) * rot_y(angles[1]) * rot_x(angles[0]);
}

void rotation_derivatives(const Vec3& angles, Mat3 d_r[3]) {
  const Mat3 rx = rot_x(angles[0]), ry = rot_y(angles[1]), rz = rot_z(angles[2]);
  d_r[0] = rz * ry * drot_x(angles[0]);
  d_r[1] = rz * drot_y(angles[1]) * rx;
  d_r[2] = drot_z(angles[2]) * ry * rx;
}

ProjectedPoints project_camera(const CameraIntrinsics& cam,
                               const Vertices& cam_points) {
  const int n = static_cast<int>(cam_points.rows());
  ProjectedPoints out;
  out.pixel.assign(n, Vec2::Zero());
  out.depth.resize(n);
  out.valid.assign(n, 0);
  for (int i = 0; i < n; ++i) {
    const double x = cam_points(i, 0), y = cam_points(i, 1), z = cam_points(i, 2);
    out.depth[i] = z;
    if (z <= cam.near_plane) continue;
    out.valid[i] = 1;
    ++out.num_valid;
    out.pixel[i] = Vec2(cam.cx + cam.focal * x / z, cam.cy + cam.focal * y / z);
  }
  return out;
}

ProjectedPoints project(const FaceParams& params, const Vertices& points) {
  const Mat3 r = rotation_matrix(params.rotation);
  Vertices cam_points(points.rows(), 3);
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    cam_points.row(i) =
        (r * points.row(i).transpose() + params.translation).transpose();
  return project_camera(params.camera, cam_points);
}

Vec3 project_point_backward(const CameraIntrinsics& cam, const Vec3& cam_point,
                            const Vec2& pixel_bar) {
  const double z = cam_point.z();
  const double inv_z = 1.0 / z;
  // u = cx + f*x/z, v = cy + f*y/z
  return Vec3(cam.focal * inv_z * pixel_bar.x(),
              cam.focal * inv_z * pixel_bar.y(),
              -cam.focal * inv_z * inv_z *
                  (cam_point.x() * pixel_bar.x() + cam_point.y() * pixel_bar.y()));
}

}  // namespace hface
