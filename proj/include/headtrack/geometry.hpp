#pragma once

// Rigid transforms, rotations and the pinhole camera.
//
// Units are millimetres and degrees everywhere. A Pose named dst_T_src maps
// points expressed in frame src into frame dst.

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "headtrack/error.hpp"

namespace headtrack {

inline constexpr double kPi = std::numbers::pi;

inline double deg2rad(double deg) { return deg * kPi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / kPi; }

struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static Pose identity() { return {}; }

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }
  Eigen::Vector3d operator*(const Eigen::Vector3d& p) const { return apply(p); }

  Eigen::Matrix4d matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.topRightCorner<3, 1>() = translation;
    return m;
  }
};

/// a∘b: apply b first, then a.
inline Pose compose(const Pose& a, const Pose& b) {
  return Pose{a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

inline Pose operator*(const Pose& a, const Pose& b) { return compose(a, b); }

inline Pose invert(const Pose& p) {
  const Eigen::Matrix3d rt = p.rotation.transpose();
  return Pose{rt, -(rt * p.translation)};
}

/// Nearest rotation matrix (Frobenius sense) to an arbitrary 3x3 matrix.
inline Eigen::Matrix3d project_to_rotation(const Eigen::Matrix3d& m) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  return svd.matrixU() * d * svd.matrixV().transpose();
}

inline Eigen::Matrix3d rotation_x(double deg) {
  return Eigen::AngleAxisd(deg2rad(deg), Eigen::Vector3d::UnitX()).toRotationMatrix();
}
inline Eigen::Matrix3d rotation_y(double deg) {
  return Eigen::AngleAxisd(deg2rad(deg), Eigen::Vector3d::UnitY()).toRotationMatrix();
}
inline Eigen::Matrix3d rotation_z(double deg) {
  return Eigen::AngleAxisd(deg2rad(deg), Eigen::Vector3d::UnitZ()).toRotationMatrix();
}

/// Rodrigues map from an axis-angle vector (radians) to a rotation matrix.
inline Eigen::Matrix3d exp_so3(const Eigen::Vector3d& omega) {
  const double angle = omega.norm();
  if (angle < 1e-300) return Eigen::Matrix3d::Identity();
  return Eigen::AngleAxisd(angle, omega / angle).toRotationMatrix();
}

struct UnitQuaternion {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
};

/// Resolves the double cover: w >= 0, and when w == 0 the first nonzero
/// of (x, y, z) is positive.
inline UnitQuaternion canonicalize(UnitQuaternion q) {
  bool flip = false;
  if (q.w < 0.0) {
    flip = true;
  } else if (q.w == 0.0) {
    for (double c : {q.x, q.y, q.z}) {
      if (c != 0.0) {
        flip = c < 0.0;
        break;
      }
    }
  }
  if (flip) q = {-q.w, -q.x, -q.y, -q.z};
  return q;
}

inline UnitQuaternion to_quaternion(const Eigen::Matrix3d& rotation) {
  Eigen::Quaterniond q(rotation);
  q.normalize();
  return canonicalize({q.w(), q.x(), q.y(), q.z()});
}

inline UnitQuaternion to_quaternion(const Pose& p) { return to_quaternion(p.rotation); }

inline Pose from_quaternion(const UnitQuaternion& q, const Eigen::Vector3d& translation) {
  Eigen::Quaterniond eq(q.w, q.x, q.y, q.z);
  const double n = eq.norm();
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw Error(ErrorCode::InvalidArgument, "quaternion has zero or non-finite norm");
  }
  eq.coeffs() /= n;
  return Pose{eq.toRotationMatrix(), translation};
}

/// Angle (degrees, in [0, 180]) of the relative rotation between two poses.
inline double geodesic_angle(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
  Eigen::Quaterniond rel(a.transpose() * b);
  rel.normalize();
  const double vec = rel.vec().norm();
  return rad2deg(2.0 * std::atan2(vec, std::abs(rel.w())));
}

inline double geodesic_angle(const Pose& a, const Pose& b) {
  return geodesic_angle(a.rotation, b.rotation);
}

/// Head-pose angles in degrees. Axes follow the camera convention
/// (x lateral, y vertical, z fore-aft): yaw about y, pitch about x,
/// roll about z, composed intrinsically as R = Ry(yaw) Rx(pitch) Rz(roll).
struct EulerAngles {
  double yaw = 0.0;
  double pitch = 0.0;
  double roll = 0.0;
};

inline Eigen::Matrix3d from_euler(const EulerAngles& e) {
  return rotation_y(e.yaw) * rotation_x(e.pitch) * rotation_z(e.roll);
}

inline EulerAngles to_euler(const Eigen::Matrix3d& r) {
  EulerAngles e;
  e.pitch = rad2deg(std::asin(std::clamp(-r(1, 2), -1.0, 1.0)));
  e.roll = rad2deg(std::atan2(r(1, 0), r(1, 1)));
  e.yaw = rad2deg(std::atan2(r(0, 2), r(2, 2)));
  return e;
}

struct HomogeneousPoint {
  Eigen::Vector4d coords = Eigen::Vector4d(0.0, 0.0, 0.0, 1.0);

  static HomogeneousPoint from_euclidean(const Eigen::Vector3d& p) {
    return {Eigen::Vector4d(p.x(), p.y(), p.z(), 1.0)};
  }

  Eigen::Vector3d dehomogenize() const {
    if (coords.w() == 0.0) {
      throw Error(ErrorCode::InvalidArgument, "point at infinity cannot be dehomogenized");
    }
    return coords.head<3>() / coords.w();
  }
};

/// Pinhole camera without distortion. `extrinsic` is cam_T_ref.
struct CameraModel {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  Pose extrinsic;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) {
      throw Error(ErrorCode::InvalidArgument, "focal lengths must be positive");
    }
  }

  Eigen::Matrix3d intrinsic_matrix() const {
    Eigen::Matrix3d k;
    k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return k;
  }

  /// P = K [R | t].
  Eigen::Matrix<double, 3, 4> projection_matrix() const {
    Eigen::Matrix<double, 3, 4> rt;
    rt.leftCols<3>() = extrinsic.rotation;
    rt.col(3) = extrinsic.translation;
    return intrinsic_matrix() * rt;
  }

  /// Optical centre expressed in the reference frame.
  Eigen::Vector3d center() const { return invert(extrinsic).translation; }

  Eigen::Vector3d to_camera(const Eigen::Vector3d& p_ref) const { return extrinsic.apply(p_ref); }

  /// Pixel coordinates of a point already expressed in this camera's frame.
  Eigen::Vector2d project_camera_frame(const Eigen::Vector3d& p_cam) const {
    if (!(p_cam.z() > 0.0)) {
      throw Error(ErrorCode::NonPositiveDepth, "point is at or behind the camera plane");
    }
    return {fx * p_cam.x() / p_cam.z() + cx, fy * p_cam.y() / p_cam.z() + cy};
  }

  Eigen::Vector2d project(const Eigen::Vector3d& p_ref) const {
    return project_camera_frame(to_camera(p_ref));
  }

  Eigen::Vector2d project(const HomogeneousPoint& x) const { return project(x.dehomogenize()); }

  /// Point at the given camera-frame depth along the ray through a pixel,
  /// expressed in the reference frame.
  Eigen::Vector3d backproject(const Eigen::Vector2d& pixel, double depth) const {
    const Eigen::Vector3d p_cam((pixel.x() - cx) / fx * depth, (pixel.y() - cy) / fy * depth,
                                depth);
    return invert(extrinsic).apply(p_cam);
  }
};

/// Two calibrated cameras; the left camera defines the reference frame.
struct StereoRig {
  CameraModel left;
  CameraModel right;
};

}  // namespace headtrack
