#pragma once

// Point-cloud registration: Chamfer distance, point-to-point ICP, facial
// template construction from a short scan, and convex-hull cropping.

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "headtrack/error.hpp"
#include "headtrack/geometry.hpp"
#include "headtrack/kdtree.hpp"
#include "headtrack/landmarks.hpp"
#include "headtrack/sparse_pose.hpp"

namespace headtrack {

struct PointCloud {
  std::vector<Eigen::Vector3d> points;
  std::vector<Eigen::Vector3d> normals;  ///< empty, or one unit normal per point

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_normals() const { return !normals.empty(); }

  void validate() const {
    if (!normals.empty() && normals.size() != points.size()) {
      throw Error(ErrorCode::DimensionMismatch, "normal count differs from point count");
    }
    for (const auto& n : normals) {
      if (std::abs(n.norm() - 1.0) > 1e-6) throw Error(ErrorCode::InvalidArgument, "normal is not unit length");
    }
  }
};

inline PointCloud transform(const Pose& pose, const PointCloud& cloud) {
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.push_back(pose.apply(p));
  out.normals.reserve(cloud.normals.size());
  for (const auto& n : cloud.normals) out.normals.push_back(pose.rotation * n);
  return out;
}

inline Eigen::Matrix3Xd to_matrix(const std::vector<Eigen::Vector3d>& pts) {
  Eigen::Matrix3Xd m(3, static_cast<Eigen::Index>(pts.size()));
  for (std::size_t i = 0; i < pts.size(); ++i) m.col(static_cast<Eigen::Index>(i)) = pts[i];
  return m;
}

// ---------------------------------------------------------------------------
// Chamfer distance
// ---------------------------------------------------------------------------

/// Symmetric mean squared nearest-neighbour distance (mm^2). With normals,
/// adds normal_weight times the summed per-direction mean angle (radians)
/// between the normals of each nearest-neighbour pair.
inline double chamfer(const PointCloud& a, const KdTree& a_tree, const PointCloud& b,
                      const KdTree& b_tree, bool use_normals = false, double normal_weight = 0.0) {
  if (a.empty() || b.empty()) throw Error(ErrorCode::EmptyCloud, "Chamfer distance of an empty cloud");
  if (use_normals && (!a.has_normals() || !b.has_normals())) {
    throw Error(ErrorCode::MissingNormals, "Chamfer with normals requires normals on both clouds");
  }
  auto directed = [&](const PointCloud& from, const PointCloud& to, const KdTree& to_tree,
                      double& angle_mean) {
    double sum = 0.0;
    double angle = 0.0;
    for (std::size_t i = 0; i < from.size(); ++i) {
      const Neighbor nn = to_tree.nearest(from.points[i]);
      sum += nn.squared_distance;
      if (use_normals) {
        const double c = std::clamp(from.normals[i].dot(to.normals[nn.index]), -1.0, 1.0);
        angle += std::acos(c);
      }
    }
    angle_mean = angle / static_cast<double>(from.size());
    return sum / static_cast<double>(from.size());
  };
  double ang_ab = 0.0;
  double ang_ba = 0.0;
  const double d = directed(a, b, b_tree, ang_ab) + directed(b, a, a_tree, ang_ba);
  return use_normals ? d + normal_weight * (ang_ab + ang_ba) : d;
}

inline double chamfer(const PointCloud& a, const PointCloud& b, bool use_normals = false,
                      double normal_weight = 0.0) {
  if (a.empty() || b.empty()) throw Error(ErrorCode::EmptyCloud, "Chamfer distance of an empty cloud");
  return chamfer(a, KdTree(a.points), b, KdTree(b.points), use_normals, normal_weight);
}

// ---------------------------------------------------------------------------
// ICP
// ---------------------------------------------------------------------------

struct IcpConfig {
  double max_correspondence_mm = 10.0;
  double relative_tolerance = 1e-6;
  double absolute_tolerance = 1e-20;  ///< mm^2; chamfer at or below this counts as converged
  int max_iterations = 50;
  bool extrapolate = true;
  double extrapolation_max_angle_rad = 0.1745329251994330;  ///< 10 degrees
  double extrapolation_max_factor = 25.0;
};

struct IcpResult {
  Pose pose;  ///< maps source into the target frame
  double chamfer = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> chamfer_history;  ///< chamfer at init, then after each accepted update
};

namespace detail {

struct IcpEvaluation {
  double chamfer = 0.0;
  Eigen::Matrix3Xd src;  // gated pairs, source coordinates
  Eigen::Matrix3Xd dst;  // gated pairs, target coordinates
  Eigen::VectorXd weights;
};

/// Full (ungated) Chamfer of target vs pose*source, plus the gated symmetric
/// correspondence set at that pose. Target-to-source neighbours are found by
/// pulling target points back into the source frame.
inline IcpEvaluation evaluate_icp(const PointCloud& source, const KdTree& source_tree,
                                  const PointCloud& target, const KdTree& target_tree, const Pose& pose,
                                  double gate) {
  const Pose inv = invert(pose);
  const double gate2 = gate * gate;
  const double ws = 1.0 / static_cast<double>(source.size());
  const double wt = 1.0 / static_cast<double>(target.size());

  std::vector<std::array<std::size_t, 2>> pairs;  // (source idx, target idx)
  std::vector<double> weights;
  double fwd = 0.0;
  for (std::size_t i = 0; i < source.size(); ++i) {
    const Neighbor nn = target_tree.nearest(pose.apply(source.points[i]));
    fwd += nn.squared_distance;
    if (nn.squared_distance <= gate2) {
      pairs.push_back({i, nn.index});
      weights.push_back(ws);
    }
  }
  double bwd = 0.0;
  for (std::size_t j = 0; j < target.size(); ++j) {
    const Neighbor nn = source_tree.nearest(inv.apply(target.points[j]));
    bwd += nn.squared_distance;
    if (nn.squared_distance <= gate2) {
      pairs.push_back({nn.index, j});
      weights.push_back(wt);
    }
  }

  IcpEvaluation ev;
  ev.chamfer = fwd * ws + bwd * wt;
  ev.src.resize(3, static_cast<Eigen::Index>(pairs.size()));
  ev.dst.resize(3, static_cast<Eigen::Index>(pairs.size()));
  ev.weights.resize(static_cast<Eigen::Index>(pairs.size()));
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto c = static_cast<Eigen::Index>(k);
    ev.src.col(c) = source.points[pairs[k][0]];
    ev.dst.col(c) = target.points[pairs[k][1]];
    ev.weights(c) = weights[k];
  }
  return ev;
}

}  // namespace detail

namespace detail {

using RegistrationState = Eigen::Matrix<double, 7, 1>;

/// Rotation quaternion plus the image of `pivot`, so that increment lengths and
/// angles do not depend on the choice of world frame.
inline RegistrationState registration_state(const Pose& p, const Eigen::Vector3d& pivot) {
  const UnitQuaternion q = to_quaternion(p);
  RegistrationState s;
  s << q.w, q.x, q.y, q.z, p.apply(pivot);
  return s;
}

inline Pose pose_from_state(const RegistrationState& s, const Eigen::Vector3d& pivot) {
  Pose p = from_quaternion({s(0), s(1), s(2), s(3)}, Eigen::Vector3d::Zero());
  p.translation = s.tail<3>() - p.rotation * pivot;
  return p;
}

/// Extrapolation distance along the last state increment from the last three
/// accepted states and their objective values; zero when the path is not
/// straight enough to extrapolate.
inline double extrapolation_step(const std::vector<RegistrationState>& states, const std::vector<double>& values,
                                 double max_angle_rad, double max_factor) {
  const std::size_t k = states.size();
  if (k < 4) return 0.0;
  const RegistrationState d2 = states[k - 1] - states[k - 2];
  const RegistrationState d1 = states[k - 2] - states[k - 3];
  const RegistrationState d0 = states[k - 3] - states[k - 4];
  const double l2 = d2.norm(), l1 = d1.norm(), l0 = d0.norm();
  if (!(l2 > 0.0 && l1 > 0.0 && l0 > 0.0)) return 0.0;
  auto angle = [](const RegistrationState& a, const RegistrationState& b) {
    return std::acos(std::clamp(a.dot(b) / (a.norm() * b.norm()), -1.0, 1.0));
  };
  if (angle(d2, d1) > max_angle_rad || angle(d1, d0) > max_angle_rad) return 0.0;

  const double x0 = -(l2 + l1), x1 = -l2;
  const double y0 = values[k - 3], y1 = values[k - 2], y2 = values[k - 1];
  const double linear = (y1 > y2) ? y2 * l2 / (y1 - y2) : 0.0;
  // parabola through (x0,y0), (x1,y1), (0,y2)
  const double s01 = (y1 - y0) / (x1 - x0);
  const double s12 = (y2 - y1) / (0.0 - x1);
  const double a = (s12 - s01) / (0.0 - x0);
  const double b = s12 - a * x1;
  const double vertex = a > 0.0 ? -b / (2.0 * a) : 0.0;
  const double cap = max_factor * l2;
  double v = (vertex > 0.0 && vertex < linear) ? vertex : linear;
  v = std::min(v, cap);
  return v > 0.0 ? v : 0.0;
}

}  // namespace detail

/// Point-to-point ICP with gated closest-point correspondences in both
/// directions. Each accepted update leaves the chamfer non-increasing. When
/// successive updates line up, an extrapolated pose along the registration
/// path is tried and kept only if it lowers the chamfer further.
inline IcpResult icp(const PointCloud& source, const KdTree& source_tree, const PointCloud& target,
                     const KdTree& target_tree, const Pose& init, const IcpConfig& config = {}) {
  if (source.empty() || target.empty()) throw Error(ErrorCode::EmptyCloud, "ICP on an empty cloud");

  IcpResult res;
  res.pose = init;
  detail::IcpEvaluation cur =
      detail::evaluate_icp(source, source_tree, target, target_tree, init, config.max_correspondence_mm);
  res.chamfer = cur.chamfer;
  res.chamfer_history.push_back(cur.chamfer);

  Eigen::Vector3d pivot = Eigen::Vector3d::Zero();
  for (const auto& x : source.points) pivot += x;
  pivot /= static_cast<double>(source.size());
  std::vector<detail::RegistrationState> states{detail::registration_state(init, pivot)};
  std::vector<double> values{cur.chamfer};

  for (int it = 1; it <= config.max_iterations; ++it) {
    res.iterations = it;
    if (cur.src.cols() == 0) {
      throw Error(ErrorCode::EmptyOverlap, "no correspondences within the gating distance");
    }
    if (cur.chamfer <= config.absolute_tolerance) {
      res.converged = true;
      break;
    }
    Pose next;
    try {
      next = fit_rigid(cur.src, cur.dst, &cur.weights).pose;
    } catch (const Error&) {
      break;  // degenerate correspondence set; keep the current pose
    }
    detail::IcpEvaluation ev =
        detail::evaluate_icp(source, source_tree, target, target_tree, next, config.max_correspondence_mm);
    if (!(ev.chamfer <= cur.chamfer)) {
      res.converged = true;  // gated update would increase the objective
      break;
    }
    const double before = cur.chamfer;
    states.push_back(detail::registration_state(next, pivot));
    values.push_back(ev.chamfer);

    if (config.extrapolate) {
      const double v = detail::extrapolation_step(states, values, config.extrapolation_max_angle_rad,
                                                  config.extrapolation_max_factor);
      if (v > 0.0) {
        const detail::RegistrationState dir = (states.back() - states[states.size() - 2]).normalized();
        const Pose jump = detail::pose_from_state(states.back() + v * dir, pivot);
        detail::IcpEvaluation jv = detail::evaluate_icp(source, source_tree, target, target_tree, jump,
                                                        config.max_correspondence_mm);
        if (jv.src.cols() > 0 && jv.chamfer < ev.chamfer) {
          next = jump;
          ev = std::move(jv);
          // restart the path so the next extrapolation sees fresh increments
          states.assign(1, detail::registration_state(next, pivot));
          values.assign(1, ev.chamfer);
        }
      }
    }

    const double rel = (before - ev.chamfer) / before;
    res.pose = next;
    res.chamfer = ev.chamfer;
    res.chamfer_history.push_back(ev.chamfer);
    cur = std::move(ev);
    if (rel < config.relative_tolerance || cur.chamfer <= config.absolute_tolerance) {
      res.converged = true;
      break;
    }
  }
  res.pose.rotation = project_to_rotation(res.pose.rotation);
  return res;
}

inline IcpResult icp(const PointCloud& source, const PointCloud& target, const Pose& init,
                     const IcpConfig& config = {}) {
  if (source.empty() || target.empty()) throw Error(ErrorCode::EmptyCloud, "ICP on an empty cloud");
  return icp(source, KdTree(source.points), target, KdTree(target.points), init, config);
}

/// Coarse pose from landmark correspondences (frame landmarks -> template landmarks
/// direction is chosen by the caller).
inline Pose landmark_coarse_align(const LandmarkSet3D& frame_landmarks_3d,
                                  const LandmarkSet3D& template_landmarks) {
  return rigid_align(frame_landmarks_3d, template_landmarks).pose;
}

// ---------------------------------------------------------------------------
// Downsampling and normals
// ---------------------------------------------------------------------------

/// Replaces the points in each occupied voxel by their centroid. Output order
/// follows the lexicographic voxel key.
inline PointCloud voxel_downsample(const PointCloud& cloud, double voxel_mm) {
  if (!(voxel_mm > 0.0)) throw Error(ErrorCode::InvalidArgument, "voxel size must be positive");
  struct Acc {
    Eigen::Vector3d sum = Eigen::Vector3d::Zero();
    Eigen::Vector3d nsum = Eigen::Vector3d::Zero();
    std::size_t count = 0;
  };
  std::map<std::array<std::int64_t, 3>, Acc> voxels;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Eigen::Vector3d& p = cloud.points[i];
    const std::array<std::int64_t, 3> key{static_cast<std::int64_t>(std::floor(p.x() / voxel_mm)),
                                          static_cast<std::int64_t>(std::floor(p.y() / voxel_mm)),
                                          static_cast<std::int64_t>(std::floor(p.z() / voxel_mm))};
    Acc& acc = voxels[key];
    acc.sum += p;
    if (cloud.has_normals()) acc.nsum += cloud.normals[i];
    ++acc.count;
  }
  PointCloud out;
  out.points.reserve(voxels.size());
  for (const auto& [key, acc] : voxels) {
    out.points.push_back(acc.sum / static_cast<double>(acc.count));
    if (cloud.has_normals()) {
      const double n = acc.nsum.norm();
      out.normals.push_back(n > 0.0 ? Eigen::Vector3d(acc.nsum / n) : Eigen::Vector3d::UnitZ());
    }
  }
  return out;
}

/// Local plane-fit normals over the k nearest neighbours, oriented toward
/// `viewpoint` (the camera origin by default).
inline PointCloud estimate_normals(const PointCloud& cloud, std::size_t k = 10,
                                   const Eigen::Vector3d& viewpoint = Eigen::Vector3d::Zero()) {
  if (cloud.empty()) throw Error(ErrorCode::EmptyCloud, "normal estimation on an empty cloud");
  const KdTree tree(cloud.points);
  PointCloud out;
  out.points = cloud.points;
  out.normals.reserve(cloud.size());
  for (const auto& p : cloud.points) {
    const auto nbrs = tree.k_nearest(p, k);
    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    for (const auto& n : nbrs) mean += cloud.points[n.index];
    mean /= static_cast<double>(nbrs.size());
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (const auto& n : nbrs) {
      const Eigen::Vector3d d = cloud.points[n.index] - mean;
      cov += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
    Eigen::Vector3d normal = es.eigenvectors().col(0);
    if (normal.dot(viewpoint - p) < 0.0) normal = -normal;
    out.normals.push_back(normal.normalized());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Face template
// ---------------------------------------------------------------------------

struct FaceTemplate {
  PointCloud cloud;
  LandmarkSet3D anchor_landmarks;

  /// Anchors must sit inside the cloud's bounding box grown by 10 mm.
  void validate() const {
    if (cloud.empty()) throw Error(ErrorCode::EmptyCloud, "face template cloud is empty");
    Eigen::Vector3d lo = cloud.points.front();
    Eigen::Vector3d hi = lo;
    for (const auto& p : cloud.points) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    lo.array() -= 10.0;
    hi.array() += 10.0;
    for (const auto& a : anchor_landmarks.entries) {
      if (!a.valid) continue;
      if ((a.position.array() < lo.array()).any() || (a.position.array() > hi.array()).any()) {
        throw Error(ErrorCode::InvalidArgument,
                    "anchor landmark " + std::to_string(a.id) + " lies outside the template cloud");
      }
    }
  }
};

struct ScanFrame {
  PointCloud cloud;
  LandmarkSet3D landmarks;
};

struct TemplateConfig {
  double voxel_mm = 2.0;
  IcpConfig icp;
  bool refine_against_merged = true;
};

struct TemplateBuildResult {
  FaceTemplate face;
  std::vector<Pose> frame_poses;  ///< frame0_T_framek
};

namespace detail {

inline PointCloud merge_aligned(const std::vector<ScanFrame>& frames, const std::vector<Pose>& poses,
                                double voxel_mm) {
  PointCloud merged;
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const PointCloud moved = transform(poses[k], frames[k].cloud);
    merged.points.insert(merged.points.end(), moved.points.begin(), moved.points.end());
  }
  return voxel_downsample(merged, voxel_mm);
}

}  // namespace detail

/// Registers every scan frame into frame-0 coordinates (landmark coarse
/// alignment, then ICP), refines each against the merged cloud once, and
/// merges by voxel centroids. Anchors are the mean aligned landmark positions.
inline TemplateBuildResult build_face_template(const std::vector<ScanFrame>& frames,
                                               const TemplateConfig& config = {}) {
  if (frames.size() < 2) throw Error(ErrorCode::TooFewFrames, "template needs at least 2 frames");
  for (const auto& f : frames) {
    if (f.cloud.empty()) throw Error(ErrorCode::EmptyCloud, "scan frame has an empty cloud");
  }

  std::vector<Pose> poses(frames.size());
  const KdTree ref_tree(frames[0].cloud.points);
  for (std::size_t k = 1; k < frames.size(); ++k) {
    const Pose coarse = landmark_coarse_align(frames[k].landmarks, frames[0].landmarks);
    poses[k] = icp(frames[k].cloud, KdTree(frames[k].cloud.points), frames[0].cloud, ref_tree, coarse,
                   config.icp)
                   .pose;
  }

  if (config.refine_against_merged) {
    const PointCloud merged = detail::merge_aligned(frames, poses, config.voxel_mm);
    const KdTree merged_tree(merged.points);
    for (std::size_t k = 1; k < frames.size(); ++k) {
      poses[k] = icp(frames[k].cloud, KdTree(frames[k].cloud.points), merged, merged_tree, poses[k],
                     config.icp)
                     .pose;
    }
  }

  TemplateBuildResult out;
  out.frame_poses = poses;
  out.face.cloud = detail::merge_aligned(frames, poses, config.voxel_mm);

  std::map<int, std::pair<Eigen::Vector3d, int>> sums;
  for (std::size_t k = 0; k < frames.size(); ++k) {
    for (const auto& lm : frames[k].landmarks.entries) {
      if (!lm.valid) continue;
      auto& [sum, count] = sums.try_emplace(lm.id, Eigen::Vector3d::Zero(), 0).first->second;
      sum += poses[k].apply(lm.position);
      ++count;
    }
  }
  for (const auto& [id, acc] : sums) {
    out.face.anchor_landmarks.entries.push_back({id, acc.first / static_cast<double>(acc.second), true});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convex-hull cropping
// ---------------------------------------------------------------------------

/// Counter-clockwise convex hull (Andrew's monotone chain), collinear points dropped.
inline std::vector<Eigen::Vector2d> convex_hull(std::vector<Eigen::Vector2d> pts) {
  std::sort(pts.begin(), pts.end(), [](const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
    return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
  });
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return pts;
  auto cross = [](const Eigen::Vector2d& o, const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
    return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
  };
  std::vector<Eigen::Vector2d> hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0.0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0.0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

inline double polygon_area(const std::vector<Eigen::Vector2d>& poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const auto& p = poly[i];
    const auto& q = poly[(i + 1) % poly.size()];
    a += p.x() * q.y() - q.x() * p.y();
  }
  return 0.5 * a;
}

/// Keeps the points whose projection through `cam` falls inside (or on) the
/// convex hull of the valid 2D landmarks.
inline PointCloud crop_by_convex_hull(const PointCloud& cloud, const LandmarkSet2D& hull_landmarks_2d,
                                      const CameraModel& cam) {
  std::vector<Eigen::Vector2d> pts;
  for (const auto& lm : hull_landmarks_2d.entries)
    if (lm.valid) pts.push_back(lm.pixel());
  if (pts.size() < 3) throw Error(ErrorCode::InsufficientLandmarks, "hull needs >= 3 valid landmarks");
  const auto hull = convex_hull(pts);
  if (hull.size() < 3 || polygon_area(hull) <= 1e-9) {
    throw Error(ErrorCode::DegenerateHull, "landmark hull has zero area");
  }

  PointCloud out;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Eigen::Vector3d pc = cam.to_camera(cloud.points[i]);
    if (!(pc.z() > 0.0)) continue;
    const Eigen::Vector2d px = cam.project_camera_frame(pc);
    bool inside = true;
    for (std::size_t e = 0; e < hull.size() && inside; ++e) {
      const auto& a = hull[e];
      const auto& b = hull[(e + 1) % hull.size()];
      inside = (b.x() - a.x()) * (px.y() - a.y()) - (b.y() - a.y()) * (px.x() - a.x()) >= 0.0;
    }
    if (!inside) continue;
    out.points.push_back(cloud.points[i]);
    if (cloud.has_normals()) out.normals.push_back(cloud.normals[i]);
  }
  return out;
}

}  // namespace headtrack
