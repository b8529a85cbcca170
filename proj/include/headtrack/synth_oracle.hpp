#pragma once

// Synthetic ground truth: a parametric face surface, a PCA head model built
// on it, head-motion trajectories, and rendered landmark streams and depth
// clouds with configurable noise and occlusion.

#include <Eigen/Core>
#include <Eigen/QR>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "headtrack/dense_registration.hpp"
#include "headtrack/error.hpp"
#include "headtrack/geometry.hpp"
#include "headtrack/landmarks.hpp"
#include "headtrack/morphable_model.hpp"
#include "headtrack/recording.hpp"

namespace headtrack::synth {

// ---------------------------------------------------------------------------
// Face surface
// ---------------------------------------------------------------------------

/// Head frame: origin at the nasion, x to the subject's left as seen by a
/// facing camera, y down, z into the head.
struct FaceShapeParams {
  double semi_x = 75.0;
  double semi_y = 105.0;
  double semi_z = 95.0;
  double center_y = 20.0;  ///< ellipsoid centre height relative to the nasion
  double cap_limit = 0.85;  ///< keeps sx^2 + sy^2 below this (front cap only)
  double point_spacing_mm = 3.25;
  int sample_attempts = 60000;
};

struct Bump {
  double x, y, amplitude, sigma_x, sigma_y;
};

// Positive amplitude protrudes toward the camera (-z).
inline constexpr std::array<Bump, 13> kFaceBumps{{
    {0.0, 15.0, 18.0, 6.0, 14.0},      // nose bridge
    {0.0, 36.0, 28.0, 8.0, 8.0},       // nose tip
    {-32.0, 6.0, -12.0, 10.0, 8.0},    // eye sockets
    {32.0, 6.0, -12.0, 10.0, 8.0},
    {-32.0, -15.0, 8.0, 14.0, 5.0},    // brow ridges
    {32.0, -15.0, 8.0, 14.0, 5.0},
    {0.0, 62.0, 8.0, 14.0, 5.0},       // lips
    {0.0, 76.0, 7.0, 12.0, 4.0},
    {-45.0, 40.0, 10.0, 16.0, 16.0},   // cheeks
    {45.0, 40.0, 10.0, 16.0, 16.0},
    {0.0, 98.0, 10.0, 12.0, 10.0},     // chin
    {28.0, -45.0, 6.0, 12.0, 12.0},    // asymmetric forehead bump
    {-20.0, 88.0, 4.0, 10.0, 8.0},
}};

/// Design positions (x, y) of the 68 Multi-PIE landmarks before the
/// asymmetric jitter is applied.
inline std::array<Eigen::Vector2d, kFaceLandmarkCount> landmark_design_positions() {
  std::array<Eigen::Vector2d, kFaceLandmarkCount> p;
  for (int i = 0; i <= 16; ++i) {
    const double phi = kPi - i * kPi / 16.0;
    p[static_cast<std::size_t>(i)] = {66.0 * std::cos(phi), 20.0 + 80.0 * std::sin(phi)};
  }
  const std::array<Eigen::Vector2d, 5> brow{{{-55, -12}, {-45, -17}, {-34, -19}, {-23, -18}, {-12, -15}}};
  for (int i = 0; i < 5; ++i) {
    p[static_cast<std::size_t>(17 + i)] = brow[static_cast<std::size_t>(i)];
    p[static_cast<std::size_t>(26 - i)] = {-brow[static_cast<std::size_t>(i)].x(), brow[static_cast<std::size_t>(i)].y()};
  }
  for (int i = 0; i < 4; ++i) p[static_cast<std::size_t>(27 + i)] = {0.0, 12.0 * i};
  const std::array<double, 5> nx{-14, -7, 0, 7, 14};
  for (int i = 0; i < 5; ++i) p[static_cast<std::size_t>(31 + i)] = {nx[static_cast<std::size_t>(i)], i == 2 ? 44.0 : 42.0};
  const std::array<Eigen::Vector2d, 6> eye{{{-44, 6}, {-37, 1}, {-27, 1}, {-20, 6}, {-27, 10}, {-37, 10}}};
  for (int i = 0; i < 6; ++i) p[static_cast<std::size_t>(36 + i)] = eye[static_cast<std::size_t>(i)];
  const std::array<int, 6> mirror{3, 2, 1, 0, 5, 4};
  for (int i = 0; i < 6; ++i) {
    const auto& e = eye[static_cast<std::size_t>(mirror[static_cast<std::size_t>(i)])];
    p[static_cast<std::size_t>(42 + i)] = {-e.x(), e.y()};
  }
  const std::array<Eigen::Vector2d, 20> mouth{{{-26, 68}, {-16, 62}, {-7, 59}, {0, 60}, {7, 59}, {16, 62}, {26, 68},
                                               {16, 75}, {7, 78}, {0, 78.5}, {-7, 78}, {-16, 75},
                                               {-21, 68}, {-8, 65}, {0, 65.5}, {8, 65}, {21, 68}, {8, 71.5},
                                               {0, 72}, {-8, 71.5}}};
  for (int i = 0; i < 20; ++i) p[static_cast<std::size_t>(48 + i)] = mouth[static_cast<std::size_t>(i)];
  for (int i = 0; i < kFaceLandmarkCount; ++i) {
    p[static_cast<std::size_t>(i)] += Eigen::Vector2d(1.5 * std::sin(1.7 * i), 1.2 * std::cos(2.3 * i));
  }
  p[27] = {0.0, 0.0};  // nasion defines the origin
  return p;
}

/// Extra annotated forehead points (10-20 system style): Fpz, Fp1, Fp2.
inline const std::map<int, Eigen::Vector2d>& extra_annotation_positions() {
  static const std::map<int, Eigen::Vector2d> m{{100, {0.0, -55.0}}, {101, {-25.0, -52.0}}, {102, {25.0, -52.0}}};
  return m;
}

inline constexpr int kNasionId = 27;

class FaceSurface {
 public:
  explicit FaceSurface(const FaceShapeParams& p = {}) : p_(p) {
    center_z_ = 0.0;
    center_z_ = -height(0.0, 0.0);
  }

  const FaceShapeParams& params() const { return p_; }

  bool inside(double x, double y) const {
    const double sx = x / p_.semi_x;
    const double sy = (y - p_.center_y) / p_.semi_y;
    return sx * sx + sy * sy < p_.cap_limit;
  }

  double height(double x, double y) const {
    const double sx = x / p_.semi_x;
    const double sy = (y - p_.center_y) / p_.semi_y;
    const double r = std::max(0.0, 1.0 - sx * sx - sy * sy);
    double z = center_z_ - p_.semi_z * std::sqrt(r);
    for (const auto& b : kFaceBumps) {
      const double dx = (x - b.x) / b.sigma_x;
      const double dy = (y - b.y) / b.sigma_y;
      z -= b.amplitude * std::exp(-0.5 * (dx * dx + dy * dy));
    }
    return z;
  }

  Eigen::Vector3d point(double x, double y) const { return {x, y, height(x, y)}; }

  /// Unit normal pointing out of the face (toward -z).
  Eigen::Vector3d normal(double x, double y) const {
    const double h = 1e-4;
    const double gx = (height(x + h, y) - height(x - h, y)) / (2.0 * h);
    const double gy = (height(x, y + h) - height(x, y - h)) / (2.0 * h);
    return Eigen::Vector3d(gx, gy, -1.0).normalized();
  }

 private:
  FaceShapeParams p_;
  double center_z_;
};

struct FaceMesh {
  PointCloud cloud;  ///< with normals
  std::vector<Eigen::Vector2d> parameters;  ///< (x, y) per vertex
  std::map<int, std::size_t> annotations;  ///< landmark id -> vertex index
};

/// Landmark vertices first (ids 0..67, then the extra annotations), then
/// dart-thrown surface samples no closer than point_spacing_mm to any other
/// vertex.
inline FaceMesh make_face_mesh(const FaceShapeParams& params, std::uint64_t seed) {
  const FaceSurface surf(params);
  FaceMesh mesh;
  const double spacing = params.point_spacing_mm;
  std::unordered_map<std::int64_t, std::vector<std::size_t>> grid;
  auto cell_key = [&](const Eigen::Vector3d& p, int dx, int dy, int dz) {
    const auto cx = static_cast<std::int64_t>(std::floor(p.x() / spacing)) + dx;
    const auto cy = static_cast<std::int64_t>(std::floor(p.y() / spacing)) + dy;
    const auto cz = static_cast<std::int64_t>(std::floor(p.z() / spacing)) + dz;
    return (cx * 73856093) ^ (cy * 19349663) ^ (cz * 83492791);
  };
  auto far_enough = [&](const Eigen::Vector3d& p) {
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dz = -1; dz <= 1; ++dz) {
          auto it = grid.find(cell_key(p, dx, dy, dz));
          if (it == grid.end()) continue;
          for (std::size_t j : it->second)
            if ((mesh.cloud.points[j] - p).norm() < spacing) return false;
        }
    return true;
  };
  auto add = [&](double x, double y) {
    const Eigen::Vector3d p = surf.point(x, y);
    grid[cell_key(p, 0, 0, 0)].push_back(mesh.cloud.points.size());
    mesh.cloud.points.push_back(p);
    mesh.cloud.normals.push_back(surf.normal(x, y));
    mesh.parameters.emplace_back(x, y);
  };

  const auto design = landmark_design_positions();
  for (int id = 0; id < kFaceLandmarkCount; ++id) {
    mesh.annotations[id] = mesh.cloud.size();
    add(design[static_cast<std::size_t>(id)].x(), design[static_cast<std::size_t>(id)].y());
  }
  for (const auto& [id, xy] : extra_annotation_positions()) {
    mesh.annotations[id] = mesh.cloud.size();
    add(xy.x(), xy.y());
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(-params.semi_x, params.semi_x);
  std::uniform_real_distribution<double> uy(params.center_y - params.semi_y, params.center_y + params.semi_y);
  for (int a = 0; a < params.sample_attempts; ++a) {
    const double x = ux(rng);
    const double y = uy(rng);
    if (!surf.inside(x, y)) continue;
    if (far_enough(surf.point(x, y))) add(x, y);
  }
  return mesh;
}

// ---------------------------------------------------------------------------
// Synthetic morphable model
// ---------------------------------------------------------------------------

struct ModelSpec {
  FaceShapeParams shape;
  int components = 8;
  double sd_mm = 3.0;  ///< per-vertex RMS displacement of the first component at unit weight
  double decay = 0.8;  ///< eigenvalue ratio between consecutive components
  std::uint64_t seed = 7;
};

inline double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

/// Mean shape = the face mesh; components are smooth normal-displacement
/// fields with the six infinitesimal rigid motions projected out, then
/// orthonormalized. Stored values are rounded to float32 so that a model
/// written to disk reloads identically.
inline MorphableModel make_synthetic_model(const ModelSpec& spec) {
  if (spec.components < 1) throw Error(ErrorCode::InvalidArgument, "model needs at least one component");
  const FaceMesh mesh = make_face_mesh(spec.shape, spec.seed);
  const auto n = static_cast<Eigen::Index>(mesh.cloud.size());
  const Eigen::Index k = spec.components;
  if (3 * n < k + 6) throw Error(ErrorCode::InvalidArgument, "too many components for the mesh size");

  std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<int> freq(0, 3);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * kPi);
  Eigen::MatrixXd d(3 * n, k);
  for (Eigen::Index c = 0; c < k; ++c) {
    const double fx = freq(rng);
    const double fy = freq(rng);
    const double ph = phase(rng);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Vector2d& xy = mesh.parameters[static_cast<std::size_t>(i)];
      const double f = std::cos(kPi * (fx * xy.x() / spec.shape.semi_x + fy * xy.y() / spec.shape.semi_y) + ph);
      d.block<3, 1>(3 * i, c) = f * mesh.cloud.normals[static_cast<std::size_t>(i)];
    }
  }

  Eigen::MatrixXd rigid = Eigen::MatrixXd::Zero(3 * n, 6);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector3d& p = mesh.cloud.points[static_cast<std::size_t>(i)];
    rigid.block<3, 3>(3 * i, 0).setIdentity();
    for (int a = 0; a < 3; ++a) rigid.block<3, 1>(3 * i, 3 + a) = Eigen::Vector3d::Unit(a).cross(p);
  }
  const Eigen::HouseholderQR<Eigen::MatrixXd> rqr(rigid);
  const Eigen::MatrixXd rq = rqr.householderQ() * Eigen::MatrixXd::Identity(3 * n, 6);
  d -= rq * (rq.transpose() * d);

  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(d);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(3 * n, k);
  const Eigen::MatrixXd r = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
  for (Eigen::Index c = 0; c < k; ++c)
    if (r(c, c) < 0.0) q.col(c) = -q.col(c);

  MorphableModel m;
  m.mean.resize(3 * n);
  for (Eigen::Index i = 0; i < n; ++i) m.mean.segment<3>(3 * i) = mesh.cloud.points[static_cast<std::size_t>(i)];
  m.mean = m.mean.unaryExpr(&quantize_f32);
  m.components = q.unaryExpr(&quantize_f32);
  m.eigenvalues.resize(k);
  for (Eigen::Index c = 0; c < k; ++c) {
    m.eigenvalues(c) = quantize_f32(spec.sd_mm * std::sqrt(static_cast<double>(n)) * std::pow(spec.decay, static_cast<double>(c)));
  }
  m.annotations = mesh.annotations;
  return m;
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

enum class MotionKind { sway, surge, heave, roll, pitch, yaw, combined_roll };

inline std::string_view to_string(MotionKind k) {
  switch (k) {
    case MotionKind::sway: return "sway";
    case MotionKind::surge: return "surge";
    case MotionKind::heave: return "heave";
    case MotionKind::roll: return "roll";
    case MotionKind::pitch: return "pitch";
    case MotionKind::yaw: return "yaw";
    case MotionKind::combined_roll: return "combined_roll";
  }
  return "unknown";
}

inline MotionKind motion_kind_from_string(std::string_view s) {
  for (int i = 0; i <= static_cast<int>(MotionKind::combined_roll); ++i) {
    if (to_string(static_cast<MotionKind>(i)) == s) return static_cast<MotionKind>(i);
  }
  throw Error(ErrorCode::UnknownKind, "unknown motion kind '" + std::string(s) + "'");
}

/// Head motion relative to the neutral pose, one sinusoidal period over
/// `frames`. Translations are along the reference axes (sway x, heave y,
/// surge z), rotations about the head axes (pitch x, yaw y, roll z).
/// `amplitude` is mm for translations and degrees for rotations. The seed's
/// parity selects the direction; for combined_roll this is clockwise (even)
/// or counter-clockwise (odd): the head circles through simultaneous pitch
/// and yaw with a radius that swells and fades over the segment.
inline std::vector<Pose> generate_trajectory(MotionKind kind, double amplitude, int frames, std::uint64_t seed) {
  if (frames < 1) throw Error(ErrorCode::InvalidArgument, "trajectory needs at least one frame");
  const double dir = (seed % 2 == 0) ? 1.0 : -1.0;
  std::vector<Pose> out;
  out.reserve(static_cast<std::size_t>(frames));
  for (int i = 0; i < frames; ++i) {
    const double phase = 2.0 * kPi * i / frames;
    const double s = dir * amplitude * std::sin(phase);
    Pose p;
    switch (kind) {
      case MotionKind::sway: p.translation.x() = s; break;
      case MotionKind::heave: p.translation.y() = s; break;
      case MotionKind::surge: p.translation.z() = s; break;
      case MotionKind::pitch: p.rotation = rotation_x(s); break;
      case MotionKind::yaw: p.rotation = rotation_y(s); break;
      case MotionKind::roll: p.rotation = rotation_z(s); break;
      case MotionKind::combined_roll: {
        const double radius = amplitude * std::sin(kPi * i / frames);
        p.rotation = from_euler({radius * std::cos(dir * phase), radius * std::sin(dir * phase), 0.0});
        break;
      }
    }
    out.push_back(p);
  }
  return out;
}

inline std::vector<Pose> generate_trajectory(std::string_view kind, double amplitude, int frames, std::uint64_t seed) {
  return generate_trajectory(motion_kind_from_string(kind), amplitude, frames, seed);
}

// ---------------------------------------------------------------------------
// Noise and occlusion
// ---------------------------------------------------------------------------

struct OcclusionEvent {
  int frame = 0;
  std::set<int> dropped_ids;
  double cloud_radius_mm = 0.0;  ///< cloud points this close to a dropped landmark vanish
};

struct NoiseModel {
  double pixel_sigma = 0.5;
  double depth_sigma = 1.0;
  std::vector<OcclusionEvent> occlusions;

  void validate() const {
    if (!(pixel_sigma >= 0.0) || !(depth_sigma >= 0.0)) {
      throw Error(ErrorCode::InvalidArgument, "noise sigmas must be non-negative");
    }
  }

  const OcclusionEvent* occlusion_at(int frame) const {
    for (const auto& e : occlusions)
      if (e.frame == frame) return &e;
    return nullptr;
  }
};

struct OcclusionSpec {
  double frame_fraction = 0.0;     ///< share of frames that get an occlusion event
  double landmark_fraction = 0.5;  ///< share of each facial region dropped on those frames
  double cloud_radius_mm = 0.0;
  std::uint64_t seed = 0;
};

/// Picks round(frame_fraction * frames) frames; on each, drops
/// ceil(landmark_fraction * size) landmarks of every facial region.
inline std::vector<OcclusionEvent> make_occlusion_schedule(int frames, const OcclusionSpec& spec) {
  std::vector<OcclusionEvent> out;
  if (frames <= 0 || spec.frame_fraction <= 0.0) return out;
  std::mt19937_64 rng(spec.seed);
  std::vector<int> order(static_cast<std::size_t>(frames));
  for (int i = 0; i < frames; ++i) order[static_cast<std::size_t>(i)] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const auto count = static_cast<std::size_t>(std::llround(spec.frame_fraction * frames));
  order.resize(std::min(count, order.size()));
  std::sort(order.begin(), order.end());
  for (int f : order) {
    OcclusionEvent e;
    e.frame = f;
    e.cloud_radius_mm = spec.cloud_radius_mm;
    for (const auto& region : kFaceRegions) {
      std::vector<int> ids;
      for (int i = region.first; i <= region.last; ++i) ids.push_back(i);
      std::shuffle(ids.begin(), ids.end(), rng);
      const auto drop = static_cast<std::size_t>(std::ceil(spec.landmark_fraction * static_cast<double>(ids.size())));
      for (std::size_t i = 0; i < std::min(drop, ids.size()); ++i) e.dropped_ids.insert(ids[i]);
    }
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scene
// ---------------------------------------------------------------------------

struct MotionSegment {
  MotionKind kind = MotionKind::sway;
  std::uint64_t seed = 0;
};

inline std::vector<MotionSegment> default_segments() {
  return {{MotionKind::sway, 0},  {MotionKind::surge, 0}, {MotionKind::heave, 0},
          {MotionKind::roll, 0},  {MotionKind::pitch, 0}, {MotionKind::yaw, 0},
          {MotionKind::combined_roll, 0}, {MotionKind::combined_roll, 1}};
}

struct RigSpec {
  double fx = 1900.0;
  double fy = 1900.0;
  double cx = 1920.0;
  double cy = 1080.0;
  double baseline_mm = 355.0;

  StereoRig make() const {
    StereoRig rig;
    rig.left.fx = rig.right.fx = fx;
    rig.left.fy = rig.right.fy = fy;
    rig.left.cx = rig.right.cx = cx;
    rig.left.cy = rig.right.cy = cy;
    rig.right.extrinsic.translation = Eigen::Vector3d(-baseline_mm, 0.0, 0.0);
    return rig;
  }
};

struct SceneSpec {
  std::uint64_t seed = 1;
  ModelSpec model;
  double subject_weight_sigma = 1.0;
  std::vector<MotionSegment> segments = default_segments();
  int frames_per_segment = 25;
  double amplitude_mm = 15.0;
  double amplitude_deg = 15.0;
  std::vector<MotionSegment> scan_segments = {{MotionKind::combined_roll, 0}, {MotionKind::combined_roll, 1}};
  int scan_frames_per_segment = 25;
  double fps = 30.0;
  RigSpec rig;
  Eigen::Vector3d neutral_position{177.5, 0.0, 650.0};  ///< nasion in the reference frame
  Eigen::Vector3d pivot{0.0, 40.0, 90.0};              ///< rotation centre, head frame
  double pixel_sigma = 0.5;
  double depth_sigma = 1.0;
  OcclusionSpec occlusion;
};

struct SyntheticScene {
  std::shared_ptr<const MorphableModel> model;
  Eigen::VectorXd subject_weights;
  PointCloud surface;       ///< head frame
  LandmarkSet3D landmarks;  ///< head frame, 68 ids
  std::vector<Pose> trajectory;       ///< ref_T_head
  std::vector<Pose> scan_trajectory;  ///< ref_T_head during the template scan
  StereoRig rig;
  std::uint64_t seed = 0;
  double fps = 30.0;
  NoiseModel noise;
  NoiseModel scan_noise;
};

inline std::vector<Pose> compose_segments(const SceneSpec& spec, const std::vector<MotionSegment>& segments,
                                          int frames_per_segment) {
  const Pose neutral{Eigen::Matrix3d::Identity(), spec.neutral_position};
  std::vector<Pose> out;
  for (const auto& seg : segments) {
    const bool rotational = seg.kind == MotionKind::roll || seg.kind == MotionKind::pitch ||
                            seg.kind == MotionKind::yaw || seg.kind == MotionKind::combined_roll;
    const double amp = rotational ? spec.amplitude_deg : spec.amplitude_mm;
    for (const Pose& m : generate_trajectory(seg.kind, amp, frames_per_segment, seg.seed)) {
      // rotate about the pivot, translate in the reference frame
      Pose local{m.rotation, spec.pivot - m.rotation * spec.pivot};
      Pose p = compose(neutral, local);
      p.translation += m.translation;
      out.push_back(p);
    }
  }
  return out;
}

inline SyntheticScene make_scene(const SceneSpec& spec) {
  SyntheticScene s;
  auto model = std::make_shared<MorphableModel>(make_synthetic_model(spec.model));
  s.model = model;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> n(0.0, spec.subject_weight_sigma > 0.0 ? spec.subject_weight_sigma : 1.0);
  s.subject_weights.resize(static_cast<Eigen::Index>(model->component_count()));
  for (Eigen::Index i = 0; i < s.subject_weights.size(); ++i) {
    s.subject_weights(i) = spec.subject_weight_sigma > 0.0 ? n(rng) : 0.0;
  }
  s.surface = synthesize(*model, s.subject_weights);
  const LandmarkSet3D annotated = annotated_landmarks(*model, s.subject_weights);
  for (const auto& e : annotated.entries)
    if (e.id < kFaceLandmarkCount) s.landmarks.entries.push_back(e);
  s.trajectory = compose_segments(spec, spec.segments, spec.frames_per_segment);
  s.scan_trajectory = compose_segments(spec, spec.scan_segments, spec.scan_frames_per_segment);
  s.rig = spec.rig.make();
  s.seed = spec.seed;
  s.fps = spec.fps;
  s.noise.pixel_sigma = spec.pixel_sigma;
  s.noise.depth_sigma = spec.depth_sigma;
  OcclusionSpec occ = spec.occlusion;
  if (occ.seed == 0) occ.seed = spec.seed + 1000;
  s.noise.occlusions = make_occlusion_schedule(static_cast<int>(s.trajectory.size()), occ);
  s.noise.validate();
  s.scan_noise.pixel_sigma = spec.pixel_sigma;
  s.scan_noise.depth_sigma = spec.depth_sigma;
  return s;
}

/// Landmarks of the subject in a centroid-origin frame, standing in for a
/// generic detector template.
inline LandmarkSet3D make_generic_template(const SyntheticScene& scene) {
  Eigen::Vector3d c = Eigen::Vector3d::Zero();
  for (const auto& e : scene.landmarks.entries) c += e.position;
  c /= static_cast<double>(scene.landmarks.entries.size());
  LandmarkSet3D out = scene.landmarks;
  for (auto& e : out.entries) e.position -= c;
  return out;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

struct RenderedFrame {
  LandmarkSet2D left;
  LandmarkSet2D right;
  LandmarkSet3D depth_landmarks;
  PointCloud cloud;
};

enum class Stream : std::uint32_t { tracking = 0, scan = 1 };

/// Renders one frame of `pose` (ref_T_head). Noise draws depend only on
/// (scene seed, stream, frame index).
inline RenderedFrame render_pose(const SyntheticScene& scene, const Pose& pose, int frame_index,
                                 const NoiseModel& noise, Stream stream = Stream::tracking) {
  noise.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(scene.seed & 0xffffffffu), static_cast<std::uint32_t>(scene.seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(frame_index)};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> unit(0.0, 1.0);
  const OcclusionEvent* occ = noise.occlusion_at(frame_index);

  RenderedFrame out;
  const Eigen::Vector3d depth_center = scene.rig.left.center();
  auto along_ray = [&](const Eigen::Vector3d& p) {
    if (noise.depth_sigma == 0.0) return p;
    const Eigen::Vector3d ray = (p - depth_center).normalized();
    return Eigen::Vector3d(p + noise.depth_sigma * unit(rng) * ray);
  };
  auto observe = [&](const CameraModel& cam, const Eigen::Vector3d& x, int id) {
    Landmark2D lm{id, 0.0, 0.0, false};
    const Eigen::Vector3d pc = cam.to_camera(x);
    const double du = unit(rng);
    const double dv = unit(rng);
    if (pc.z() > 0.0) {
      const Eigen::Vector2d px = cam.project_camera_frame(pc);
      lm.u = px.x() + noise.pixel_sigma * du;
      lm.v = px.y() + noise.pixel_sigma * dv;
      lm.valid = true;
    }
    return lm;
  };

  std::vector<Eigen::Vector3d> dropped_world;
  for (const auto& e : scene.landmarks.entries) {
    const Eigen::Vector3d x = pose.apply(e.position);
    const bool dropped = occ != nullptr && occ->dropped_ids.count(e.id) != 0;
    Landmark2D l = observe(scene.rig.left, x, e.id);
    Landmark2D r = observe(scene.rig.right, x, e.id);
    Landmark3D d{e.id, along_ray(x), true};
    if (dropped) {
      l.valid = r.valid = d.valid = false;
      dropped_world.push_back(x);
    }
    if (!l.valid) d.valid = false;
    out.left.entries.push_back(l);
    out.right.entries.push_back(r);
    out.depth_landmarks.entries.push_back(d);
  }

  const double radius = occ != nullptr ? occ->cloud_radius_mm : 0.0;
  out.cloud.points.reserve(scene.surface.size());
  for (const auto& p : scene.surface.points) {
    const Eigen::Vector3d x = pose.apply(p);
    const Eigen::Vector3d noisy = along_ray(x);
    bool hidden = false;
    for (const auto& c : dropped_world) hidden = hidden || (x - c).norm() < radius;
    if (!hidden) out.cloud.points.push_back(noisy);
  }
  return out;
}

inline RenderedFrame render_frame(const SyntheticScene& scene, int frame_index, const NoiseModel& noise) {
  if (frame_index < 0 || static_cast<std::size_t>(frame_index) >= scene.trajectory.size()) {
    throw Error(ErrorCode::InvalidArgument, "frame index out of range");
  }
  return render_pose(scene, scene.trajectory[static_cast<std::size_t>(frame_index)], frame_index, noise);
}

/// Renders every frame of the tracking (or scan) trajectory into a bundle
/// with ground truth attached.
inline RecordingBundle render_bundle(const SyntheticScene& scene, Stream stream = Stream::tracking) {
  const auto& traj = stream == Stream::tracking ? scene.trajectory : scene.scan_trajectory;
  const NoiseModel& noise = stream == Stream::tracking ? scene.noise : scene.scan_noise;
  RecordingBundle b;
  b.rig = scene.rig;
  b.modalities = {true, true, true};
  b.ground_truth = traj;
  for (std::size_t k = 0; k < traj.size(); ++k) {
    RenderedFrame f = render_pose(scene, traj[k], static_cast<int>(k), noise, stream);
    b.timestamps.push_back(static_cast<double>(k) / scene.fps);
    b.left.push_back(std::move(f.left));
    b.right.push_back(std::move(f.right));
    b.depth_landmarks.push_back(std::move(f.depth_landmarks));
    b.clouds.push_back(std::move(f.cloud));
  }
  return b;
}

}  // namespace headtrack::synth
