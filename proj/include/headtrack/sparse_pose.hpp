#pragma once

// Landmark-based solvers: monocular PnP, two-view linear triangulation and
// correspondence-based rigid alignment.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/SVD>

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "headtrack/error.hpp"
#include "headtrack/geometry.hpp"
#include "headtrack/landmarks.hpp"

namespace headtrack {

// ---------------------------------------------------------------------------
// Rigid alignment
// ---------------------------------------------------------------------------

struct RigidFit {
  Pose pose;         ///< maps source points onto target points
  double rms = 0.0;  ///< weighted RMS of the residuals after alignment (mm)
};

/// Closed-form weighted least-squares rigid transform between corresponding
/// columns (Kabsch with reflection guard). Throws DegenerateConfiguration when
/// the source points are collinear or coincident.
inline RigidFit fit_rigid(const Eigen::Matrix3Xd& source, const Eigen::Matrix3Xd& target,
                          const Eigen::VectorXd* weights = nullptr) {
  const Eigen::Index n = source.cols();
  if (n != target.cols()) throw Error(ErrorCode::DimensionMismatch, "source/target size differ");
  if (n < 3) throw Error(ErrorCode::InsufficientLandmarks, "rigid alignment needs >= 3 points");
  Eigen::VectorXd w = weights ? *weights : Eigen::VectorXd::Ones(n);
  if (w.size() != n) throw Error(ErrorCode::DimensionMismatch, "weight count differs");
  const double wsum = w.sum();
  if (!(wsum > 0.0)) throw Error(ErrorCode::InvalidArgument, "weights must sum to a positive value");

  const Eigen::Vector3d mu_s = (source * w) / wsum;
  const Eigen::Vector3d mu_t = (target * w) / wsum;
  const Eigen::Matrix3Xd cs = source.colwise() - mu_s;
  const Eigen::Matrix3Xd ct = target.colwise() - mu_t;

  // Collinearity: the weighted scatter of the source must span a plane.
  const Eigen::Matrix3d scatter = cs * w.asDiagonal() * cs.transpose();
  Eigen::JacobiSVD<Eigen::Matrix3d> spread(scatter);
  const auto sv = spread.singularValues();
  if (!(sv(0) > 0.0) || sv(1) <= 1e-12 * sv(0)) {
    throw Error(ErrorCode::DegenerateConfiguration, "source points are collinear or coincident");
  }

  const Eigen::Matrix3d cov = cs * w.asDiagonal() * ct.transpose();
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0) d(2, 2) = -1.0;

  RigidFit fit;
  fit.pose.rotation = svd.matrixV() * d * svd.matrixU().transpose();
  fit.pose.translation = mu_t - fit.pose.rotation * mu_s;

  const Eigen::Matrix3Xd resid = (fit.pose.rotation * source).colwise() + fit.pose.translation - target;
  fit.rms = std::sqrt((resid.colwise().squaredNorm().transpose().cwiseProduct(w)).sum() / wsum);
  return fit;
}

struct Correspondences3D {
  std::vector<int> ids;
  Eigen::Matrix3Xd source;
  Eigen::Matrix3Xd target;
};

inline Correspondences3D common_valid(const LandmarkSet3D& source, const LandmarkSet3D& target) {
  std::vector<int> ids;
  for (const auto& s : source.entries) {
    if (s.valid && target.find_valid(s.id) != nullptr) ids.push_back(s.id);
  }
  Correspondences3D c;
  c.ids = ids;
  c.source.resize(3, static_cast<Eigen::Index>(ids.size()));
  c.target.resize(3, static_cast<Eigen::Index>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    c.source.col(static_cast<Eigen::Index>(i)) = source.find(ids[i])->position;
    c.target.col(static_cast<Eigen::Index>(i)) = target.find(ids[i])->position;
  }
  return c;
}

/// Least-squares rigid transform taking `source` landmarks onto `target`
/// landmarks over their common valid ids.
inline RigidFit rigid_align(const LandmarkSet3D& source, const LandmarkSet3D& target) {
  const Correspondences3D c = common_valid(source, target);
  if (c.ids.size() < 3) {
    throw Error(ErrorCode::InsufficientLandmarks,
                "rigid alignment found " + std::to_string(c.ids.size()) + " common landmarks");
  }
  return fit_rigid(c.source, c.target);
}

// ---------------------------------------------------------------------------
// Triangulation
// ---------------------------------------------------------------------------

struct TriangulatedPoint {
  Eigen::Vector3d point = Eigen::Vector3d::Zero();  ///< reference (left camera) frame, mm
  double residual = 0.0;                            ///< RMS of both reprojection errors, px
};

/// Linear (DLT) two-view triangulation: stacks w x P x = 0 for both views and
/// takes the right singular vector of the smallest singular value.
inline TriangulatedPoint triangulate(const CameraModel& left, const CameraModel& right,
                                     const Eigen::Vector2d& w_left,
                                     const Eigen::Vector2d& w_right) {
  const double baseline = (left.center() - right.center()).norm();
  if (baseline < 1e-9) throw Error(ErrorCode::ZeroBaseline, "camera centres coincide");

  // Normalized image coordinates and a world scale of the order of the
  // baseline keep the 4x4 system well conditioned.
  const double scale = baseline;
  Eigen::Matrix4d a;
  int row = 0;
  for (const auto* view : {&left, &right}) {
    const Eigen::Vector2d& w = (view == &left) ? w_left : w_right;
    const Eigen::Vector2d xn((w.x() - view->cx) / view->fx, (w.y() - view->cy) / view->fy);
    Eigen::Matrix<double, 3, 4> p;
    p.leftCols<3>() = view->extrinsic.rotation * scale;
    p.col(3) = view->extrinsic.translation;
    a.row(row++) = xn.x() * p.row(2) - p.row(0);
    a.row(row++) = xn.y() * p.row(2) - p.row(1);
  }
  for (int r = 0; r < 4; ++r) {
    const double n = a.row(r).norm();
    if (n > 0.0) a.row(r) /= n;
  }

  Eigen::JacobiSVD<Eigen::Matrix4d> svd(a, Eigen::ComputeFullV);
  Eigen::Vector4d x = svd.matrixV().col(3);
  x.normalize();
  if (std::abs(x(3)) < 1e-12) throw Error(ErrorCode::DegenerateRay, "point at infinity");

  TriangulatedPoint out;
  out.point = x.head<3>() * scale / x(3);

  double sq = 0.0;
  for (const auto* view : {&left, &right}) {
    const Eigen::Vector2d& w = (view == &left) ? w_left : w_right;
    const Eigen::Vector3d pc = view->to_camera(out.point);
    const Eigen::Vector2d proj(view->fx * pc.x() / pc.z() + view->cx,
                               view->fy * pc.y() / pc.z() + view->cy);
    sq += (proj - w).squaredNorm();
  }
  out.residual = std::sqrt(sq / 2.0);
  return out;
}

// ---------------------------------------------------------------------------
// Perspective-n-point
// ---------------------------------------------------------------------------

struct PnPConfig {
  int max_iterations = 100;
  double relative_tolerance = 1e-9;
  /// A solve that hits the iteration cap is only a failure above this RMS.
  double max_rms_px = 50.0;
};

struct PnPResult {
  Pose pose;  ///< ref_T_head
  double rms_px = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> rms_history;  ///< one entry per accepted iterate, non-increasing
};

namespace detail {

struct PnPProblem {
  const CameraModel* cam = nullptr;
  Eigen::Matrix3Xd points;  // head frame
  Eigen::Matrix2Xd pixels;

  /// Sum of squared pixel residuals for cam_T_head; +inf if any point is at
  /// non-positive depth.
  double cost(const Pose& cam_T_head) const {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < points.cols(); ++i) {
      const Eigen::Vector3d p = cam_T_head.apply(points.col(i));
      if (!(p.z() > 0.0)) return std::numeric_limits<double>::infinity();
      const Eigen::Vector2d proj(cam->fx * p.x() / p.z() + cam->cx, cam->fy * p.y() / p.z() + cam->cy);
      sum += (proj - pixels.col(i)).squaredNorm();
    }
    return sum;
  }

  double rms(double cost_value) const { return std::sqrt(cost_value / static_cast<double>(points.cols())); }
};

struct RefineOutcome {
  Pose pose;
  double cost = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
  std::vector<double> rms_history;
};

/// Gauss-Newton over a left-multiplied rotation increment and an additive
/// translation increment, with step halving so the cost never increases.
inline RefineOutcome refine_pnp(const PnPProblem& prob, const Pose& init, const PnPConfig& cfg) {
  RefineOutcome out;
  out.pose = init;
  out.cost = prob.cost(init);
  if (!std::isfinite(out.cost)) return out;
  out.rms_history.push_back(prob.rms(out.cost));

  const Eigen::Index n = prob.points.cols();
  const CameraModel& cam = *prob.cam;
  for (int it = 0; it < cfg.max_iterations; ++it) {
    if (out.cost == 0.0) {
      out.converged = true;
      break;
    }
    Eigen::Matrix<double, 6, 6> jtj = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> jtr = Eigen::Matrix<double, 6, 1>::Zero();
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Vector3d rx = out.pose.rotation * prob.points.col(i);
      const Eigen::Vector3d p = rx + out.pose.translation;
      const double iz = 1.0 / p.z();
      Eigen::Matrix<double, 2, 3> dproj;
      dproj << cam.fx * iz, 0.0, -cam.fx * p.x() * iz * iz, 0.0, cam.fy * iz, -cam.fy * p.y() * iz * iz;
      Eigen::Matrix<double, 3, 6> dp;
      dp.leftCols<3>() << 0.0, rx.z(), -rx.y(), -rx.z(), 0.0, rx.x(), rx.y(), -rx.x(), 0.0;
      dp.rightCols<3>() = Eigen::Matrix3d::Identity();
      const Eigen::Matrix<double, 2, 6> j = dproj * dp;
      const Eigen::Vector2d r(cam.fx * p.x() * iz + cam.cx - prob.pixels(0, i),
                              cam.fy * p.y() * iz + cam.cy - prob.pixels(1, i));
      jtj += j.transpose() * j;
      jtr += j.transpose() * r;
    }
    Eigen::Matrix<double, 6, 1> delta = jtj.ldlt().solve(-jtr);
    if (!delta.allFinite()) {
      const double damp = 1e-9 * (jtj.trace() + 1.0);
      delta = (jtj + damp * Eigen::Matrix<double, 6, 6>::Identity()).ldlt().solve(-jtr);
    }

    bool accepted = false;
    double step = 1.0;
    for (int halving = 0; halving < 40 && delta.allFinite(); ++halving, step *= 0.5) {
      Pose cand;
      cand.rotation = exp_so3(step * delta.head<3>()) * out.pose.rotation;
      cand.translation = out.pose.translation + step * delta.tail<3>();
      const double c = prob.cost(cand);
      if (c < out.cost) {
        const double rel = (out.cost - c) / out.cost;
        out.pose = cand;
        out.cost = c;
        out.rms_history.push_back(prob.rms(c));
        accepted = true;
        if (rel < cfg.relative_tolerance) out.converged = true;
        break;
      }
    }
    out.iterations = it + 1;
    if (!accepted) {
      // No descent along the Gauss-Newton direction: at a local minimum to
      // working precision.
      out.converged = true;
      break;
    }
    if (out.converged) break;
  }
  out.pose.rotation = project_to_rotation(out.pose.rotation);
  out.cost = prob.cost(out.pose);
  return out;
}

/// Normalized DLT for cam_T_head; needs >= 6 non-coplanar points.
inline std::optional<Pose> dlt_pose(const PnPProblem& prob) {
  const Eigen::Index n = prob.points.cols();
  if (n < 6) return std::nullopt;
  const Eigen::Vector3d c = prob.points.rowwise().mean();
  const Eigen::Matrix3Xd centered = prob.points.colwise() - c;
  const double s = std::sqrt(centered.colwise().squaredNorm().mean());
  if (!(s > 0.0)) return std::nullopt;
  Eigen::JacobiSVD<Eigen::Matrix3Xd> spread(centered);
  if (spread.singularValues()(2) < 1e-6 * spread.singularValues()(0)) return std::nullopt;

  const CameraModel& cam = *prob.cam;
  Eigen::MatrixXd a(2 * n, 12);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector3d x = centered.col(i) / s;
    const double xn = (prob.pixels(0, i) - cam.cx) / cam.fx;
    const double yn = (prob.pixels(1, i) - cam.cy) / cam.fy;
    Eigen::Matrix<double, 1, 4> xh(x.x(), x.y(), x.z(), 1.0);
    a.row(2 * i).setZero();
    a.row(2 * i + 1).setZero();
    a.block<1, 4>(2 * i, 0) = xh;
    a.block<1, 4>(2 * i, 8) = -xn * xh;
    a.block<1, 4>(2 * i + 1, 4) = xh;
    a.block<1, 4>(2 * i + 1, 8) = -yn * xh;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd v = svd.matrixV().col(11);
  Eigen::Matrix<double, 3, 4> m;
  m << v(0), v(1), v(2), v(3), v(4), v(5), v(6), v(7), v(8), v(9), v(10), v(11);

  Eigen::Matrix3d left = m.leftCols<3>() / s;
  Eigen::Vector3d right = m.col(3) - left * c;
  if (left.determinant() < 0.0) {
    left = -left;
    right = -right;
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> lsvd(left);
  const double scale = lsvd.singularValues().mean();
  if (!(scale > 0.0)) return std::nullopt;
  Pose pose{project_to_rotation(left / scale), right / scale};
  return pose;
}

/// Coarse starting poses when the linear solution is unavailable: a set of
/// head orientations, each placed so the landmark centroid lies on its
/// observed ray at a depth matching the observed image spread.
inline std::vector<Pose> seed_poses(const PnPProblem& prob) {
  const CameraModel& cam = *prob.cam;
  const Eigen::Vector3d c = prob.points.rowwise().mean();
  const Eigen::Vector2d pc = prob.pixels.rowwise().mean();
  const double spread3 = std::sqrt((prob.points.colwise() - c).colwise().squaredNorm().mean());
  const double spread2 = std::sqrt((prob.pixels.colwise() - pc).colwise().squaredNorm().mean());
  const double f = 0.5 * (cam.fx + cam.fy);
  const double depth = spread2 > 0.0 ? f * spread3 / spread2 : 1000.0;
  const Eigen::Vector3d ray((pc.x() - cam.cx) / cam.fx, (pc.y() - cam.cy) / cam.fy, 1.0);

  std::vector<Pose> seeds;
  for (double yaw : {0.0, -60.0, 60.0, 180.0}) {
    for (double pitch : {0.0, -45.0, 45.0}) {
      for (double roll : {0.0, 90.0, -90.0, 180.0}) {
        Pose p;
        p.rotation = from_euler({yaw, pitch, roll});
        p.translation = ray * depth - p.rotation * c;
        seeds.push_back(p);
      }
    }
  }
  return seeds;
}

}  // namespace detail

/// Pose minimizing the summed squared reprojection error of the template
/// landmarks over the ids valid in both sets. Returns ref_T_head.
inline PnPResult solve_pnp(const CameraModel& cam, const LandmarkSet2D& observed,
                           const LandmarkSet3D& tmpl, const PnPConfig& config = {}) {
  cam.validate();
  std::vector<int> ids;
  for (const auto& w : observed.entries) {
    if (w.valid && tmpl.find_valid(w.id) != nullptr) ids.push_back(w.id);
  }
  if (ids.size() < 4) {
    throw Error(ErrorCode::InsufficientLandmarks,
                "PnP found " + std::to_string(ids.size()) + " common landmarks, needs 4");
  }

  detail::PnPProblem prob;
  prob.cam = &cam;
  prob.points.resize(3, static_cast<Eigen::Index>(ids.size()));
  prob.pixels.resize(2, static_cast<Eigen::Index>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    prob.points.col(static_cast<Eigen::Index>(i)) = tmpl.find(ids[i])->position;
    prob.pixels.col(static_cast<Eigen::Index>(i)) = observed.find(ids[i])->pixel();
  }

  {
    const Eigen::Matrix3Xd centered = prob.points.colwise() - prob.points.rowwise().mean();
    Eigen::JacobiSVD<Eigen::Matrix3Xd> spread(centered);
    const auto sv = spread.singularValues();
    if (!(sv(0) > 0.0) || sv(1) <= 1e-9 * sv(0)) {
      throw Error(ErrorCode::DegenerateConfiguration, "template landmarks are collinear or coincident");
    }
  }

  // Express the problem in the camera frame; the extrinsic is folded back in
  // at the end.
  CameraModel cam_local = cam;
  cam_local.extrinsic = Pose::identity();
  prob.cam = &cam_local;

  std::vector<Pose> starts;
  if (auto dlt = detail::dlt_pose(prob)) starts.push_back(*dlt);

  detail::RefineOutcome best;
  for (const Pose& s : starts) {
    auto r = detail::refine_pnp(prob, s, config);
    if (r.cost < best.cost) best = std::move(r);
  }
  if (!std::isfinite(best.cost) || best.rms_history.empty() ||
      best.rms_history.back() > config.max_rms_px) {
    for (const Pose& s : detail::seed_poses(prob)) {
      auto r = detail::refine_pnp(prob, s, config);
      if (r.cost < best.cost) best = std::move(r);
    }
  }

  if (!std::isfinite(best.cost)) {
    throw Error(ErrorCode::BehindCamera, "no pose places the template in front of the camera");
  }
  const double rms = prob.rms(best.cost);
  if (!best.converged && rms > config.max_rms_px) {
    throw Error(ErrorCode::NoConvergence, "PnP hit the iteration cap at RMS " + std::to_string(rms) + " px");
  }

  PnPResult result;
  result.pose = compose(invert(cam.extrinsic), best.pose);
  result.rms_px = rms;
  result.iterations = best.iterations;
  result.converged = best.converged;
  result.rms_history = std::move(best.rms_history);
  return result;
}

// ---------------------------------------------------------------------------
// Stereo landmark tracking
// ---------------------------------------------------------------------------

struct StereoFrameResult {
  Pose pose;               ///< ref_T_head
  double rms_mm = 0.0;     ///< rigid alignment residual
  LandmarkSet3D points;    ///< triangulated landmarks, reference frame
};

/// Triangulates every landmark of `subset` valid in both views, then aligns
/// the template onto the reconstructed points.
inline StereoFrameResult stereo_track_frame(const StereoRig& rig, const LandmarkSet2D& observed_left,
                                            const LandmarkSet2D& observed_right,
                                            const LandmarkSet3D& tmpl,
                                            const LandmarkSubsetConfig& subset) {
  StereoFrameResult out;
  for (int id : subset.ids) {
    const Landmark3D* t = tmpl.find_valid(id);
    const Landmark2D* l = observed_left.find_valid(id);
    const Landmark2D* r = observed_right.find_valid(id);
    if (t == nullptr || l == nullptr || r == nullptr) continue;
    const TriangulatedPoint tp = triangulate(rig.left, rig.right, l->pixel(), r->pixel());
    out.points.entries.push_back({id, tp.point, true});
  }
  if (out.points.entries.size() < 3) {
    throw Error(ErrorCode::InsufficientLandmarks,
                "stereo frame has " + std::to_string(out.points.entries.size()) +
                    " landmarks valid in both views");
  }
  const RigidFit fit = rigid_align(tmpl, out.points);
  out.pose = fit.pose;
  out.rms_mm = fit.rms;
  return out;
}

}  // namespace headtrack
