#pragma once

// PCA shape model and personalized head model (PHM) fitting.

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <vector>

#include "headtrack/dense_registration.hpp"
#include "headtrack/error.hpp"
#include "headtrack/geometry.hpp"
#include "headtrack/kdtree.hpp"
#include "headtrack/landmarks.hpp"
#include "headtrack/sparse_pose.hpp"

namespace headtrack {

/// Instances are S_w = mean + sum_i w_i * e_i * v_i, with v_i the columns of
/// `components` (length 3n, x/y/z interleaved per vertex).
struct MorphableModel {
  Eigen::VectorXd mean;           ///< 3n
  Eigen::MatrixXd components;     ///< 3n x K, orthonormal columns
  Eigen::VectorXd eigenvalues;    ///< K, positive and non-increasing
  std::map<int, std::size_t> annotations;  ///< landmark id -> vertex index

  std::size_t vertex_count() const { return static_cast<std::size_t>(mean.size() / 3); }
  std::size_t component_count() const { return static_cast<std::size_t>(eigenvalues.size()); }

  void validate(double orthonormal_tol = 1e-6) const {
    if (mean.size() == 0 || mean.size() % 3 != 0) {
      throw Error(ErrorCode::DimensionMismatch, "mean shape length must be a positive multiple of 3");
    }
    if (components.rows() != mean.size() || components.cols() != eigenvalues.size()) {
      throw Error(ErrorCode::DimensionMismatch, "component matrix shape does not match mean/eigenvalues");
    }
    for (Eigen::Index k = 0; k < eigenvalues.size(); ++k) {
      if (!(eigenvalues(k) > 0.0)) throw Error(ErrorCode::InvalidArgument, "eigenvalues must be positive");
      if (k > 0 && eigenvalues(k) > eigenvalues(k - 1)) {
        throw Error(ErrorCode::InvalidArgument, "eigenvalues must be non-increasing");
      }
    }
    const Eigen::MatrixXd gram = components.transpose() * components;
    if ((gram - Eigen::MatrixXd::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff() > orthonormal_tol) {
      throw Error(ErrorCode::InvalidArgument, "components are not orthonormal");
    }
    for (const auto& [id, v] : annotations) {
      if (v >= vertex_count()) {
        throw Error(ErrorCode::InvalidArgument, "annotation " + std::to_string(id) + " indexes past the mesh");
      }
    }
  }

  Eigen::Vector3d mean_vertex(std::size_t i) const { return mean.segment<3>(static_cast<Eigen::Index>(3 * i)); }
};

inline PointCloud to_cloud(const Eigen::VectorXd& stacked) {
  PointCloud out;
  out.points.reserve(static_cast<std::size_t>(stacked.size() / 3));
  for (Eigen::Index i = 0; i + 2 < stacked.size(); i += 3) out.points.push_back(stacked.segment<3>(i));
  return out;
}

inline Eigen::VectorXd synthesize_stacked(const MorphableModel& model, const Eigen::VectorXd& weights) {
  if (weights.size() != model.eigenvalues.size()) {
    throw Error(ErrorCode::DimensionMismatch, "weight count " + std::to_string(weights.size()) +
                                                  " does not match component count " +
                                                  std::to_string(model.eigenvalues.size()));
  }
  return model.mean + model.components * weights.cwiseProduct(model.eigenvalues);
}

/// Model instance for the given weights; vertex order follows the mean shape.
inline PointCloud synthesize(const MorphableModel& model, const Eigen::VectorXd& weights) {
  return to_cloud(synthesize_stacked(model, weights));
}

struct FitConfig {
  double lambda = 1e-6;
  Pose initial_transform;  ///< T0, model frame -> scan frame
  int max_iterations = 200;
  double tolerance = 1e-12;  ///< relative loss change that ends the fit

  void validate() const {
    if (!(lambda >= 0.0)) throw Error(ErrorCode::InvalidArgument, "lambda must be non-negative");
    if (max_iterations < 1) throw Error(ErrorCode::InvalidArgument, "max_iterations must be >= 1");
  }
};

struct PersonalizedHeadModel {
  std::shared_ptr<const MorphableModel> base;
  Eigen::VectorXd weights;
  Pose fitted_transform;  ///< model frame -> scan frame

  PointCloud instantiate() const { return synthesize(*base, weights); }
};

struct PhmFitResult {
  PersonalizedHeadModel phm;
  double loss = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> loss_history;  ///< initial loss, then one entry per outer iteration
};

namespace detail {

inline Eigen::Matrix3d log_exp_interp(const Eigen::Matrix3d& from, const Eigen::Matrix3d& to, double alpha) {
  const Eigen::AngleAxisd rel(Eigen::Matrix3d(from.transpose() * to));
  return from * Eigen::AngleAxisd(alpha * rel.angle(), rel.axis()).toRotationMatrix();
}

/// Loss terms and bidirectional nearest-neighbour pairs for one (w, T).
class PhmObjective {
 public:
  PhmObjective(const MorphableModel& model, const PointCloud& scan, double lambda, const Pose& t0)
      : model_(model), scan_(scan), scan_tree_(scan.points), lambda_(lambda), t0_(t0.matrix()) {}

  struct State {
    Eigen::VectorXd weights;
    Pose pose;
    Eigen::VectorXd instance;  // stacked, model frame
    double chamfer = 0.0;
    double loss = 0.0;
    // pairs (vertex index, scan index, weight)
    std::vector<std::size_t> vert;
    std::vector<std::size_t> scan;
    std::vector<double> weight;
  };

  State evaluate(const Eigen::VectorXd& w, const Pose& pose) const {
    State s;
    s.weights = w;
    s.pose = pose;
    s.instance = synthesize_stacked(model_, w);
    const std::size_t n = model_.vertex_count();
    std::vector<Eigen::Vector3d> verts(n);
    for (std::size_t i = 0; i < n; ++i) verts[i] = s.instance.segment<3>(static_cast<Eigen::Index>(3 * i));
    const KdTree model_tree(verts);
    const Pose inv = invert(pose);
    const double ws = 1.0 / static_cast<double>(scan_.size());
    const double wm = 1.0 / static_cast<double>(n);

    double fwd = 0.0;
    for (std::size_t j = 0; j < scan_.size(); ++j) {
      const Neighbor nn = model_tree.nearest(inv.apply(scan_.points[j]));
      fwd += nn.squared_distance;
      s.vert.push_back(nn.index);
      s.scan.push_back(j);
      s.weight.push_back(ws);
    }
    double bwd = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const Neighbor nn = scan_tree_.nearest(pose.apply(verts[i]));
      bwd += nn.squared_distance;
      s.vert.push_back(i);
      s.scan.push_back(nn.index);
      s.weight.push_back(wm);
    }
    s.chamfer = fwd * ws + bwd * wm;
    s.loss = s.chamfer + lambda_ * (w.norm() + (pose.matrix() - t0_).norm());
    return s;
  }

  /// Weighted Procrustes on the current pairs: best pose for fixed w.
  Pose rigid_candidate(const State& s) const {
    Eigen::Matrix3Xd src(3, static_cast<Eigen::Index>(s.vert.size()));
    Eigen::Matrix3Xd dst(3, static_cast<Eigen::Index>(s.vert.size()));
    Eigen::VectorXd wt(static_cast<Eigen::Index>(s.vert.size()));
    for (std::size_t p = 0; p < s.vert.size(); ++p) {
      const auto c = static_cast<Eigen::Index>(p);
      src.col(c) = s.instance.segment<3>(static_cast<Eigen::Index>(3 * s.vert[p]));
      dst.col(c) = scan_.points[s.scan[p]];
      wt(c) = s.weight[p];
    }
    return fit_rigid(src, dst, &wt).pose;
  }

  /// Minimizer over w of the fixed-pair quadratic surrogate plus lambda*||w||.
  Eigen::VectorXd shape_candidate(const State& s) const {
    const auto k = static_cast<Eigen::Index>(model_.component_count());
    const Pose inv = invert(s.pose);
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(k, k);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(k);
    for (std::size_t p = 0; p < s.vert.size(); ++p) {
      const auto row = static_cast<Eigen::Index>(3 * s.vert[p]);
      const Eigen::MatrixXd basis =
          model_.components.middleRows(row, 3) * model_.eigenvalues.asDiagonal();  // 3 x K
      const Eigen::Vector3d target = inv.apply(scan_.points[s.scan[p]]) - model_.mean.segment<3>(row);
      a.noalias() += s.weight[p] * basis.transpose() * basis;
      b.noalias() += s.weight[p] * basis.transpose() * target;
    }
    return group_shrinkage_solve(a, b, lambda_);
  }

  /// argmin_w w'Aw - 2b'w + lambda*||w|| for symmetric PSD A.
  static Eigen::VectorXd group_shrinkage_solve(const Eigen::MatrixXd& a, const Eigen::VectorXd& b,
                                               double lambda) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
    const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);
    const Eigen::VectorXd c = es.eigenvectors().transpose() * b;
    const double floor = 1e-14 * std::max(ev.maxCoeff(), 1e-300);
    auto solve_mu = [&](double mu) {
      Eigen::VectorXd y(c.size());
      for (Eigen::Index i = 0; i < c.size(); ++i) {
        const double d = ev(i) + mu;
        y(i) = d > floor ? c(i) / d : 0.0;
      }
      return Eigen::VectorXd(es.eigenvectors() * y);
    };
    if (lambda == 0.0) return solve_mu(0.0);
    if (2.0 * b.norm() <= lambda) return Eigen::VectorXd::Zero(b.size());
    // ||w(r)|| = r with mu = lambda / (2 r); g(r) - r changes sign once.
    auto h = [&](double r) { return solve_mu(lambda / (2.0 * r)).norm() - r; };
    double lo = 0.0;
    double hi = 1.0;
    while (h(hi) > 0.0 && hi < 1e12) hi *= 2.0;
    for (int i = 0; i < 200 && hi - lo > 1e-15 * hi; ++i) {
      const double mid = 0.5 * (lo + hi);
      (h(mid) > 0.0 ? lo : hi) = mid;
    }
    return solve_mu(lambda / (2.0 * hi));
  }

  const MorphableModel& model() const { return model_; }

 private:
  const MorphableModel& model_;
  const PointCloud& scan_;
  KdTree scan_tree_;
  double lambda_;
  Eigen::Matrix4d t0_;
};

}  // namespace detail

/// Model vertex positions (model frame) of every annotated landmark.
inline LandmarkSet3D annotated_landmarks(const MorphableModel& model, const Eigen::VectorXd& weights) {
  const Eigen::VectorXd inst = synthesize_stacked(model, weights);
  LandmarkSet3D out;
  for (const auto& [id, v] : model.annotations) {
    out.entries.push_back({id, inst.segment<3>(static_cast<Eigen::Index>(3 * v)), true});
  }
  return out;
}

/// Joint rigid + shape fit of the model to a scan by alternating a rigid step
/// and a shape step, each accepted only when the loss
///   chamfer(scan, T S_w) + lambda (||w|| + ||T - T0||_F)
/// does not increase. The starting pose is the better of T0 and a landmark
/// alignment of the model annotations onto `anchors` (when >= 3 are shared).
inline PhmFitResult fit_phm(std::shared_ptr<const MorphableModel> model, const PointCloud& scan,
                            const LandmarkSet3D& anchors, const FitConfig& config = {}) {
  config.validate();
  if (scan.empty()) throw Error(ErrorCode::EmptyCloud, "PHM fit on an empty scan");
  const MorphableModel& m = *model;
  detail::PhmObjective obj(m, scan, config.lambda, config.initial_transform);

  const Eigen::VectorXd w0 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.component_count()));
  auto state = obj.evaluate(w0, config.initial_transform);
  {
    const LandmarkSet3D model_lms = annotated_landmarks(m, w0);
    const Correspondences3D c = common_valid(model_lms, anchors);
    if (c.ids.size() >= 3) {
      try {
        auto alt = obj.evaluate(w0, fit_rigid(c.source, c.target).pose);
        if (alt.loss < state.loss) state = std::move(alt);
      } catch (const Error&) {
        // degenerate anchors: stay at T0
      }
    }
  }

  PhmFitResult res;
  res.loss_history.push_back(state.loss);
  for (int it = 1; it <= config.max_iterations; ++it) {
    res.iterations = it;
    const double before = state.loss;

    // Rigid step with geodesic backtracking toward the Procrustes pose.
    {
      Pose cand;
      bool have = true;
      try {
        cand = obj.rigid_candidate(state);
      } catch (const Error&) {
        have = false;
      }
      for (double alpha = 1.0; have && alpha > 1e-6; alpha *= 0.5) {
        Pose p;
        p.rotation = detail::log_exp_interp(state.pose.rotation, cand.rotation, alpha);
        p.translation = (1.0 - alpha) * state.pose.translation + alpha * cand.translation;
        auto next = obj.evaluate(state.weights, p);
        if (next.loss <= state.loss) {
          state = std::move(next);
          break;
        }
      }
    }
    // Shape step with backtracking toward the shrinkage solution.
    {
      const Eigen::VectorXd cand = obj.shape_candidate(state);
      for (double alpha = 1.0; alpha > 1e-6; alpha *= 0.5) {
        auto next = obj.evaluate((1.0 - alpha) * state.weights + alpha * cand, state.pose);
        if (next.loss <= state.loss) {
          state = std::move(next);
          break;
        }
      }
    }

    res.loss_history.push_back(state.loss);
    const double change = before - state.loss;
    if (state.loss == 0.0 || change <= config.tolerance * std::max(before, 1e-300)) {
      res.converged = true;
      break;
    }
  }

  res.loss = state.loss;
  res.phm.base = std::move(model);
  res.phm.weights = state.weights;
  res.phm.fitted_transform = state.pose;
  return res;
}

/// Rigid transform taking landmarks in one head-model convention onto the same
/// landmarks in another (e.g. centroid-origin template -> nasion-origin PHM).
inline Pose map_model_frames(const LandmarkSet3D& source_frame_landmarks,
                             const LandmarkSet3D& target_frame_landmarks) {
  return rigid_align(source_frame_landmarks, target_frame_landmarks).pose;
}

/// Position (head/model frame) of an annotated landmark on the PHM instance.
inline Eigen::Vector3d locate_annotated_point(const PersonalizedHeadModel& phm, int landmark_id) {
  const MorphableModel& m = *phm.base;
  auto it = m.annotations.find(landmark_id);
  if (it == m.annotations.end()) {
    throw Error(ErrorCode::UnknownLandmark, "landmark " + std::to_string(landmark_id) + " is not annotated");
  }
  if (phm.weights.size() != m.eigenvalues.size()) {
    throw Error(ErrorCode::DimensionMismatch, "PHM weight count does not match its model");
  }
  const auto row = static_cast<Eigen::Index>(3 * it->second);
  return m.mean.segment<3>(row) + m.components.middleRows(row, 3) * phm.weights.cwiseProduct(m.eigenvalues);
}

inline LandmarkSet3D annotated_landmarks(const PersonalizedHeadModel& phm) {
  return annotated_landmarks(*phm.base, phm.weights);
}

}  // namespace headtrack
