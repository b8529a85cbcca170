#pragma once

// Per-frame head trackers (monocular, stereo and depth, each with a generic
// or personalized template) and the pipeline that runs them over a bundle.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <variant>
#include <vector>

#include "headtrack/dense_registration.hpp"
#include "headtrack/error.hpp"
#include "headtrack/geometry.hpp"
#include "headtrack/kdtree.hpp"
#include "headtrack/landmarks.hpp"
#include "headtrack/morphable_model.hpp"
#include "headtrack/recording.hpp"
#include "headtrack/sparse_pose.hpp"

namespace headtrack {

enum class MethodTag { mono, mono_phm, stereo, stereo_phm, depth, depth_phm, marle_style };

inline constexpr std::array<MethodTag, 7> kAllMethods{MethodTag::mono,  MethodTag::mono_phm,  MethodTag::stereo,
                                                      MethodTag::stereo_phm, MethodTag::depth, MethodTag::depth_phm,
                                                      MethodTag::marle_style};

inline std::string_view to_string(MethodTag m) {
  switch (m) {
    case MethodTag::mono: return "mono";
    case MethodTag::mono_phm: return "mono_phm";
    case MethodTag::stereo: return "stereo";
    case MethodTag::stereo_phm: return "stereo_phm";
    case MethodTag::depth: return "depth";
    case MethodTag::depth_phm: return "depth_phm";
    case MethodTag::marle_style: return "marle_style";
  }
  return "unknown";
}

inline MethodTag method_from_string(std::string_view s) {
  for (MethodTag m : kAllMethods)
    if (to_string(m) == s) return m;
  throw Error(ErrorCode::UnknownKind, "unknown method '" + std::string(s) + "'");
}

inline bool uses_phm(MethodTag m) {
  return m == MethodTag::mono_phm || m == MethodTag::stereo_phm || m == MethodTag::depth_phm;
}
inline bool is_monocular(MethodTag m) {
  return m == MethodTag::mono || m == MethodTag::mono_phm || m == MethodTag::marle_style;
}
inline bool is_stereo(MethodTag m) { return m == MethodTag::stereo || m == MethodTag::stereo_phm; }
inline bool is_depth(MethodTag m) { return m == MethodTag::depth || m == MethodTag::depth_phm; }

struct TrackedFrame {
  int frame_index = 0;
  double timestamp = 0.0;
  std::variant<Pose, ErrorCode> result = ErrorCode::NoValidFrames;

  bool ok() const { return std::holds_alternative<Pose>(result); }
  const Pose& pose() const { return std::get<Pose>(result); }
  ErrorCode failure() const { return std::get<ErrorCode>(result); }
};

struct Trajectory {
  MethodTag method = MethodTag::mono;
  std::vector<TrackedFrame> frames;

  std::size_t failure_count() const {
    return static_cast<std::size_t>(std::count_if(frames.begin(), frames.end(), [](const auto& f) { return !f.ok(); }));
  }
  double failure_rate() const {
    return frames.empty() ? 0.0 : static_cast<double>(failure_count()) / static_cast<double>(frames.size());
  }
  void validate() const {
    for (std::size_t i = 1; i < frames.size(); ++i) {
      if (!(frames[i].timestamp > frames[i - 1].timestamp)) {
        throw Error(ErrorCode::InvalidArgument, "trajectory timestamps must be strictly increasing");
      }
    }
  }
};

struct MethodConfig {
  MethodTag method = MethodTag::stereo;
  LandmarkSubsetConfig subset;
  LandmarkSet3D landmark_template;  ///< template frame
  PointCloud cloud_template;        ///< template frame; depth methods only
  std::shared_ptr<const KdTree> cloud_tree;
  Pose head_T_template;  ///< reported poses are ref_T_template * inverse(head_T_template)
  PnPConfig pnp;
  IcpConfig icp;
  double max_chamfer_mm2 = 25.0;
  double min_valid_fraction = 0.6;  ///< of the subset ids present in the template
  bool warm_start = true;
  bool crop_hull = false;

  void validate() const {
    if (is_depth(method)) {
      if (cloud_template.empty()) throw Error(ErrorCode::EmptyCloud, "depth methods need a cloud template");
    } else {
      subset.validate_against(landmark_template);
    }
    if (!(min_valid_fraction >= 0.0 && min_valid_fraction <= 1.0)) {
      throw Error(ErrorCode::InvalidArgument, "min_valid_fraction must lie in [0, 1]");
    }
    if (!(max_chamfer_mm2 > 0.0)) throw Error(ErrorCode::InvalidArgument, "max_chamfer_mm2 must be positive");
  }
};

/// Landmark-template method (mono, stereo, marle_style). When head-frame
/// landmarks are given, the template is mapped onto them once.
inline MethodConfig make_landmark_config(MethodTag method, const LandmarkSet3D& tmpl, LandmarkSubsetConfig subset,
                                         const LandmarkSet3D* head_frame_landmarks = nullptr) {
  if (is_depth(method) || uses_phm(method)) {
    throw Error(ErrorCode::InvalidArgument, "method '" + std::string(to_string(method)) + "' is not landmark-template based");
  }
  MethodConfig c;
  c.method = method;
  c.subset = std::move(subset);
  c.landmark_template = tmpl;
  if (head_frame_landmarks != nullptr) c.head_T_template = map_model_frames(tmpl, *head_frame_landmarks);
  c.validate();
  return c;
}

/// Depth tracking against a face template built from a scan.
inline MethodConfig make_depth_config(const FaceTemplate& face, const LandmarkSet3D* head_frame_landmarks = nullptr) {
  face.validate();
  MethodConfig c;
  c.method = MethodTag::depth;
  c.subset = LandmarkSubsetConfig::all_of(face.anchor_landmarks);
  c.landmark_template = face.anchor_landmarks;
  c.cloud_template = face.cloud;
  c.cloud_tree = std::make_shared<KdTree>(face.cloud.points);
  if (head_frame_landmarks != nullptr) c.head_T_template = map_model_frames(face.anchor_landmarks, *head_frame_landmarks);
  c.validate();
  return c;
}

/// PHM-template methods: the template lives in the head frame already.
inline MethodConfig make_phm_config(MethodTag method, const PersonalizedHeadModel& phm, LandmarkSubsetConfig subset) {
  if (!uses_phm(method)) throw Error(ErrorCode::InvalidArgument, "method does not use a PHM template");
  MethodConfig c;
  c.method = method;
  c.landmark_template = annotated_landmarks(phm);
  c.subset = std::move(subset);
  if (method == MethodTag::depth_phm) {
    c.cloud_template = phm.instantiate();
    c.cloud_tree = std::make_shared<KdTree>(c.cloud_template.points);
    c.subset = LandmarkSubsetConfig::all_of(c.landmark_template);
  }
  c.validate();
  return c;
}

namespace detail {

inline TrackedFrame make_frame(int idx, double ts, std::variant<Pose, ErrorCode> r) {
  TrackedFrame f;
  f.frame_index = idx;
  f.timestamp = ts;
  f.result = std::move(r);
  return f;
}

inline Pose to_head(const Pose& ref_T_template, const MethodConfig& cfg) {
  return compose(ref_T_template, invert(cfg.head_T_template));
}

/// Throws InsufficientLandmarks when fewer than min_valid_fraction of the
/// configured ids (that exist in the template) pass `is_valid`.
template <typename Pred>
void require_coverage(const MethodConfig& cfg, Pred is_valid) {
  std::size_t total = 0;
  std::size_t valid = 0;
  for (int id : cfg.subset.ids) {
    if (cfg.landmark_template.find_valid(id) == nullptr) continue;
    ++total;
    if (is_valid(id)) ++valid;
  }
  const auto needed = static_cast<std::size_t>(std::ceil(cfg.min_valid_fraction * static_cast<double>(total) - 1e-12));
  if (valid < needed || valid == 0) {
    throw Error(ErrorCode::InsufficientLandmarks, std::to_string(valid) + " of " + std::to_string(total) +
                                                      " configured landmarks are valid");
  }
}

}  // namespace detail

inline TrackedFrame track_mono(int frame_index, double timestamp, const LandmarkSet2D& observed, const CameraModel& cam,
                               const MethodConfig& cfg) {
  try {
    detail::require_coverage(cfg, [&](int id) { return observed.find_valid(id) != nullptr; });
    LandmarkSet2D used;
    for (const auto& lm : observed.entries)
      if (cfg.subset.contains(lm.id)) used.entries.push_back(lm);
    const PnPResult r = solve_pnp(cam, used, cfg.landmark_template, cfg.pnp);
    return detail::make_frame(frame_index, timestamp, detail::to_head(r.pose, cfg));
  } catch (const Error& e) {
    return detail::make_frame(frame_index, timestamp, e.code());
  }
}

inline TrackedFrame track_stereo(int frame_index, double timestamp, const LandmarkSet2D& left,
                                 const LandmarkSet2D& right, const StereoRig& rig, const MethodConfig& cfg) {
  try {
    detail::require_coverage(
        cfg, [&](int id) { return left.find_valid(id) != nullptr && right.find_valid(id) != nullptr; });
    const StereoFrameResult r = stereo_track_frame(rig, left, right, cfg.landmark_template, cfg.subset);
    return detail::make_frame(frame_index, timestamp, detail::to_head(r.pose, cfg));
  } catch (const Error& e) {
    return detail::make_frame(frame_index, timestamp, e.code());
  }
}

/// ICP of the cloud template onto the frame cloud. Candidate starts are the
/// previous pose (ref_T_head, when warm-starting) and a landmark alignment
/// from the frame's 3D landmarks; the lower final Chamfer wins.
inline TrackedFrame track_depth(int frame_index, double timestamp, const PointCloud& frame_cloud,
                                const LandmarkSet3D* frame_landmarks, const std::optional<Pose>& previous,
                                const MethodConfig& cfg, const LandmarkSet2D* left_landmarks = nullptr,
                                const CameraModel* left_camera = nullptr) {
  try {
    if (cfg.cloud_template.empty()) throw Error(ErrorCode::EmptyCloud, "no cloud template");
    PointCloud cloud = frame_cloud;
    if (cfg.crop_hull && left_landmarks != nullptr && left_camera != nullptr) {
      cloud = crop_by_convex_hull(cloud, *left_landmarks, *left_camera);
    }
    if (cloud.empty()) throw Error(ErrorCode::EmptyCloud, "frame cloud is empty");

    std::vector<Pose> starts;
    if (cfg.warm_start && previous) starts.push_back(compose(*previous, cfg.head_T_template));
    if (frame_landmarks != nullptr) {
      try {
        starts.push_back(rigid_align(cfg.landmark_template, *frame_landmarks).pose);
      } catch (const Error&) {
        // too few landmarks for a coarse start
      }
    }
    if (starts.empty()) throw Error(ErrorCode::InsufficientLandmarks, "no initial pose for ICP");

    const KdTree local_tree = cfg.cloud_tree ? KdTree() : KdTree(cfg.cloud_template.points);
    const KdTree& template_tree = cfg.cloud_tree ? *cfg.cloud_tree : local_tree;
    const KdTree frame_tree(cloud.points);
    // refine only the start whose chamfer is lowest before any ICP step
    std::optional<IcpResult> best;
    ErrorCode last_error = ErrorCode::EmptyOverlap;
    std::size_t chosen = 0;
    double chosen_value = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < starts.size(); ++i) {
      const double v = detail::evaluate_icp(cfg.cloud_template, template_tree, cloud, frame_tree, starts[i],
                                            cfg.icp.max_correspondence_mm)
                           .chamfer;
      if (v < chosen_value) {
        chosen_value = v;
        chosen = i;
      }
    }
    try {
      best = icp(cfg.cloud_template, template_tree, cloud, frame_tree, starts[chosen], cfg.icp);
    } catch (const Error& e) {
      last_error = e.code();
    }
    if (!best) throw Error(last_error, "ICP failed from every start");
    if (best->chamfer > cfg.max_chamfer_mm2) {
      throw Error(best->converged ? ErrorCode::ResidualAboveThreshold : ErrorCode::NoConvergence,
                  "final chamfer above threshold");
    }
    return detail::make_frame(frame_index, timestamp, detail::to_head(best->pose, cfg));
  } catch (const Error& e) {
    return detail::make_frame(frame_index, timestamp, e.code());
  }
}

/// Runs the configured tracker over every frame. Monocular and stereo frames
/// are split across `threads`; depth frames run in order because each one
/// starts from the previous successful pose.
inline Trajectory run_pipeline(const RecordingBundle& bundle, const MethodConfig& cfg, unsigned threads = 1) {
  cfg.validate();
  const MethodTag m = cfg.method;
  auto need = [&](bool present, const char* what) {
    if (!present) {
      throw Error(ErrorCode::MissingModality,
                  std::string("method '") + std::string(to_string(m)) + "' needs the " + what + " stream");
    }
  };
  if (is_monocular(m)) need(bundle.modalities.left, "left landmark");
  if (is_stereo(m)) {
    need(bundle.modalities.left, "left landmark");
    need(bundle.modalities.right, "right landmark");
  }
  if (is_depth(m)) need(bundle.modalities.depth, "depth");
  bundle.validate();

  const std::size_t n = bundle.frame_count();
  Trajectory traj;
  traj.method = m;
  traj.frames.resize(n);
  if (is_depth(m)) {
    std::optional<Pose> previous;
    for (std::size_t k = 0; k < n; ++k) {
      const LandmarkSet2D* l2 = bundle.modalities.left ? &bundle.left[k] : nullptr;
      traj.frames[k] = track_depth(static_cast<int>(k), bundle.timestamps[k], bundle.clouds[k],
                                   &bundle.depth_landmarks[k], previous, cfg, l2, &bundle.rig.left);
      if (traj.frames[k].ok()) previous = traj.frames[k].pose();
    }
    return traj;
  }

  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t k = begin; k < end; ++k) {
      const int idx = static_cast<int>(k);
      traj.frames[k] = is_stereo(m)
                           ? track_stereo(idx, bundle.timestamps[k], bundle.left[k], bundle.right[k], bundle.rig, cfg)
                           : track_mono(idx, bundle.timestamps[k], bundle.left[k], bundle.rig.left, cfg);
    }
  };
  const std::size_t t = std::max<std::size_t>(1, std::min<std::size_t>(threads, n));
  if (t == 1) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + t - 1) / t;
    for (std::size_t i = 0; i < t; ++i) {
      const std::size_t b = i * chunk;
      const std::size_t e = std::min(n, b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
    for (auto& th : pool) th.join();
  }
  return traj;
}

}  // namespace headtrack
