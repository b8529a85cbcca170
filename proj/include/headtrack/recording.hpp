#pragma once

// In-memory form of a recording bundle: calibrated rig plus per-frame
// landmark streams and depth clouds. The depth sensor shares the left
// camera's frame.

#include <optional>
#include <vector>

#include "headtrack/dense_registration.hpp"
#include "headtrack/error.hpp"
#include "headtrack/geometry.hpp"
#include "headtrack/landmarks.hpp"

namespace headtrack {

struct Modalities {
  bool left = false;
  bool right = false;
  bool depth = false;
};

struct RecordingBundle {
  StereoRig rig;
  Modalities modalities;
  std::vector<double> timestamps;  ///< seconds, strictly increasing
  std::vector<LandmarkSet2D> left;
  std::vector<LandmarkSet2D> right;
  std::vector<LandmarkSet3D> depth_landmarks;  ///< reference frame, mm
  std::vector<PointCloud> clouds;              ///< reference frame, mm
  std::optional<std::vector<Pose>> ground_truth;  ///< ref_T_head per frame

  std::size_t frame_count() const { return timestamps.size(); }

  void validate() const {
    const std::size_t n = frame_count();
    for (std::size_t i = 1; i < n; ++i) {
      if (!(timestamps[i] > timestamps[i - 1])) {
        throw Error(ErrorCode::InvalidArgument, "timestamps must be strictly increasing");
      }
    }
    auto check = [n](bool present, std::size_t size, const char* what) {
      if (present && size != n) {
        throw Error(ErrorCode::DimensionMismatch, std::string(what) + " stream length differs from frame count");
      }
    };
    check(modalities.left, left.size(), "left landmark");
    check(modalities.right, right.size(), "right landmark");
    check(modalities.depth, depth_landmarks.size(), "depth landmark");
    check(modalities.depth, clouds.size(), "cloud");
    if (ground_truth) check(true, ground_truth->size(), "ground truth");
    rig.left.validate();
    if (modalities.right) rig.right.validate();
  }
};

}  // namespace headtrack
