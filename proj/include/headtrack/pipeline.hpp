#pragma once

// Glue between the stages: scan bundle -> face template -> PHM -> per-method
// tracker configuration.

#include <memory>
#include <string>
#include <vector>

#include "headtrack/dense_registration.hpp"
#include "headtrack/error.hpp"
#include "headtrack/landmarks.hpp"
#include "headtrack/morphable_model.hpp"
#include "headtrack/recording.hpp"
#include "headtrack/tracking.hpp"

namespace headtrack {

/// Every `stride`-th frame of a scan bundle's depth stream.
inline std::vector<ScanFrame> select_scan_frames(const RecordingBundle& scan, int stride = 5) {
  if (stride < 1) throw Error(ErrorCode::InvalidArgument, "scan frame stride must be >= 1");
  if (!scan.modalities.depth) throw Error(ErrorCode::MissingModality, "template scan needs the depth stream");
  std::vector<ScanFrame> out;
  for (std::size_t k = 0; k < scan.frame_count(); k += static_cast<std::size_t>(stride)) {
    out.push_back({scan.clouds[k], scan.depth_landmarks[k]});
  }
  return out;
}

/// Everything the trackers need about one subject.
struct SubjectModels {
  FaceTemplate face;
  PersonalizedHeadModel phm;
  LandmarkSet3D generic_landmarks;  ///< detector template, its own frame
};

/// Default landmark subset per method.
inline std::string default_subset(MethodTag m) { return m == MethodTag::marle_style ? "marle68" : "union"; }

/// Builds the configuration for `method`. Non-PHM templates are mapped into
/// the PHM head frame through the shared annotated landmarks.
inline MethodConfig configure_method(MethodTag method, const SubjectModels& s, const std::string& subset_name = "") {
  const std::string name = subset_name.empty() ? default_subset(method) : subset_name;
  const LandmarkSet3D head = annotated_landmarks(s.phm);
  switch (method) {
    case MethodTag::mono:
    case MethodTag::stereo:
    case MethodTag::marle_style:
      return make_landmark_config(method, s.generic_landmarks, standard_subset(name), &head);
    case MethodTag::depth:
      return make_depth_config(s.face, &head);
    case MethodTag::mono_phm:
    case MethodTag::stereo_phm:
    case MethodTag::depth_phm:
      return make_phm_config(method, s.phm, standard_subset(name));
  }
  throw Error(ErrorCode::UnknownKind, "unknown method");
}

}  // namespace headtrack
