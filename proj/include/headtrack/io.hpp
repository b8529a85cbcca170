#pragma once

// On-disk formats: calibration and rig JSON, landmark CSV streams, template
// JSON, ASCII PLY clouds, the binary morphable-model file, PHM JSON,
// recording-bundle directories, trajectory CSV, scene specs and evaluation
// reports.
//
// Floating-point text is always the shortest representation that parses back
// to the same double, so writing is deterministic and lossless.

#include <openssl/evp.h>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <nlohmann/json.hpp>

#include "headtrack/dense_registration.hpp"
#include "headtrack/error.hpp"
#include "headtrack/evaluation.hpp"
#include "headtrack/geometry.hpp"
#include "headtrack/landmarks.hpp"
#include "headtrack/morphable_model.hpp"
#include "headtrack/recording.hpp"
#include "headtrack/synth_oracle.hpp"
#include "headtrack/tracking.hpp"

namespace headtrack::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || s.empty()) {
    throw Error(ErrorCode::ParseError, "not a number: '" + std::string(s) + "'");
  }
  return v;
}

inline long long parse_int(std::string_view s) {
  long long v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || s.empty()) {
    throw Error(ErrorCode::ParseError, "not an integer: '" + std::string(s) + "'");
  }
  return v;
}

inline bool parse_flag(std::string_view s) {
  if (s == "1") return true;
  if (s == "0") return false;
  throw Error(ErrorCode::ParseError, "expected 0 or 1, got '" + std::string(s) + "'");
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text(const fs::path& path, std::string_view content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCode::IoError, "SHA-256 computation failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

inline std::string sha256_file(const fs::path& path) { return sha256_hex(read_text(path)); }

inline json parse_json(std::string_view text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, what + ": " + e.what());
  }
}

inline json read_json(const fs::path& path) { return parse_json(read_text(path), path.string()); }

inline std::string dump_json(const json& j) { return j.dump(2) + "\n"; }

inline void write_json(const fs::path& path, const json& j) { write_text(path, dump_json(j)); }

/// Runs `f`, turning JSON access errors into ParseError.
template <typename F>
auto guarded(const std::string& what, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, what + ": " + e.what());
  }
}

namespace detail {

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t p = line.find(sep, start);
    out.push_back(line.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}

inline std::vector<std::string_view> lines(std::string_view text) {
  std::vector<std::string_view> out;
  for (std::string_view l : split(text, '\n')) {
    if (!l.empty() && l.back() == '\r') l.remove_suffix(1);
    if (!l.empty()) out.push_back(l);
  }
  return out;
}

/// Rows of a CSV with the given exact header; each row has the header's width.
inline std::vector<std::vector<std::string_view>> csv_rows(std::string_view text, std::string_view header,
                                                           const std::string& what) {
  const auto ls = lines(text);
  if (ls.empty() || ls.front() != header) {
    throw Error(ErrorCode::ParseError, what + ": expected header '" + std::string(header) + "'");
  }
  const std::size_t width = split(header, ',').size();
  std::vector<std::vector<std::string_view>> rows;
  for (std::size_t i = 1; i < ls.size(); ++i) {
    auto cells = split(ls[i], ',');
    if (cells.size() != width) {
      throw Error(ErrorCode::ParseError, what + ": line " + std::to_string(i + 1) + " has " +
                                             std::to_string(cells.size()) + " fields, expected " +
                                             std::to_string(width));
    }
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline json vec3_json(const Eigen::Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }

inline Eigen::Vector3d vec3_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorCode::ParseError, "expected a 3-element array");
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

inline void reject_unknown_keys(const json& j, std::initializer_list<std::string_view> known, const std::string& what) {
  if (!j.is_object()) throw Error(ErrorCode::ParseError, what + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw Error(ErrorCode::ParseError, what + ": unknown key '" + key + "'");
    }
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Poses, cameras, rigs
// ---------------------------------------------------------------------------

inline json pose_to_json(const Pose& p) {
  const UnitQuaternion q = to_quaternion(p);
  return {{"quaternion", json::array({q.w, q.x, q.y, q.z})}, {"translation_mm", detail::vec3_json(p.translation)}};
}

inline Pose pose_from_json(const json& j) {
  return guarded("pose", [&] {
    detail::reject_unknown_keys(j, {"quaternion", "translation_mm"}, "pose");
    const json& q = j.at("quaternion");
    if (!q.is_array() || q.size() != 4) throw Error(ErrorCode::ParseError, "quaternion needs 4 elements");
    const UnitQuaternion u{q.at(0).get<double>(), q.at(1).get<double>(), q.at(2).get<double>(), q.at(3).get<double>()};
    const double n = std::sqrt(u.w * u.w + u.x * u.x + u.y * u.y + u.z * u.z);
    if (!(std::abs(n - 1.0) < 1e-6)) throw Error(ErrorCode::InvalidArgument, "quaternion is not unit length");
    return from_quaternion(u, detail::vec3_from(j.at("translation_mm")));
  });
}

inline json camera_to_json(const CameraModel& c) {
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"extrinsic", pose_to_json(c.extrinsic)}};
}

inline CameraModel camera_from_json(const json& j) {
  return guarded("camera", [&] {
    detail::reject_unknown_keys(j, {"fx", "fy", "cx", "cy", "extrinsic"}, "camera");
    CameraModel c;
    c.fx = j.at("fx").get<double>();
    c.fy = j.at("fy").get<double>();
    c.cx = j.at("cx").get<double>();
    c.cy = j.at("cy").get<double>();
    c.extrinsic = pose_from_json(j.at("extrinsic"));
    c.validate();
    return c;
  });
}

inline json rig_to_json(const StereoRig& r) { return {{"left", camera_to_json(r.left)}, {"right", camera_to_json(r.right)}}; }

/// Accepts a rig file; a bare camera object is read as a left-only rig.
inline StereoRig rig_from_json(const json& j) {
  return guarded("rig", [&] {
    StereoRig r;
    if (j.is_object() && j.contains("fx")) {
      r.left = camera_from_json(j);
      return r;
    }
    detail::reject_unknown_keys(j, {"left", "right"}, "rig");
    r.left = camera_from_json(j.at("left"));
    if (j.contains("right")) r.right = camera_from_json(j.at("right"));
    return r;
  });
}

inline StereoRig read_rig(const fs::path& path) { return rig_from_json(read_json(path)); }

/// Element-wise mean of intrinsics and of the extrinsic rotation matrices and
/// translations. Means are accumulated as offsets from the first input, so
/// identical inputs average to themselves exactly; a mean rotation that is
/// no longer orthonormal is projected back onto SO(3).
inline CameraModel average_cameras(const std::vector<CameraModel>& cams) {
  if (cams.empty()) throw Error(ErrorCode::InvalidArgument, "nothing to average");
  const CameraModel& c0 = cams.front();
  Eigen::Vector4d k = Eigen::Vector4d::Zero();
  Eigen::Matrix3d r = Eigen::Matrix3d::Zero();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();
  for (const auto& c : cams) {
    k += Eigen::Vector4d(c.fx - c0.fx, c.fy - c0.fy, c.cx - c0.cx, c.cy - c0.cy);
    r += c.extrinsic.rotation - c0.extrinsic.rotation;
    t += c.extrinsic.translation - c0.extrinsic.translation;
  }
  const double n = static_cast<double>(cams.size());
  CameraModel out;
  out.fx = c0.fx + k(0) / n;
  out.fy = c0.fy + k(1) / n;
  out.cx = c0.cx + k(2) / n;
  out.cy = c0.cy + k(3) / n;
  out.extrinsic.rotation = c0.extrinsic.rotation + r / n;
  out.extrinsic.translation = c0.extrinsic.translation + t / n;
  const Eigen::Matrix3d& m = out.extrinsic.rotation;
  if ((m.transpose() * m - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-12) {
    out.extrinsic.rotation = project_to_rotation(m);
  }
  out.validate();
  return out;
}

inline StereoRig average_rigs(const std::vector<StereoRig>& rigs) {
  std::vector<CameraModel> l, r;
  for (const auto& x : rigs) {
    l.push_back(x.left);
    r.push_back(x.right);
  }
  return {average_cameras(l), average_cameras(r)};
}

// ---------------------------------------------------------------------------
// Landmark streams and templates
// ---------------------------------------------------------------------------

inline constexpr std::string_view kLandmarkCsvHeader = "frame_index,timestamp_s,landmark_id,u_px,v_px,valid";
inline constexpr std::string_view kDepthLandmarkCsvHeader = "frame_index,timestamp_s,landmark_id,x_mm,y_mm,z_mm,valid";

inline std::string landmark_csv(const std::vector<double>& timestamps, const std::vector<LandmarkSet2D>& frames) {
  if (timestamps.size() != frames.size()) throw Error(ErrorCode::DimensionMismatch, "one timestamp per frame");
  std::string s(kLandmarkCsvHeader);
  s += '\n';
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const std::string prefix = std::to_string(k) + ',' + format_double(timestamps[k]) + ',';
    for (const auto& l : frames[k].entries) {
      s += prefix + std::to_string(l.id) + ',' + format_double(l.u) + ',' + format_double(l.v) + ',' +
           (l.valid ? '1' : '0') + '\n';
    }
  }
  return s;
}

inline std::string depth_landmark_csv(const std::vector<double>& timestamps, const std::vector<LandmarkSet3D>& frames) {
  if (timestamps.size() != frames.size()) throw Error(ErrorCode::DimensionMismatch, "one timestamp per frame");
  std::string s(kDepthLandmarkCsvHeader);
  s += '\n';
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const std::string prefix = std::to_string(k) + ',' + format_double(timestamps[k]) + ',';
    for (const auto& l : frames[k].entries) {
      s += prefix + std::to_string(l.id) + ',' + format_double(l.position.x()) + ',' +
           format_double(l.position.y()) + ',' + format_double(l.position.z()) + ',' + (l.valid ? '1' : '0') + '\n';
    }
  }
  return s;
}

namespace detail {

template <typename Set, typename MakeEntry>
std::vector<Set> parse_stream(std::string_view text, std::string_view header, std::size_t frame_count,
                              const std::vector<double>* timestamps, const std::string& what, MakeEntry make) {
  std::vector<Set> out(frame_count);
  for (const auto& row : csv_rows(text, header, what)) {
    const long long k = parse_int(row[0]);
    if (k < 0 || static_cast<std::size_t>(k) >= frame_count) {
      throw Error(ErrorCode::ParseError, what + ": frame index " + std::to_string(k) + " out of range");
    }
    const double ts = parse_double(row[1]);
    if (timestamps != nullptr && ts != (*timestamps)[static_cast<std::size_t>(k)]) {
      throw Error(ErrorCode::ParseError, what + ": timestamp of frame " + std::to_string(k) + " disagrees with the manifest");
    }
    auto& set = out[static_cast<std::size_t>(k)];
    const auto e = make(row);
    if (set.find(e.id) != nullptr) {
      throw Error(ErrorCode::ParseError, what + ": duplicate landmark " + std::to_string(e.id) + " in frame " + std::to_string(k));
    }
    set.insert(e);
  }
  return out;
}

}  // namespace detail

inline std::vector<LandmarkSet2D> parse_landmark_csv(std::string_view text, std::size_t frame_count,
                                                     const std::vector<double>* timestamps = nullptr,
                                                     const std::string& what = "landmark CSV") {
  return detail::parse_stream<LandmarkSet2D>(text, kLandmarkCsvHeader, frame_count, timestamps, what, [](const auto& r) {
    return Landmark2D{static_cast<int>(parse_int(r[2])), parse_double(r[3]), parse_double(r[4]), parse_flag(r[5])};
  });
}

inline std::vector<LandmarkSet3D> parse_depth_landmark_csv(std::string_view text, std::size_t frame_count,
                                                           const std::vector<double>* timestamps = nullptr,
                                                           const std::string& what = "depth landmark CSV") {
  return detail::parse_stream<LandmarkSet3D>(
      text, kDepthLandmarkCsvHeader, frame_count, timestamps, what, [](const auto& r) {
        return Landmark3D{static_cast<int>(parse_int(r[2])),
                          Eigen::Vector3d(parse_double(r[3]), parse_double(r[4]), parse_double(r[5])),
                          parse_flag(r[6])};
      });
}

struct LandmarkTemplate {
  LandmarkSet3D landmarks;
  std::map<std::string, std::set<int>> subsets;

  /// A subset defined in the file, else the standard one of that name.
  LandmarkSubsetConfig subset(const std::string& name) const {
    auto it = subsets.find(name);
    if (it != subsets.end()) return {name, it->second};
    return standard_subset(name);
  }
};

inline json template_to_json(const LandmarkTemplate& t) {
  json lms = json::array();
  for (const auto& e : t.landmarks.entries) {
    lms.push_back({{"id", e.id}, {"x_mm", e.position.x()}, {"y_mm", e.position.y()}, {"z_mm", e.position.z()}});
  }
  json subsets = json::object();
  for (const auto& [name, ids] : t.subsets) subsets[name] = ids;
  return {{"landmarks", lms}, {"subsets", subsets}};
}

inline LandmarkTemplate template_from_json(const json& j) {
  return guarded("landmark template", [&] {
    detail::reject_unknown_keys(j, {"landmarks", "subsets"}, "landmark template");
    LandmarkTemplate t;
    for (const auto& e : j.at("landmarks")) {
      const int id = e.at("id").get<int>();
      if (t.landmarks.find(id) != nullptr) throw Error(ErrorCode::ParseError, "duplicate template landmark " + std::to_string(id));
      t.landmarks.insert({id, {e.at("x_mm").get<double>(), e.at("y_mm").get<double>(), e.at("z_mm").get<double>()}, true});
    }
    if (j.contains("subsets")) {
      for (const auto& [name, ids] : j.at("subsets").items()) t.subsets[name] = ids.get<std::set<int>>();
    }
    for (const auto& [name, ids] : t.subsets) {
      LandmarkSubsetConfig{name, ids}.validate_against(t.landmarks);
    }
    return t;
  });
}

/// Template with every standard subset the landmark ids support.
inline LandmarkTemplate with_standard_subsets(const LandmarkSet3D& landmarks) {
  LandmarkTemplate t{landmarks, {}};
  for (const char* name : {"eyes_nose", "eyes_nose_eyebrows", "eyes_nose_mouth", "union", "marle68"}) {
    const LandmarkSubsetConfig s = standard_subset(name);
    bool ok = true;
    for (int id : s.ids) ok = ok && landmarks.find(id) != nullptr;
    if (ok) t.subsets[name] = s.ids;
  }
  return t;
}

// ---------------------------------------------------------------------------
// PLY point clouds and face templates
// ---------------------------------------------------------------------------

/// ASCII PLY with double-precision vertex properties (x y z, plus nx ny nz
/// when the cloud has normals).
inline std::string ply_text(const PointCloud& cloud) {
  cloud.validate();
  std::string s = "ply\nformat ascii 1.0\nelement vertex " + std::to_string(cloud.size()) + "\n";
  s += "property double x\nproperty double y\nproperty double z\n";
  if (cloud.has_normals()) s += "property double nx\nproperty double ny\nproperty double nz\n";
  s += "end_header\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    s += format_double(p.x()) + ' ' + format_double(p.y()) + ' ' + format_double(p.z());
    if (cloud.has_normals()) {
      const auto& n = cloud.normals[i];
      s += ' ' + format_double(n.x()) + ' ' + format_double(n.y()) + ' ' + format_double(n.z());
    }
    s += '\n';
  }
  return s;
}

/// Reads the vertex element of an ASCII PLY. Other elements are skipped;
/// normals are kept only when all three components are present.
inline PointCloud parse_ply(std::string_view text, const std::string& what = "PLY") {
  const auto ls = detail::lines(text);
  if (ls.empty() || ls[0] != "ply") throw Error(ErrorCode::ParseError, what + ": missing 'ply' magic");
  struct Element {
    std::string name;
    std::size_t count = 0;
    std::vector<std::string> props;
  };
  std::vector<Element> elements;
  std::size_t i = 1;
  bool ascii = false;
  for (; i < ls.size() && ls[i] != "end_header"; ++i) {
    std::istringstream in{std::string(ls[i])};
    std::string kw;
    in >> kw;
    if (kw == "format") {
      std::string fmt;
      in >> fmt;
      if (fmt != "ascii") throw Error(ErrorCode::ParseError, what + ": only ASCII PLY is supported");
      ascii = true;
    } else if (kw == "element") {
      Element e;
      long long n = -1;
      in >> e.name >> n;
      if (!in || n < 0) throw Error(ErrorCode::ParseError, what + ": bad element line");
      e.count = static_cast<std::size_t>(n);
      elements.push_back(std::move(e));
    } else if (kw == "property") {
      if (elements.empty()) throw Error(ErrorCode::ParseError, what + ": property before element");
      std::string type, name;
      in >> type;
      if (type == "list") {
        std::string a, b;
        in >> a >> b;
      }
      in >> name;
      if (!in) throw Error(ErrorCode::ParseError, what + ": bad property line");
      elements.back().props.push_back(name);
    } else if (kw != "comment" && kw != "obj_info") {
      throw Error(ErrorCode::ParseError, what + ": unexpected header line '" + std::string(ls[i]) + "'");
    }
  }
  if (i == ls.size()) throw Error(ErrorCode::ParseError, what + ": missing end_header");
  if (!ascii) throw Error(ErrorCode::ParseError, what + ": missing format line");
  ++i;

  PointCloud cloud;
  bool found = false;
  for (const auto& e : elements) {
    if (e.name != "vertex") {
      i += e.count;
      continue;
    }
    found = true;
    auto col = [&](const char* n) -> int {
      auto it = std::find(e.props.begin(), e.props.end(), n);
      return it == e.props.end() ? -1 : static_cast<int>(it - e.props.begin());
    };
    const int cx = col("x"), cy = col("y"), cz = col("z");
    const int nx = col("nx"), ny = col("ny"), nz = col("nz");
    if (cx < 0 || cy < 0 || cz < 0) throw Error(ErrorCode::ParseError, what + ": vertex needs x, y, z");
    const bool normals = nx >= 0 && ny >= 0 && nz >= 0;
    for (std::size_t v = 0; v < e.count; ++v, ++i) {
      if (i >= ls.size()) throw Error(ErrorCode::ParseError, what + ": fewer vertices than declared");
      std::vector<std::string_view> f;
      for (auto tok : detail::split(ls[i], ' '))
        if (!tok.empty()) f.push_back(tok);
      if (f.size() != e.props.size()) {
        throw Error(ErrorCode::ParseError, what + ": vertex " + std::to_string(v) + " has the wrong field count");
      }
      auto at = [&](int c) { return parse_double(f[static_cast<std::size_t>(c)]); };
      cloud.points.emplace_back(at(cx), at(cy), at(cz));
      if (normals) cloud.normals.emplace_back(at(nx), at(ny), at(nz));
    }
  }
  if (!found) throw Error(ErrorCode::ParseError, what + ": no vertex element");
  return cloud;
}

inline PointCloud read_ply(const fs::path& path) { return parse_ply(read_text(path), path.string()); }

inline constexpr const char* kTemplateCloudFile = "template.ply";
inline constexpr const char* kTemplateAnchorFile = "template_landmarks.json";

/// Writes `dir`/template.ply and the anchor landmark sidecar.
inline void write_face_template(const fs::path& dir, const FaceTemplate& face) {
  write_text(dir / kTemplateCloudFile, ply_text(face.cloud));
  write_json(dir / kTemplateAnchorFile, template_to_json(with_standard_subsets(face.anchor_landmarks)));
}

inline FaceTemplate read_face_template(const fs::path& dir) {
  FaceTemplate face;
  face.cloud = read_ply(dir / kTemplateCloudFile);
  face.anchor_landmarks = template_from_json(read_json(dir / kTemplateAnchorFile)).landmarks;
  face.validate();
  return face;
}

// ---------------------------------------------------------------------------
// Morphable model file
// ---------------------------------------------------------------------------
//
//   offset 0   4 bytes   ASCII "HTMM"
//   offset 4   uint32    header length H, little-endian
//   offset 8   H bytes   UTF-8 JSON: {"format_version":1, "n":..., "K":...,
//                        "eigenvalues":[K numbers],
//                        "annotations":[{"id":..., "vertex":...}, ...]}
//   then       3n float32 little-endian: mean shape, x y z per vertex
//   then       K blocks of 3n float32: component k, same vertex order
//
// The file size must be exactly 8 + H + 4 * 3n * (K + 1).

inline constexpr std::string_view kModelMagic = "HTMM";

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

inline std::uint32_t get_u32(std::string_view in, std::size_t at) {
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + b])) << (8 * b);
  return v;
}

inline void put_f32(std::string& out, double v) {
  const auto f = static_cast<float>(v);
  std::uint32_t bits = 0;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

inline double get_f32(std::string_view in, std::size_t at) {
  const std::uint32_t bits = get_u32(in, at);
  float f = 0.0f;
  std::memcpy(&f, &bits, 4);
  return static_cast<double>(f);
}

}  // namespace detail

inline std::string model_bytes(const MorphableModel& m) {
  json ann = json::array();
  for (const auto& [id, v] : m.annotations) ann.push_back({{"id", id}, {"vertex", v}});
  json eig = json::array();
  for (Eigen::Index k = 0; k < m.eigenvalues.size(); ++k) eig.push_back(m.eigenvalues(k));
  const std::string header = json{{"format_version", 1},
                                  {"n", m.vertex_count()},
                                  {"K", m.component_count()},
                                  {"eigenvalues", eig},
                                  {"annotations", ann}}
                                 .dump();
  std::string out(kModelMagic);
  detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  for (Eigen::Index i = 0; i < m.mean.size(); ++i) detail::put_f32(out, m.mean(i));
  for (Eigen::Index k = 0; k < m.components.cols(); ++k)
    for (Eigen::Index i = 0; i < m.components.rows(); ++i) detail::put_f32(out, m.components(i, k));
  return out;
}

inline MorphableModel parse_model(std::string_view bytes, const std::string& what = "model file") {
  if (bytes.size() < 8 || bytes.substr(0, 4) != kModelMagic) {
    throw Error(ErrorCode::ParseError, what + ": missing HTMM magic");
  }
  const std::size_t hlen = detail::get_u32(bytes, 4);
  if (bytes.size() < 8 + hlen) throw Error(ErrorCode::ParseError, what + ": truncated header");
  const json h = parse_json(bytes.substr(8, hlen), what + " header");
  return guarded(what, [&] {
    if (h.at("format_version").get<int>() != 1) throw Error(ErrorCode::ParseError, what + ": unsupported format version");
    const auto n = h.at("n").get<std::size_t>();
    const auto k = h.at("K").get<std::size_t>();
    const std::size_t expected = 8 + hlen + 4 * 3 * n * (k + 1);
    if (bytes.size() != expected) {
      throw Error(ErrorCode::ParseError, what + ": size " + std::to_string(bytes.size()) + " does not match header (" +
                                             std::to_string(expected) + ")");
    }
    MorphableModel m;
    const auto eig = h.at("eigenvalues").get<std::vector<double>>();
    if (eig.size() != k) throw Error(ErrorCode::ParseError, what + ": eigenvalue count differs from K");
    m.eigenvalues = Eigen::Map<const Eigen::VectorXd>(eig.data(), static_cast<Eigen::Index>(k));
    for (const auto& a : h.at("annotations")) m.annotations[a.at("id").get<int>()] = a.at("vertex").get<std::size_t>();
    const auto rows = static_cast<Eigen::Index>(3 * n);
    std::size_t at = 8 + hlen;
    m.mean.resize(rows);
    for (Eigen::Index i = 0; i < rows; ++i, at += 4) m.mean(i) = detail::get_f32(bytes, at);
    m.components.resize(rows, static_cast<Eigen::Index>(k));
    for (Eigen::Index c = 0; c < m.components.cols(); ++c)
      for (Eigen::Index i = 0; i < rows; ++i, at += 4) m.components(i, c) = detail::get_f32(bytes, at);
    m.validate(1e-5);
    return m;
  });
}

inline MorphableModel read_model(const fs::path& path) { return parse_model(read_text(path), path.string()); }

// ---------------------------------------------------------------------------
// PHM
// ---------------------------------------------------------------------------

struct PhmRecord {
  std::string model_sha256;
  std::string model_file;
  Eigen::VectorXd weights;
  Pose transform;  ///< model frame -> scan frame
  double lambda = 0.0;
  double loss = 0.0;
  int iterations = 0;
  bool converged = false;
};

inline json phm_to_json(const PhmRecord& r) {
  return {{"model_sha256", r.model_sha256},
          {"model_file", r.model_file},
          {"weights", std::vector<double>(r.weights.data(), r.weights.data() + r.weights.size())},
          {"transform", pose_to_json(r.transform)},
          {"lambda", r.lambda},
          {"loss", r.loss},
          {"iterations", r.iterations},
          {"converged", r.converged}};
}

inline PhmRecord phm_from_json(const json& j) {
  return guarded("PHM", [&] {
    detail::reject_unknown_keys(j, {"model_sha256", "model_file", "weights", "transform", "lambda", "loss", "iterations", "converged"},
                                "PHM");
    PhmRecord r;
    r.model_sha256 = j.at("model_sha256").get<std::string>();
    detail::read_opt(j, "model_file", r.model_file);
    const auto w = j.at("weights").get<std::vector<double>>();
    r.weights = Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
    r.transform = pose_from_json(j.at("transform"));
    detail::read_opt(j, "lambda", r.lambda);
    detail::read_opt(j, "loss", r.loss);
    detail::read_opt(j, "iterations", r.iterations);
    detail::read_opt(j, "converged", r.converged);
    return r;
  });
}

/// Loads a PHM whose model lives at `model_path`; the model bytes must hash
/// to the recorded digest.
inline PersonalizedHeadModel read_phm(const fs::path& phm_path, const fs::path& model_path) {
  const PhmRecord r = phm_from_json(read_json(phm_path));
  const std::string bytes = read_text(model_path);
  if (sha256_hex(bytes) != r.model_sha256) {
    throw Error(ErrorCode::InvalidArgument, "model " + model_path.string() + " does not match the hash recorded in " +
                                                phm_path.string());
  }
  PersonalizedHeadModel phm;
  phm.base = std::make_shared<MorphableModel>(parse_model(bytes, model_path.string()));
  if (static_cast<std::size_t>(r.weights.size()) != phm.base->component_count()) {
    throw Error(ErrorCode::DimensionMismatch, "PHM weight count differs from the model's component count");
  }
  phm.weights = r.weights;
  phm.fitted_transform = r.transform;
  return phm;
}

// ---------------------------------------------------------------------------
// Trajectory CSV
// ---------------------------------------------------------------------------

inline constexpr std::string_view kTrajectoryCsvHeader =
    "frame_index,timestamp_s,ok,failure_reason,qw,qx,qy,qz,tx_mm,ty_mm,tz_mm";

inline std::string trajectory_csv(const Trajectory& t) {
  std::string s(kTrajectoryCsvHeader);
  s += '\n';
  for (const auto& f : t.frames) {
    s += std::to_string(f.frame_index) + ',' + format_double(f.timestamp) + ',';
    if (f.ok()) {
      const UnitQuaternion q = to_quaternion(f.pose());
      const Eigen::Vector3d& p = f.pose().translation;
      s += "1,," + format_double(q.w) + ',' + format_double(q.x) + ',' + format_double(q.y) + ',' +
           format_double(q.z) + ',' + format_double(p.x()) + ',' + format_double(p.y()) + ',' + format_double(p.z());
    } else {
      s += "0," + std::string(to_string(f.failure())) + ",,,,,,,";
    }
    s += '\n';
  }
  return s;
}

inline Trajectory parse_trajectory_csv(std::string_view text, const std::string& what = "trajectory CSV") {
  Trajectory t;
  for (const auto& r : detail::csv_rows(text, kTrajectoryCsvHeader, what)) {
    TrackedFrame f;
    f.frame_index = static_cast<int>(parse_int(r[0]));
    f.timestamp = parse_double(r[1]);
    if (parse_flag(r[2])) {
      const UnitQuaternion q{parse_double(r[4]), parse_double(r[5]), parse_double(r[6]), parse_double(r[7])};
      f.result = from_quaternion(q, Eigen::Vector3d(parse_double(r[8]), parse_double(r[9]), parse_double(r[10])));
    } else {
      try {
        f.result = error_code_from_string(r[3]);
      } catch (const std::invalid_argument& e) {
        throw Error(ErrorCode::ParseError, what + ": " + e.what());
      }
    }
    if (!t.frames.empty() && f.frame_index <= t.frames.back().frame_index) {
      throw Error(ErrorCode::ParseError, what + ": frame indices must be strictly increasing");
    }
    t.frames.push_back(f);
  }
  t.validate();
  return t;
}

inline Trajectory read_trajectory(const fs::path& path) { return parse_trajectory_csv(read_text(path), path.string()); }

inline Trajectory trajectory_from_poses(const std::vector<double>& timestamps, const std::vector<Pose>& poses) {
  if (timestamps.size() != poses.size()) throw Error(ErrorCode::DimensionMismatch, "one timestamp per pose");
  Trajectory t;
  for (std::size_t k = 0; k < poses.size(); ++k) t.frames.push_back({static_cast<int>(k), timestamps[k], poses[k]});
  return t;
}

// ---------------------------------------------------------------------------
// Recording bundle directory
// ---------------------------------------------------------------------------
//
//   manifest.json          frame_count, timestamps, modalities, file names
//   calibration.json       rig file
//   left_landmarks.csv     landmark CSV (when the left stream is present)
//   right_landmarks.csv
//   depth_landmarks.csv    3D landmark CSV in the reference frame
//   clouds/NNNNNN.ply      one cloud per frame
//   ground_truth.csv       trajectory CSV, optional

inline std::string cloud_file_name(std::size_t k) {
  std::string n = std::to_string(k);
  return "clouds/" + std::string(n.size() < 6 ? 6 - n.size() : 0, '0') + n + ".ply";
}

inline void write_bundle(const fs::path& dir, const RecordingBundle& b) {
  b.validate();
  json files = {{"calibration", "calibration.json"}};
  if (b.modalities.left) files["left"] = "left_landmarks.csv";
  if (b.modalities.right) files["right"] = "right_landmarks.csv";
  if (b.modalities.depth) {
    files["depth_landmarks"] = "depth_landmarks.csv";
    json clouds = json::array();
    for (std::size_t k = 0; k < b.frame_count(); ++k) clouds.push_back(cloud_file_name(k));
    files["clouds"] = clouds;
  }
  if (b.ground_truth) files["ground_truth"] = "ground_truth.csv";
  const json manifest = {{"format", "headtrack-bundle"},
                         {"format_version", 1},
                         {"frame_count", b.frame_count()},
                         {"timestamps", b.timestamps},
                         {"modalities", {{"left", b.modalities.left}, {"right", b.modalities.right}, {"depth", b.modalities.depth}}},
                         {"files", files}};
  write_json(dir / "manifest.json", manifest);
  write_json(dir / "calibration.json", rig_to_json(b.rig));
  if (b.modalities.left) write_text(dir / "left_landmarks.csv", landmark_csv(b.timestamps, b.left));
  if (b.modalities.right) write_text(dir / "right_landmarks.csv", landmark_csv(b.timestamps, b.right));
  if (b.modalities.depth) {
    write_text(dir / "depth_landmarks.csv", depth_landmark_csv(b.timestamps, b.depth_landmarks));
    for (std::size_t k = 0; k < b.frame_count(); ++k) write_text(dir / cloud_file_name(k), ply_text(b.clouds[k]));
  }
  if (b.ground_truth) write_text(dir / "ground_truth.csv", trajectory_csv(trajectory_from_poses(b.timestamps, *b.ground_truth)));
}

inline RecordingBundle read_bundle(const fs::path& dir) {
  const json m = read_json(dir / "manifest.json");
  RecordingBundle b;
  guarded("bundle manifest", [&] {
    if (m.at("format").get<std::string>() != "headtrack-bundle") {
      throw Error(ErrorCode::ParseError, "not a recording bundle manifest");
    }
    b.timestamps = m.at("timestamps").get<std::vector<double>>();
    if (m.at("frame_count").get<std::size_t>() != b.timestamps.size()) {
      throw Error(ErrorCode::ParseError, "manifest frame_count differs from the timestamp count");
    }
    const json& mod = m.at("modalities");
    b.modalities = {mod.at("left").get<bool>(), mod.at("right").get<bool>(), mod.at("depth").get<bool>()};
    const json& files = m.at("files");
    b.rig = read_rig(dir / files.at("calibration").get<std::string>());
    const std::size_t n = b.timestamps.size();
    auto stream = [&](const char* key) { return dir / files.at(key).get<std::string>(); };
    if (b.modalities.left) {
      b.left = parse_landmark_csv(read_text(stream("left")), n, &b.timestamps, stream("left").string());
    }
    if (b.modalities.right) {
      b.right = parse_landmark_csv(read_text(stream("right")), n, &b.timestamps, stream("right").string());
    }
    if (b.modalities.depth) {
      b.depth_landmarks =
          parse_depth_landmark_csv(read_text(stream("depth_landmarks")), n, &b.timestamps, stream("depth_landmarks").string());
      const auto clouds = files.at("clouds").get<std::vector<std::string>>();
      if (clouds.size() != n) throw Error(ErrorCode::ParseError, "manifest lists the wrong number of clouds");
      for (const auto& c : clouds) b.clouds.push_back(read_ply(dir / c));
    }
    if (files.contains("ground_truth")) {
      const Trajectory gt = read_trajectory(stream("ground_truth"));
      if (gt.frames.size() != n) throw Error(ErrorCode::ParseError, "ground truth length differs from frame count");
      std::vector<Pose> poses;
      for (const auto& f : gt.frames) {
        if (!f.ok()) throw Error(ErrorCode::ParseError, "ground truth has a failed frame");
        poses.push_back(f.pose());
      }
      b.ground_truth = std::move(poses);
    }
  });
  b.validate();
  return b;
}

// ---------------------------------------------------------------------------
// Scene spec
// ---------------------------------------------------------------------------

inline json scene_spec_to_json(const synth::SceneSpec& s) {
  auto segments = [](const std::vector<synth::MotionSegment>& v) {
    json a = json::array();
    for (const auto& m : v) a.push_back({{"kind", synth::to_string(m.kind)}, {"seed", m.seed}});
    return a;
  };
  const auto& sh = s.model.shape;
  return {
      {"seed", s.seed},
      {"model",
       {{"components", s.model.components},
        {"sd_mm", s.model.sd_mm},
        {"decay", s.model.decay},
        {"seed", s.model.seed},
        {"shape",
         {{"semi_x", sh.semi_x},
          {"semi_y", sh.semi_y},
          {"semi_z", sh.semi_z},
          {"center_y", sh.center_y},
          {"cap_limit", sh.cap_limit},
          {"point_spacing_mm", sh.point_spacing_mm},
          {"sample_attempts", sh.sample_attempts}}}}},
      {"subject_weight_sigma", s.subject_weight_sigma},
      {"segments", segments(s.segments)},
      {"frames_per_segment", s.frames_per_segment},
      {"amplitude_mm", s.amplitude_mm},
      {"amplitude_deg", s.amplitude_deg},
      {"scan_segments", segments(s.scan_segments)},
      {"scan_frames_per_segment", s.scan_frames_per_segment},
      {"fps", s.fps},
      {"rig", {{"fx", s.rig.fx}, {"fy", s.rig.fy}, {"cx", s.rig.cx}, {"cy", s.rig.cy}, {"baseline_mm", s.rig.baseline_mm}}},
      {"neutral_position", detail::vec3_json(s.neutral_position)},
      {"pivot", detail::vec3_json(s.pivot)},
      {"pixel_sigma", s.pixel_sigma},
      {"depth_sigma", s.depth_sigma},
      {"occlusion",
       {{"frame_fraction", s.occlusion.frame_fraction},
        {"landmark_fraction", s.occlusion.landmark_fraction},
        {"cloud_radius_mm", s.occlusion.cloud_radius_mm},
        {"seed", s.occlusion.seed}}},
  };
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline synth::SceneSpec scene_spec_from_json(const json& j) {
  return guarded("scene spec", [&] {
    using detail::read_opt;
    detail::reject_unknown_keys(j,
                                {"seed", "model", "subject_weight_sigma", "segments", "frames_per_segment", "amplitude_mm",
                                 "amplitude_deg", "scan_segments", "scan_frames_per_segment", "fps", "rig",
                                 "neutral_position", "pivot", "pixel_sigma", "depth_sigma", "occlusion"},
                                "scene spec");
    synth::SceneSpec s;
    auto segments = [](const json& a) {
      std::vector<synth::MotionSegment> v;
      for (const auto& e : a) {
        detail::reject_unknown_keys(e, {"kind", "seed"}, "motion segment");
        synth::MotionSegment m;
        m.kind = synth::motion_kind_from_string(e.at("kind").get<std::string>());
        read_opt(e, "seed", m.seed);
        v.push_back(m);
      }
      return v;
    };
    read_opt(j, "seed", s.seed);
    if (j.contains("model")) {
      const json& m = j.at("model");
      detail::reject_unknown_keys(m, {"components", "sd_mm", "decay", "seed", "shape"}, "model spec");
      read_opt(m, "components", s.model.components);
      read_opt(m, "sd_mm", s.model.sd_mm);
      read_opt(m, "decay", s.model.decay);
      read_opt(m, "seed", s.model.seed);
      if (m.contains("shape")) {
        const json& sh = m.at("shape");
        detail::reject_unknown_keys(sh, {"semi_x", "semi_y", "semi_z", "center_y", "cap_limit", "point_spacing_mm", "sample_attempts"},
                                    "shape spec");
        auto& p = s.model.shape;
        read_opt(sh, "semi_x", p.semi_x);
        read_opt(sh, "semi_y", p.semi_y);
        read_opt(sh, "semi_z", p.semi_z);
        read_opt(sh, "center_y", p.center_y);
        read_opt(sh, "cap_limit", p.cap_limit);
        read_opt(sh, "point_spacing_mm", p.point_spacing_mm);
        read_opt(sh, "sample_attempts", p.sample_attempts);
      }
    }
    read_opt(j, "subject_weight_sigma", s.subject_weight_sigma);
    if (j.contains("segments")) s.segments = segments(j.at("segments"));
    read_opt(j, "frames_per_segment", s.frames_per_segment);
    read_opt(j, "amplitude_mm", s.amplitude_mm);
    read_opt(j, "amplitude_deg", s.amplitude_deg);
    if (j.contains("scan_segments")) s.scan_segments = segments(j.at("scan_segments"));
    read_opt(j, "scan_frames_per_segment", s.scan_frames_per_segment);
    read_opt(j, "fps", s.fps);
    if (j.contains("rig")) {
      const json& r = j.at("rig");
      detail::reject_unknown_keys(r, {"fx", "fy", "cx", "cy", "baseline_mm"}, "rig spec");
      read_opt(r, "fx", s.rig.fx);
      read_opt(r, "fy", s.rig.fy);
      read_opt(r, "cx", s.rig.cx);
      read_opt(r, "cy", s.rig.cy);
      read_opt(r, "baseline_mm", s.rig.baseline_mm);
    }
    if (j.contains("neutral_position")) s.neutral_position = detail::vec3_from(j.at("neutral_position"));
    if (j.contains("pivot")) s.pivot = detail::vec3_from(j.at("pivot"));
    read_opt(j, "pixel_sigma", s.pixel_sigma);
    read_opt(j, "depth_sigma", s.depth_sigma);
    if (j.contains("occlusion")) {
      const json& o = j.at("occlusion");
      detail::reject_unknown_keys(o, {"frame_fraction", "landmark_fraction", "cloud_radius_mm", "seed"}, "occlusion spec");
      read_opt(o, "frame_fraction", s.occlusion.frame_fraction);
      read_opt(o, "landmark_fraction", s.occlusion.landmark_fraction);
      read_opt(o, "cloud_radius_mm", s.occlusion.cloud_radius_mm);
      read_opt(o, "seed", s.occlusion.seed);
    }
    if (s.frames_per_segment < 1 || s.scan_frames_per_segment < 1) {
      throw Error(ErrorCode::InvalidArgument, "frames per segment must be >= 1");
    }
    if (!(s.fps > 0.0)) throw Error(ErrorCode::InvalidArgument, "fps must be positive");
    if (!(s.pixel_sigma >= 0.0) || !(s.depth_sigma >= 0.0)) {
      throw Error(ErrorCode::InvalidArgument, "noise sigmas must be non-negative");
    }
    if (s.segments.empty()) throw Error(ErrorCode::InvalidArgument, "scene needs at least one motion segment");
    return s;
  });
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

struct EvalReport {
  AlignmentResult alignment;
  DiscrepancyReport discrepancy;
  std::optional<LogStats> translation_stats;
  std::optional<LogStats> rotation_stats;
  PoseBinnedReport bins;
};

inline json log_stats_json(const std::optional<LogStats>& s) {
  if (!s) return nullptr;
  return {{"geometric_mean", s->geometric_mean}, {"median", s->median}, {"q1", s->q1}, {"q3", s->q3}, {"iqr_ratio", s->iqr_ratio}};
}

inline json numbers_or_null(const std::vector<double>& v) {
  json a = json::array();
  for (double x : v) a.push_back(std::isnan(x) ? json(nullptr) : json(x));
  return a;
}

/// NaN (empty bins) serializes as null.
inline json eval_report_json(const EvalReport& r) {
  json dofs = json::array();
  for (const auto& b : r.bins.dofs) {
    dofs.push_back({{"dof", to_string(b.dof)},
                    {"lo", b.lo},
                    {"hi", b.hi},
                    {"centers", b.centers},
                    {"counts", b.counts},
                    {"translation", numbers_or_null(b.translation)},
                    {"rotation", numbers_or_null(b.rotation)}});
  }
  const auto& a = r.alignment;
  const auto& d = r.discrepancy;
  return {{"alignment",
           {{"lag_frames", a.lag},
            {"static_transform", pose_to_json(a.static_transform)},
            {"residual_mm", a.residual},
            {"pairs", a.pairs},
            {"xcorr_lag_frames", a.xcorr_lag},
            {"xcorr_peak", a.xcorr_peak}}},
          {"discrepancy",
           {{"translation_rmsd_mm", d.translation_rmsd},
            {"rotation_rmsd_deg", d.rotation_rmsd},
            {"failure_rate", d.failure_rate},
            {"reference_failure_rate", d.reference_failure_rate},
            {"compared_frames", d.compared_frames}}},
          {"log_stats", {{"translation_mm", log_stats_json(r.translation_stats)}, {"rotation_deg", log_stats_json(r.rotation_stats)}}},
          {"pose_binned",
           {{"translation_normalization_mm", r.bins.translation_normalization},
            {"rotation_normalization_deg", r.bins.rotation_normalization},
            {"included_frames", r.bins.included_frames},
            {"dofs", dofs}}}};
}

/// One row per (DOF, bin): dof, bin_center, normalized translation and
/// rotation means, frame count. Empty bins have empty mean fields.
inline std::string pose_bins_csv(const PoseBinnedReport& r) {
  std::string s = "dof,bin_center,normalized_translation,normalized_rotation,count\n";
  auto cell = [](double v) { return std::isnan(v) ? std::string() : format_double(v); };
  for (const auto& b : r.dofs) {
    for (std::size_t j = 0; j < b.centers.size(); ++j) {
      s += std::string(to_string(b.dof)) + ',' + format_double(b.centers[j]) + ',' + cell(b.translation[j]) + ',' +
           cell(b.rotation[j]) + ',' + std::to_string(b.counts[j]) + '\n';
    }
  }
  return s;
}

inline std::string per_frame_csv(const DiscrepancyReport& d) {
  std::string s = "frame_index,translation_mm,rotation_deg\n";
  for (const auto& f : d.per_frame) {
    s += std::to_string(f.frame_index) + ',' + format_double(f.translation) + ',' + format_double(f.rotation) + '\n';
  }
  return s;
}

}  // namespace headtrack::io
