#include "headtrack/io.hpp"

#include <gtest/gtest.h>

#include <unistd.h>

#include <cstring>
#include <random>

#include "test_support.hpp"

namespace headtrack {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("headtrack_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::IoError;
}

std::shared_ptr<const MorphableModel> small_model() {
  static const auto m = [] {
    synth::ModelSpec spec;
    spec.shape.point_spacing_mm = 8.0;
    spec.components = 4;
    return std::make_shared<const MorphableModel>(synth::make_synthetic_model(spec));
  }();
  return m;
}

TEST(Numbers, ShortestFormatRoundTrips) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::uint64_t> bits;
  int checked = 0;
  while (checked < 2000) {
    double v;
    const std::uint64_t b = bits(rng);
    std::memcpy(&v, &b, sizeof(v));
    if (!std::isfinite(v)) continue;
    ++checked;
    EXPECT_EQ(io::parse_double(io::format_double(v)), v);
  }
  EXPECT_EQ(io::format_double(0.1), "0.1");
  EXPECT_EQ(io::format_double(650.0), "650");
  EXPECT_EQ(code_of([] { io::parse_double("1.5x"); }), ErrorCode::ParseError);
  EXPECT_EQ(code_of([] { io::parse_double(""); }), ErrorCode::ParseError);
  EXPECT_EQ(code_of([] { io::parse_flag("2"); }), ErrorCode::ParseError);
}

TEST(Sha256, KnownDigests) {
  EXPECT_EQ(io::sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(io::sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Calibration, CameraAndRigRoundTrip) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 50; ++i) {
    StereoRig rig;
    rig.left = test::test_camera(test::random_pose(rng));
    rig.right = test::test_camera(test::random_pose(rng));
    rig.right.cx = 1900.25;
    const StereoRig back = io::rig_from_json(io::parse_json(io::rig_to_json(rig).dump(), "rig"));
    EXPECT_EQ(back.right.cx, 1900.25);
    EXPECT_LT(test::max_abs_diff(back.left.extrinsic, rig.left.extrinsic), 1e-12);
    EXPECT_LT(test::max_abs_diff(back.right.extrinsic, rig.right.extrinsic), 1e-12);
  }
}

TEST(Calibration, SchemaFieldNames) {
  const auto j = io::parse_json(R"({"fx": 1000, "fy": 1001, "cx": 640, "cy": 360,
      "extrinsic": {"quaternion": [0, 0, 1, 0], "translation_mm": [-355, 0, 0]}})", "camera");
  const StereoRig rig = io::rig_from_json(j);
  EXPECT_EQ(rig.left.fy, 1001.0);
  EXPECT_EQ(rig.left.extrinsic.translation, Eigen::Vector3d(-355, 0, 0));
  EXPECT_LT((rig.left.extrinsic.rotation - rotation_y(180.0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Calibration, MalformedInputIsRejected) {
  EXPECT_EQ(code_of([] { io::camera_from_json(io::parse_json(R"({"fx":1,"fy":1,"cx":0})", "c")); }),
            ErrorCode::ParseError);
  EXPECT_EQ(code_of([] {
              io::camera_from_json(io::parse_json(
                  R"({"fx":1,"fy":1,"cx":0,"cy":0,"extrinsic":{"quaternion":[2,0,0,0],"translation_mm":[0,0,0]}})", "c"));
            }),
            ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([] {
              io::camera_from_json(io::parse_json(
                  R"({"fx":-1,"fy":1,"cx":0,"cy":0,"extrinsic":{"quaternion":[1,0,0,0],"translation_mm":[0,0,0]}})", "c"));
            }),
            ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([] { io::parse_json("{not json", "c"); }), ErrorCode::ParseError);
}

TEST(Calibration, AveragingIdenticalFilesIsExact) {
  std::mt19937_64 rng(3);
  StereoRig rig;
  rig.left = test::test_camera(test::random_pose(rng));
  rig.right = test::test_camera(test::random_pose(rng));
  const StereoRig parsed = io::rig_from_json(io::rig_to_json(rig));
  const StereoRig avg = io::average_rigs(std::vector<StereoRig>(10, parsed));
  EXPECT_EQ(io::rig_to_json(avg).dump(), io::rig_to_json(parsed).dump());
}

TEST(Calibration, AveragingMatchesElementwiseMean) {
  std::vector<CameraModel> cams;
  for (int i = 0; i < 4; ++i) {
    CameraModel c = test::test_camera();
    c.fx = 1900.0 + i;
    c.cy = 1080.0 - 2.0 * i;
    c.extrinsic.rotation = rotation_z(0.5 * i);
    c.extrinsic.translation = Eigen::Vector3d(-355.0 + i, 0.0, 0.25 * i);
    cams.push_back(c);
  }
  const CameraModel avg = io::average_cameras(cams);
  EXPECT_DOUBLE_EQ(avg.fx, 1901.5);
  EXPECT_DOUBLE_EQ(avg.cy, 1077.0);
  EXPECT_LT((avg.extrinsic.translation - Eigen::Vector3d(-353.5, 0.0, 0.375)).norm(), 1e-12);
  // rotations about one axis average to the mean angle
  EXPECT_LT(geodesic_angle(avg.extrinsic.rotation, rotation_z(0.75)), 1e-6);
  EXPECT_EQ(code_of([] { io::average_cameras({}); }), ErrorCode::InvalidArgument);
}

TEST(LandmarkCsv, RoundTripAndHeader) {
  std::vector<LandmarkSet2D> frames(3);
  frames[0].insert({5, 10.25, 20.5, true});
  frames[0].insert({1, -3.0, 1e-9, false});
  frames[2].insert({67, 1919.999, 0.0, true});
  const std::vector<double> ts{0.0, 1.0 / 30.0, 2.0 / 30.0};
  const std::string csv = io::landmark_csv(ts, frames);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "frame_index,timestamp_s,landmark_id,u_px,v_px,valid");
  const auto back = io::parse_landmark_csv(csv, 3, &ts);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    ASSERT_EQ(back[k].entries.size(), frames[k].entries.size());
    for (std::size_t i = 0; i < frames[k].entries.size(); ++i) {
      EXPECT_EQ(back[k].entries[i].id, frames[k].entries[i].id);
      EXPECT_EQ(back[k].entries[i].u, frames[k].entries[i].u);
      EXPECT_EQ(back[k].entries[i].v, frames[k].entries[i].v);
      EXPECT_EQ(back[k].entries[i].valid, frames[k].entries[i].valid);
    }
  }
}

TEST(LandmarkCsv, MalformedRowsAreRejected) {
  const std::string h = "frame_index,timestamp_s,landmark_id,u_px,v_px,valid\n";
  EXPECT_EQ(code_of([&] { io::parse_landmark_csv(h + "0,0,1,2,3\n", 1); }), ErrorCode::ParseError);
  EXPECT_EQ(code_of([&] { io::parse_landmark_csv(h + "4,0,1,2,3,1\n", 1); }), ErrorCode::ParseError);
  EXPECT_EQ(code_of([&] { io::parse_landmark_csv(h + "0,0,1,2,3,1\n0,0,1,2,3,1\n", 1); }), ErrorCode::ParseError);
  EXPECT_EQ(code_of([&] { io::parse_landmark_csv("frame,u,v\n", 1); }), ErrorCode::ParseError);
  const std::vector<double> ts{0.5};
  EXPECT_EQ(code_of([&] { io::parse_landmark_csv(h + "0,0.25,1,2,3,1\n", 1, &ts); }), ErrorCode::ParseError);
}

TEST(DepthLandmarkCsv, RoundTrip) {
  std::vector<LandmarkSet3D> frames(2);
  frames[1].insert({27, Eigen::Vector3d(177.5, -0.1, 650.0), true});
  frames[1].insert({30, Eigen::Vector3d(1.0 / 3.0, 2.0, 3.0), false});
  const std::vector<double> ts{0.0, 0.1};
  const auto back = io::parse_depth_landmark_csv(io::depth_landmark_csv(ts, frames), 2, &ts);
  EXPECT_TRUE(back[0].entries.empty());
  ASSERT_EQ(back[1].entries.size(), 2u);
  EXPECT_EQ(back[1].find(30)->position, frames[1].find(30)->position);
  EXPECT_FALSE(back[1].find(30)->valid);
}

TEST(TemplateJson, RoundTripWithSubsets) {
  LandmarkSet3D lms;
  for (int i = 0; i < 68; ++i) lms.insert({i, Eigen::Vector3d(i * 0.5, -i, 1.0 / (i + 1)), true});
  io::LandmarkTemplate t = io::with_standard_subsets(lms);
  EXPECT_EQ(t.subsets.size(), 5u);
  t.subsets["custom"] = {1, 2, 3};
  const auto back = io::template_from_json(io::parse_json(io::template_to_json(t).dump(), "t"));
  ASSERT_EQ(back.landmarks.entries.size(), 68u);
  for (int i = 0; i < 68; ++i) EXPECT_EQ(back.landmarks.find(i)->position, lms.find(i)->position);
  EXPECT_EQ(back.subset("custom").ids, (std::set<int>{1, 2, 3}));
  EXPECT_EQ(back.subset("union").ids, standard_subset("union").ids);
}

TEST(TemplateJson, SubsetWithUnknownIdIsRejected) {
  const auto j = io::parse_json(R"({"landmarks":[{"id":1,"x_mm":0,"y_mm":0,"z_mm":0}],"subsets":{"s":[1,2]}})", "t");
  EXPECT_EQ(code_of([&] { io::template_from_json(j); }), ErrorCode::InvalidArgument);
  const auto k = io::parse_json(R"({"landmarks":[{"id":1,"x_mm":0,"y_mm":0}]})", "t");
  EXPECT_EQ(code_of([&] { io::template_from_json(k); }), ErrorCode::ParseError);
}

TEST(Ply, RoundTripWithAndWithoutNormals) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 100.0);
  PointCloud c;
  for (int i = 0; i < 200; ++i) {
    c.points.emplace_back(n(rng), n(rng), n(rng));
    c.normals.push_back(Eigen::Vector3d(n(rng), n(rng), n(rng)).normalized());
  }
  const PointCloud back = io::parse_ply(io::ply_text(c));
  EXPECT_EQ(back.points, c.points);
  EXPECT_EQ(back.normals, c.normals);
  c.normals.clear();
  const PointCloud bare = io::parse_ply(io::ply_text(c));
  EXPECT_EQ(bare.points, c.points);
  EXPECT_FALSE(bare.has_normals());
}

TEST(Ply, ReadsForeignAsciiLayout) {
  const std::string text =
      "ply\r\nformat ascii 1.0\r\ncomment scanner export\r\nelement vertex 2\r\n"
      "property float z\r\nproperty uchar red\r\nproperty float x\r\nproperty float y\r\n"
      "element face 1\r\nproperty list uchar int vertex_indices\r\nend_header\r\n"
      "3 255 1 2\r\n6  0 4 5\r\n3 0 1 1\r\n";
  const PointCloud c = io::parse_ply(text);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c.points[0], Eigen::Vector3d(1, 2, 3));
  EXPECT_EQ(c.points[1], Eigen::Vector3d(4, 5, 6));
  EXPECT_FALSE(c.has_normals());
}

TEST(Ply, RejectsBinaryAndTruncatedFiles) {
  EXPECT_EQ(code_of([] { io::parse_ply("ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n"); }),
            ErrorCode::ParseError);
  EXPECT_EQ(code_of([] {
              io::parse_ply("ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nproperty double y\n"
                            "property double z\nend_header\n1 2 3\n");
            }),
            ErrorCode::ParseError);
  EXPECT_EQ(code_of([] { io::parse_ply("off\n"); }), ErrorCode::ParseError);
}

TEST(FaceTemplateFiles, RoundTrip) {
  TempDir dir;
  FaceTemplate face;
  face.cloud = synth::make_face_mesh({}, 3).cloud;
  face.anchor_landmarks.insert({27, face.cloud.points[27], true});
  face.anchor_landmarks.insert({30, face.cloud.points[30], true});
  io::write_face_template(dir.path(), face);
  EXPECT_TRUE(fs::exists(dir.path() / "template.ply"));
  EXPECT_TRUE(fs::exists(dir.path() / "template_landmarks.json"));
  const FaceTemplate back = io::read_face_template(dir.path());
  EXPECT_EQ(back.cloud.points, face.cloud.points);
  EXPECT_EQ(back.anchor_landmarks.find(30)->position, face.anchor_landmarks.find(30)->position);
}

TEST(ModelFile, ByteLayoutAndExactRoundTrip) {
  const auto& m = *small_model();
  const std::string bytes = io::model_bytes(m);
  ASSERT_EQ(bytes.substr(0, 4), "HTMM");
  std::uint32_t hlen = 0;
  for (int b = 0; b < 4; ++b) hlen |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 + b])) << (8 * b);
  const std::size_t n = m.vertex_count(), k = m.component_count();
  EXPECT_EQ(bytes.size(), 8 + hlen + 4 * 3 * n * (k + 1));
  const auto header = io::parse_json(bytes.substr(8, hlen), "header");
  EXPECT_EQ(header.at("n").get<std::size_t>(), n);
  EXPECT_EQ(header.at("K").get<std::size_t>(), k);

  // first mean coordinate and first entry of the last component, decoded by hand
  auto f32_at = [&](std::size_t off) {
    unsigned char raw[4];
    for (int b = 0; b < 4; ++b) raw[b] = static_cast<unsigned char>(bytes[off + b]);
    const std::uint32_t u = raw[0] | (raw[1] << 8) | (raw[2] << 16) | (static_cast<std::uint32_t>(raw[3]) << 24);
    float f;
    std::memcpy(&f, &u, 4);
    return static_cast<double>(f);
  };
  EXPECT_EQ(f32_at(8 + hlen), m.mean(0));
  EXPECT_EQ(f32_at(8 + hlen + 4 * 3 * n * k), m.components(0, static_cast<Eigen::Index>(k - 1)));

  const MorphableModel back = io::parse_model(bytes);
  EXPECT_EQ(back.mean, m.mean);
  EXPECT_EQ(back.components, m.components);
  EXPECT_EQ(back.eigenvalues, m.eigenvalues);
  EXPECT_EQ(back.annotations, m.annotations);
  EXPECT_EQ(io::model_bytes(back), bytes);
}

TEST(ModelFile, CorruptFilesAreRejected) {
  const std::string bytes = io::model_bytes(*small_model());
  EXPECT_EQ(code_of([&] { io::parse_model(bytes.substr(0, bytes.size() - 1)); }), ErrorCode::ParseError);
  EXPECT_EQ(code_of([&] { io::parse_model("XXXX" + bytes.substr(4)); }), ErrorCode::ParseError);
  EXPECT_EQ(code_of([&] { io::parse_model(bytes + "pad"); }), ErrorCode::ParseError);
}

TEST(PhmFile, RoundTripAndHashCheck) {
  TempDir dir;
  const std::string bytes = io::model_bytes(*small_model());
  io::write_text(dir.path() / "model.htmm", bytes);
  io::PhmRecord r;
  r.model_sha256 = io::sha256_hex(bytes);
  r.model_file = "model.htmm";
  r.weights = Eigen::Vector4d(0.5, -1.25, 0.0, 2.0);
  r.transform = Pose{rotation_y(10.0), Eigen::Vector3d(1, 2, 3)};
  io::write_json(dir.path() / "phm.json", io::phm_to_json(r));
  const PersonalizedHeadModel phm = io::read_phm(dir.path() / "phm.json", dir.path() / "model.htmm");
  EXPECT_EQ(phm.weights, r.weights);
  EXPECT_LT(test::max_abs_diff(phm.fitted_transform, r.transform), 1e-12);

  io::write_text(dir.path() / "other.htmm", bytes + "x");
  EXPECT_EQ(code_of([&] { io::read_phm(dir.path() / "phm.json", dir.path() / "other.htmm"); }),
            ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([&] { io::read_phm(dir.path() / "missing.json", dir.path() / "model.htmm"); }), ErrorCode::IoError);
}

TEST(TrajectoryCsv, RoundTripWithFailures) {
  std::mt19937_64 rng(5);
  Trajectory t;
  for (int k = 0; k < 40; ++k) {
    TrackedFrame f;
    f.frame_index = k;
    f.timestamp = k / 30.0;
    if (k % 7 == 3) {
      f.result = ErrorCode::InsufficientLandmarks;
    } else {
      f.result = test::random_pose(rng);
    }
    t.frames.push_back(f);
  }
  const std::string csv = io::trajectory_csv(t);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "frame_index,timestamp_s,ok,failure_reason,qw,qx,qy,qz,tx_mm,ty_mm,tz_mm");
  EXPECT_NE(csv.find("\n3,0.1,0,InsufficientLandmarks,,,,,,,\n"), std::string::npos);
  const Trajectory back = io::parse_trajectory_csv(csv);
  ASSERT_EQ(back.frames.size(), t.frames.size());
  for (std::size_t k = 0; k < t.frames.size(); ++k) {
    ASSERT_EQ(back.frames[k].ok(), t.frames[k].ok());
    EXPECT_EQ(back.frames[k].timestamp, t.frames[k].timestamp);
    if (t.frames[k].ok()) {
      EXPECT_LT(test::max_abs_diff(back.frames[k].pose(), t.frames[k].pose()), 1e-12);
    } else {
      EXPECT_EQ(back.frames[k].failure(), ErrorCode::InsufficientLandmarks);
    }
  }
}

TEST(TrajectoryCsv, MalformedRowsAreRejected) {
  const std::string h = "frame_index,timestamp_s,ok,failure_reason,qw,qx,qy,qz,tx_mm,ty_mm,tz_mm\n";
  EXPECT_EQ(code_of([&] { io::parse_trajectory_csv(h + "0,0,0,NotAReason,,,,,,,\n"); }), ErrorCode::ParseError);
  EXPECT_EQ(code_of([&] { io::parse_trajectory_csv(h + "0,0,1,,1,0,0,0,1,2\n"); }), ErrorCode::ParseError);
  EXPECT_EQ(code_of([&] { io::parse_trajectory_csv(h + "1,0,1,,1,0,0,0,1,2,3\n0,1,1,,1,0,0,0,1,2,3\n"); }),
            ErrorCode::ParseError);
}

TEST(Bundle, DirectoryRoundTripIsExact) {
  synth::SceneSpec spec;
  spec.frames_per_segment = 2;
  spec.model.shape.point_spacing_mm = 8.0;
  const auto scene = synth::make_scene(spec);
  const RecordingBundle b = synth::render_bundle(scene);
  TempDir dir;
  io::write_bundle(dir.path(), b);
  EXPECT_TRUE(fs::exists(dir.path() / "clouds" / "000015.ply"));
  const RecordingBundle back = io::read_bundle(dir.path());
  ASSERT_EQ(back.frame_count(), b.frame_count());
  EXPECT_EQ(back.timestamps, b.timestamps);
  for (std::size_t k = 0; k < b.frame_count(); ++k) {
    EXPECT_EQ(back.clouds[k].points, b.clouds[k].points);
    ASSERT_EQ(back.left[k].entries.size(), b.left[k].entries.size());
    for (std::size_t i = 0; i < b.left[k].entries.size(); ++i) {
      EXPECT_EQ(back.left[k].entries[i].u, b.left[k].entries[i].u);
      EXPECT_EQ(back.right[k].entries[i].v, b.right[k].entries[i].v);
      EXPECT_EQ(back.depth_landmarks[k].entries[i].position, b.depth_landmarks[k].entries[i].position);
    }
    EXPECT_LT(test::max_abs_diff((*back.ground_truth)[k], (*b.ground_truth)[k]), 1e-12);
  }
  // a second write of the read-back bundle reproduces every pose-free file
  TempDir again;
  io::write_bundle(again.path(), back);
  for (const auto& e : fs::recursive_directory_iterator(dir.path())) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir.path());
    if (rel == "ground_truth.csv" || rel == "calibration.json") continue;
    EXPECT_EQ(io::read_text(e.path()), io::read_text(again.path() / rel)) << rel;
  }
}

TEST(Bundle, MissingPiecesAreReported) {
  TempDir dir;
  EXPECT_EQ(code_of([&] { io::read_bundle(dir.path()); }), ErrorCode::IoError);
  io::write_text(dir.path() / "manifest.json", R"({"format":"headtrack-bundle","frame_count":2,"timestamps":[0]})");
  EXPECT_EQ(code_of([&] { io::read_bundle(dir.path()); }), ErrorCode::ParseError);
}

TEST(SceneSpec, JsonRoundTripReproducesScene) {
  synth::SceneSpec spec;
  spec.seed = 42;
  spec.frames_per_segment = 3;
  spec.segments = {{synth::MotionKind::yaw, 0}, {synth::MotionKind::combined_roll, 1}};
  spec.occlusion.frame_fraction = 0.25;
  spec.model.shape.point_spacing_mm = 8.0;
  const synth::SceneSpec back = io::scene_spec_from_json(io::parse_json(io::scene_spec_to_json(spec).dump(), "s"));
  EXPECT_EQ(io::scene_spec_to_json(back), io::scene_spec_to_json(spec));
  const auto a = synth::make_scene(spec);
  const auto b = synth::make_scene(back);
  ASSERT_EQ(a.trajectory.size(), b.trajectory.size());
  for (std::size_t k = 0; k < a.trajectory.size(); ++k) EXPECT_EQ(a.trajectory[k].matrix(), b.trajectory[k].matrix());
  EXPECT_EQ(a.surface.points, b.surface.points);
}

TEST(SceneSpec, PartialJsonKeepsDefaultsAndUnknownKeysFail) {
  const auto s = io::scene_spec_from_json(io::parse_json(R"({"seed": 9, "rig": {"baseline_mm": 300}})", "s"));
  EXPECT_EQ(s.seed, 9u);
  EXPECT_EQ(s.rig.baseline_mm, 300.0);
  EXPECT_EQ(s.rig.fx, synth::SceneSpec{}.rig.fx);
  EXPECT_EQ(s.frames_per_segment, synth::SceneSpec{}.frames_per_segment);
  EXPECT_EQ(code_of([] { io::scene_spec_from_json(io::parse_json(R"({"sede": 9})", "s")); }), ErrorCode::ParseError);
  EXPECT_EQ(code_of([] { io::scene_spec_from_json(io::parse_json(R"({"segments": [{"kind": "twirl"}]})", "s")); }),
            ErrorCode::UnknownKind);
  EXPECT_EQ(code_of([] { io::scene_spec_from_json(io::parse_json(R"({"pixel_sigma": -1})", "s")); }),
            ErrorCode::InvalidArgument);
}

TEST(EvalReport, EmptyBinsBecomeNullAndBlankCells) {
  io::EvalReport r;
  DofBins b;
  b.dof = Dof::yaw;
  b.centers = {-1.0, 1.0};
  b.counts = {0, 3};
  b.translation = {std::numeric_limits<double>::quiet_NaN(), 1.5};
  b.rotation = {std::numeric_limits<double>::quiet_NaN(), 0.5};
  r.bins.dofs[5] = b;
  const auto j = io::eval_report_json(r);
  const auto& yaw = j.at("pose_binned").at("dofs").at(5);
  EXPECT_EQ(yaw.at("dof"), "yaw");
  EXPECT_TRUE(yaw.at("translation").at(0).is_null());
  EXPECT_EQ(yaw.at("translation").at(1).get<double>(), 1.5);
  EXPECT_NE(j.dump().find("null"), std::string::npos);
  const std::string csv = io::pose_bins_csv(r.bins);
  EXPECT_NE(csv.find("yaw,-1,,,0\n"), std::string::npos);
  EXPECT_NE(csv.find("yaw,1,1.5,0.5,3\n"), std::string::npos);
}

}  // namespace
}  // namespace headtrack
