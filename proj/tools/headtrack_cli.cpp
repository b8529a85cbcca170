// headtrack: batch command-line front end.
//
//   headtrack synth          --out DIR [--scene spec.json]
//   headtrack build-template --bundle DIR --out DIR
//   headtrack fit-phm        --model FILE --template DIR --out DIR
//   headtrack track          --bundle DIR --method TAG --out DIR [--template DIR] [--phm FILE] [--landmarks FILE]
//   headtrack eval           --test CSV --reference CSV --out DIR
//   headtrack calib-average  FILE... --out DIR
//
// Global flags: --config FILE, --seed N, --threads N, --force.
// Exit codes: 0 ok, 2 input error, 3 solver error. Errors are reported as a
// single JSON object on stderr.

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "headtrack/headtrack.hpp"

namespace {

namespace fs = std::filesystem;
namespace io = headtrack::io;
using headtrack::Error;
using headtrack::ErrorCode;
using json = nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitSolver = 3;

int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::ParseError:
    case ErrorCode::IoError:
    case ErrorCode::InvalidArgument:
    case ErrorCode::MissingModality:
    case ErrorCode::DimensionMismatch:
    case ErrorCode::UnknownKind:
    case ErrorCode::UnknownLandmark:
      return kExitInput;
    default:
      return kExitSolver;
  }
}

int report(ErrorCode code, const std::string& message, int exit_code) {
  const json j = {{"error", {{"code", headtrack::to_string(code)}, {"message", message}, {"exit_code", exit_code}}}};
  std::cerr << j.dump() << std::endl;
  return exit_code;
}

Error input_error(const std::string& what) { return Error(ErrorCode::InvalidArgument, what); }

// ---------------------------------------------------------------------------
// Parameters: defaults, then the config file, then flags
// ---------------------------------------------------------------------------

enum class Kind { text, integer, real, boolean, text_list };

struct Param {
  std::string name;  ///< config key; the flag is --name with '_' -> '-'
  Kind kind;
  json fallback;  ///< null: no default
  std::string help;
  bool required = false;
  bool positional = false;
};

std::string flag_of(const std::string& name) {
  std::string f = name;
  std::replace(f.begin(), f.end(), '_', '-');
  return "--" + f;
}

json convert_flag(const Param& p, const std::vector<std::string>& raw) {
  try {
    switch (p.kind) {
      case Kind::text: return raw.back();
      case Kind::integer: return static_cast<long long>(io::parse_int(raw.back()));
      case Kind::real: return io::parse_double(raw.back());
      case Kind::boolean: {
        const std::string& s = raw.back();
        if (s == "true" || s == "1") return true;
        if (s == "false" || s == "0") return false;
        throw input_error("expected true or false");
      }
      case Kind::text_list: return raw;
    }
  } catch (const Error& e) {
    throw input_error(flag_of(p.name) + ": " + e.what());
  }
  return nullptr;
}

void check_type(const Param& p, const json& v) {
  if (v.is_null() && p.fallback.is_null()) return;  // echoed "unset"
  bool ok = false;
  switch (p.kind) {
    case Kind::text: ok = v.is_string(); break;
    case Kind::integer: ok = v.is_number_integer(); break;
    case Kind::real: ok = v.is_number(); break;
    case Kind::boolean: ok = v.is_boolean(); break;
    case Kind::text_list:
      ok = v.is_array() && std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_string(); });
      break;
  }
  if (!ok) throw Error(ErrorCode::ParseError, "config key '" + p.name + "' has the wrong type");
}

struct Command {
  std::string name;
  std::string description;
  std::vector<Param> params;
  std::function<void(const json& cfg, const fs::path& staging)> run;
  CLI::App* app = nullptr;
  std::map<std::string, std::vector<std::string>> raw;
};

struct Globals {
  std::string config_path;
  std::vector<std::string> seed, threads;
  bool force = false;
};

const std::vector<Param> kGlobalParams = {
    {"seed", Kind::integer, nullptr, "random seed"},
    {"threads", Kind::integer, 1, "worker threads"},
};

/// Resolved parameters for `cmd`, including seed and threads.
json resolve(const Command& cmd, const Globals& g, CLI::App& root) {
  json file = json::object();
  if (!g.config_path.empty()) {
    file = io::read_json(g.config_path);
    if (!file.is_object()) throw Error(ErrorCode::ParseError, "config must be a JSON object");
    if (file.contains("command") && file.at("command") != cmd.name) {
      throw input_error("config is for '" + file.at("command").dump() + "', not '" + cmd.name + "'");
    }
  }
  std::vector<Param> all = kGlobalParams;
  all.insert(all.end(), cmd.params.begin(), cmd.params.end());
  for (const auto& [key, value] : file.items()) {
    if (key == "command") continue;
    if (std::none_of(all.begin(), all.end(), [&](const Param& p) { return p.name == key; })) {
      throw Error(ErrorCode::ParseError, "unknown config key '" + key + "'");
    }
  }

  json cfg = {{"command", cmd.name}};
  for (const auto& p : all) {
    json v = p.fallback;
    if (file.contains(p.name)) {
      check_type(p, file.at(p.name));
      v = file.at(p.name);
    }
    const std::vector<std::string>* raw = nullptr;
    if (p.name == "seed" && root.get_option("--seed")->count() > 0) raw = &g.seed;
    if (p.name == "threads" && root.get_option("--threads")->count() > 0) raw = &g.threads;
    auto it = cmd.raw.find(p.name);
    if (it != cmd.raw.end() && !it->second.empty()) raw = &it->second;
    if (raw != nullptr) v = convert_flag(p, *raw);
    if (v.is_null() && p.required) throw input_error("missing required parameter " + flag_of(p.name));
    cfg[p.name] = v;
  }
  if (cfg.at("threads").get<long long>() < 1) throw input_error("--threads must be >= 1");
  return cfg;
}

template <typename T>
std::optional<T> opt(const json& cfg, const char* key) {
  const json& v = cfg.at(key);
  if (v.is_null()) return std::nullopt;
  return v.get<T>();
}

// ---------------------------------------------------------------------------
// Output directories: lockfile, staging, manifest, atomic rename
// ---------------------------------------------------------------------------

class OutputLock {
 public:
  explicit OutputLock(const fs::path& out) : path_(out.string() + ".lock") {
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      if (errno == EEXIST) throw input_error("output " + out.string() + " is locked by another run (" + path_.string() + ")");
      throw Error(ErrorCode::IoError, "cannot create lock " + path_.string() + ": " + std::strerror(errno));
    }
  }
  ~OutputLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

fs::path normalized_out(const std::string& s) {
  fs::path p = fs::path(s).lexically_normal();
  if (p.filename().empty()) p = p.parent_path();
  if (p.empty()) throw input_error("empty output path");
  return p;
}

json manifest_for(const std::string& command, const fs::path& dir) {
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir).generic_string());
  }
  std::sort(files.begin(), files.end());
  json hashes = json::object();
  for (const auto& f : files) hashes[f] = io::sha256_file(dir / f);
  return {{"command", command}, {"format_version", 1}, {"files", hashes}};
}

void execute(const Command& cmd, const json& cfg, bool force) {
  const fs::path out = normalized_out(cfg.at("out").get<std::string>());
  OutputLock lock(out);
  if (fs::exists(out) && !force) {
    throw input_error("output " + out.string() + " exists; pass --force to replace it");
  }
  const fs::path staging = out.string() + ".staging";
  fs::remove_all(staging);
  fs::create_directories(staging);
  try {
    cmd.run(cfg, staging);
    io::write_json(staging / "config.json", cfg);
    const json manifest = manifest_for(cmd.name, staging);
    io::write_json(staging / "manifest.json", manifest);
    if (fs::exists(out)) fs::remove_all(out);
    fs::rename(staging, out);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(staging, ec);
    throw;
  }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

std::string occlusion_csv(const headtrack::synth::NoiseModel& noise) {
  std::string s = "frame_index,dropped_landmarks\n";
  for (const auto& e : noise.occlusions) {
    s += std::to_string(e.frame) + ',';
    bool first = true;
    for (int id : e.dropped_ids) {
      if (!first) s += ';';
      s += std::to_string(id);
      first = false;
    }
    s += '\n';
  }
  return s;
}

void cmd_synth(const json& cfg, const fs::path& dir) {
  namespace synth = headtrack::synth;
  synth::SceneSpec spec;
  if (auto scene = opt<std::string>(cfg, "scene")) spec = io::scene_spec_from_json(io::read_json(*scene));
  if (auto s = opt<long long>(cfg, "seed")) spec.seed = static_cast<std::uint64_t>(*s);
  if (auto v = opt<long long>(cfg, "frames_per_segment")) spec.frames_per_segment = static_cast<int>(*v);
  if (auto v = opt<double>(cfg, "pixel_sigma")) spec.pixel_sigma = *v;
  if (auto v = opt<double>(cfg, "depth_sigma")) spec.depth_sigma = *v;
  if (auto v = opt<double>(cfg, "occlusion_fraction")) spec.occlusion.frame_fraction = *v;
  spec = io::scene_spec_from_json(io::scene_spec_to_json(spec));  // re-validates the overrides

  const synth::SyntheticScene scene = synth::make_scene(spec);
  io::write_json(dir / "scene.json", io::scene_spec_to_json(spec));
  io::write_bundle(dir / "tracking", synth::render_bundle(scene, synth::Stream::tracking));
  io::write_bundle(dir / "scan", synth::render_bundle(scene, synth::Stream::scan));
  io::write_text(dir / "model.htmm", io::model_bytes(*scene.model));
  io::write_json(dir / "generic_landmarks.json", io::template_to_json(io::with_standard_subsets(synth::make_generic_template(scene))));
  io::write_text(dir / "occlusions.csv", occlusion_csv(scene.noise));
}

void cmd_build_template(const json& cfg, const fs::path& dir) {
  const headtrack::RecordingBundle scan = io::read_bundle(cfg.at("bundle").get<std::string>());
  headtrack::TemplateConfig tc;
  tc.voxel_mm = cfg.at("voxel_mm").get<double>();
  tc.refine_against_merged = cfg.at("refine").get<bool>();
  if (!(tc.voxel_mm >= 0.0)) throw input_error("--voxel-mm must be non-negative");
  const auto frames = headtrack::select_scan_frames(scan, static_cast<int>(cfg.at("stride").get<long long>()));
  const auto result = headtrack::build_face_template(frames, tc);
  io::write_face_template(dir, result.face);
}

void cmd_fit_phm(const json& cfg, const fs::path& dir) {
  const std::string model_path = cfg.at("model").get<std::string>();
  const std::string bytes = io::read_text(model_path);
  auto model = std::make_shared<const headtrack::MorphableModel>(io::parse_model(bytes, model_path));
  const headtrack::FaceTemplate face = io::read_face_template(cfg.at("template").get<std::string>());
  headtrack::FitConfig fc;
  fc.lambda = cfg.at("lambda").get<double>();
  fc.max_iterations = static_cast<int>(cfg.at("max_iterations").get<long long>());
  fc.tolerance = cfg.at("tolerance").get<double>();
  fc.validate();
  const headtrack::PhmFitResult fit = headtrack::fit_phm(model, face.cloud, face.anchor_landmarks, fc);

  io::PhmRecord r;
  r.model_sha256 = io::sha256_hex(bytes);
  r.model_file = model_path;
  r.weights = fit.phm.weights;
  r.transform = fit.phm.fitted_transform;
  r.lambda = fc.lambda;
  r.loss = fit.loss;
  r.iterations = fit.iterations;
  r.converged = fit.converged;
  io::write_json(dir / "phm.json", io::phm_to_json(r));
  std::string hist = "iteration,loss\n";
  for (std::size_t i = 0; i < fit.loss_history.size(); ++i) {
    hist += std::to_string(i) + ',' + io::format_double(fit.loss_history[i]) + '\n';
  }
  io::write_text(dir / "loss_history.csv", hist);
}

void cmd_track(const json& cfg, const fs::path& dir) {
  using namespace headtrack;
  const MethodTag method = method_from_string(cfg.at("method").get<std::string>());
  const RecordingBundle bundle = io::read_bundle(cfg.at("bundle").get<std::string>());

  std::optional<PersonalizedHeadModel> phm;
  if (auto p = opt<std::string>(cfg, "phm")) {
    std::string model = opt<std::string>(cfg, "model").value_or("");
    if (model.empty()) model = io::phm_from_json(io::read_json(*p)).model_file;
    phm = io::read_phm(*p, model);
  }
  std::optional<LandmarkSet3D> head;
  if (phm) head = annotated_landmarks(*phm);
  const LandmarkSet3D* head_ptr = head ? &*head : nullptr;
  const std::string subset_name = opt<std::string>(cfg, "subset").value_or(default_subset(method));

  MethodConfig mc;
  if (uses_phm(method)) {
    if (!phm) throw input_error("method '" + std::string(to_string(method)) + "' needs --phm");
    mc = make_phm_config(method, *phm, standard_subset(subset_name));
  } else if (is_depth(method)) {
    const auto t = opt<std::string>(cfg, "template");
    if (!t) throw input_error("method 'depth' needs --template");
    mc = make_depth_config(io::read_face_template(*t), head_ptr);
  } else {
    const auto l = opt<std::string>(cfg, "landmarks");
    if (!l) throw input_error("method '" + std::string(to_string(method)) + "' needs --landmarks");
    const io::LandmarkTemplate lt = io::template_from_json(io::read_json(*l));
    mc = make_landmark_config(method, lt.landmarks, lt.subset(subset_name), head_ptr);
  }
  mc.warm_start = cfg.at("warm_start").get<bool>();
  mc.crop_hull = cfg.at("crop_hull").get<bool>();
  mc.max_chamfer_mm2 = cfg.at("max_chamfer_mm2").get<double>();
  mc.min_valid_fraction = cfg.at("min_valid_fraction").get<double>();

  const Trajectory traj = run_pipeline(bundle, mc, static_cast<unsigned>(cfg.at("threads").get<long long>()));
  io::write_text(dir / "trajectory.csv", io::trajectory_csv(traj));
  std::map<std::string, std::size_t> reasons;
  for (const auto& f : traj.frames)
    if (!f.ok()) ++reasons[std::string(to_string(f.failure()))];
  io::write_json(dir / "summary.json", {{"method", to_string(method)},
                                        {"frames", traj.frames.size()},
                                        {"failures", traj.failure_count()},
                                        {"failure_rate", traj.failure_rate()},
                                        {"failure_reasons", reasons}});
}

void cmd_eval(const json& cfg, const fs::path& dir) {
  using namespace headtrack;
  const Trajectory test = io::read_trajectory(cfg.at("test").get<std::string>());
  const Trajectory ref = io::read_trajectory(cfg.at("reference").get<std::string>());
  SyncConfig sc;
  sc.window = static_cast<int>(cfg.at("window").get<long long>());
  const long long min_pairs = cfg.at("min_pairs").get<long long>();
  if (min_pairs < 3) throw input_error("--min-pairs must be >= 3");
  sc.min_pairs = static_cast<std::size_t>(min_pairs);
  BinningConfig bc;
  bc.bins_per_dof = static_cast<int>(cfg.at("bins").get<long long>());
  if (sc.window < 0) throw input_error("--window must be >= 0");
  if (bc.bins_per_dof < 1) throw input_error("--bins must be >= 1");

  io::EvalReport r;
  r.alignment = synchronize(test, ref, sc);
  r.discrepancy = compute_rmsd(test, ref, r.alignment);
  std::vector<double> t, q;
  for (const auto& f : r.discrepancy.per_frame) {
    t.push_back(std::max(f.translation, bc.floor));
    q.push_back(std::max(f.rotation, bc.floor));
  }
  r.translation_stats = log_space_stats(t);
  r.rotation_stats = log_space_stats(q);
  r.bins = pose_binned_analysis(test, ref, r.alignment, bc);
  io::write_json(dir / "report.json", io::eval_report_json(r));
  io::write_text(dir / "pose_bins.csv", io::pose_bins_csv(r.bins));
  io::write_text(dir / "per_frame.csv", io::per_frame_csv(r.discrepancy));
}

void cmd_calib_average(const json& cfg, const fs::path& dir) {
  const auto inputs = cfg.at("inputs").get<std::vector<std::string>>();
  if (inputs.empty()) throw input_error("calib-average needs at least one calibration file");
  std::vector<headtrack::StereoRig> rigs;
  bool cameras = false, full_rigs = false;
  for (const auto& path : inputs) {
    const json j = io::read_json(path);
    (j.is_object() && j.contains("fx") ? cameras : full_rigs) = true;
    rigs.push_back(io::rig_from_json(j));
  }
  if (cameras && full_rigs) throw input_error("cannot average single-camera files together with rig files");
  const headtrack::StereoRig avg = io::average_rigs(rigs);
  io::write_json(dir / "calibration.json", cameras ? io::camera_to_json(avg.left) : io::rig_to_json(avg));
}

std::vector<Command> make_commands() {
  const Param out{"out", Kind::text, nullptr, "output directory", true};
  return {
      {"synth",
       "render a synthetic scene: tracking and scan bundles, model, generic landmarks",
       {out,
        {"scene", Kind::text, nullptr, "scene-spec JSON"},
        {"frames_per_segment", Kind::integer, nullptr, "frames per motion segment"},
        {"pixel_sigma", Kind::real, nullptr, "landmark noise, px"},
        {"depth_sigma", Kind::real, nullptr, "depth noise, mm"},
        {"occlusion_fraction", Kind::real, nullptr, "share of frames with an occlusion event"}},
       cmd_synth, nullptr, {}},
      {"build-template",
       "register and merge scan frames into a face template",
       {out,
        {"bundle", Kind::text, nullptr, "scan bundle directory", true},
        {"stride", Kind::integer, 5, "use every n-th scan frame"},
        {"voxel_mm", Kind::real, 2.0, "merge voxel size, mm"},
        {"refine", Kind::boolean, true, "refine each frame against the merged cloud"}},
       cmd_build_template, nullptr, {}},
      {"fit-phm",
       "fit the morphable model to a face template",
       {out,
        {"model", Kind::text, nullptr, "model file", true},
        {"template", Kind::text, nullptr, "face template directory", true},
        {"lambda", Kind::real, 1e-6, "shape regularization weight"},
        {"max_iterations", Kind::integer, 200, "outer iteration cap"},
        {"tolerance", Kind::real, 1e-12, "relative loss change that ends the fit"}},
       cmd_fit_phm, nullptr, {}},
      {"track",
       "track every frame of a bundle with one method",
       {out,
        {"bundle", Kind::text, nullptr, "recording bundle directory", true},
        {"method", Kind::text, nullptr, "mono|stereo|depth|mono_phm|stereo_phm|depth_phm|marle_style", true},
        {"template", Kind::text, nullptr, "face template directory (depth)"},
        {"phm", Kind::text, nullptr, "PHM JSON (PHM methods; maps other methods to the head frame)"},
        {"model", Kind::text, nullptr, "model file for --phm (default: the path recorded in it)"},
        {"landmarks", Kind::text, nullptr, "landmark template JSON (mono, stereo, marle_style)"},
        {"subset", Kind::text, nullptr, "landmark subset name"},
        {"warm_start", Kind::boolean, true, "start depth ICP from the previous pose"},
        {"crop_hull", Kind::boolean, false, "crop clouds to the landmark hull"},
        {"max_chamfer_mm2", Kind::real, 25.0, "depth failure threshold, mm^2"},
        {"min_valid_fraction", Kind::real, 0.6, "share of subset landmarks required"}},
       cmd_track, nullptr, {}},
      {"eval",
       "compare a trajectory with a reference",
       {out,
        {"test", Kind::text, nullptr, "trajectory CSV under test", true},
        {"reference", Kind::text, nullptr, "reference trajectory CSV", true},
        {"window", Kind::integer, 300, "lag search window, frames"},
        {"min_pairs", Kind::integer, 10, "minimum paired frames per lag"},
        {"bins", Kind::integer, 11, "bins per degree of freedom"}},
       cmd_eval, nullptr, {}},
      {"calib-average",
       "element-wise average of calibration files",
       {out, {"inputs", Kind::text_list, nullptr, "calibration files", true, true}},
       cmd_calib_average, nullptr, {}},
  };
}

int run(int argc, char** argv) {
  CLI::App app{"Markerless head-pose tracking toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "JSON config; flags override its values");
  app.add_option("--seed", g.seed, "random seed")->allow_extra_args(false);
  app.add_option("--threads", g.threads, "worker threads")->allow_extra_args(false);
  app.add_flag("--force", g.force, "replace an existing output directory");

  std::vector<Command> commands = make_commands();
  for (auto& c : commands) {
    c.app = app.add_subcommand(c.name, c.description);
    for (const auto& p : c.params) {
      auto& slot = c.raw[p.name];
      if (p.positional) {
        c.app->add_option(p.name, slot, p.help);
      } else {
        c.app->add_option(flag_of(p.name), slot, p.help)->allow_extra_args(p.kind == Kind::text_list);
      }
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report(ErrorCode::InvalidArgument, e.what(), kExitInput);
  }

  for (const auto& c : commands) {
    if (!c.app->parsed()) continue;
    try {
      const json cfg = resolve(c, g, app);
      execute(c, cfg, g.force);
      return kExitOk;
    } catch (const Error& e) {
      return report(e.code(), e.what(), exit_code_for(e.code()));
    } catch (const json::exception& e) {
      return report(ErrorCode::ParseError, e.what(), kExitInput);
    } catch (const fs::filesystem_error& e) {
      return report(ErrorCode::IoError, e.what(), kExitInput);
    } catch (const std::invalid_argument& e) {
      return report(ErrorCode::InvalidArgument, e.what(), kExitInput);
    }
  }
  return report(ErrorCode::InvalidArgument, "no subcommand", kExitInput);
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
