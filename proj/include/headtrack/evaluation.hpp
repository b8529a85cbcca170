#pragma once

// Comparison of a test trajectory against a reference: temporal and spatial
// alignment, RMS discrepancies, pose-binned discrepancy profiles and
// log-space descriptive statistics.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <set>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "headtrack/error.hpp"
#include "headtrack/geometry.hpp"
#include "headtrack/sparse_pose.hpp"
#include "headtrack/tracking.hpp"

namespace headtrack {

/// Reference frame k + lag corresponds to test frame k, and
/// reference pose ~= static_transform * test pose.
struct AlignmentResult {
  int lag = 0;
  Pose static_transform;
  double residual = 0.0;   ///< RMS position residual after alignment, mm
  std::size_t pairs = 0;   ///< mutually valid frames at the chosen lag
  int xcorr_lag = 0;       ///< lag maximizing the normalized speed cross-correlation
  double xcorr_peak = 0.0;

  /// Alignment for the swapped roles (reference as test).
  AlignmentResult inverse() const {
    AlignmentResult r = *this;
    r.lag = -lag;
    r.xcorr_lag = -xcorr_lag;
    r.static_transform = invert(static_transform);
    return r;
  }
};

struct SyncConfig {
  int window = 300;
  std::size_t min_pairs = 10;
};

struct FrameDiscrepancy {
  int frame_index = 0;       ///< test frame
  double translation = 0.0;  ///< mm
  double rotation = 0.0;     ///< degrees
};

struct DiscrepancyReport {
  double translation_rmsd = 0.0;
  double rotation_rmsd = 0.0;
  double failure_rate = 0.0;            ///< test trajectory
  double reference_failure_rate = 0.0;
  std::size_t compared_frames = 0;
  std::vector<FrameDiscrepancy> per_frame;
};

namespace detail {

inline std::unordered_map<int, const Pose*> valid_by_index(const Trajectory& t) {
  std::unordered_map<int, const Pose*> m;
  for (const auto& f : t.frames)
    if (f.ok()) m.emplace(f.frame_index, &f.pose());
  return m;
}

struct PosePair {
  int frame_index;
  const Pose* test;
  const Pose* ref;
};

inline std::vector<PosePair> pairs_at_lag(const Trajectory& test, const std::unordered_map<int, const Pose*>& ref,
                                          int lag) {
  std::vector<PosePair> out;
  for (const auto& f : test.frames) {
    if (!f.ok()) continue;
    auto it = ref.find(f.frame_index + lag);
    if (it != ref.end()) out.push_back({f.frame_index, &f.pose(), it->second});
  }
  return out;
}

/// Frame-differenced position norm on a dense index grid; NaN where either
/// neighbour is missing.
inline std::vector<double> speed_signal(const Trajectory& t, int& first_index) {
  const auto valid = valid_by_index(t);
  if (valid.empty()) return {};
  int lo = std::numeric_limits<int>::max();
  int hi = std::numeric_limits<int>::min();
  for (const auto& [k, p] : valid) {
    lo = std::min(lo, k);
    hi = std::max(hi, k);
  }
  first_index = lo;
  std::vector<double> s(static_cast<std::size_t>(hi - lo + 1), std::numeric_limits<double>::quiet_NaN());
  for (int k = lo + 1; k <= hi; ++k) {
    auto a = valid.find(k - 1);
    auto b = valid.find(k);
    if (a != valid.end() && b != valid.end()) {
      s[static_cast<std::size_t>(k - lo)] = (b->second->translation - a->second->translation).norm();
    }
  }
  return s;
}

/// Pearson correlation of the overlapping, finite samples of the two speed
/// signals with ref index = test index + lag.
inline double speed_correlation(const std::vector<double>& ts, int t0, const std::vector<double>& rs, int r0, int lag) {
  double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const long long j = static_cast<long long>(i) + t0 + lag - r0;
    if (j < 0 || j >= static_cast<long long>(rs.size())) continue;
    const double a = ts[i];
    const double b = rs[static_cast<std::size_t>(j)];
    if (!std::isfinite(a) || !std::isfinite(b)) continue;
    sa += a;
    sb += b;
    saa += a * a;
    sbb += b * b;
    sab += a * b;
    ++n;
  }
  if (n < 2) return -std::numeric_limits<double>::infinity();
  const double dn = static_cast<double>(n);
  const double cov = sab / dn - (sa / dn) * (sb / dn);
  const double va = saa / dn - (sa / dn) * (sa / dn);
  const double vb = sbb / dn - (sb / dn) * (sb / dn);
  if (!(va > 0.0) || !(vb > 0.0)) return 0.0;
  return cov / std::sqrt(va * vb);
}

}  // namespace detail

/// Grid search over integer lags in [-window, window]. At each lag the
/// static transform is the closed-form rigid alignment of the paired test
/// positions onto the reference positions; the lag with the lowest RMS
/// residual wins (ties go to the smaller |lag|, then the negative one).
inline AlignmentResult synchronize(const Trajectory& test, const Trajectory& reference, const SyncConfig& config = {}) {
  if (config.window < 0) throw Error(ErrorCode::InvalidArgument, "sync window must be non-negative");
  if (config.min_pairs < 3) throw Error(ErrorCode::InvalidArgument, "sync needs at least 3 pairs per lag");
  const auto ref = detail::valid_by_index(reference);

  AlignmentResult best;
  bool found = false;
  for (int step = 0; step <= 2 * config.window; ++step) {
    // 0, -1, 1, -2, 2, ...
    const int lag = (step % 2 == 0) ? step / 2 : -(step + 1) / 2;
    const auto pairs = detail::pairs_at_lag(test, ref, lag);
    if (pairs.size() < config.min_pairs) continue;
    Eigen::Matrix3Xd src(3, static_cast<Eigen::Index>(pairs.size()));
    Eigen::Matrix3Xd dst(3, static_cast<Eigen::Index>(pairs.size()));
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      src.col(static_cast<Eigen::Index>(i)) = pairs[i].test->translation;
      dst.col(static_cast<Eigen::Index>(i)) = pairs[i].ref->translation;
    }
    RigidFit fit;
    try {
      fit = fit_rigid(src, dst);
    } catch (const Error&) {
      continue;  // collinear positions at this lag
    }
    if (!found || fit.rms < best.residual) {
      best.lag = lag;
      best.static_transform = fit.pose;
      best.residual = fit.rms;
      best.pairs = pairs.size();
      found = true;
    }
  }
  if (!found) {
    throw Error(ErrorCode::InsufficientOverlap, "no lag within the window pairs at least " +
                                                    std::to_string(config.min_pairs) + " valid frames");
  }

  int t0 = 0, r0 = 0;
  const auto ts = detail::speed_signal(test, t0);
  const auto rs = detail::speed_signal(reference, r0);
  best.xcorr_peak = -std::numeric_limits<double>::infinity();
  for (int step = 0; step <= 2 * config.window; ++step) {
    const int lag = (step % 2 == 0) ? step / 2 : -(step + 1) / 2;
    const double c = detail::speed_correlation(ts, t0, rs, r0, lag);
    if (c > best.xcorr_peak) {
      best.xcorr_peak = c;
      best.xcorr_lag = lag;
    }
  }
  if (!std::isfinite(best.xcorr_peak)) best.xcorr_peak = 0.0;
  return best;
}

/// RMS translation and geodesic rotation discrepancies over the frames valid
/// in both trajectories under `alignment`.
inline DiscrepancyReport compute_rmsd(const Trajectory& test, const Trajectory& reference,
                                      const AlignmentResult& alignment) {
  const auto ref = detail::valid_by_index(reference);
  const auto pairs = detail::pairs_at_lag(test, ref, alignment.lag);
  if (pairs.empty()) throw Error(ErrorCode::NoValidFrames, "no frame is valid in both trajectories");

  DiscrepancyReport r;
  double st = 0.0, sr = 0.0;
  for (const auto& p : pairs) {
    const Pose mapped = compose(alignment.static_transform, *p.test);
    FrameDiscrepancy d;
    d.frame_index = p.frame_index;
    d.translation = (mapped.translation - p.ref->translation).norm();
    d.rotation = geodesic_angle(mapped.rotation, p.ref->rotation);
    st += d.translation * d.translation;
    sr += d.rotation * d.rotation;
    r.per_frame.push_back(d);
  }
  const double n = static_cast<double>(pairs.size());
  r.translation_rmsd = std::sqrt(st / n);
  r.rotation_rmsd = std::sqrt(sr / n);
  r.compared_frames = pairs.size();
  r.failure_rate = test.failure_rate();
  r.reference_failure_rate = reference.failure_rate();
  return r;
}

// ---------------------------------------------------------------------------
// Log-space statistics
// ---------------------------------------------------------------------------

struct LogStats {
  double geometric_mean = 0.0;
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double iqr_ratio = 1.0;  ///< exp(Q3 - Q1) of the log values
};

/// Linear-interpolation quantile of sorted data (position p * (n - 1)).
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw Error(ErrorCode::NoValidFrames, "quantile of an empty series");
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline LogStats log_space_stats(const std::vector<double>& values) {
  if (values.empty()) throw Error(ErrorCode::NoValidFrames, "statistics of an empty series");
  std::vector<double> logs;
  logs.reserve(values.size());
  double sum = 0.0;
  for (double v : values) {
    if (!(v > 0.0) || !std::isfinite(v)) throw Error(ErrorCode::NonPositiveValue, "log-space statistics need positive values");
    logs.push_back(std::log(v));
    sum += logs.back();
  }
  std::sort(logs.begin(), logs.end());
  LogStats s;
  s.geometric_mean = std::exp(sum / static_cast<double>(logs.size()));
  s.median = std::exp(quantile_sorted(logs, 0.5));
  const double l1 = quantile_sorted(logs, 0.25);
  const double l3 = quantile_sorted(logs, 0.75);
  s.q1 = std::exp(l1);
  s.q3 = std::exp(l3);
  s.iqr_ratio = std::exp(l3 - l1);
  return s;
}

// ---------------------------------------------------------------------------
// Pose-binned analysis
// ---------------------------------------------------------------------------

enum class Dof { sway, surge, heave, roll, pitch, yaw };
inline constexpr std::array<Dof, 6> kAllDofs{Dof::sway, Dof::surge, Dof::heave, Dof::roll, Dof::pitch, Dof::yaw};

inline std::string_view to_string(Dof d) {
  switch (d) {
    case Dof::sway: return "sway";
    case Dof::surge: return "surge";
    case Dof::heave: return "heave";
    case Dof::roll: return "roll";
    case Dof::pitch: return "pitch";
    case Dof::yaw: return "yaw";
  }
  return "unknown";
}

/// Sway/heave/surge are the x/y/z position (mm) in the reference frame;
/// roll/pitch/yaw (degrees) come from the yaw-pitch-roll decomposition.
inline double dof_value(const Pose& p, Dof d) {
  switch (d) {
    case Dof::sway: return p.translation.x();
    case Dof::heave: return p.translation.y();
    case Dof::surge: return p.translation.z();
    case Dof::roll: return to_euler(p.rotation).roll;
    case Dof::pitch: return to_euler(p.rotation).pitch;
    case Dof::yaw: return to_euler(p.rotation).yaw;
  }
  return 0.0;
}

struct DofBins {
  Dof dof = Dof::sway;
  double lo = 0.0;
  double hi = 0.0;
  std::vector<double> centers;
  std::vector<std::size_t> counts;
  std::vector<double> translation;  ///< normalized mean per bin, NaN when empty
  std::vector<double> rotation;
};

struct PoseBinnedReport {
  std::array<DofBins, 6> dofs;
  double translation_normalization = 1.0;  ///< geometric mean of per-frame translation discrepancy
  double rotation_normalization = 1.0;
  std::size_t included_frames = 0;
};

struct BinningConfig {
  int bins_per_dof = 11;
  double floor = 1e-12;  ///< discrepancies below this count as this value in the geometric mean
};

/// Bins the mutually valid frames by each reference DOF over its observed
/// range and averages the per-frame discrepancies per bin, normalized by the
/// geometric mean of the whole series.
inline PoseBinnedReport pose_binned_analysis(const Trajectory& test, const Trajectory& reference,
                                             const AlignmentResult& alignment, const BinningConfig& config = {}) {
  if (config.bins_per_dof < 1) throw Error(ErrorCode::InvalidArgument, "need at least one bin per DOF");
  const DiscrepancyReport d = compute_rmsd(test, reference, alignment);
  const auto ref = detail::valid_by_index(reference);

  std::vector<double> tvals, rvals;
  for (const auto& f : d.per_frame) {
    tvals.push_back(std::max(f.translation, config.floor));
    rvals.push_back(std::max(f.rotation, config.floor));
  }
  PoseBinnedReport out;
  out.translation_normalization = log_space_stats(tvals).geometric_mean;
  out.rotation_normalization = log_space_stats(rvals).geometric_mean;
  out.included_frames = d.per_frame.size();

  const auto nb = static_cast<std::size_t>(config.bins_per_dof);
  for (std::size_t k = 0; k < kAllDofs.size(); ++k) {
    DofBins& b = out.dofs[k];
    b.dof = kAllDofs[k];
    std::vector<double> vals;
    for (const auto& f : d.per_frame) vals.push_back(dof_value(*ref.at(f.frame_index + alignment.lag), b.dof));
    b.lo = *std::min_element(vals.begin(), vals.end());
    b.hi = *std::max_element(vals.begin(), vals.end());
    const double width = (b.hi - b.lo) / static_cast<double>(nb);
    b.counts.assign(nb, 0);
    std::vector<double> ts(nb, 0.0), rs(nb, 0.0);
    for (std::size_t i = 0; i < vals.size(); ++i) {
      std::size_t bin = nb / 2;
      if (width > 0.0) bin = std::min(nb - 1, static_cast<std::size_t>((vals[i] - b.lo) / width));
      ++b.counts[bin];
      ts[bin] += d.per_frame[i].translation;
      rs[bin] += d.per_frame[i].rotation;
    }
    for (std::size_t j = 0; j < nb; ++j) {
      b.centers.push_back(width > 0.0 ? b.lo + (static_cast<double>(j) + 0.5) * width : b.lo);
      const double c = static_cast<double>(b.counts[j]);
      const double nan = std::numeric_limits<double>::quiet_NaN();
      b.translation.push_back(b.counts[j] ? ts[j] / c / out.translation_normalization : nan);
      b.rotation.push_back(b.counts[j] ? rs[j] / c / out.rotation_normalization : nan);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frame exclusion
// ---------------------------------------------------------------------------

struct ExclusionResult {
  Trajectory trajectory;
  std::size_t excluded = 0;
  std::size_t included = 0;
};

/// Drops the frames whose index is listed; indices absent from the
/// trajectory are ignored.
inline ExclusionResult exclude_frames(const Trajectory& t, const std::set<int>& frame_indices) {
  ExclusionResult r;
  r.trajectory.method = t.method;
  for (const auto& f : t.frames) {
    if (frame_indices.count(f.frame_index) != 0) {
      ++r.excluded;
    } else {
      r.trajectory.frames.push_back(f);
    }
  }
  r.included = r.trajectory.frames.size();
  return r;
}

}  // namespace headtrack
