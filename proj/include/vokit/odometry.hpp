#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "vokit/epipolar_ba.hpp"
#include "vokit/error.hpp"
#include "vokit/evaluation.hpp"
#include "vokit/geometry.hpp"
#include "vokit/noise_estimation.hpp"
#include "vokit/pnp.hpp"
#include "vokit/synthetic_scene.hpp"
#include "vokit/triangulation.hpp"

namespace vokit {

enum class KfPolicy { kLatest, kMultiKeyframe, kLatestPlusBa };

inline std::string_view ToString(KfPolicy p) {
  switch (p) {
    case KfPolicy::kLatest: return "latest";
    case KfPolicy::kMultiKeyframe: return "multi";
    case KfPolicy::kLatestPlusBa: return "latest+BA";
  }
  return "unknown";
}

/// How a point seen in several of the fused keyframes is represented.
enum class FusionMode {
  kFirstObservation,  // one point, triangulated in the oldest keyframe that has it
  kAllKeyframes,      // one entry per keyframe triangulation
};

struct PipelineConfig {
  KfPolicy policy = KfPolicy::kLatest;
  int m = 1;                   // keyframes used for tracking (kMultiKeyframe)
  int ba_window_ofs = 5;       // max ordinary frames between the two window keyframes
  int ba_kf_interval = 3;      // frames between keyframes when BA is on
  double delta_pnp = kDefaultPnPDelta;
  double delta_ba = kDefaultBaDelta;
  double trim_fraction = 0.10;
  int pnp_max_iters = 10;
  int ba_max_iters = 20;
  PairPolicy ba_pairs = PairPolicy::kAllImages;
  FusionMode fusion = FusionMode::kFirstObservation;
  std::size_t min_correspondences = 20;

  void Validate() const {
    if (m < 1 || m > 3) throw Error(ErrorCode::kInvalidArgument, "m must be in {1, 2, 3}");
    if (ba_window_ofs < 0) throw Error(ErrorCode::kInvalidArgument, "ba_window_ofs is negative");
    if (ba_kf_interval < 1 || ba_kf_interval > ba_window_ofs + 1) {
      throw Error(ErrorCode::kInvalidArgument, "ba_kf_interval must be in [1, ba_window_ofs + 1]");
    }
    if (trim_fraction < 0.0 || trim_fraction >= 1.0) {
      throw Error(ErrorCode::kInvalidArgument, "trim_fraction must be in [0, 1)");
    }
  }

  int keyframes_used() const { return policy == KfPolicy::kMultiKeyframe ? m : 1; }
};

struct KeyframePoint {
  int point_id = -1;
  StereoPair obs;
  TriangulatedPoint point;  // covariance is zero until the keyframe's noise is assigned
  Matrix34 jacobian = Matrix34::Zero();
};

struct KeyframeState {
  int frame = 0;
  RigidTransform world_pose;  // estimated camera -> world
  std::vector<KeyframePoint> points;
  double sigma2 = -1.0;       // negative until estimated

  bool has_noise() const { return sigma2 >= 0.0; }
};

inline constexpr double kMaxKeyframeDepth = 1e3;

/// Triangulates every stereo observation of `frame`. Pairs that are
/// degenerate or land behind / absurdly far from the camera are skipped.
// Stereo pairs whose Sampson residual exceeds this many robust sigmas are
// treated as mismatches and never triangulated.
inline constexpr double kStereoGateSigmas = 3.0;

/// Robust (median-based) threshold on r^2/g. r^2/g is ~ sigma^2 chi2(1), whose
/// median is 0.4549 sigma^2.
inline double StereoGate(std::span<const double> s2) {
  std::vector<double> v;
  for (double s : s2) {
    if (s >= 0.0) v.push_back(s);
  }
  if (v.empty()) return 0.0;
  auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  const double sigma2 = *mid / 0.4549364;
  return std::max(kStereoGateSigmas * kStereoGateSigmas * sigma2, 1e-14);
}

inline KeyframeState MakeKeyframe(const FrameObservations& frame, const StereoRig& rig,
                                  const RigidTransform& world_pose) {
  KeyframeState kf;
  kf.frame = frame.frame;
  kf.world_pose = world_pose;
  const Matrix3 e0 = rig.Essential();
  std::vector<double> s2(frame.points.size(), -1.0);
  for (std::size_t i = 0; i < frame.points.size(); ++i) {
    const auto& o = frame.points[i];
    if (o.has_right) s2[i] = SampsonResidual2({o.right, o.left}, e0);
  }
  const double gate = StereoGate(s2);
  for (std::size_t i = 0; i < frame.points.size(); ++i) {
    const auto& o = frame.points[i];
    if (!o.has_right || s2[i] < 0.0 || s2[i] > gate) continue;
    KeyframePoint kp;
    kp.point_id = o.point_id;
    kp.obs = {o.right, o.left};
    try {
      kp.point.p = Triangulate(kp.obs.x, kp.obs.y, rig);
      if (!(kp.point.p.z() > 0.1) || kp.point.p.z() > kMaxKeyframeDepth) continue;
      kp.jacobian = TriangulationJacobian(kp.obs.x, kp.obs.y, rig);
    } catch (const Error&) {
      continue;
    }
    kf.points.push_back(kp);
  }
  return kf;
}

inline void AssignNoise(KeyframeState& kf, const NoiseModel& noise) {
  kf.sigma2 = noise.sigma2;
  for (auto& kp : kf.points) {
    kp.point.cov = kp.jacobian * ObservationCovariance(noise) * kp.jacobian.transpose();
    kp.point.cov = 0.5 * (kp.point.cov + kp.point.cov.transpose());
  }
}

struct FusedPoint {
  TriangulatedPoint point;  // in the latest keyframe's camera frame
  int point_id = -1;
  std::size_t keyframe = 0;  // index into the keyframe span
  std::size_t index = 0;     // index into that keyframe's points
};

/// Points of the latest `m` keyframes expressed in the latest keyframe.
/// Older keyframes go through the chain of estimated poses and their
/// covariances are only rotated (R Sigma R^T); pose uncertainty is not added.
inline std::vector<FusedPoint> FuseMultiKfPoints(std::span<const KeyframeState> kfs, int m,
                                                 FusionMode mode = FusionMode::kFirstObservation) {
  if (m < 1 || static_cast<std::size_t>(m) > kfs.size()) {
    throw Error(ErrorCode::kInvalidArgument, "not enough keyframes to fuse");
  }
  const KeyframeState& latest = kfs.back();
  const RigidTransform world_to_latest = latest.world_pose.inverse();
  std::vector<FusedPoint> out;
  std::unordered_set<int> seen;
  for (std::size_t k = kfs.size() - static_cast<std::size_t>(m); k < kfs.size(); ++k) {
    const bool is_latest = k + 1 == kfs.size();
    const RigidTransform to_latest =
        is_latest ? RigidTransform::Identity() : world_to_latest * kfs[k].world_pose;
    for (std::size_t i = 0; i < kfs[k].points.size(); ++i) {
      const auto& kp = kfs[k].points[i];
      if (mode == FusionMode::kFirstObservation && !seen.insert(kp.point_id).second) continue;
      FusedPoint fp;
      fp.point_id = kp.point_id;
      fp.keyframe = k;
      fp.index = i;
      if (is_latest) {
        fp.point = kp.point;
      } else {
        fp.point.p = to_latest * kp.point.p;
        fp.point.cov = to_latest.rotation * kp.point.cov * to_latest.rotation.transpose();
      }
      out.push_back(fp);
    }
  }
  return out;
}

struct TrackResult {
  PoseEstimate estimate;         // refined, current frame relative to latest keyframe
  RigidTransform bias_eliminated;
  std::size_t n_correspondences = 0;
  std::size_t n_kept = 0;
  double sigma2 = 0.0;
  bool refined_from_prefilter = false;
};

/// Pose of `frame` relative to the latest keyframe: l1 prefilter (from
/// `init`), then the bias-eliminated solve, then weighted TLS refinement.
///
/// The latest keyframe's noise variance is estimated here, on the stereo pairs
/// that survive the prefilter, if it has not been estimated yet.
inline TrackResult TrackFrame(std::span<KeyframeState> kfs, const FrameObservations& frame,
                              const PipelineConfig& config, const StereoRig& rig,
                              const RigidTransform& init) {
  const int m = std::min<int>(config.keyframes_used(), static_cast<int>(kfs.size()));
  auto fused = FuseMultiKfPoints(kfs, m, config.fusion);

  std::vector<std::size_t> corr;  // indices into fused
  PnPProblem problem;
  for (std::size_t i = 0; i < fused.size(); ++i) {
    const auto* obs = frame.Find(fused[i].point_id);
    if (!obs) continue;
    corr.push_back(i);
    problem.points.push_back(fused[i].point);
    problem.observations.push_back(obs->left);
  }
  if (corr.size() < config.min_correspondences) {
    throw Error(ErrorCode::kTooFewPoints,
                "only " + std::to_string(corr.size()) + " correspondences for tracking");
  }

  TrackResult out;
  out.n_correspondences = corr.size();
  const auto pre = L1Prefilter(problem, init, config.trim_fraction);
  out.n_kept = pre.kept.size();

  KeyframeState& latest = kfs.back();
  if (!latest.has_noise()) {
    // Stereo pairs of the latest keyframe for the points the prefilter kept,
    // whichever keyframe supplied their 3D coordinates.
    std::unordered_set<int> kept_ids;
    for (auto k : pre.kept) kept_ids.insert(fused[corr[k]].point_id);
    std::vector<StereoPair> pairs;
    for (const auto& kp : latest.points) {
      if (kept_ids.contains(kp.point_id)) pairs.push_back(kp.obs);
    }
    AssignNoise(latest, EstimateSigma2(pairs, rig));
  }
  out.sigma2 = latest.sigma2;

  fused = FuseMultiKfPoints(kfs, m, config.fusion);
  PnPProblem reduced;
  reduced.sigma2 = latest.sigma2;
  for (auto k : pre.kept) {
    reduced.points.push_back(fused[corr[k]].point);
    reduced.observations.push_back(problem.observations[k]);
  }

  PoseEstimate be = SolveBiasEliminated(reduced);
  out.bias_eliminated = be.pose;
  RefineOptions ropts;
  ropts.delta = config.delta_pnp;
  ropts.max_iters = config.pnp_max_iters;
  try {
    out.estimate = RefineWeightedTls(reduced, be, ropts);
  } catch (const Error& e) {
    // A bias-eliminated pose off by more than the TLS threshold leaves no
    // support; the prefilter pose is the other available starting point.
    if (e.code() != ErrorCode::kDivergedRefinement) throw;
    PoseEstimate start = pre.estimate;
    start.inlier_mask.assign(reduced.size(), true);
    out.estimate = RefineWeightedTls(reduced, start, ropts);
    out.refined_from_prefilter = true;
  }
  return out;
}

struct FrameDiagnostics {
  int frame = 0;
  bool keyframe = false;
  std::string status = "ok";
  std::size_t n_correspondences = 0;
  std::size_t n_kept = 0;
  std::size_t n_inliers = 0;
  double sigma_px = 0.0;
  double rel_t_err = 0.0;      // m, this frame's step vs ground truth
  double rel_r_err_deg = 0.0;
  double abs_t_err = 0.0;      // m, unaligned vs ground truth
  double abs_r_err_deg = 0.0;
};

struct OdometryResult {
  std::vector<RigidTransform> estimated;  // camera -> world
  std::vector<FrameDiagnostics> frames;
  MetricReport metrics;
  int ba_runs = 0;
  int ba_cost_increases = 0;  // stays 0: BA never accepts a worse window
  int dropped_frames = 0;
};

namespace detail {

inline WindowImage MakeWindowImage(const FrameObservations& fr, int local, bool right) {
  WindowImage im;
  im.id = {local, right};
  for (const auto& o : fr.points) {
    if (right && !o.has_right) continue;
    im.observations.emplace_back(o.point_id, right ? o.right : o.left);
  }
  return im;
}

}  // namespace detail

/// Refines the window [first_frame, last_frame] (two keyframes and the
/// ordinary frames between them) and rewrites `world` for the later frames.
inline BaReport RefineWindow(std::vector<RigidTransform>& world, const Scene& scene,
                             int first_frame, int last_frame, const PipelineConfig& config) {
  std::vector<WindowImage> images;
  for (int f = first_frame; f <= last_frame; ++f) {
    const int local = f - first_frame;
    images.push_back(detail::MakeWindowImage(scene.frames[static_cast<std::size_t>(f)], local, false));
    if (f == first_frame || f == last_frame) {
      images.push_back(detail::MakeWindowImage(scene.frames[static_cast<std::size_t>(f)], local, true));
    }
  }
  WindowGraph g;
  g.rig = scene.config.rig;
  g.pairs = CollectPairs(images, config.ba_pairs);
  for (int f = first_frame + 1; f <= last_frame; ++f) {
    const RigidTransform xi = world[static_cast<std::size_t>(f)].inverse() * world[static_cast<std::size_t>(f - 1)];
    g.poses.push_back(EulerPose::FromTransform(xi));
  }
  BaOptions opts;
  opts.delta = config.delta_ba;
  opts.max_iters = config.ba_max_iters;
  BaReport rep = OptimizeWindowReport(g, opts);
  for (int f = first_frame + 1; f <= last_frame; ++f) {
    const auto& xi = rep.graph.poses[static_cast<std::size_t>(f - first_frame - 1)];
    world[static_cast<std::size_t>(f)] = world[static_cast<std::size_t>(f - 1)] * xi.transform().inverse();
  }
  return rep;
}

/// Runs the frame loop over a simulated scene and scores the result.
///
/// Every frame is a keyframe except under kLatestPlusBa, where a keyframe is
/// inserted every `ba_kf_interval` frames and each insertion triggers an
/// epipolar BA over the two latest keyframes and the frames between them.
/// A frame that cannot be tracked keeps the previous relative pose and is
/// reported with a non-"ok" status.
inline OdometryResult RunOdometry(const PipelineConfig& config, const Scene& scene) {
  config.Validate();
  const std::size_t n = scene.frames.size();
  if (n < 2) throw Error(ErrorCode::kInvalidArgument, "scene needs at least 2 frames");
  const auto& rig = scene.config.rig;

  OdometryResult res;
  res.estimated.resize(n);
  res.frames.resize(n);
  res.estimated[0] = scene.trajectory[0];

  const std::size_t keep = static_cast<std::size_t>(config.keyframes_used());
  std::vector<KeyframeState> kfs;
  kfs.push_back(MakeKeyframe(scene.frames[0], rig, res.estimated[0]));
  res.frames[0].keyframe = true;
  RigidTransform prev_rel;  // previous frame relative to the latest keyframe
  const bool with_ba = config.policy == KfPolicy::kLatestPlusBa;

  for (std::size_t k = 1; k < n; ++k) {
    auto& diag = res.frames[k];
    diag.frame = static_cast<int>(k);
    RigidTransform rel = prev_rel;
    try {
      const auto tr = TrackFrame(kfs, scene.frames[k], config, rig, prev_rel);
      rel = tr.estimate.pose;
      diag.n_correspondences = tr.n_correspondences;
      diag.n_kept = tr.n_kept;
      diag.n_inliers = static_cast<std::size_t>(
          std::count(tr.estimate.inlier_mask.begin(), tr.estimate.inlier_mask.end(), true));
      diag.sigma_px = std::sqrt(tr.sigma2) * rig.focal_px;
    } catch (const Error& e) {
      diag.status = std::string("dropped:") + std::string(ToString(e.code()));
      ++res.dropped_frames;
    }
    res.estimated[k] = kfs.back().world_pose * rel.inverse();
    prev_rel = rel;

    const bool is_kf = !with_ba || k % static_cast<std::size_t>(config.ba_kf_interval) == 0 || k + 1 == n;
    if (!is_kf) continue;
    diag.keyframe = true;
    if (with_ba) {
      try {
        const auto rep = RefineWindow(res.estimated, scene, kfs.back().frame, static_cast<int>(k), config);
        ++res.ba_runs;
        if (rep.final_cost > rep.initial_cost) ++res.ba_cost_increases;
      } catch (const Error& e) {
        diag.status += std::string(";ba:") + std::string(ToString(e.code()));
      }
    }
    kfs.push_back(MakeKeyframe(scene.frames[k], rig, res.estimated[k]));
    if (kfs.size() > keep) kfs.erase(kfs.begin(), kfs.end() - static_cast<std::ptrdiff_t>(keep));
    prev_rel = RigidTransform::Identity();
  }

  for (std::size_t k = 0; k < n; ++k) {
    auto& diag = res.frames[k];
    diag.frame = static_cast<int>(k);
    const RigidTransform abs_d = scene.trajectory[k].inverse() * res.estimated[k];
    diag.abs_t_err = (res.estimated[k].translation - scene.trajectory[k].translation).norm();
    diag.abs_r_err_deg = Rad2Deg(RotationAngle(abs_d.rotation));
    if (k > 0) {
      const RigidTransform rel_est = res.estimated[k - 1].inverse() * res.estimated[k];
      const RigidTransform rel_gt = scene.trajectory[k - 1].inverse() * scene.trajectory[k];
      const RigidTransform d = rel_est.inverse() * rel_gt;
      diag.rel_t_err = d.translation.norm();
      diag.rel_r_err_deg = Rad2Deg(RotationAngle(d.rotation));
    }
  }
  res.metrics = Evaluate(TrajectoryPair{res.estimated, scene.trajectory});
  return res;
}

}  // namespace vokit
