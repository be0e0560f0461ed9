#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "vokit/error.hpp"
#include "vokit/geometry.hpp"
#include "vokit/noise_estimation.hpp"
#include "vokit/random.hpp"
#include "vokit/stereo_rig.hpp"

namespace vokit {

enum class TrajectoryKind { kLine, kCircle };

inline std::string_view ToString(TrajectoryKind k) {
  return k == TrajectoryKind::kLine ? "line" : "circle";
}

struct SceneConfig {
  StereoRig rig;
  double depth_min = 1.0;
  double depth_max = 40.0;
  int visible_min = 100;
  int visible_max = 200;
  double noise_sigma_px = 1.0;
  double outlier_ratio = 0.02;
  std::uint64_t seed = 1;
  TrajectoryKind trajectory = TrajectoryKind::kLine;
  int n_frames = 500;
  double line_step = 1.0;       // m per frame
  double circle_radius = 100.0;  // m
  int circle_loop_frames = 0;    // frames per full loop; 0 means n_frames

  void Validate() const {
    rig.Validate();
    if (!(depth_min > 0.0) || !(depth_max > depth_min)) {
      throw Error(ErrorCode::kInvalidArgument, "depth range must satisfy 0 < min < max");
    }
    if (outlier_ratio < 0.0 || outlier_ratio >= 0.5) {
      throw Error(ErrorCode::kInvalidArgument, "outlier_ratio must be in [0, 0.5)");
    }
    if (noise_sigma_px < 0.0) throw Error(ErrorCode::kInvalidArgument, "noise sigma is negative");
    if (visible_min < 0 || visible_max < visible_min) {
      throw Error(ErrorCode::kInvalidArgument, "visible range is empty");
    }
    if (n_frames < 2) throw Error(ErrorCode::kInvalidArgument, "need at least 2 frames");
  }

  double noise_sigma_normalized() const { return noise_sigma_px / rig.focal_px; }
};

struct PointObservation {
  int point_id = -1;
  NormalizedPoint2 left = NormalizedPoint2::Zero();
  bool has_right = false;
  NormalizedPoint2 right = NormalizedPoint2::Zero();
  bool is_outlier = false;
};

/// Everything one stereo frame sees, sorted by point id.
struct FrameObservations {
  int frame = 0;
  RigidTransform ground_truth;  // camera -> world
  std::vector<PointObservation> points;

  const PointObservation* Find(int point_id) const {
    auto it = std::lower_bound(points.begin(), points.end(), point_id,
                               [](const PointObservation& o, int id) { return o.point_id < id; });
    return (it != points.end() && it->point_id == point_id) ? &*it : nullptr;
  }
};

struct Scene {
  SceneConfig config;
  std::vector<RigidTransform> trajectory;  // camera -> world per frame
  std::vector<Vector3> cloud;              // world points, index == point id
  std::vector<FrameObservations> frames;
};

/// Camera-to-world poses. Line: forward along +z at `line_step` per frame.
/// Circle: constant-speed loop about the camera's vertical (y) axis with the
/// optical axis tangent to the path.
inline std::vector<RigidTransform> GenerateTrajectory(const SceneConfig& config) {
  if (config.n_frames < 2) throw Error(ErrorCode::kInvalidArgument, "need at least 2 frames");
  std::vector<RigidTransform> poses;
  poses.reserve(static_cast<std::size_t>(config.n_frames));
  const int loop = config.circle_loop_frames > 0 ? config.circle_loop_frames : config.n_frames;
  for (int k = 0; k < config.n_frames; ++k) {
    if (config.trajectory == TrajectoryKind::kLine) {
      poses.emplace_back(Matrix3::Identity(), Vector3(0.0, 0.0, config.line_step * k));
    } else {
      const double phi = 2.0 * kPi * k / loop;
      const double r = config.circle_radius;
      poses.emplace_back(Eigen::AngleAxisd(phi, Vector3::UnitY()).toRotationMatrix(),
                         Vector3(r - r * std::cos(phi), 0.0, r * std::sin(phi)));
    }
  }
  return poses;
}

inline bool InFrustum(const Vector3& p_cam, const StereoRig& rig, double dmin, double dmax) {
  return p_cam.z() >= dmin && p_cam.z() <= dmax && rig.InImage(p_cam.head<2>() / p_cam.z());
}

inline int CountVisible(const std::vector<Vector3>& cloud, const RigidTransform& cam_to_world,
                        const SceneConfig& config) {
  const RigidTransform world_to_cam = cam_to_world.inverse();
  int count = 0;
  for (const auto& pw : cloud) {
    if (InFrustum(world_to_cam * pw, config.rig, config.depth_min, config.depth_max)) ++count;
  }
  return count;
}

/// Uniform point cloud over the bounding box of all viewing frusta, with the
/// density chosen so that a frustum holds the midpoint of the visibility
/// target on average. Redrawn (fresh sub-stream per round) until every frame
/// sees between visible_min and visible_max points.
inline std::vector<Vector3> PopulatePoints(const SceneConfig& config,
                                           const std::vector<RigidTransform>& trajectory,
                                           int max_rounds = 100) {
  config.Validate();
  const auto& rig = config.rig;
  const double w = rig.image_size.x(), h = rig.image_size.y(), f = rig.focal_px;
  const double cx = rig.principal_point.x(), cy = rig.principal_point.y();

  Vector3 lo = Vector3::Constant(std::numeric_limits<double>::infinity());
  Vector3 hi = -lo;
  for (const auto& pose : trajectory) {
    for (double d : {config.depth_min, config.depth_max}) {
      for (double u : {0.0, w}) {
        for (double v : {0.0, h}) {
          const Vector3 corner = pose * Vector3((u - cx) / f * d, (v - cy) / f * d, d);
          lo = lo.cwiseMin(corner);
          hi = hi.cwiseMax(corner);
        }
      }
    }
  }
  lo.array() -= 1.0;
  hi.array() += 1.0;

  const double frustum_volume = (w * h) / (f * f) *
      (std::pow(config.depth_max, 3) - std::pow(config.depth_min, 3)) / 3.0;
  const double target = 0.5 * (config.visible_min + config.visible_max);
  const double density = target / frustum_volume;
  const auto n_points = static_cast<std::size_t>(std::llround(density * (hi - lo).prod()));

  for (int round = 0; round < max_rounds; ++round) {
    Rng rng = MakeRng(config.seed, stream::kCloud, static_cast<std::uint64_t>(round));
    std::vector<Vector3> cloud(n_points);
    for (auto& p : cloud) {
      p = Vector3(Uniform(rng, lo.x(), hi.x()), Uniform(rng, lo.y(), hi.y()),
                  Uniform(rng, lo.z(), hi.z()));
    }
    bool ok = true;
    for (const auto& pose : trajectory) {
      const int c = CountVisible(cloud, pose, config);
      if (c < config.visible_min || c > config.visible_max) {
        ok = false;
        break;
      }
    }
    if (ok) return cloud;
  }
  throw Error(ErrorCode::kDensityUnreachable,
              "no point cloud met the visibility target within " + std::to_string(max_rounds) +
                  " rounds");
}

/// Noisy, outlier-contaminated observations of one frame.
///
/// Left observations exist for every point in the left frustum whose noisy
/// projection stays inside the image; right observations likewise. A rounded
/// `outlier_ratio` fraction of the left observations is replaced by uniform
/// draws over the image.
inline FrameObservations Observe(int frame_index, const RigidTransform& cam_to_world,
                                 const std::vector<Vector3>& cloud, const SceneConfig& config,
                                 Rng& rng) {
  const auto& rig = config.rig;
  const double sigma = config.noise_sigma_normalized();
  const RigidTransform world_to_cam = cam_to_world.inverse();
  FrameObservations out;
  out.frame = frame_index;
  out.ground_truth = cam_to_world;
  for (std::size_t id = 0; id < cloud.size(); ++id) {
    const Vector3 pc = world_to_cam * cloud[id];
    if (!InFrustum(pc, rig, config.depth_min, config.depth_max)) continue;
    PointObservation obs;
    obs.point_id = static_cast<int>(id);
    obs.left = pc.head<2>() / pc.z() + Vector2(Gaussian(rng, sigma), Gaussian(rng, sigma));
    const Vector3 pr = rig.LeftToRight(pc);
    if (InFrustum(pr, rig, config.depth_min, config.depth_max)) {
      obs.right = pr.head<2>() / pr.z() + Vector2(Gaussian(rng, sigma), Gaussian(rng, sigma));
      obs.has_right = rig.InImage(obs.right);
    }
    if (!rig.InImage(obs.left)) continue;
    out.points.push_back(obs);
  }

  const auto n_out = static_cast<std::size_t>(
      std::llround(config.outlier_ratio * static_cast<double>(out.points.size())));
  // Partial Fisher-Yates over indices picks the outlier set.
  std::vector<std::size_t> idx(out.points.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t k = 0; k < n_out && k < idx.size(); ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, idx.size() - 1);
    std::swap(idx[k], idx[pick(rng)]);
    auto& obs = out.points[idx[k]];
    const Vector2 px(Uniform(rng, 0.0, rig.image_size.x()), Uniform(rng, 0.0, rig.image_size.y()));
    obs.left = rig.ToNormalized(px);
    obs.is_outlier = true;
  }
  return out;
}

inline Scene GenerateScene(const SceneConfig& config) {
  config.Validate();
  Scene scene;
  scene.config = config;
  scene.trajectory = GenerateTrajectory(config);
  scene.cloud = PopulatePoints(config, scene.trajectory);
  scene.frames.reserve(scene.trajectory.size());
  for (std::size_t k = 0; k < scene.trajectory.size(); ++k) {
    Rng rng = MakeRng(config.seed, stream::kFrame, k);
    scene.frames.push_back(Observe(static_cast<int>(k), scene.trajectory[k], scene.cloud, config, rng));
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Single relative-pose trial for the estimator consistency study.

struct PnPTrial {
  RigidTransform truth;  // keyframe -> current frame
  std::vector<Vector3> points;       // noise-free, keyframe left camera
  std::vector<StereoPair> stereo;    // noisy keyframe observations
  std::vector<NormalizedPoint2> z;   // noisy current-frame observations
};

struct PnPTrialOptions {
  double max_rotation_deg = 10.0;
  double max_translation_m = 1.0;
};

/// Random relative pose and `n` points, each visible in both keyframe images
/// and the current frame (pixel uniform over the image, depth uniform in range).
inline PnPTrial GeneratePnPTrial(std::size_t n, const SceneConfig& config, Rng& rng,
                                 const PnPTrialOptions& opts = {}) {
  const auto& rig = config.rig;
  const double sigma = config.noise_sigma_normalized();
  PnPTrial trial;
  trial.truth.rotation = RandomRotation(rng, Deg2Rad(opts.max_rotation_deg));
  trial.truth.translation = Vector3(Uniform(rng, -1.0, 1.0), Uniform(rng, -1.0, 1.0),
                                    Uniform(rng, -1.0, 1.0)) * opts.max_translation_m;
  std::size_t attempts = 0;
  while (trial.points.size() < n) {
    if (++attempts > 1000 * n + 10000) {
      throw Error(ErrorCode::kDensityUnreachable, "could not place trial points");
    }
    const Vector2 px(Uniform(rng, 0.0, rig.image_size.x()), Uniform(rng, 0.0, rig.image_size.y()));
    const double depth = Uniform(rng, config.depth_min, config.depth_max);
    const Vector3 p = Homogeneous(rig.ToNormalized(px)) * depth;
    const Vector3 pr = rig.LeftToRight(p);
    const Vector3 pc = trial.truth * p;
    if (!InFrustum(pr, rig, config.depth_min, config.depth_max) ||
        !InFrustum(pc, rig, config.depth_min, config.depth_max)) {
      continue;
    }
    auto noise = [&] { return Vector2(Gaussian(rng, sigma), Gaussian(rng, sigma)); };
    trial.points.push_back(p);
    trial.stereo.push_back({pr.head<2>() / pr.z() + noise(), p.head<2>() / p.z() + noise()});
    trial.z.push_back(pc.head<2>() / pc.z() + noise());
  }
  return trial;
}

// ---------------------------------------------------------------------------
// Line-oriented text dump. One record per line, whitespace separated:
//
//   vokit-scene 1
//   rig <f> <cx> <cy> <width> <height> <R0 row-major x9> <t0 x3>
//   point <id> <x> <y> <z>
//   frame <index> <R row-major x9> <t x3>            (camera -> world)
//   obs <frame> <point id> <lx> <ly> <has_right> <rx> <ry> <is_outlier>
//
// Lines starting with '#' are comments. Numbers use 17 significant digits.

inline void WriteScene(std::ostream& os, const Scene& scene) {
  os << std::setprecision(17);
  os << "vokit-scene 1\n";
  const auto& rig = scene.config.rig;
  os << "rig " << rig.focal_px << ' ' << rig.principal_point.x() << ' ' << rig.principal_point.y()
     << ' ' << rig.image_size.x() << ' ' << rig.image_size.y();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) os << ' ' << rig.extrinsics.rotation(r, c);
  for (int i = 0; i < 3; ++i) os << ' ' << rig.extrinsics.translation(i);
  os << '\n';
  for (std::size_t i = 0; i < scene.cloud.size(); ++i) {
    const auto& p = scene.cloud[i];
    os << "point " << i << ' ' << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
  }
  for (std::size_t k = 0; k < scene.frames.size(); ++k) {
    const auto& fr = scene.frames[k];
    os << "frame " << fr.frame;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) os << ' ' << fr.ground_truth.rotation(r, c);
    for (int i = 0; i < 3; ++i) os << ' ' << fr.ground_truth.translation(i);
    os << '\n';
    for (const auto& o : fr.points) {
      os << "obs " << fr.frame << ' ' << o.point_id << ' ' << o.left.x() << ' ' << o.left.y() << ' '
         << (o.has_right ? 1 : 0) << ' ' << o.right.x() << ' ' << o.right.y() << ' '
         << (o.is_outlier ? 1 : 0) << '\n';
    }
  }
}

/// Reads a dump written by WriteScene(). Only the rig, cloud, trajectory and
/// observations are restored; other SceneConfig fields keep their defaults.
inline Scene ReadScene(std::istream& is) {
  Scene scene;
  std::string line;
  int line_no = 0;
  bool header = false;
  auto fail = [&](const std::string& what) {
    throw Error(ErrorCode::kParse, "scene line " + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (!header) {
      int version = 0;
      if (tag != "vokit-scene" || !(ls >> version) || version != 1) fail("bad header");
      header = true;
      continue;
    }
    if (tag == "rig") {
      auto& rig = scene.config.rig;
      ls >> rig.focal_px >> rig.principal_point.x() >> rig.principal_point.y() >>
          rig.image_size.x() >> rig.image_size.y();
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) ls >> rig.extrinsics.rotation(r, c);
      for (int i = 0; i < 3; ++i) ls >> rig.extrinsics.translation(i);
    } else if (tag == "point") {
      std::size_t id = 0;
      Vector3 p;
      ls >> id >> p.x() >> p.y() >> p.z();
      if (id != scene.cloud.size()) fail("point ids must be consecutive from 0");
      scene.cloud.push_back(p);
    } else if (tag == "frame") {
      FrameObservations fr;
      ls >> fr.frame;
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) ls >> fr.ground_truth.rotation(r, c);
      for (int i = 0; i < 3; ++i) ls >> fr.ground_truth.translation(i);
      if (fr.frame != static_cast<int>(scene.frames.size())) fail("frame indices must be consecutive");
      scene.trajectory.push_back(fr.ground_truth);
      scene.frames.push_back(std::move(fr));
    } else if (tag == "obs") {
      int frame = 0, has_right = 0, outlier = 0;
      PointObservation o;
      ls >> frame >> o.point_id >> o.left.x() >> o.left.y() >> has_right >> o.right.x() >>
          o.right.y() >> outlier;
      if (frame < 0 || frame >= static_cast<int>(scene.frames.size())) fail("obs before its frame");
      o.has_right = has_right != 0;
      o.is_outlier = outlier != 0;
      if (!ls) fail("malformed obs record");
      scene.frames[static_cast<std::size_t>(frame)].points.push_back(o);
      continue;
    } else {
      fail("unknown record '" + tag + "'");
    }
    if (!ls) fail("malformed '" + tag + "' record");
  }
  if (!header) throw Error(ErrorCode::kParse, "missing scene header");
  scene.config.n_frames = static_cast<int>(scene.frames.size());
  return scene;
}

}  // namespace vokit
