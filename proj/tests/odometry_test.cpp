#include <gtest/gtest.h>

#include "vokit/odometry.hpp"

using namespace vokit;

namespace {

SceneConfig Clean(TrajectoryKind kind, int frames) {
  SceneConfig cfg;
  cfg.trajectory = kind;
  cfg.n_frames = frames;
  cfg.noise_sigma_px = 0.0;
  cfg.outlier_ratio = 0.0;
  cfg.circle_loop_frames = 500;
  return cfg;
}

PipelineConfig Policy(KfPolicy p, int m = 1) {
  PipelineConfig c;
  c.policy = p;
  c.m = m;
  return c;
}

KeyframePoint PointWithId(int id, const Vector3& p) {
  KeyframePoint kp;
  kp.point_id = id;
  kp.point.p = p;
  kp.point.cov = Matrix3::Identity() * 0.01 * (id + 1);
  return kp;
}

}  // namespace

TEST(RunOdometry, ExactOnNoiseFreeScene) {
  for (auto kind : {TrajectoryKind::kLine, TrajectoryKind::kCircle}) {
    const Scene scene = GenerateScene(Clean(kind, 25));
    for (const auto& pc : {Policy(KfPolicy::kLatest), Policy(KfPolicy::kMultiKeyframe, 3),
                           Policy(KfPolicy::kLatestPlusBa)}) {
      const auto res = RunOdometry(pc, scene);
      EXPECT_EQ(res.dropped_frames, 0);
      EXPECT_LT(res.metrics.ate_t, 1e-6) << ToString(pc.policy);
      EXPECT_LT(res.metrics.rpe_r, 1e-4) << ToString(pc.policy);
    }
  }
}

TEST(RunOdometry, SingleKeyframeMultiEqualsLatest) {
  SceneConfig cfg = Clean(TrajectoryKind::kCircle, 30);
  cfg.noise_sigma_px = 1.0;
  cfg.outlier_ratio = 0.02;
  const Scene scene = GenerateScene(cfg);
  const auto a = RunOdometry(Policy(KfPolicy::kLatest), scene);
  const auto b = RunOdometry(Policy(KfPolicy::kMultiKeyframe, 1), scene);
  ASSERT_EQ(a.estimated.size(), b.estimated.size());
  for (std::size_t k = 0; k < a.estimated.size(); ++k) {
    EXPECT_EQ(a.estimated[k].matrix(), b.estimated[k].matrix());
  }
}

TEST(RunOdometry, NoisyRunStaysBounded) {
  SceneConfig cfg = Clean(TrajectoryKind::kLine, 60);
  cfg.noise_sigma_px = 1.0;
  cfg.outlier_ratio = 0.02;
  const auto res = RunOdometry(Policy(KfPolicy::kLatest), GenerateScene(cfg));
  EXPECT_EQ(res.dropped_frames, 0);
  EXPECT_GT(res.metrics.rpe_t, 0.005);
  EXPECT_LT(res.metrics.rpe_t, 0.2);
  EXPECT_LT(res.metrics.rpe_r, 0.3);
  for (const auto& f : res.frames) {
    if (f.frame == 0) continue;
    EXPECT_EQ(f.status, "ok");
    EXPECT_NEAR(f.sigma_px, 1.0, 0.35);
  }
}

TEST(RunOdometry, BaInsertsKeyframesOnInterval) {
  SceneConfig cfg = Clean(TrajectoryKind::kLine, 14);
  const auto res = RunOdometry(Policy(KfPolicy::kLatestPlusBa), GenerateScene(cfg));
  for (const auto& f : res.frames) {
    EXPECT_EQ(f.keyframe, f.frame % 3 == 0 || f.frame == 13) << f.frame;
  }
  EXPECT_EQ(res.ba_runs, 5);
}

TEST(FuseMultiKfPoints, OlderPoseErrorShiftsPoints) {
  // An older keyframe whose pose is off by 1 degree carries a point 20 m ahead
  // into the latest keyframe displaced by about 20 sin(1 deg).
  KeyframeState old_kf, latest;
  old_kf.world_pose = {ExpSO3(Vector3(0, Deg2Rad(1.0), 0)), Vector3::Zero()};
  latest.world_pose = RigidTransform::Identity();
  old_kf.points = {PointWithId(0, Vector3(0, 0, 20)), PointWithId(1, Vector3(1, 0, 10))};
  latest.points = {PointWithId(1, Vector3(1, 0, 10)), PointWithId(2, Vector3(0, 1, 5))};
  const std::vector<KeyframeState> kfs{old_kf, latest};

  const auto first = FuseMultiKfPoints(kfs, 2);
  ASSERT_EQ(first.size(), 3u);
  EXPECT_EQ(first[0].point_id, 0);
  EXPECT_NEAR((first[0].point.p - Vector3(0, 0, 20)).norm(), 20 * 2 * std::sin(Deg2Rad(0.5)), 1e-9);
  EXPECT_NEAR((first[0].point.p - Vector3(0, 0, 20)).norm(), 0.35, 0.005);
  // Shared id 1 comes from the older keyframe, covariance rotated only.
  EXPECT_EQ(first[1].point_id, 1);
  EXPECT_EQ(first[1].keyframe, 0u);
  EXPECT_NEAR(first[1].point.cov.trace(), 0.06, 1e-12);

  const auto all = FuseMultiKfPoints(kfs, 2, FusionMode::kAllKeyframes);
  EXPECT_EQ(all.size(), 4u);
  const auto only_latest = FuseMultiKfPoints(kfs, 1);
  ASSERT_EQ(only_latest.size(), 2u);
  EXPECT_EQ(only_latest[0].point.p, Vector3(1, 0, 10));
  EXPECT_THROW(FuseMultiKfPoints(kfs, 3), Error);
}

TEST(MakeKeyframe, GateDropsStereoMismatches) {
  SceneConfig cfg = Clean(TrajectoryKind::kLine, 2);
  cfg.noise_sigma_px = 1.0;
  const Scene scene = GenerateScene(cfg);
  FrameObservations fr = scene.frames[0];
  int planted = 0;
  for (std::size_t i = 0; i < fr.points.size() && planted < 3; ++i) {
    if (!fr.points[i].has_right) continue;
    fr.points[i].left.y() += 20.0 / cfg.rig.focal_px;  // 20 px off the epipolar line
    ++planted;
  }
  const auto kf = MakeKeyframe(fr, cfg.rig, RigidTransform::Identity());
  for (std::size_t i = 0, p = 0; i < fr.points.size() && p < 3; ++i) {
    if (!fr.points[i].has_right) continue;
    ++p;
    for (const auto& kp : kf.points) EXPECT_NE(kp.point_id, fr.points[i].point_id);
  }
  const auto stereo = std::count_if(fr.points.begin(), fr.points.end(), [](const auto& o) { return o.has_right; });
  // A 3-sigma gate on chi2(1) also drops ~0.3% of clean pairs.
  EXPECT_GE(static_cast<double>(kf.points.size()), 0.98 * (stereo - 3));
  EXPECT_FALSE(kf.has_noise());
}

TEST(StereoGate, RobustToContamination) {
  std::vector<double> s2(100, 0.4549364);
  s2[0] = 1e6;
  s2[1] = -1.0;  // degenerate entries are ignored
  EXPECT_NEAR(StereoGate(s2), 9.0, 1e-6);
  EXPECT_EQ(StereoGate(std::vector<double>{}), 0.0);
  EXPECT_EQ(StereoGate(std::vector<double>(10, 0.0)), 1e-14);
}

TEST(PipelineConfig, Validation) {
  PipelineConfig c;
  c.m = 4;
  EXPECT_THROW(c.Validate(), Error);
  c = {};
  c.ba_kf_interval = 7;
  EXPECT_THROW(c.Validate(), Error);
  c = {};
  c.trim_fraction = 1.0;
  EXPECT_THROW(c.Validate(), Error);
}
