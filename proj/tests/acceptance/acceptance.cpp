// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//
//   acceptance [--expect-fail N[,N...]] [--workers W]
//
// Exit status is nonzero iff a criterion outside the expected-failure list
// fails (or something throws).

#include <chrono>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vokit/config.hpp"
#include "vokit/evaluation.hpp"
#include "vokit/experiments.hpp"
#include "vokit/noise_estimation.hpp"
#include "vokit/pnp.hpp"
#include "vokit/triangulation.hpp"

using namespace vokit;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string Fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

ExperimentConfig BaseConfig() {
  ExperimentConfig cfg;
  cfg.seed = 20240601;
  return cfg;
}

// ---------------------------------------------------------------------------
// 1, 2: estimator consistency and the bias-elimination effect.

ConsistencyResult& Consistency(int workers) {
  static ConsistencyResult res = [&] {
    ExperimentConfig cfg = BaseConfig();
    cfg.sizes = {30, 60, 120, 240, 480, 960};
    cfg.sigmas_px = {0.5, 1.0};
    return RunConsistency(cfg, 300, workers);
  }();
  return res;
}

Outcome CheckConsistency(int workers) {
  const auto& res = Consistency(workers);
  Outcome o{true, {}};
  for (const auto& s : res.slopes) {
    const bool ok = s.slope >= -0.65 && s.slope <= -0.35;
    o.pass = o.pass && ok;
    o.detail += Fmt("%s@%.1fpx=%.3f ", s.quantity.c_str(), s.sigma_px, s.slope);
  }
  const std::size_t ns = res.cells.size() / 2;
  int ordered = 0;
  for (std::size_t i = 0; i < ns; ++i) {
    const auto& lo = res.cells[i];
    const auto& hi = res.cells[ns + i];
    ordered += hi.rmse_sigma_px > lo.rmse_sigma_px && hi.rmse_rot_deg > lo.rmse_rot_deg &&
               hi.rmse_trans_m > lo.rmse_trans_m;
  }
  int failures = 0;
  for (const auto& c : res.cells) failures += c.failures;
  o.pass = o.pass && ordered == static_cast<int>(ns);
  o.detail += Fmt("sigma-ordered %d/%zu, failed trials %d", ordered, ns, failures);
  return o;
}

Outcome CheckBiasElimination(int workers) {
  const auto& res = Consistency(workers);
  const ConsistencyCell* c240 = nullptr;
  const ConsistencyCell* c960 = nullptr;
  for (const auto& c : res.cells) {
    if (c.sigma_px != 1.0) continue;
    if (c.n == 240) c240 = &c;
    if (c.n == 960) c960 = &c;
  }
  const bool beats = c960->rmse_rot_deg < c960->rmse_rot_biased_deg &&
                     c960->rmse_trans_m < c960->rmse_trans_biased_m;
  const double plateau_r = c960->rmse_rot_biased_deg / c240->rmse_rot_biased_deg;
  const double plateau_t = c960->rmse_trans_biased_m / c240->rmse_trans_biased_m;
  const double shrink_r = c960->rmse_rot_deg / c240->rmse_rot_deg;
  const double shrink_t = c960->rmse_trans_m / c240->rmse_trans_m;
  Outcome o;
  o.pass = beats && plateau_r > 0.7 && plateau_t > 0.7 && shrink_r < 0.6 && shrink_t < 0.6;
  auto verdict = [](bool ok) { return ok ? "ok" : "NO"; };
  o.detail = Fmt(
      "n=960 bias-eliminated vs biased: rot %.4f vs %.4f deg, trans %.4f vs %.4f m [%s]; "
      "biased 960/240 (>0.7): rot %.3f [%s] trans %.3f [%s]; "
      "bias-eliminated 960/240 (<0.6): rot %.3f [%s] trans %.3f [%s]",
      c960->rmse_rot_deg, c960->rmse_rot_biased_deg, c960->rmse_trans_m, c960->rmse_trans_biased_m,
      verdict(beats), plateau_r, verdict(plateau_r > 0.7), plateau_t, verdict(plateau_t > 0.7), shrink_r,
      verdict(shrink_r < 0.6), shrink_t, verdict(shrink_t < 0.6));
  return o;
}

// ---------------------------------------------------------------------------
// 3, 4: keyframe policies over the simulated trajectories.

const std::vector<PolicySummary>& PolicyRuns(int workers) {
  static const std::vector<PolicySummary> s = [&] {
    const ExperimentConfig cfg = BaseConfig();
    const std::vector<TrajectoryKind> trajs{TrajectoryKind::kLine, TrajectoryKind::kCircle};
    const std::vector<std::string> policies{"latest", "two", "three", "latest+ba"};
    return SummarizeRuns(RunPolicies(cfg, trajs, policies, 10, workers), trajs, policies);
  }();
  return s;
}

Outcome CheckKeyframeCoupling(int workers) {
  const auto& s = PolicyRuns(workers);
  Outcome o{true, {}};
  for (auto traj : {TrajectoryKind::kLine, TrajectoryKind::kCircle}) {
    const double l = FindSummary(s, traj, "latest").mean.rpe_t;
    const double two = FindSummary(s, traj, "two").mean.rpe_t;
    const double three = FindSummary(s, traj, "three").mean.rpe_t;
    o.pass = o.pass && two >= 2.0 * l && three >= 2.0 * l;
    o.detail += Fmt("%s RPE(t) latest %.4f two %.4f (x%.2f) three %.4f (x%.2f); ",
                    std::string(ToString(traj)).c_str(), l, two, two / l, three, three / l);
  }
  const double a1 = FindSummary(s, TrajectoryKind::kCircle, "latest").mean.ate_t;
  const double a2 = FindSummary(s, TrajectoryKind::kCircle, "two").mean.ate_t;
  const double a3 = FindSummary(s, TrajectoryKind::kCircle, "three").mean.ate_t;
  o.pass = o.pass && a1 < a2 && a2 < a3;
  o.detail += Fmt("circle ATE(t) latest %.3f two %.3f three %.3f", a1, a2, a3);
  return o;
}

Outcome CheckBundleAdjustment(int workers) {
  const auto& s = PolicyRuns(workers);
  const double circle_without = FindSummary(s, TrajectoryKind::kCircle, "latest").mean.ate_t;
  const double circle_with = FindSummary(s, TrajectoryKind::kCircle, "latest+ba").mean.ate_t;
  const double line_without = FindSummary(s, TrajectoryKind::kLine, "latest").mean.rpe_t;
  const double line_with = FindSummary(s, TrajectoryKind::kLine, "latest+ba").mean.rpe_t;
  Outcome o;
  o.pass = circle_without >= 1.5 * circle_with && line_with <= 1.5 * line_without;
  o.detail = Fmt("circle ATE(t) %.3f -> %.3f (x%.2f); line RPE(t) %.4f -> %.4f (x%.2f)",
                 circle_without, circle_with, circle_without / circle_with, line_without, line_with,
                 line_with / line_without);
  return o;
}

// ---------------------------------------------------------------------------
// 5: unit oracles.

double TriangulationJacobianError() {
  StereoRig rig;
  Rng rng(11);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    Vector3 p;
    Vector3 pr;
    do {
      p = Homogeneous(rig.ToNormalized(Vector2(Uniform(rng, 0, 640), Uniform(rng, 0, 480)))) *
          Uniform(rng, 2, 40);
      pr = rig.LeftToRight(p);
    } while (!rig.InImage(Project(pr)));
    const Vector2 x = Project(pr), y = Project(p);
    const Matrix34 j = TriangulationJacobian(x, y, rig);
    Matrix34 fd;
    const double h = 1e-7;
    for (int k = 0; k < 4; ++k) {
      Eigen::Vector4d d = Eigen::Vector4d::Zero();
      d(k) = h;
      fd.col(k) = (Triangulate(x + d.head<2>(), y + d.tail<2>(), rig) -
                   Triangulate(x - d.head<2>(), y - d.tail<2>(), rig)) / (2 * h);
    }
    worst = std::max(worst, (j - fd).norm() / fd.norm());
  }
  return worst;
}

double CovarianceMcError() {
  StereoRig rig;
  const double sigma = 1.0 / rig.focal_px;
  const Vector3 p(0.4, -0.3, 5.0);
  const Vector2 x = Project(rig.LeftToRight(p)), y = Project(p);
  const Matrix3 cov = TriangulateWithCov(x, y, rig, {sigma * sigma, 0}).cov;
  Rng rng(12);
  const int draws = 50000;
  std::vector<Vector3> samples(draws);
  Vector3 mean = Vector3::Zero();
  for (auto& s : samples) {
    const Vector2 nx(Gaussian(rng, sigma), Gaussian(rng, sigma));
    const Vector2 ny(Gaussian(rng, sigma), Gaussian(rng, sigma));
    s = Triangulate(x + nx, y + ny, rig);
    mean += s;
  }
  mean /= draws;
  Matrix3 mc = Matrix3::Zero();
  for (const auto& s : samples) mc += (s - mean) * (s - mean).transpose();
  mc /= draws - 1.0;
  // Entries relative to their own magnitude; near-zero off-diagonals are
  // judged against the geometric mean of the matching diagonal entries.
  double worst = 0.0;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      const double scale = std::max(std::abs(cov(r, c)), 0.1 * std::sqrt(cov(r, r) * cov(c, c)));
      worst = std::max(worst, std::abs(mc(r, c) - cov(r, c)) / scale);
    }
  }
  return worst;
}

double GMatrixWorstZ() {
  SceneConfig sc;
  Rng rng(13);
  const std::size_t n = 30;
  const auto trial = GeneratePnPTrial(n, sc, rng);
  const double sigma2 = std::pow(sc.noise_sigma_normalized(), 2);
  PnPProblem clean;
  clean.sigma2 = sigma2;
  for (std::size_t i = 0; i < n; ++i) {
    clean.points.push_back(TriangulateWithCov(trial.stereo[i].x, trial.stereo[i].y, sc.rig, {sigma2, n}));
    clean.points.back().p = trial.points[i];
    clean.observations.push_back(trial.z[i]);
  }
  const Vector3 p_bar = Centroid(clean);
  auto design = [&](const std::vector<Vector3>& pts) {
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(2 * n, 11);
    for (std::size_t i = 0; i < n; ++i) {
      const Vector2& z = clean.observations[i];
      const Vector3 dp = pts[i] - p_bar;
      for (int r = 0; r < 2; ++r) {
        const auto row = static_cast<Eigen::Index>(2 * i + r);
        h.block(row, 0, 1, 3) = -z(r) * dp.transpose();
        h.block(row, 3 + 4 * r, 1, 3) = pts[i].transpose();
        h(row, 6 + 4 * r) = 1.0;
      }
    }
    return h;
  };
  const Eigen::MatrixXd h0 = design(trial.points);
  const Matrix11 expected = h0.transpose() * h0 / double(n) + BiasCorrectionMatrix(clean);
  std::vector<Matrix3> roots;
  for (const auto& pt : clean.points) roots.push_back(SqrtPsd(pt.cov));
  const int draws = 10000;
  Matrix11 sum = Matrix11::Zero(), sq = Matrix11::Zero();
  std::vector<Vector3> pts(n);
  for (int d = 0; d < draws; ++d) {
    for (std::size_t i = 0; i < n; ++i) {
      pts[i] = trial.points[i] + roots[i] * Vector3(Gaussian(rng, 1), Gaussian(rng, 1), Gaussian(rng, 1));
    }
    const Eigen::MatrixXd h = design(pts);
    const Matrix11 m = h.transpose() * h / double(n);
    sum += m;
    sq += m.cwiseProduct(m);
  }
  const Matrix11 mean = sum / draws;
  const Matrix11 se = ((sq / draws - mean.cwiseProduct(mean)) / (draws - 1.0)).cwiseMax(0.0).cwiseSqrt();
  double worst = 0.0;
  for (int r = 0; r < 11; ++r) {
    for (int c = 0; c < 11; ++c) {
      const double diff = std::abs(mean(r, c) - expected(r, c));
      if (se(r, c) > 0) {
        worst = std::max(worst, diff / se(r, c));
      } else if (diff > 1e-12 * (1 + std::abs(expected(r, c)))) {
        worst = std::numeric_limits<double>::infinity();
      }
    }
  }
  return worst;
}

// Brute-force metrics: Horn quaternion alignment and 4x4 matrix RPE.
double MetricsError() {
  Rng rng(14);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    std::vector<RigidTransform> gt{RigidTransform::Identity()}, est;
    for (int i = 1; i < 50; ++i) {
      gt.push_back(gt.back() * RigidTransform{RandomRotation(rng, Deg2Rad(5)),
                                              Vector3(Uniform(rng, -1, 1), Uniform(rng, -1, 1), 1)});
    }
    const RigidTransform g{RandomRotation(rng, kPi), Vector3(5, -3, 2)};
    for (const auto& p : gt) {
      est.push_back(g * p * RigidTransform{RandomRotation(rng, Deg2Rad(1)),
                                           Vector3(Gaussian(rng, 0.1), Gaussian(rng, 0.1), Gaussian(rng, 0.1))});
    }
    const std::size_t n = gt.size();
    Vector3 ms = Vector3::Zero(), md = Vector3::Zero();
    for (std::size_t i = 0; i < n; ++i) {
      ms += est[i].translation;
      md += gt[i].translation;
    }
    ms /= double(n);
    md /= double(n);
    Matrix3 s = Matrix3::Zero();
    for (std::size_t i = 0; i < n; ++i) s += (est[i].translation - ms) * (gt[i].translation - md).transpose();
    Eigen::Matrix4d nm;
    nm << s.trace(), s(1, 2) - s(2, 1), s(2, 0) - s(0, 2), s(0, 1) - s(1, 0),
        s(1, 2) - s(2, 1), s(0, 0) - s(1, 1) - s(2, 2), s(0, 1) + s(1, 0), s(2, 0) + s(0, 2),
        s(2, 0) - s(0, 2), s(0, 1) + s(1, 0), s(1, 1) - s(0, 0) - s(2, 2), s(1, 2) + s(2, 1),
        s(0, 1) - s(1, 0), s(2, 0) + s(0, 2), s(1, 2) + s(2, 1), s(2, 2) - s(0, 0) - s(1, 1);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(nm);
    const Eigen::Vector4d q = es.eigenvectors().col(3);
    const Matrix3 r = Eigen::Quaterniond(q(0), q(1), q(2), q(3)).toRotationMatrix();
    double se_t = 0, se_r = 0;
    for (std::size_t i = 0; i < n; ++i) {
      se_t += (r * (est[i].translation - ms) + md - gt[i].translation).squaredNorm();
      const Matrix3 d = (r * est[i].rotation).transpose() * gt[i].rotation;
      se_r += std::pow(std::acos(std::clamp((d.trace() - 1) / 2, -1.0, 1.0)) * 180 / kPi, 2);
    }
    double rt = 0, rr = 0;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      const Matrix4 d = (est[i].matrix().inverse() * est[i + 1].matrix()).inverse() *
                        (gt[i].matrix().inverse() * gt[i + 1].matrix());
      rt += d.topRightCorner<3, 1>().squaredNorm();
      rr += std::pow(std::acos(std::clamp((d.topLeftCorner<3, 3>().trace() - 1) / 2, -1.0, 1.0)) * 180 / kPi, 2);
    }
    const auto m = Evaluate({est, gt});
    worst = std::max({worst, std::abs(m.ate_t - std::sqrt(se_t / n)), std::abs(m.ate_r - std::sqrt(se_r / n)),
                      std::abs(m.rpe_t - std::sqrt(rt / (n - 1))), std::abs(m.rpe_r - std::sqrt(rr / (n - 1)))});
  }
  return worst;
}

Outcome CheckUnitOracles() {
  const double jac = TriangulationJacobianError();
  const double cov = CovarianceMcError();
  const double gz = GMatrixWorstZ();
  const double metrics = MetricsError();
  Outcome o;
  o.pass = jac <= 1e-5 && cov <= 0.15 && gz <= 3.0 && metrics <= 1e-9;
  o.detail = Fmt("jacobian rel err %.2e, covariance max rel dev %.3f, G max |z| %.2f, metrics max diff %.1e",
                 jac, cov, gz, metrics);
  return o;
}

// ---------------------------------------------------------------------------
// 6: robustness to planted outliers.

struct RobustTrial {
  double clean_rot = 0, clean_trans = 0, dirty_rot = 0, dirty_trans = 0;
};

RigidTransform PrefilterAndRefine(const PnPProblem& problem) {
  const auto pre = L1Prefilter(problem, RigidTransform::Identity());
  const auto be = SolveBiasEliminated(pre.problem);
  try {
    return RefineWeightedTls(pre.problem, be).pose;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kDivergedRefinement) throw;
    return RefineWeightedTls(pre.problem, pre.estimate).pose;
  }
}

RobustTrial RunRobustTrial(int t) {
  SceneConfig sc;
  Rng rng = MakeRng(BaseConfig().seed, stream::kTrial, 0x6f75746cULL + t);
  const std::size_t n = 200;
  const auto trial = GeneratePnPTrial(n, sc, rng);
  const NoiseModel noise = EstimateSigma2(trial.stereo, sc.rig);
  PnPProblem problem;
  problem.sigma2 = noise.sigma2;
  for (std::size_t i = 0; i < n; ++i) {
    problem.points.push_back(TriangulateWithCov(trial.stereo[i].x, trial.stereo[i].y, sc.rig, noise));
    problem.observations.push_back(trial.z[i]);
  }
  PnPProblem dirty = problem;
  const auto count = static_cast<std::size_t>(std::llround(0.02 * n));
  for (std::size_t k = 0; k < count; ++k) {
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    dirty.observations[pick(rng)] =
        sc.rig.ToNormalized(Vector2(Uniform(rng, 0, sc.rig.image_size.x()), Uniform(rng, 0, sc.rig.image_size.y())));
  }
  auto errs = [&](const RigidTransform& p) {
    return std::pair{RotationAngle(p.rotation.transpose() * trial.truth.rotation),
                     (p.translation - trial.truth.translation).norm()};
  };
  RobustTrial out;
  std::tie(out.clean_rot, out.clean_trans) = errs(PrefilterAndRefine(problem));
  std::tie(out.dirty_rot, out.dirty_trans) = errs(PrefilterAndRefine(dirty));
  return out;
}

Outcome CheckRobustness(int workers) {
  const int trials = 50;
  const auto res = ParallelMap(trials, workers, [](std::size_t t) { return RunRobustTrial(static_cast<int>(t)); });
  int within = 0;
  double worst = 0;
  for (const auto& r : res) {
    const double ratio = std::max(r.dirty_rot / r.clean_rot, r.dirty_trans / r.clean_trans);
    worst = std::max(worst, ratio);
    within += ratio <= 2.0;
  }
  Outcome o;
  o.pass = within * 10 >= trials * 9;
  o.detail = Fmt("%d/%d trials within 2x of the outlier-free pose error (rotation and translation); worst x%.2f",
                 within, trials, worst);
  return o;
}

// ---------------------------------------------------------------------------
// 7: determinism across worker counts.

Outcome CheckDeterminism() {
  ExperimentConfig cfg = BaseConfig();
  cfg.sizes = {30, 60, 120};
  cfg.scene.n_frames = 40;
  int same = 0, total = 0;
  for (const auto& cmd : KnownCommands()) {
    RunOptions a, b, c;
    a.reps = b.reps = c.reps = 3;
    a.workers = 1;
    b.workers = 4;
    c.workers = 4;
    const auto fa = RunCommand(cmd, cfg, a);
    const auto fb = RunCommand(cmd, cfg, b);
    const auto fc = RunCommand(cmd, cfg, c);
    for (const auto& [name, body] : fa) {
      if (!name.ends_with(".csv")) continue;
      ++total;
      same += fb.contains(name) && fb.at(name) == body && fc.contains(name) && fc.at(name) == body;
    }
  }
  Outcome o;
  o.pass = total > 0 && same == total;
  o.detail = Fmt("%d/%d CSV files byte-identical across reruns with 1 and 4 workers", same, total);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> expected_fail;
  int workers = DefaultWorkers();
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--expect-fail" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string item;
      while (std::getline(ss, item, ',')) expected_fail.insert(std::stoi(item));
    } else if (arg == "--workers" && i + 1 < argc) {
      workers = std::max(1, std::stoi(argv[++i]));
    } else {
      std::fprintf(stderr, "usage: acceptance [--expect-fail N[,N...]] [--workers W]\n");
      return 2;
    }
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"consistency", [&] { return CheckConsistency(workers); }},
      {"bias-elimination", [&] { return CheckBiasElimination(workers); }},
      {"keyframe-coupling", [&] { return CheckKeyframeCoupling(workers); }},
      {"bundle-adjustment", [&] { return CheckBundleAdjustment(workers); }},
      {"unit-oracles", [] { return CheckUnitOracles(); }},
      {"robustness", [&] { return CheckRobustness(workers); }},
      {"determinism", [] { return CheckDeterminism(); }},
  };

  int unexpected = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool expected = expected_fail.contains(id);
    std::printf("criterion %d %-18s %s%s  %s  [%.1fs]\n", id, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL",
                !o.pass && expected ? " (expected)" : "", o.detail.c_str(), secs);
    std::fflush(stdout);
    if (!o.pass && !expected) ++unexpected;
  }
  return unexpected == 0 ? 0 : 1;
}
