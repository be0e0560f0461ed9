#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "vokit/error.hpp"
#include "vokit/geometry.hpp"
#include "vokit/triangulation.hpp"

namespace vokit {

using ThetaVector = Eigen::Matrix<double, 11, 1>;
using Matrix11 = Eigen::Matrix<double, 11, 11>;

inline constexpr std::size_t kMinPnPPoints = 6;
inline constexpr double kMaxPnPCondition = 1e12;
inline constexpr double kDefaultPnPDelta = 5e-5;

/// 3D points (with covariances) in the keyframe and their observations in the
/// current frame's left image.
struct PnPProblem {
  std::vector<TriangulatedPoint> points;
  std::vector<NormalizedPoint2> observations;
  /// Matching-noise variance the covariances were built with. The refinement
  /// divides the projected covariances by it so its TLS threshold is expressed
  /// in squared normalized-image units. Zero means "unweighted".
  double sigma2 = 0.0;

  std::size_t size() const { return points.size(); }

  void Validate(std::size_t min_points = kMinPnPPoints) const {
    if (points.size() != observations.size()) {
      throw Error(ErrorCode::kInvalidArgument, "points and observations differ in length");
    }
    if (points.size() < min_points) {
      throw Error(ErrorCode::kTooFewPoints, "need at least " + std::to_string(min_points) +
                                                " points, got " + std::to_string(points.size()));
    }
  }

  PnPProblem Subset(const std::vector<std::size_t>& idx) const {
    PnPProblem out;
    out.sigma2 = sigma2;
    out.points.reserve(idx.size());
    out.observations.reserve(idx.size());
    for (auto i : idx) {
      out.points.push_back(points[i]);
      out.observations.push_back(observations[i]);
    }
    return out;
  }
};

enum class PoseStage { kBiased, kBiasEliminated, kRefined, kL1Prefilter };

inline std::string_view ToString(PoseStage s) {
  switch (s) {
    case PoseStage::kBiased: return "biased";
    case PoseStage::kBiasEliminated: return "bias-eliminated";
    case PoseStage::kRefined: return "refined";
    case PoseStage::kL1Prefilter: return "l1-prefilter";
  }
  return "unknown";
}

/// Pose of the current frame relative to the keyframe: z ~ h(R p + t).
struct PoseEstimate {
  RigidTransform pose;
  PoseStage stage = PoseStage::kBiasEliminated;
  std::vector<bool> inlier_mask;
  double cost = 0.0;
  int iterations = 0;
};

struct DesignSystem {
  Eigen::MatrixXd h;  // 2n x 11
  Eigen::VectorXd d;  // 2n
  Vector3 p_bar = Vector3::Zero();
};

inline Vector3 Centroid(const PnPProblem& problem) {
  Vector3 c = Vector3::Zero();
  for (const auto& pt : problem.points) c += pt.p;
  return c / static_cast<double>(problem.points.size());
}

/// Linear system H theta = d. Row pair i is
/// [-z_i (x) (p_i - p_bar)^T, I_2 (x) [p_i^T, 1]] with d stacking z_i.
inline DesignSystem BuildDesign(const PnPProblem& problem) {
  problem.Validate();
  const auto n = static_cast<Eigen::Index>(problem.size());
  DesignSystem sys;
  sys.p_bar = Centroid(problem);
  sys.h.setZero(2 * n, 11);
  sys.d.resize(2 * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector3& p = problem.points[i].p;
    const NormalizedPoint2& z = problem.observations[i];
    const Vector3 dp = p - sys.p_bar;
    sys.h.block<1, 3>(2 * i, 0) = -z.x() * dp.transpose();
    sys.h.block<1, 3>(2 * i, 3) = p.transpose();
    sys.h(2 * i, 6) = 1.0;
    sys.h.block<1, 3>(2 * i + 1, 0) = -z.y() * dp.transpose();
    sys.h.block<1, 3>(2 * i + 1, 7) = p.transpose();
    sys.h(2 * i + 1, 10) = 1.0;
    sys.d.segment<2>(2 * i) = z;
  }
  return sys;
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues are
/// clamped to zero.
inline Matrix3 SqrtPsd(const Matrix3& s) {
  Eigen::SelfAdjointEigenSolver<Matrix3> es(0.5 * (s + s.transpose()));
  const Vector3 ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

/// Second-moment contribution of 3D-point noise to H^T H / n:
/// G = (1/n) sum G_i^T G_i, G_i = [-z_i (x) S_i, I_2 (x) [S_i, 0]], S_i = Sigma_i^(1/2).
inline Matrix11 BiasCorrectionMatrix(const PnPProblem& problem) {
  problem.Validate();
  Matrix11 g = Matrix11::Zero();
  Eigen::Matrix<double, 6, 11> gi;
  for (std::size_t i = 0; i < problem.size(); ++i) {
    const Matrix3 s = SqrtPsd(problem.points[i].cov);
    const NormalizedPoint2& z = problem.observations[i];
    gi.setZero();
    gi.block<3, 3>(0, 0) = -z.x() * s;
    gi.block<3, 3>(0, 3) = s;
    gi.block<3, 3>(3, 0) = -z.y() * s;
    gi.block<3, 3>(3, 7) = s;
    g.noalias() += gi.transpose() * gi;
  }
  return g / static_cast<double>(problem.size());
}

namespace detail {

inline ThetaVector SolveSymmetric11(const Matrix11& a, const ThetaVector& rhs) {
  Eigen::SelfAdjointEigenSolver<Matrix11> es(0.5 * (a + a.transpose()));
  const auto abs_ev = es.eigenvalues().cwiseAbs();
  const double min_ev = abs_ev.minCoeff();
  if (!(min_ev > 0.0) || abs_ev.maxCoeff() / min_ev > kMaxPnPCondition) {
    throw Error(ErrorCode::kIllConditioned, "PnP normal matrix condition number exceeds 1e12");
  }
  const ThetaVector proj = es.eigenvectors().transpose() * rhs;
  return es.eigenvectors() * proj.cwiseQuotient(es.eigenvalues());
}

}  // namespace detail

/// Ordinary least-squares theta = (H^T H)^-1 H^T d. Written in the 1/n-scaled
/// form so that it coincides exactly with the bias-eliminated solve at G = 0.
inline ThetaVector SolveBiased(const PnPProblem& problem) {
  const auto sys = BuildDesign(problem);
  const double n = static_cast<double>(problem.size());
  const Matrix11 hth = sys.h.transpose() * sys.h / n;
  const ThetaVector htd = sys.h.transpose() * sys.d / n;
  return detail::SolveSymmetric11(hth, htd);
}

/// theta = (H^T H / n - G)^-1 H^T d / n.
inline ThetaVector SolveBiasEliminatedTheta(const PnPProblem& problem) {
  const auto sys = BuildDesign(problem);
  const double n = static_cast<double>(problem.size());
  const Matrix11 hth = sys.h.transpose() * sys.h / n;
  const ThetaVector htd = sys.h.transpose() * sys.d / n;
  return detail::SolveSymmetric11(hth - BiasCorrectionMatrix(problem), htd);
}

/// theta = alpha [r3^T, r1^T, t1, r2^T, t2]^T with alpha = 1 / (r3^T p_bar + t3).
inline ThetaVector ThetaFromPose(const RigidTransform& pose, const Vector3& p_bar) {
  const Matrix3& r = pose.rotation;
  const Vector3& t = pose.translation;
  const double alpha = 1.0 / (r.row(2).dot(p_bar) + t.z());
  ThetaVector theta;
  theta << r.row(2).transpose(), r.row(0).transpose(), t.x(), r.row(1).transpose(), t.y();
  return alpha * theta;
}

/// Pose from a (possibly noisy) theta: the scale is the mean row norm, the
/// rotation is projected onto SO(3), and t3 follows from alpha = 1 / (r3^T p_bar + t3).
inline RigidTransform RecoverPose(const ThetaVector& theta, const Vector3& p_bar) {
  const Vector3 r3 = theta.segment<3>(0);
  const Vector3 r1 = theta.segment<3>(3);
  const Vector3 r2 = theta.segment<3>(7);
  if (!(r3.norm() > 1e-9)) throw Error(ErrorCode::kNegativeScale, "theta scale is zero");
  const double alpha = (r1.norm() + r2.norm() + r3.norm()) / 3.0;
  Matrix3 m;
  m.row(0) = r1.transpose() / alpha;
  m.row(1) = r2.transpose() / alpha;
  m.row(2) = r3.transpose() / alpha;
  // A negative alpha flips every row and therefore the determinant.
  if (!(alpha > 0.0) || !(m.determinant() > 0.0)) {
    throw Error(ErrorCode::kNegativeScale, "recovered scale is not positive");
  }
  const Matrix3 r = NearestRotation(m);
  const Vector3 t(theta(6) / alpha, theta(10) / alpha, 1.0 / alpha - r.row(2).dot(p_bar));
  return {r, t};
}

inline PoseEstimate SolveBiasEliminated(const PnPProblem& problem) {
  PoseEstimate out;
  out.pose = RecoverPose(SolveBiasEliminatedTheta(problem), Centroid(problem));
  out.stage = PoseStage::kBiasEliminated;
  out.inlier_mask.assign(problem.size(), true);
  return out;
}

inline PoseEstimate SolveBiasedPose(const PnPProblem& problem) {
  PoseEstimate out;
  out.pose = RecoverPose(SolveBiased(problem), Centroid(problem));
  out.stage = PoseStage::kBiased;
  out.inlier_mask.assign(problem.size(), true);
  return out;
}

/// Right-multiplied rotation increment, additive translation.
inline RigidTransform ApplyLocalUpdate(const RigidTransform& pose, const Vector6& step) {
  return {pose.rotation * ExpSO3(step.head<3>()), pose.translation + step.tail<3>()};
}

/// Jacobian of h(R p + t) w.r.t. the local update (omega, dt).
inline Eigen::Matrix<double, 2, 6> ReprojectionJacobian(const RigidTransform& pose,
                                                        const Vector3& p) {
  const Vector3 q = pose * p;
  const auto jp = ProjectJacobian(q);
  Eigen::Matrix<double, 2, 6> j;
  j.leftCols<3>() = -jp * pose.rotation * Skew(p);
  j.rightCols<3>() = jp;
  return j;
}

struct RefineOptions {
  double delta = kDefaultPnPDelta;
  int max_iters = 10;
  double initial_lambda = 1e-4;
  double min_step = 1e-10;
  int max_rejections = 5;
};

namespace detail {

// Whitening matrices sigma * Sigma_bar_i^(-1/2), Sigma_bar_i = J_h Sigma_i J_h^T
// evaluated at the initial pose.
inline std::vector<Eigen::Matrix2d> RefinementWeights(const PnPProblem& problem,
                                                      const RigidTransform& init) {
  std::vector<Eigen::Matrix2d> w(problem.size(), Eigen::Matrix2d::Identity());
  if (!(problem.sigma2 > 0.0)) return w;
  for (std::size_t i = 0; i < problem.size(); ++i) {
    const Vector3 q = init * problem.points[i].p;
    if (!(q.z() > kDepthEpsilon)) continue;
    const Eigen::Matrix<double, 2, 3> jh = ProjectJacobian(q) * init.rotation;
    Eigen::Matrix2d sbar = jh * problem.points[i].cov * jh.transpose() / problem.sigma2;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(0.5 * (sbar + sbar.transpose()));
    const Vector2 inv_sqrt = es.eigenvalues().cwiseMax(1e-9).cwiseSqrt().cwiseInverse();
    w[i] = es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose();
  }
  return w;
}

inline double TlsCost(const PnPProblem& problem, const std::vector<Eigen::Matrix2d>& w,
                      const RigidTransform& pose, double delta) {
  double cost = 0.0;
  for (std::size_t i = 0; i < problem.size(); ++i) {
    const Vector3 q = pose * problem.points[i].p;
    if (!(q.z() > kDepthEpsilon)) {
      cost += delta;
      continue;
    }
    const Vector2 r = w[i] * (Project(q) - problem.observations[i]);
    cost += std::min(r.squaredNorm(), delta);
  }
  return cost;
}

}  // namespace detail

/// Weighted PnP refinement under a truncated-least-squares kernel, solved by
/// Levenberg-Marquardt on a 6-dof local parameterization.
///
/// Points whose squared weighted residual exceeds `delta` contribute a constant
/// cost and no gradient. Five consecutive rejected steps end the iteration at
/// the current (best) pose.
inline PoseEstimate RefineWeightedTls(const PnPProblem& problem, const PoseEstimate& init,
                                      const RefineOptions& opts = {}) {
  problem.Validate();
  const auto w = detail::RefinementWeights(problem, init.pose);
  RigidTransform pose = init.pose;
  double cost = detail::TlsCost(problem, w, pose, opts.delta);
  if (!std::isfinite(cost)) {
    throw Error(ErrorCode::kDivergedRefinement, "initial refinement cost is not finite");
  }
  double lambda = opts.initial_lambda;
  int iter = 0;
  for (; iter < opts.max_iters; ++iter) {
    Eigen::Matrix<double, 6, 6> jtj = Eigen::Matrix<double, 6, 6>::Zero();
    Vector6 jtr = Vector6::Zero();
    std::size_t active = 0;
    for (std::size_t i = 0; i < problem.size(); ++i) {
      const Vector3 q = pose * problem.points[i].p;
      if (!(q.z() > kDepthEpsilon)) continue;
      const Vector2 r = w[i] * (Project(q) - problem.observations[i]);
      if (r.squaredNorm() > opts.delta) continue;
      const Eigen::Matrix<double, 2, 6> j = w[i] * ReprojectionJacobian(pose, problem.points[i].p);
      jtj.noalias() += j.transpose() * j;
      jtr.noalias() += j.transpose() * r;
      ++active;
    }
    if (active < 3) {
      if (iter == 0) {
        throw Error(ErrorCode::kDivergedRefinement, "fewer than 3 points inside the TLS threshold");
      }
      break;
    }

    bool accepted = false;
    bool converged = false;
    for (int rejections = 0; rejections < opts.max_rejections; ++rejections) {
      Eigen::Matrix<double, 6, 6> a = jtj;
      a.diagonal() += lambda * jtj.diagonal().cwiseMax(1e-12);
      const Vector6 step = -a.ldlt().solve(jtr);
      if (!step.allFinite()) break;
      if (step.norm() < opts.min_step) {
        converged = true;
        break;
      }
      const RigidTransform candidate = ApplyLocalUpdate(pose, step);
      const double c = detail::TlsCost(problem, w, candidate, opts.delta);
      if (c < cost) {
        pose = candidate;
        cost = c;
        lambda = std::max(lambda / 10.0, 1e-12);
        accepted = true;
        break;
      }
      lambda *= 10.0;
    }
    if (converged || !accepted) break;
  }

  PoseEstimate out;
  out.pose = pose;
  out.stage = PoseStage::kRefined;
  out.cost = cost;
  out.iterations = iter;
  out.inlier_mask.resize(problem.size());
  for (std::size_t i = 0; i < problem.size(); ++i) {
    const Vector3 q = pose * problem.points[i].p;
    out.inlier_mask[i] = q.z() > kDepthEpsilon &&
                         (w[i] * (Project(q) - problem.observations[i])).squaredNorm() <= opts.delta;
  }
  return out;
}

struct L1PrefilterResult {
  PnPProblem problem;             // reduced problem
  std::vector<std::size_t> kept;  // indices into the input problem
  PoseEstimate estimate;          // l1 pose, stage kL1Prefilter
};

inline constexpr std::size_t kMinL1Points = 8;

/// Robust l1 PnP followed by trimming.
///
/// Minimizes sum_i |h(R p_i + t) - z_i|_1 by iteratively reweighted least
/// squares (10 sweeps, weights 1 / max(|r|, 1e-8)) starting at `init`, then
/// drops the ceil(trim_fraction * n) points with the largest reprojection
/// error.
inline L1PrefilterResult L1Prefilter(const PnPProblem& problem, const RigidTransform& init,
                                     double trim_fraction = 0.10, int sweeps = 10) {
  problem.Validate(kMinL1Points);
  if (trim_fraction < 0.0 || trim_fraction >= 1.0) {
    throw Error(ErrorCode::kInvalidArgument, "trim_fraction must be in [0, 1)");
  }
  constexpr double kWeightFloor = 1e-8;
  const std::size_t n = problem.size();

  auto l1_cost = [&](const RigidTransform& pose) {
    double c = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const Vector3 q = pose * problem.points[i].p;
      if (!(q.z() > kDepthEpsilon)) {
        c += 1.0;  // one normalized unit, far beyond any inlier residual
        continue;
      }
      c += (Project(q) - problem.observations[i]).lpNorm<1>();
    }
    return c;
  };

  RigidTransform pose = init;
  double cost = l1_cost(pose);
  int sweep = 0;
  for (; sweep < sweeps; ++sweep) {
    Eigen::Matrix<double, 6, 6> jtwj = Eigen::Matrix<double, 6, 6>::Zero();
    Vector6 jtwr = Vector6::Zero();
    for (std::size_t i = 0; i < n; ++i) {
      const Vector3 q = pose * problem.points[i].p;
      if (!(q.z() > kDepthEpsilon)) continue;
      const Vector2 r = Project(q) - problem.observations[i];
      const Eigen::Matrix<double, 2, 6> j = ReprojectionJacobian(pose, problem.points[i].p);
      for (int k = 0; k < 2; ++k) {
        const double wk = 1.0 / std::max(std::abs(r(k)), kWeightFloor);
        jtwj.noalias() += wk * j.row(k).transpose() * j.row(k);
        jtwr.noalias() += wk * j.row(k).transpose() * r(k);
      }
    }
    Vector6 step = -jtwj.ldlt().solve(jtwr);
    if (!step.allFinite()) break;
    // Backtrack so the l1 objective never increases.
    bool improved = false;
    for (int halving = 0; halving < 10; ++halving) {
      const RigidTransform candidate = ApplyLocalUpdate(pose, step);
      const double c = l1_cost(candidate);
      if (c <= cost) {
        pose = candidate;
        cost = c;
        improved = true;
        break;
      }
      step *= 0.5;
    }
    if (!improved) break;
    if (step.norm() < 1e-12) {
      ++sweep;
      break;
    }
  }

  std::vector<double> err(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vector3 q = pose * problem.points[i].p;
    err[i] = q.z() > kDepthEpsilon ? (Project(q) - problem.observations[i]).norm()
                                   : std::numeric_limits<double>::infinity();
  }
  const auto n_remove =
      static_cast<std::size_t>(std::ceil(trim_fraction * static_cast<double>(n) - 1e-9));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return err[a] < err[b]; });
  std::vector<std::size_t> kept(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_remove));
  std::sort(kept.begin(), kept.end());

  L1PrefilterResult out;
  out.problem = problem.Subset(kept);
  out.kept = std::move(kept);
  out.estimate.pose = pose;
  out.estimate.stage = PoseStage::kL1Prefilter;
  out.estimate.cost = cost;
  out.estimate.iterations = sweep;
  out.estimate.inlier_mask.assign(n, false);
  for (auto i : out.kept) out.estimate.inlier_mask[i] = true;
  return out;
}

}  // namespace vokit
