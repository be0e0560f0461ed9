#pragma once

#include <cmath>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "vokit/error.hpp"
#include "vokit/geometry.hpp"

namespace vokit {

/// Estimated and ground-truth camera-to-world poses, index-aligned.
struct TrajectoryPair {
  std::vector<RigidTransform> estimated;
  std::vector<RigidTransform> ground_truth;

  void Validate(std::size_t min_len = 2) const {
    if (estimated.size() != ground_truth.size()) {
      throw Error(ErrorCode::kInvalidArgument, "trajectory lengths differ");
    }
    if (estimated.size() < min_len) {
      throw Error(ErrorCode::kInvalidArgument, "trajectory too short");
    }
  }
};

struct MetricReport {
  double ate_t = 0.0;  // m
  double ate_r = 0.0;  // deg
  double rpe_t = 0.0;  // m
  double rpe_r = 0.0;  // deg
};

struct AteResult {
  double ate_t = 0.0;
  double ate_r = 0.0;
  RigidTransform alignment;  // applied to the estimate: est' = alignment * est
  bool degenerate = false;   // positions (near) collinear; alignment not unique
};

// Second/largest eigenvalue ratio of the position scatter below which the
// positions count as collinear.
inline constexpr double kCollinearRatio = 1e-6;

/// Least-squares rigid alignment (rotation + translation, no scale) mapping
/// `source` positions onto `target`.
inline RigidTransform AlignRigid(std::span<const Vector3> source, std::span<const Vector3> target,
                                 bool* degenerate = nullptr) {
  const auto n = static_cast<double>(source.size());
  Vector3 ms = Vector3::Zero(), mt = Vector3::Zero();
  for (std::size_t i = 0; i < source.size(); ++i) {
    ms += source[i];
    mt += target[i];
  }
  ms /= n;
  mt /= n;
  Matrix3 cov = Matrix3::Zero();
  for (std::size_t i = 0; i < source.size(); ++i) {
    cov += (target[i] - mt) * (source[i] - ms).transpose();
  }
  if (degenerate) {
    // Judged on the target: a drifting estimate of a straight line is never
    // exactly collinear, but the twist about the line is still unconstrained.
    Matrix3 tspread = Matrix3::Zero();
    for (const auto& p : target) tspread += (p - mt) * (p - mt).transpose();
    Eigen::SelfAdjointEigenSolver<Matrix3> es(tspread / n, Eigen::EigenvaluesOnly);
    *degenerate = es.eigenvalues()(1) <= kCollinearRatio * es.eigenvalues()(2);
  }
  Eigen::JacobiSVD<Matrix3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vector3 d(1.0, 1.0, (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? -1.0 : 1.0);
  const Matrix3 r = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
  return {r, mt - r * ms};
}

/// Absolute trajectory error after rigid alignment of the estimated positions.
/// For collinear positions the rotation about the line is not fixed by the
/// positions; it is then chosen in closed form to best align the orientations
/// and the result is flagged as degenerate.
inline AteResult ComputeAte(const TrajectoryPair& pair) {
  pair.Validate();
  std::vector<Vector3> src, dst;
  src.reserve(pair.estimated.size());
  dst.reserve(pair.estimated.size());
  for (std::size_t i = 0; i < pair.estimated.size(); ++i) {
    src.push_back(pair.estimated[i].translation);
    dst.push_back(pair.ground_truth[i].translation);
  }
  AteResult out;
  out.alignment = AlignRigid(src, dst, &out.degenerate);
  if (out.degenerate) {
    // Line direction in the target frame (principal axis of the target positions).
    Vector3 mt = Vector3::Zero(), ms = Vector3::Zero();
    for (std::size_t i = 0; i < src.size(); ++i) {
      mt += dst[i];
      ms += src[i];
    }
    mt /= static_cast<double>(dst.size());
    ms /= static_cast<double>(src.size());
    Matrix3 spread = Matrix3::Zero();
    for (const auto& p : dst) spread += (p - mt) * (p - mt).transpose();
    Eigen::SelfAdjointEigenSolver<Matrix3> es(spread);
    const Vector3 d = es.eigenvectors().col(2);
    // max_phi tr(Rot(d, phi) M), M = sum (R0 R_est) R_gt^T.
    Matrix3 m = Matrix3::Zero();
    for (std::size_t i = 0; i < src.size(); ++i) {
      m += out.alignment.rotation * pair.estimated[i].rotation *
           pair.ground_truth[i].rotation.transpose();
    }
    const double a = m.trace() - d.dot(m * d);
    const double b = (Skew(d) * m).trace();
    const Matrix3 twist = ExpSO3(d * std::atan2(b, a));
    out.alignment.rotation = twist * out.alignment.rotation;
    out.alignment.translation = mt - out.alignment.rotation * ms;
  }
  double se_t = 0.0, se_r = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const RigidTransform aligned = out.alignment * pair.estimated[i];
    se_t += (aligned.translation - dst[i]).squaredNorm();
    const double ang =
        Rad2Deg(RotationAngle(aligned.rotation.transpose() * pair.ground_truth[i].rotation));
    se_r += ang * ang;
  }
  const auto n = static_cast<double>(src.size());
  out.ate_t = std::sqrt(se_t / n);
  out.ate_r = std::sqrt(se_r / n);
  return out;
}

/// Relative pose error over `step` frames:
/// D_i = (est_i^-1 est_{i+s})^-1 (gt_i^-1 gt_{i+s}); RMSE of |trans(D)| and angle(rot(D)).
inline std::pair<double, double> ComputeRpe(const TrajectoryPair& pair, std::size_t step = 1) {
  pair.Validate(step + 1);
  double se_t = 0.0, se_r = 0.0;
  const std::size_t count = pair.estimated.size() - step;
  for (std::size_t i = 0; i < count; ++i) {
    const RigidTransform rel_est = pair.estimated[i].inverse() * pair.estimated[i + step];
    const RigidTransform rel_gt = pair.ground_truth[i].inverse() * pair.ground_truth[i + step];
    const RigidTransform d = rel_est.inverse() * rel_gt;
    se_t += d.translation.squaredNorm();
    const double ang = Rad2Deg(RotationAngle(d.rotation));
    se_r += ang * ang;
  }
  return {std::sqrt(se_t / count), std::sqrt(se_r / count)};
}

inline MetricReport Evaluate(const TrajectoryPair& pair) {
  const auto ate = ComputeAte(pair);
  const auto [rpe_t, rpe_r] = ComputeRpe(pair, 1);
  return {ate.ate_t, ate.ate_r, rpe_t, rpe_r};
}

/// OLS slope of log2(rmse) against log2(n).
inline double LogLogSlope(std::span<const std::pair<double, double>> points) {
  if (points.size() < 3) throw Error(ErrorCode::kInvalidArgument, "need at least 3 points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& [n, rmse] : points) {
    if (!(n > 0.0) || !(rmse > 0.0)) {
      throw Error(ErrorCode::kNonPositiveInput, "log-log fit needs positive values");
    }
    const double x = std::log2(n), y = std::log2(rmse);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double m = static_cast<double>(points.size());
  const double denom = m * sxx - sx * sx;
  if (!(std::abs(denom) > 0.0)) throw Error(ErrorCode::kInvalidArgument, "all n are equal");
  return (m * sxy - sx * sy) / denom;
}

}  // namespace vokit
