#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "vokit/error.hpp"
#include "vokit/geometry.hpp"
#include "vokit/noise_estimation.hpp"
#include "vokit/stereo_rig.hpp"

namespace vokit {

using Matrix34 = Eigen::Matrix<double, 3, 4>;

/// 3D point in the left keyframe camera with its first-order covariance.
struct TriangulatedPoint {
  Vector3 p = Vector3::Zero();
  Matrix3 cov = Matrix3::Zero();
};

enum class JacobianMode { kAnalytic, kFiniteDifference };

inline constexpr double kMaxTriangulationCondition = 1e12;

namespace detail {

struct LinearTriangulation {
  Eigen::Matrix<double, 6, 3> a;
  Eigen::Matrix<double, 6, 1> b;
  Eigen::LLT<Matrix3> normal;
  Vector3 p;
};

// Stacks y^ p = 0 and x^ R0^T (p - t0) = 0 into A p = b and solves the
// normal equations.
inline LinearTriangulation SolveLinear(const NormalizedPoint2& x, const NormalizedPoint2& y,
                                       const StereoRig& rig) {
  const Matrix3 r0t = rig.extrinsics.rotation.transpose();
  const Matrix3 sx = Skew(Homogeneous(x));
  LinearTriangulation out;
  out.a.topRows<3>() = Skew(Homogeneous(y));
  out.a.bottomRows<3>() = sx * r0t;
  out.b.head<3>().setZero();
  out.b.tail<3>() = sx * r0t * rig.extrinsics.translation;

  const Matrix3 ata = out.a.transpose() * out.a;
  const Vector3 ev = Eigen::SelfAdjointEigenSolver<Matrix3>(ata, Eigen::EigenvaluesOnly)
                         .eigenvalues();
  if (!(ev(0) > 0.0) || ev(2) / ev(0) > kMaxTriangulationCondition) {
    throw Error(ErrorCode::kDegenerateGeometry, "triangulation normal matrix is rank deficient");
  }
  out.normal.compute(ata);
  out.p = out.normal.solve(out.a.transpose() * out.b);
  return out;
}

}  // namespace detail

/// Linear least-squares stereo triangulation, p = (A^T A)^-1 A^T b.
/// `x` is the right-image observation, `y` the left-image observation.
inline Vector3 Triangulate(const NormalizedPoint2& x, const NormalizedPoint2& y,
                           const StereoRig& rig) {
  return detail::SolveLinear(x, y, rig).p;
}

/// Jacobian of Triangulate() w.r.t. (eps_x1, eps_x2, eps_y1, eps_y2).
///
/// Obtained by differentiating A^T A p = A^T b:
///   dp = (A^T A)^-1 (dA^T (b - A p) + A^T (db - dA p)).
inline Matrix34 TriangulationJacobian(const NormalizedPoint2& x, const NormalizedPoint2& y,
                                      const StereoRig& rig,
                                      JacobianMode mode = JacobianMode::kAnalytic) {
  if (mode == JacobianMode::kFiniteDifference) {
    constexpr double kStep = 1e-6;
    Matrix34 j;
    for (int k = 0; k < 4; ++k) {
      Vector2 dx = Vector2::Zero(), dy = Vector2::Zero();
      (k < 2 ? dx : dy)(k % 2) = kStep;
      j.col(k) = (Triangulate(x + dx, y + dy, rig) - Triangulate(x - dx, y - dy, rig)) /
                 (2.0 * kStep);
    }
    return j;
  }

  const auto sol = detail::SolveLinear(x, y, rig);
  const Matrix3 r0t = rig.extrinsics.rotation.transpose();
  const Eigen::Matrix<double, 6, 1> resid = sol.b - sol.a * sol.p;
  Matrix34 j;
  for (int k = 0; k < 4; ++k) {
    Eigen::Matrix<double, 6, 3> da = Eigen::Matrix<double, 6, 3>::Zero();
    Eigen::Matrix<double, 6, 1> db = Eigen::Matrix<double, 6, 1>::Zero();
    const Matrix3 se = Skew(Vector3::Unit(k % 2));  // the homogeneous 1 has no derivative
    if (k < 2) {
      da.bottomRows<3>() = se * r0t;
      db.tail<3>() = se * r0t * rig.extrinsics.translation;
    } else {
      da.topRows<3>() = se;
    }
    const Vector3 rhs = da.transpose() * resid + sol.a.transpose() * (db - da * sol.p);
    j.col(k) = sol.normal.solve(rhs);
  }
  return j;
}

/// Triangulation with Sigma_p = J (sigma2 I4) J^T.
inline TriangulatedPoint TriangulateWithCov(const NormalizedPoint2& x, const NormalizedPoint2& y,
                                            const StereoRig& rig, const NoiseModel& noise) {
  TriangulatedPoint out;
  out.p = Triangulate(x, y, rig);
  const Matrix34 j = TriangulationJacobian(x, y, rig);
  out.cov = j * ObservationCovariance(noise) * j.transpose();
  out.cov = 0.5 * (out.cov + out.cov.transpose());
  return out;
}

}  // namespace vokit
