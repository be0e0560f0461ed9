#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "vokit/error.hpp"

namespace vokit {

using Vector2 = Eigen::Vector2d;
using Vector3 = Eigen::Vector3d;
using Vector6 = Eigen::Matrix<double, 6, 1>;
using Matrix3 = Eigen::Matrix3d;
using Matrix4 = Eigen::Matrix4d;

/// A point in normalized image coordinates, (u - u0) / f, (v - v0) / f.
using NormalizedPoint2 = Eigen::Vector2d;

inline constexpr double kDepthEpsilon = 1e-6;
inline constexpr double kPi = 3.14159265358979323846;

inline double Deg2Rad(double deg) { return deg * kPi / 180.0; }
inline double Rad2Deg(double rad) { return rad * 180.0 / kPi; }

inline Vector3 Homogeneous(const NormalizedPoint2& x) { return {x.x(), x.y(), 1.0}; }

/// Skew-symmetric matrix such that Skew(v) * w == v.cross(w).
inline Matrix3 Skew(const Vector3& v) {
  Matrix3 m;
  m << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return m;
}

/// Pinhole projection onto the z = 1 plane.
inline NormalizedPoint2 Project(const Vector3& p) {
  if (!(p.z() > kDepthEpsilon)) {
    throw Error(ErrorCode::kNonPositiveDepth, "point depth must exceed 1e-6 m");
  }
  return p.head<2>() / p.z();
}

/// Jacobian of Project() at p (2x3).
inline Eigen::Matrix<double, 2, 3> ProjectJacobian(const Vector3& p) {
  const double iz = 1.0 / p.z();
  Eigen::Matrix<double, 2, 3> j;
  j << iz, 0.0, -p.x() * iz * iz,
       0.0, iz, -p.y() * iz * iz;
  return j;
}

inline bool IsRotation(const Matrix3& r, double tol = 1e-9) {
  return (r.transpose() * r - Matrix3::Identity()).cwiseAbs().maxCoeff() < tol &&
         std::abs(r.determinant() - 1.0) < tol;
}

// Orthogonal Procrustes onto SO(3) with determinant correction.
inline Matrix3 NearestRotation(const Matrix3& m) {
  Eigen::JacobiSVD<Matrix3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  if (svd.singularValues()(2) < 1e-12) {
    throw Error(ErrorCode::kSingularInput, "matrix is (numerically) singular");
  }
  const Matrix3& u = svd.matrixU();
  const Matrix3& v = svd.matrixV();
  Vector3 d(1.0, 1.0, (u * v.transpose()).determinant() < 0.0 ? -1.0 : 1.0);
  return u * d.asDiagonal() * v.transpose();
}

/// Rodrigues formula for exp(skew(w)).
inline Matrix3 ExpSO3(const Vector3& w) {
  const double theta = w.norm();
  const Matrix3 k = Skew(w);
  if (theta < 1e-12) return Matrix3::Identity() + k;
  const double a = std::sin(theta) / theta;
  const double b = (1.0 - std::cos(theta)) / (theta * theta);
  return Matrix3::Identity() + a * k + b * k * k;
}

/// Geodesic angle of a rotation in radians, arccos((tr(R) - 1) / 2).
inline double RotationAngle(const Matrix3& r) {
  const double c = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c);
}

/// Rigid transform acting on points as p -> R p + t.
struct RigidTransform {
  Matrix3 rotation = Matrix3::Identity();
  Vector3 translation = Vector3::Zero();

  RigidTransform() = default;
  RigidTransform(const Matrix3& r, const Vector3& t) : rotation(r), translation(t) {}

  static RigidTransform Identity() { return {}; }

  static RigidTransform FromMatrix(const Matrix4& m) {
    return {m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>()};
  }

  Matrix4 matrix() const {
    Matrix4 m = Matrix4::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.topRightCorner<3, 1>() = translation;
    return m;
  }

  Vector3 operator*(const Vector3& p) const { return rotation * p + translation; }

  /// (a * b)(p) == a(b(p)).
  RigidTransform operator*(const RigidTransform& other) const {
    return {rotation * other.rotation, rotation * other.translation + translation};
  }

  RigidTransform inverse() const {
    const Matrix3 rt = rotation.transpose();
    return {rt, -rt * translation};
  }
};

/// Left-to-right composition; an empty chain is the identity.
inline RigidTransform ComposeChain(std::span<const RigidTransform> poses) {
  RigidTransform out;
  for (const auto& p : poses) out = out * p;
  return out;
}

/// Rotation from intrinsic Z-Y-X Euler angles: R = Rz(yaw) Ry(pitch) Rx(roll).
inline Matrix3 EulerToRotation(double roll, double pitch, double yaw) {
  return (Eigen::AngleAxisd(yaw, Vector3::UnitZ()) *
          Eigen::AngleAxisd(pitch, Vector3::UnitY()) *
          Eigen::AngleAxisd(roll, Vector3::UnitX()))
      .toRotationMatrix();
}

/// Inverse of EulerToRotation(); returns (roll, pitch, yaw).
inline Vector3 RotationToEuler(const Matrix3& r) {
  const double pitch = std::asin(std::clamp(-r(2, 0), -1.0, 1.0));
  const double roll = std::atan2(r(2, 1), r(2, 2));
  const double yaw = std::atan2(r(1, 0), r(0, 0));
  return {roll, pitch, yaw};
}

/// Partial derivatives of EulerToRotation() w.r.t. (roll, pitch, yaw).
inline std::array<Matrix3, 3> EulerRotationDerivatives(double roll, double pitch, double yaw) {
  const Matrix3 rx = Eigen::AngleAxisd(roll, Vector3::UnitX()).toRotationMatrix();
  const Matrix3 ry = Eigen::AngleAxisd(pitch, Vector3::UnitY()).toRotationMatrix();
  const Matrix3 rz = Eigen::AngleAxisd(yaw, Vector3::UnitZ()).toRotationMatrix();
  return {rz * ry * rx * Skew(Vector3::UnitX()),
          rz * ry * Skew(Vector3::UnitY()) * rx,
          Skew(Vector3::UnitZ()) * rz * ry * rx};
}

/// Six-parameter pose: (roll, pitch, yaw) in radians followed by a translation in meters.
struct EulerPose {
  Vector6 xi = Vector6::Zero();

  EulerPose() = default;
  explicit EulerPose(const Vector6& v) : xi(v) {}

  static EulerPose FromTransform(const RigidTransform& t) {
    Vector6 v;
    v.head<3>() = RotationToEuler(t.rotation);
    v.tail<3>() = t.translation;
    return EulerPose(v);
  }

  RigidTransform transform() const {
    return {EulerToRotation(xi(0), xi(1), xi(2)), xi.tail<3>()};
  }
};

}  // namespace vokit
