#pragma once

#include "vokit/error.hpp"
#include "vokit/geometry.hpp"

namespace vokit {

/// Calibrated stereo pair sharing one set of pinhole intrinsics.
///
/// `extrinsics` is the pose of the right camera expressed in the left camera
/// frame, so a point p_r in right-camera coordinates sits at R0 p_r + t0 in
/// the left frame.
struct StereoRig {
  double focal_px = 800.0;
  Vector2 principal_point{320.0, 240.0};
  Eigen::Vector2i image_size{640, 480};
  RigidTransform extrinsics{Matrix3::Identity(), Vector3(0.5, 0.0, 0.0)};

  void Validate() const {
    if (!(focal_px > 0.0)) throw Error(ErrorCode::kInvalidArgument, "focal_px must be positive");
    if (image_size.x() <= 0 || image_size.y() <= 0) {
      throw Error(ErrorCode::kInvalidArgument, "image size must be positive");
    }
    if (!(extrinsics.translation.norm() > 0.0)) {
      throw Error(ErrorCode::kDegenerateRig, "stereo baseline must be nonzero");
    }
  }

  NormalizedPoint2 ToNormalized(const Vector2& pixel) const {
    return (pixel - principal_point) / focal_px;
  }

  Vector2 ToPixel(const NormalizedPoint2& x) const { return x * focal_px + principal_point; }

  bool InImage(const NormalizedPoint2& x) const {
    const Vector2 px = ToPixel(x);
    return px.x() >= 0.0 && px.y() >= 0.0 && px.x() <= image_size.x() &&
           px.y() <= image_size.y();
  }

  /// Left-camera point expressed in right-camera coordinates.
  Vector3 LeftToRight(const Vector3& p_left) const { return extrinsics.inverse() * p_left; }

  /// Essential matrix mapping right observations to left: y^T E x = 0.
  Matrix3 Essential() const { return Skew(extrinsics.translation) * extrinsics.rotation; }
};

}  // namespace vokit
