#pragma once

#include <span>
#include <utility>

#include "vokit/error.hpp"
#include "vokit/geometry.hpp"
#include "vokit/stereo_rig.hpp"

namespace vokit {

/// Isotropic 2D matching-noise model, variance in normalized units^2.
struct NoiseModel {
  double sigma2 = 0.0;
  std::size_t n_used = 0;

  double sigma() const { return std::sqrt(sigma2); }
};

/// Right/left observation of one stereo correspondence (x right, y left).
struct StereoPair {
  NormalizedPoint2 x;
  NormalizedPoint2 y;
};

inline constexpr std::size_t kMinNoisePairs = 10;

/// Squared Sampson-normalized epipolar residual r^2 / g of one pair, or a
/// negative value when the pair is epipolar-degenerate (g < 1e-12).
inline double SampsonResidual2(const StereoPair& pr, const Matrix3& e0) {
  const Vector3 xh = Homogeneous(pr.x);
  const Vector3 yh = Homogeneous(pr.y);
  const Vector3 ex = e0 * xh;
  const Vector3 ety = e0.transpose() * yh;
  const double g = ex.head<2>().squaredNorm() + ety.head<2>().squaredNorm();
  if (g < 1e-12) return -1.0;
  const double r = yh.dot(ex);
  return r * r / g;
}

/// Consistent first-order estimate of the matching-noise variance from stereo
/// pairs and the known rig.
///
/// Each pair contributes its squared algebraic epipolar residual divided by
/// the residual's first-order variance factor (Sampson normalization):
///   r = y^T E0 x,  g = |[E0 x]_12|^2 + |[E0^T y]_12|^2,  sigma2 = mean(r^2 / g).
/// Pairs with g < 1e-12 are skipped.
inline NoiseModel EstimateSigma2(std::span<const StereoPair> pairs, const StereoRig& rig) {
  if (pairs.size() < kMinNoisePairs) {
    throw Error(ErrorCode::kTooFewPairs, "need at least 10 stereo pairs, got " +
                                             std::to_string(pairs.size()));
  }
  if (rig.extrinsics.translation.norm() < 1e-9) {
    throw Error(ErrorCode::kDegenerateRig, "stereo baseline is zero");
  }
  const Matrix3 e0 = rig.Essential();
  double sum = 0.0;
  std::size_t used = 0;
  for (const auto& pr : pairs) {
    const double s = SampsonResidual2(pr, e0);
    if (s < 0.0) continue;
    sum += s;
    ++used;
  }
  if (used == 0) throw Error(ErrorCode::kTooFewPairs, "all pairs are epipolar-degenerate");
  return {sum / static_cast<double>(used), used};
}

/// Covariance of the stacked 4-vector (eps_x, eps_y).
inline Eigen::Matrix4d ObservationCovariance(const NoiseModel& model) {
  return model.sigma2 * Eigen::Matrix4d::Identity();
}

}  // namespace vokit
