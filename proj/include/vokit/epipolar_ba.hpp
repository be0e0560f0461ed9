#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "vokit/error.hpp"
#include "vokit/geometry.hpp"
#include "vokit/stereo_rig.hpp"
#include "vokit/triangulation.hpp"

namespace vokit {

inline constexpr double kDefaultBaDelta = 3e-4;
inline constexpr std::size_t kMinPairMatches = 8;

/// E = t^ R for a transform mapping the first image's camera coordinates into
/// the second's, so that y^T E x = 0 for x in the first and y in the second.
inline Matrix3 EssentialFromPose(const RigidTransform& t) {
  if (!(t.translation.norm() > 1e-12)) {
    throw Error(ErrorCode::kZeroTranslation, "essential matrix needs a nonzero translation");
  }
  return Skew(t.translation) * t.rotation;
}

/// Signed distance of y to the epipolar line l = E x^h, y^h^T l / |l_12|.
inline double EpipolarResidual(const NormalizedPoint2& x, const NormalizedPoint2& y,
                               const Matrix3& e) {
  const Vector3 l = e * Homogeneous(x);
  const double s = l.head<2>().norm();
  if (!(s > 1e-12)) throw Error(ErrorCode::kDegenerateEpipolarLine, "epipolar line is undefined");
  return Homogeneous(y).dot(l) / s;
}

/// One image in a sliding window: `frame` is window-local (0 = oldest keyframe).
struct ImageId {
  int frame = 0;
  bool right = false;

  friend bool operator==(const ImageId&, const ImageId&) = default;
};

/// Matched observations between two window images; x[i] in `first`, y[i] in `second`.
struct ImagePairMatches {
  ImageId first;
  ImageId second;
  std::vector<NormalizedPoint2> x;
  std::vector<NormalizedPoint2> y;

  bool is_stereo() const { return first.frame == second.frame && first.right != second.right; }
};

/// Sliding-window state: poses[k - 1] is xi_k, the transform taking frame k-1
/// camera coordinates to frame k (frame 0 is the gauge-fixed keyframe).
struct WindowGraph {
  std::vector<EulerPose> poses;
  StereoRig rig;
  std::vector<ImagePairMatches> pairs;
  bool optimize_rig_rotation = false;

  int num_frames() const { return static_cast<int>(poses.size()) + 1; }
};

/// Observations of one window image keyed by point id, sorted by id.
struct WindowImage {
  ImageId id;
  std::vector<std::pair<int, NormalizedPoint2>> observations;
};

enum class PairPolicy {
  /// Stereo pair at each keyframe plus every left-left pair.
  kStereoAndLeft,
  /// Every pair of images in the window, including right-image cross pairs
  /// (needed for the baseline to constrain translation scale).
  kAllImages,
};

/// Emits every admissible image pair sharing at least `min_matches` point ids.
/// Only right images of the first and last window frames (the keyframes) are used.
inline std::vector<ImagePairMatches> CollectPairs(const std::vector<WindowImage>& images,
                                                  PairPolicy policy = PairPolicy::kAllImages,
                                                  std::size_t min_matches = kMinPairMatches) {
  int last = 0;
  for (const auto& im : images) last = std::max(last, im.id.frame);
  auto usable = [&](const ImageId& id) { return !id.right || id.frame == 0 || id.frame == last; };

  std::vector<ImagePairMatches> out;
  for (std::size_t a = 0; a < images.size(); ++a) {
    for (std::size_t b = a + 1; b < images.size(); ++b) {
      const WindowImage* ia = &images[a];
      const WindowImage* ib = &images[b];
      if (!usable(ia->id) || !usable(ib->id)) continue;
      const bool stereo = ia->id.frame == ib->id.frame;
      if (policy == PairPolicy::kStereoAndLeft && !stereo && (ia->id.right || ib->id.right)) {
        continue;
      }
      if (stereo && ia->id.right == ib->id.right) continue;
      // Stereo pairs are oriented right -> left; others older -> newer, right before left.
      const bool swap = stereo ? !ia->id.right
                               : (ia->id.frame > ib->id.frame ||
                                  (ia->id.frame == ib->id.frame && !ia->id.right));
      if (swap) std::swap(ia, ib);
      ImagePairMatches m;
      m.first = ia->id;
      m.second = ib->id;
      auto i = ia->observations.begin();
      auto j = ib->observations.begin();
      while (i != ia->observations.end() && j != ib->observations.end()) {
        if (i->first < j->first) {
          ++i;
        } else if (j->first < i->first) {
          ++j;
        } else {
          m.x.push_back(i->second);
          m.y.push_back(j->second);
          ++i;
          ++j;
        }
      }
      if (m.x.size() >= min_matches) out.push_back(std::move(m));
    }
  }
  return out;
}

namespace detail {

// Transforms from window frame 0 (left camera) to every image, plus their
// derivatives with respect to each optimization parameter.
class WindowKinematics {
 public:
  explicit WindowKinematics(const WindowGraph& g) : g_(g) {
    const int nf = g.num_frames();
    x_.resize(nf);
    a_.resize(nf);
    a_inv_.resize(nf);
    x_[0] = Matrix4::Identity();
    a_[0] = Matrix4::Identity();
    for (int k = 1; k < nf; ++k) {
      x_[k] = g.poses[k - 1].transform().matrix();
      a_[k] = x_[k] * a_[k - 1];
    }
    for (int k = 0; k < nf; ++k) a_inv_[k] = RigidTransform::FromMatrix(a_[k]).inverse().matrix();
    rig_inv_ = g.rig.extrinsics.inverse().matrix();
  }

  int num_params() const { return 6 * (g_.num_frames() - 1) + (g_.optimize_rig_rotation ? 3 : 0); }

  Matrix4 Image(const ImageId& id) const {
    return id.right ? Matrix4(rig_inv_ * a_[id.frame]) : a_[id.frame];
  }

  Matrix4 ImageInverse(const ImageId& id) const {
    return RigidTransform::FromMatrix(Image(id)).inverse().matrix();
  }

  // d Image(id) / d param.
  Matrix4 ImageDerivative(const ImageId& id, int param) const {
    const int n_pose = 6 * (g_.num_frames() - 1);
    if (param >= n_pose) {
      if (!id.right) return Matrix4::Zero();
      const Vector3 e = RotationToEuler(g_.rig.extrinsics.rotation);
      const Matrix3 dr = EulerRotationDerivatives(e(0), e(1), e(2))[param - n_pose];
      Matrix4 d = Matrix4::Zero();
      d.topLeftCorner<3, 3>() = dr.transpose();
      d.topRightCorner<3, 1>() = -dr.transpose() * g_.rig.extrinsics.translation;
      return d * a_[id.frame];
    }
    const int m = param / 6 + 1;  // xi_m
    const int c = param % 6;
    if (m > id.frame) return Matrix4::Zero();
    Matrix4 dx = Matrix4::Zero();
    if (c < 3) {
      const Vector6& xi = g_.poses[m - 1].xi;
      dx.topLeftCorner<3, 3>() = EulerRotationDerivatives(xi(0), xi(1), xi(2))[c];
    } else {
      dx(c - 3, 3) = 1.0;
    }
    Matrix4 d = a_[id.frame] * a_inv_[m] * dx * a_[m - 1];
    if (id.right) d = rig_inv_ * d;
    return d;
  }

 private:
  const WindowGraph& g_;
  std::vector<Matrix4> x_, a_, a_inv_;
  Matrix4 rig_inv_;
};

inline Matrix3 EssentialOf(const Matrix4& m) {
  return Skew(m.topRightCorner<3, 1>()) * m.topLeftCorner<3, 3>();
}

inline Matrix3 EssentialDerivative(const Matrix4& m, const Matrix4& dm) {
  return Skew(dm.topRightCorner<3, 1>()) * m.topLeftCorner<3, 3>() +
         Skew(m.topRightCorner<3, 1>()) * dm.topLeftCorner<3, 3>();
}

inline std::size_t NumResiduals(const WindowGraph& g) {
  std::size_t n = 0;
  for (const auto& p : g.pairs) n += p.x.size();
  return n;
}

inline Eigen::VectorXd Residuals(const WindowGraph& g) {
  const WindowKinematics kin(g);
  Eigen::VectorXd r(static_cast<Eigen::Index>(NumResiduals(g)));
  Eigen::Index row = 0;
  for (const auto& pair : g.pairs) {
    const Matrix4 m = kin.Image(pair.second) * kin.ImageInverse(pair.first);
    const Matrix3 e = EssentialOf(m);
    for (std::size_t i = 0; i < pair.x.size(); ++i) r(row++) = EpipolarResidual(pair.x[i], pair.y[i], e);
  }
  return r;
}

inline Eigen::VectorXd ParameterVector(const WindowGraph& g) {
  const int n_pose = 6 * (g.num_frames() - 1);
  Eigen::VectorXd v(n_pose + (g.optimize_rig_rotation ? 3 : 0));
  for (int k = 0; k + 1 < g.num_frames(); ++k) v.segment<6>(6 * k) = g.poses[k].xi;
  if (g.optimize_rig_rotation) v.tail<3>() = RotationToEuler(g.rig.extrinsics.rotation);
  return v;
}

inline WindowGraph WithParameters(const WindowGraph& g, const Eigen::VectorXd& v) {
  WindowGraph out = g;
  for (int k = 0; k + 1 < g.num_frames(); ++k) out.poses[k].xi = v.segment<6>(6 * k);
  if (g.optimize_rig_rotation) {
    const Vector3 e = v.tail<3>();
    out.rig.extrinsics.rotation = EulerToRotation(e(0), e(1), e(2));
  }
  return out;
}

}  // namespace detail

struct EpipolarSystem {
  Eigen::VectorXd residuals;
  Eigen::MatrixXd jacobian;  // residuals x parameters
};

/// Stacked epipolar residuals of every pair and their Jacobian w.r.t. the
/// window parameters (xi_1..xi_{K+1}, then rig Euler angles when enabled).
inline EpipolarSystem EvaluateEpipolarSystem(const WindowGraph& g,
                                             JacobianMode mode = JacobianMode::kAnalytic) {
  const detail::WindowKinematics kin(g);
  const int np = kin.num_params();
  EpipolarSystem sys;
  sys.residuals = detail::Residuals(g);
  sys.jacobian.setZero(sys.residuals.size(), np);

  if (mode == JacobianMode::kFiniteDifference) {
    constexpr double kStep = 1e-7;
    const Eigen::VectorXd v0 = detail::ParameterVector(g);
    for (int p = 0; p < np; ++p) {
      Eigen::VectorXd vp = v0, vm = v0;
      vp(p) += kStep;
      vm(p) -= kStep;
      sys.jacobian.col(p) = (detail::Residuals(detail::WithParameters(g, vp)) -
                             detail::Residuals(detail::WithParameters(g, vm))) /
                            (2.0 * kStep);
    }
    return sys;
  }

  Eigen::Index row0 = 0;
  std::vector<Matrix3> de(static_cast<std::size_t>(np));
  for (const auto& pair : g.pairs) {
    const Matrix4 first_inv = kin.ImageInverse(pair.first);
    const Matrix4 m = kin.Image(pair.second) * first_inv;
    const Matrix3 e = detail::EssentialOf(m);
    for (int p = 0; p < np; ++p) {
      const Matrix4 dm = (kin.ImageDerivative(pair.second, p) -
                          m * kin.ImageDerivative(pair.first, p)) * first_inv;
      de[static_cast<std::size_t>(p)] = detail::EssentialDerivative(m, dm);
    }
    for (std::size_t i = 0; i < pair.x.size(); ++i) {
      const Vector3 xh = Homogeneous(pair.x[i]);
      const Vector3 yh = Homogeneous(pair.y[i]);
      const Vector3 l = e * xh;
      const double s = l.head<2>().norm();
      const double num = yh.dot(l);
      for (int p = 0; p < np; ++p) {
        const Vector3 dl = de[static_cast<std::size_t>(p)] * xh;
        sys.jacobian(row0 + static_cast<Eigen::Index>(i), p) =
            yh.dot(dl) / s - num * l.head<2>().dot(dl.head<2>()) / (s * s * s);
      }
    }
    row0 += static_cast<Eigen::Index>(pair.x.size());
  }
  return sys;
}

inline double EpipolarTlsCost(const WindowGraph& g, double delta) {
  double c = 0.0;
  const auto r = detail::Residuals(g);
  for (Eigen::Index i = 0; i < r.size(); ++i) c += std::min(r(i) * r(i), delta);
  return c;
}

struct BaOptions {
  double delta = kDefaultBaDelta;
  int max_iters = 20;
  double initial_lambda = 1e-4;
  double min_step = 1e-10;
  int max_rejections = 5;
  JacobianMode jacobian = JacobianMode::kAnalytic;
};

struct BaReport {
  WindowGraph graph;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;
  std::vector<double> accepted_costs;  // cost after each accepted step
};

/// Minimizes sum over pairs and matches of rho_delta(Re) with
/// Levenberg-Marquardt. Residuals above the TLS threshold carry no gradient.
inline BaReport OptimizeWindowReport(const WindowGraph& graph, const BaOptions& opts = {}) {
  const bool has_stereo = std::any_of(graph.pairs.begin(), graph.pairs.end(), [](const auto& p) {
    return p.first.right || p.second.right;
  });
  if (!has_stereo) {
    throw Error(ErrorCode::kUnobservable, "window has no pair involving a keyframe right image");
  }
  BaReport rep;
  rep.graph = graph;
  double cost = EpipolarTlsCost(graph, opts.delta);
  if (!std::isfinite(cost)) throw Error(ErrorCode::kDivergedBA, "initial BA cost is not finite");
  rep.initial_cost = cost;
  double lambda = opts.initial_lambda;
  int iter = 0;
  for (; iter < opts.max_iters; ++iter) {
    const auto sys = EvaluateEpipolarSystem(rep.graph, opts.jacobian);
    const Eigen::Index np = sys.jacobian.cols();
    Eigen::MatrixXd jtj = Eigen::MatrixXd::Zero(np, np);
    Eigen::VectorXd jtr = Eigen::VectorXd::Zero(np);
    for (Eigen::Index i = 0; i < sys.residuals.size(); ++i) {
      const double r = sys.residuals(i);
      if (r * r > opts.delta) continue;
      const auto row = sys.jacobian.row(i);
      jtj.selfadjointView<Eigen::Lower>().rankUpdate(row.transpose());
      jtr += row.transpose() * r;
    }
    jtj = jtj.selfadjointView<Eigen::Lower>();

    bool accepted = false, converged = false;
    const Eigen::VectorXd v0 = detail::ParameterVector(rep.graph);
    for (int rejections = 0; rejections < opts.max_rejections; ++rejections) {
      Eigen::MatrixXd a = jtj;
      a.diagonal() += lambda * jtj.diagonal().cwiseMax(1e-12);
      const Eigen::VectorXd step = -a.ldlt().solve(jtr);
      if (!step.allFinite()) break;
      if (step.norm() < opts.min_step) {
        converged = true;
        break;
      }
      WindowGraph candidate = detail::WithParameters(rep.graph, v0 + step);
      double c = 0.0;
      try {
        c = EpipolarTlsCost(candidate, opts.delta);
      } catch (const Error&) {
        c = std::numeric_limits<double>::infinity();
      }
      if (c < cost) {
        rep.graph = std::move(candidate);
        cost = c;
        rep.accepted_costs.push_back(c);
        lambda = std::max(lambda / 10.0, 1e-12);
        accepted = true;
        break;
      }
      lambda *= 10.0;
    }
    if (converged || !accepted) break;
  }
  rep.final_cost = cost;
  rep.iterations = iter;
  return rep;
}

inline WindowGraph OptimizeWindow(const WindowGraph& graph, double delta = kDefaultBaDelta,
                                  int max_iters = 20) {
  BaOptions opts;
  opts.delta = delta;
  opts.max_iters = max_iters;
  return OptimizeWindowReport(graph, opts).graph;
}

}  // namespace vokit
