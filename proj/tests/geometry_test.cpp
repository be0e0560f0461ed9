#include <gtest/gtest.h>

#include "test_support.hpp"
#include "vokit/geometry.hpp"

using namespace vokit;

TEST(Skew, MatchesDefinition) {
  Matrix3 expected;
  expected << 0, 0, 0, 0, 0, -1, 0, 1, 0;
  EXPECT_TRUE(Skew(Vector3(1, 0, 0)).isApprox(expected));
  EXPECT_TRUE(Skew(Vector3::Zero()).isZero());
  const Vector3 v(0.3, -1.2, 2.0);
  EXPECT_LT((Skew(v) * v).norm(), 1e-15);
}

TEST(Skew, IsCrossProductAndRotationEquivariant) {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const Vector3 v = RandomUnitVector(rng) * 3.0, w = RandomUnitVector(rng);
    const Matrix3 r = RandomRotation(rng, kPi);
    EXPECT_LT((Skew(v) * w - v.cross(w)).norm(), 1e-12);
    EXPECT_LT((Skew(v) + Skew(v).transpose()).norm(), 1e-15);
    EXPECT_LT((Skew(r * v) - r * Skew(v) * r.transpose()).norm(), 1e-9);
  }
}

TEST(Project, DividesByDepth) {
  EXPECT_TRUE(Project(Vector3(0, 0, 5)).isZero());
  EXPECT_TRUE(Project(Vector3(1, 2, 10)).isApprox(Vector2(0.1, 0.2)));
  EXPECT_TRUE(Project(Vector3(0.5, 2, 10)).isApprox(Vector2(0.05, 0.2)));
}

TEST(Project, ScaleInvariantAndRejectsBadDepth) {
  const Vector3 p(0.4, -0.7, 3.0);
  for (double s : {0.01, 1.0, 250.0}) EXPECT_LT((Project(s * p) - Project(p)).norm(), 1e-14);
  EXPECT_THROW(Project(Vector3(1, 1, 0)), Error);
  try {
    Project(Vector3(1, 1, -2));
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonPositiveDepth);
  }
}

TEST(Project, JacobianMatchesFiniteDifferences) {
  const Vector3 p(0.3, -0.2, 4.0);
  const auto j = ProjectJacobian(p);
  for (int k = 0; k < 3; ++k) {
    const Vector3 h = Vector3::Unit(k) * 1e-6;
    const Vector2 fd = (Project(p + h) - Project(p - h)) / 2e-6;
    EXPECT_LT((j.col(k) - fd).norm(), 1e-8);
  }
}

TEST(NearestRotation, ProjectsOntoSO3) {
  EXPECT_TRUE(NearestRotation(Matrix3::Identity()).isApprox(Matrix3::Identity()));
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const Matrix3 r = RandomRotation(rng, kPi);
    EXPECT_LT((NearestRotation(1.7 * r) - r).norm(), 1e-12);
    EXPECT_LT((NearestRotation(r) - r).norm(), 1e-12);  // idempotent
    Matrix3 e = Matrix3::NullaryExpr([&] { return Gaussian(rng, 1.0); });
    e *= 1e-3 / e.norm();
    const Matrix3 q = NearestRotation(r + e);
    EXPECT_TRUE(IsRotation(q));
    EXPECT_LT((q - r).norm(), 2e-3);
  }
  EXPECT_THROW(NearestRotation(Matrix3::Zero()), Error);
}

TEST(RigidTransform, ComposeAndInvert) {
  Rng rng(8);
  const auto a = fixtures::RandomPose(rng), b = fixtures::RandomPose(rng), c = fixtures::RandomPose(rng);
  const Vector3 p(1, -2, 3);
  EXPECT_LT(((a * b) * p - a * (b * p)).norm(), 1e-12);
  EXPECT_LT((((a * b) * c).matrix() - (a * (b * c)).matrix()).norm(), 1e-12);
  EXPECT_LT(((a * a.inverse()).matrix() - Matrix4::Identity()).norm(), 1e-12);
  EXPECT_LT((RigidTransform::FromMatrix(a.matrix()).matrix() - a.matrix()).norm(), 1e-15);
}

TEST(ComposeChain, LeftToRight) {
  EXPECT_TRUE(ComposeChain({}).matrix().isIdentity());
  Rng rng(2);
  const auto t = fixtures::RandomPose(rng);
  const std::vector<RigidTransform> pair{t, t.inverse()};
  EXPECT_LT((ComposeChain(pair).matrix() - Matrix4::Identity()).norm(), 1e-9);
  const std::vector<RigidTransform> shifts{{Matrix3::Identity(), Vector3(0, 0, 1)},
                                           {Matrix3::Identity(), Vector3(0, 0, 2)}};
  EXPECT_TRUE(ComposeChain(shifts).translation.isApprox(Vector3(0, 0, 3)));
}

TEST(EulerPose, RoundTrip) {
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    Vector6 xi;
    xi << Uniform(rng, -kPi + 0.01, kPi - 0.01), Uniform(rng, -kPi / 2 + 0.01, kPi / 2 - 0.01),
        Uniform(rng, -kPi + 0.01, kPi - 0.01), Uniform(rng, -5, 5), Uniform(rng, -5, 5),
        Uniform(rng, -5, 5);
    const EulerPose back = EulerPose::FromTransform(EulerPose(xi).transform());
    EXPECT_LT((back.xi - xi).norm(), 1e-9);
  }
}

TEST(EulerPose, DerivativesMatchFiniteDifferences) {
  const double r = 0.2, p = -0.4, y = 1.1, h = 1e-6;
  const auto d = EulerRotationDerivatives(r, p, y);
  EXPECT_LT((d[0] - (EulerToRotation(r + h, p, y) - EulerToRotation(r - h, p, y)) / (2 * h)).norm(), 1e-8);
  EXPECT_LT((d[1] - (EulerToRotation(r, p + h, y) - EulerToRotation(r, p - h, y)) / (2 * h)).norm(), 1e-8);
  EXPECT_LT((d[2] - (EulerToRotation(r, p, y + h) - EulerToRotation(r, p, y - h)) / (2 * h)).norm(), 1e-8);
}

TEST(RotationAngle, GeodesicAndClamped) {
  EXPECT_NEAR(RotationAngle(ExpSO3(Vector3(0, 0, 0.3))), 0.3, 1e-12);
  EXPECT_NEAR(RotationAngle(ExpSO3(Vector3(kPi, 0, 0))), kPi, 1e-7);
  EXPECT_EQ(RotationAngle(Matrix3::Identity()), 0.0);
}

TEST(StereoRig, PixelRoundTripAndValidation) {
  StereoRig rig;
  const Vector2 px(100.5, 400.25);
  EXPECT_LT((rig.ToPixel(rig.ToNormalized(px)) - px).norm(), 1e-12);
  EXPECT_NO_THROW(rig.Validate());
  rig.extrinsics.translation.setZero();
  EXPECT_THROW(rig.Validate(), Error);
}
