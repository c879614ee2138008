#include <abd/spatial.hpp>

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace abd {
namespace {

using testing::dense_cross_motion;
using testing::dense_inertia;
using testing::dense_motion_transform;
using testing::random_force;
using testing::random_inertia;
using testing::random_motion;
using testing::random_transform;

constexpr double kTol = 1e-10;

TEST(SpatialTest, AngularPartComesFirst) {
  Motion v(Vec3(1, 2, 3), Vec3(4, 5, 6));
  Vec6 expected;
  expected << 1, 2, 3, 4, 5, 6;
  EXPECT_EQ(v.vec(), expected);
}

TEST(SpatialTest, IdentityTransformLeavesVectorsUnchanged) {
  std::mt19937_64 rng(1);
  Motion v = random_motion(rng);
  Force f = random_force(rng);
  EXPECT_EQ(transform_motion(SpatialTransform::Identity(), v).vec(), v.vec());
  EXPECT_EQ(transform_force(SpatialTransform::Identity(), f).vec(), f.vec());
}

TEST(SpatialTest, PureTranslationOfPureRotation) {
  Vec3 r(0.3, -1.2, 2.0), w(0.7, 0.1, -0.4);
  Motion out = transform_motion(SpatialTransform::FromTranslation(r), Motion(w, Vec3::Zero()));
  EXPECT_LT((out.angular - w).norm(), kTol);
  EXPECT_LT((out.linear - (-w.cross(r))).norm(), kTol);
}

TEST(SpatialTest, MotionTransformMatchesDenseMatrix) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 100; ++t) {
    SpatialTransform X = random_transform(rng);
    Motion v = random_motion(rng);
    Vec6 dense = dense_motion_transform(X) * v.vec();
    EXPECT_LT((transform_motion(X, v).vec() - dense).norm(), kTol);
  }
}

TEST(SpatialTest, ForceTransformMatchesDenseInverseTranspose) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    SpatialTransform X = random_transform(rng);
    Force f = random_force(rng);
    Vec6 dense = dense_motion_transform(X).inverse().transpose() * f.vec();
    EXPECT_LT((transform_force(X, f).vec() - dense).norm(), kTol);
  }
}

TEST(SpatialTest, PowerInvariantUnderFrameChange) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 1000; ++t) {
    SpatialTransform X = random_transform(rng);
    Motion v = random_motion(rng);
    Force f = random_force(rng);
    EXPECT_NEAR(dot(transform_motion(X, v), transform_force(X, f)), dot(v, f), kTol);
  }
}

TEST(SpatialTest, CompositionMatchesSequentialApplication) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 200; ++t) {
    SpatialTransform X1 = random_transform(rng), X2 = random_transform(rng);
    Motion v = random_motion(rng);
    Motion a = transform_motion(X1 * X2, v);
    Motion b = transform_motion(X1, transform_motion(X2, v));
    EXPECT_LT((a.vec() - b.vec()).norm(), kTol);
    Motion back = transform_motion(X1.inverse(), transform_motion(X1, v));
    EXPECT_LT((back.vec() - v.vec()).norm(), kTol);
  }
}

TEST(SpatialTest, TransformValidity) {
  std::mt19937_64 rng(6);
  EXPECT_TRUE(random_transform(rng).valid());
  SpatialTransform bad;
  bad.rotation(0, 0) = -1.0;  // reflection
  EXPECT_FALSE(bad.valid());
}

TEST(SpatialTest, RpyRoundTrip) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 100; ++t) {
    SpatialTransform X = random_transform(rng);
    SpatialTransform Y = SpatialTransform::FromXyzRpy(X.translation, X.rpy());
    EXPECT_LT((X.rotation - Y.rotation).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(SpatialTest, PointMassNewtonSecondLaw) {
  SpatialInertia I{2.5, Vec3::Zero(), Mat3::Zero()};
  Vec3 a(1.0, -2.0, 0.5);
  Force f = inertia_apply(I, Motion(Vec3::Zero(), a));
  EXPECT_LT(f.angular.norm(), kTol);
  EXPECT_LT((f.linear - 2.5 * a).norm(), kTol);
  EXPECT_EQ(inertia_apply(I, Motion::Zero()).vec(), Vec6::Zero());
}

TEST(SpatialTest, InertiaApplyMatchesDenseMatrix) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 100; ++t) {
    SpatialInertia I = random_inertia(rng);
    Motion v = random_motion(rng);
    Vec6 dense = dense_inertia(I.mass, I.com, I.rot_inertia) * v.vec();
    EXPECT_LT((inertia_apply(I, v).vec() - dense).norm(), 1e-9);
  }
}

TEST(SpatialTest, InertiaIsSymmetricPositiveDefinite) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 1000; ++t) {
    SpatialInertia I = random_inertia(rng);
    Mat6 M = I.matrix();
    EXPECT_LT((M - M.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(Eigen::LLT<Mat6>(M).info(), Eigen::Success);
    EXPECT_TRUE(I.valid());
  }
}

TEST(SpatialTest, InertiaTransformMatchesDenseCongruence) {
  std::mt19937_64 rng(10);
  for (int t = 0; t < 100; ++t) {
    SpatialInertia I = random_inertia(rng);
    SpatialTransform X = random_transform(rng);
    Mat6 Minv = dense_motion_transform(X).inverse();
    Mat6 expected = Minv.transpose() * I.matrix() * Minv;
    EXPECT_LT((I.transformed(X).matrix() - expected).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((transform_inertia_to_parent(X, I.matrix()) - expected).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(SpatialTest, CrossProducts) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 100; ++t) {
    Motion v = random_motion(rng), w = random_motion(rng);
    Force f = random_force(rng);
    EXPECT_LT(spatial_cross_motion(v, v).vec().norm(), kTol);
    EXPECT_LT((spatial_cross_motion(v, w).vec() - dense_cross_motion(v) * w.vec()).norm(), kTol);
    Vec6 dense_force = -dense_cross_motion(v).transpose() * f.vec();
    EXPECT_LT((spatial_cross_force(v, f).vec() - dense_force).norm(), kTol);
    EXPECT_EQ(spatial_cross_motion(Motion::Zero(), w).vec(), Vec6::Zero());
    EXPECT_EQ(spatial_cross_force(Motion::Zero(), f).vec(), Vec6::Zero());
  }
}

}  // namespace
}  // namespace abd
