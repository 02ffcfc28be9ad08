#include <random>

#include <Eigen/Geometry>
#include <gtest/gtest.h>

#include "driftalign/lie.hpp"

using namespace driftalign;

namespace {

Twist random_twist(std::mt19937_64& rng, double max_angle) {
  std::normal_distribution<double> N(0.0, 1.0);
  std::uniform_real_distribution<double> U(0.0, max_angle);
  const Vec3 axis = Vec3(N(rng), N(rng), N(rng)).normalized();
  return {axis * U(rng), Vec3(N(rng), N(rng), N(rng))};
}

// Rodrigues + the left Jacobian written out independently of the library.
RigidTransform reference_exp(const Twist& xi) {
  const double th = xi.omega.norm();
  const Mat3 W = skew(xi.omega);
  Mat3 R = Mat3::Identity(), V = Mat3::Identity();
  if (th > 0) {
    R = Eigen::AngleAxisd(th, xi.omega / th).toRotationMatrix();
    // closed forms cancel catastrophically near zero; use the series there
    const double t2 = th * th;
    const double a = th < 1e-3 ? 0.5 - t2 / 24 + t2 * t2 / 720 : (1 - std::cos(th)) / t2;
    const double b = th < 1e-3 ? 1.0 / 6 - t2 / 120 + t2 * t2 / 5040 : (th - std::sin(th)) / (t2 * th);
    V += a * W + b * W * W;
  }
  return {R, V * xi.v};
}

}  // namespace

TEST(Lie, ExpMatchesRodrigues) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 200; ++i) {
    const Twist xi = random_twist(rng, 3.0);
    const RigidTransform a = twist_exp(xi), b = reference_exp(xi);
    EXPECT_LT((a.R - b.R).norm(), 1e-12);
    EXPECT_LT((a.t - b.t).norm(), 1e-12);
  }
}

TEST(Lie, ExpLogRoundtrip) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 1000; ++i) {
    const Twist xi = random_twist(rng, 3.0);
    const Twist back = twist_log(twist_exp(xi));
    EXPECT_LT((back.vector() - xi.vector()).norm(), 1e-9);
  }
}

TEST(Lie, ExpIsOrthonormal) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 1000; ++i) {
    const Mat3 R = twist_exp(random_twist(rng, 3.0)).R;
    EXPECT_LT((R.transpose() * R - Mat3::Identity()).norm(), 1e-9);
    EXPECT_NEAR(R.determinant(), 1.0, 1e-9);
  }
}

TEST(Lie, SmallAngleBranchIsContinuous) {
  const Vec3 axis = Vec3(1, -2, 0.5).normalized();
  const Vec3 v(0.3, -0.1, 0.2);
  for (double th : {1e-9, 1e-7, 0.99e-6, 1.01e-6, 1e-5}) {
    const RigidTransform a = twist_exp({axis * th, v}), b = reference_exp({axis * th, v});
    EXPECT_LT((a.R - b.R).norm(), 1e-12) << th;
    EXPECT_LT((a.t - b.t).norm(), 1e-12) << th;
    EXPECT_LT((twist_log(a).vector() - Twist(axis * th, v).vector()).norm(), 1e-10) << th;
  }
}

TEST(Lie, LogRejectsHalfTurn) {
  const RigidTransform T = twist_exp({Vec3(M_PI, 0, 0), Vec3::Zero()});
  EXPECT_THROW(twist_log(T), Error);
}

TEST(Lie, ComposeAndInverse) {
  std::mt19937_64 rng(4);
  const RigidTransform A = twist_exp(random_twist(rng, 2.0)), B = twist_exp(random_twist(rng, 2.0));
  const Vec3 p(0.3, -0.7, 1.1);
  EXPECT_LT(((A * B)(p) - A(B(p))).norm(), 1e-12);
  EXPECT_LT((A.inverse()(A(p)) - p).norm(), 1e-12);
}

TEST(Lie, ActionJacobianMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) {
    const Twist xi = random_twist(rng, 2.5);
    const Vec3 x(0.4, -0.2, 0.9);
    const Mat36 J = twist_action_jacobian(xi, x);
    const double h = 1e-6;
    for (int c = 0; c < 6; ++c) {
      Vec6 d = Vec6::Zero();
      d[c] = h;
      const Vec3 fd = (twist_exp(Twist::from_vector(xi.vector() + d))(x) -
                       twist_exp(Twist::from_vector(xi.vector() - d))(x)) /
                      (2 * h);
      EXPECT_LT((J.col(c) - fd).norm(), 1e-7 * std::max(1.0, fd.norm()));
    }
  }
}

TEST(Lie, RotationJacobianMatchesFiniteDifferences) {
  const Vec3 w(0.3, -1.2, 0.4), x(1.0, 2.0, -0.5);
  const Mat3 J = rotation_action_jacobian(w, x);
  const double h = 1e-6;
  for (int c = 0; c < 3; ++c) {
    Vec3 d = Vec3::Zero();
    d[c] = h;
    const Vec3 fd = (twist_exp({w + d, Vec3::Zero()}).R * x - twist_exp({w - d, Vec3::Zero()}).R * x) / (2 * h);
    EXPECT_LT((J.col(c) - fd).norm(), 1e-8);
  }
}
