#include "driftalign/lie.hpp"

#include <cmath>
#include <numbers>

#include <Eigen/Geometry>
#include <Eigen/LU>

namespace driftalign {

namespace {

// Rodrigues coefficients A = sin(t)/t, B = (1 - cos t)/t^2, C = (t - sin t)/t^3.
struct ExpCoefficients {
  double a, b, c;
};

ExpCoefficients exp_coefficients(double theta) {
  const double t2 = theta * theta;
  if (theta < kSmallAngle) {
    return {1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0};
  }
  const double s = std::sin(theta);
  const double half = std::sin(0.5 * theta);
  return {s / theta, 2.0 * half * half / t2, (theta - s) / (t2 * theta)};
}

// (1/theta) d/dtheta of A, B and C. The closed forms cancel badly for small
// angles, so the series is used up to a much larger switch point.
ExpCoefficients exp_coefficient_derivatives(double theta) {
  const double t2 = theta * theta;
  if (theta < 1e-2) {
    const double t4 = t2 * t2;
    return {-1.0 / 3.0 + t2 / 30.0 - t4 / 840.0, -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
            -1.0 / 60.0 + t2 / 1260.0 - t4 / 60480.0};
  }
  const double s = std::sin(theta);
  const double c = std::cos(theta);
  const double one_minus_c = 2.0 * std::sin(0.5 * theta) * std::sin(0.5 * theta);
  const double t3 = t2 * theta;
  return {(theta * c - s) / t3, (theta * s - 2.0 * one_minus_c) / (t3 * theta),
          (one_minus_c * theta - 3.0 * (theta - s)) / (t3 * t2)};
}

// d/domega of coef * (w x (w x x)) for fixed x, excluding the coefficient term.
Mat3 double_cross_derivative(const Vec3& w, const Vec3& x) {
  return w.dot(x) * Mat3::Identity() + w * x.transpose() - 2.0 * x * w.transpose();
}

}  // namespace

Mat3 skew(const Vec3& w) {
  Mat3 m;
  m << 0.0, -w.z(), w.y(), w.z(), 0.0, -w.x(), -w.y(), w.x(), 0.0;
  return m;
}

RigidTransform twist_exp(const Twist& xi) {
  if (!xi.finite()) throw Error("domain", "twist_exp: non-finite twist");
  const double theta = xi.omega.norm();
  const auto k = exp_coefficients(theta);
  const Mat3 W = skew(xi.omega);
  const Mat3 W2 = W * W;
  RigidTransform T;
  T.R = Mat3::Identity() + k.a * W + k.b * W2;
  const Mat3 V = Mat3::Identity() + k.b * W + k.c * W2;
  T.t = V * xi.v;
  return T;
}

Twist twist_log(const RigidTransform& T) {
  if (!T.R.allFinite() || !T.t.allFinite()) throw Error("domain", "twist_log: non-finite transform");
  const Mat3& R = T.R;
  const Vec3 s(0.5 * (R(2, 1) - R(1, 2)), 0.5 * (R(0, 2) - R(2, 0)), 0.5 * (R(1, 0) - R(0, 1)));
  const double c = 0.5 * (R.trace() - 1.0);
  const double sin_theta = s.norm();
  const double theta = std::atan2(sin_theta, c);
  if (theta >= std::numbers::pi - 1e-6) {
    throw Error("domain", "twist_log: rotation angle too close to pi (" + std::to_string(theta) + ")");
  }
  Vec3 omega;
  if (theta < kSmallAngle) {
    omega = (1.0 + theta * theta / 6.0) * s;
  } else {
    omega = (theta / sin_theta) * s;
  }
  const auto k = exp_coefficients(theta);
  const Mat3 W = skew(omega);
  const Mat3 V = Mat3::Identity() + k.b * W + k.c * W * W;
  return {omega, V.partialPivLu().solve(T.t)};
}

Mat36 twist_action_jacobian(const Twist& xi, const Vec3& x) {
  const Vec3& w = xi.omega;
  const Vec3& v = xi.v;
  const double theta = w.norm();
  const auto k = exp_coefficients(theta);
  const auto dk = exp_coefficient_derivatives(theta);

  const Vec3 wx = w.cross(x);
  const Vec3 wwx = w.cross(wx);
  const Vec3 wv = w.cross(v);
  const Vec3 wwv = w.cross(wv);

  Mat36 J;
  // rotation acting on x
  Mat3 d_omega = wx * (dk.a * w).transpose() - k.a * skew(x) + wwx * (dk.b * w).transpose() +
                 k.b * double_cross_derivative(w, x);
  // left Jacobian acting on v
  d_omega += wv * (dk.b * w).transpose() - k.b * skew(v) + wwv * (dk.c * w).transpose() +
             k.c * double_cross_derivative(w, v);
  J.leftCols<3>() = d_omega;
  const Mat3 W = skew(w);
  J.rightCols<3>() = Mat3::Identity() + k.b * W + k.c * W * W;
  return J;
}

Mat3 rotation_action_jacobian(const Vec3& w, const Vec3& x) {
  const double theta = w.norm();
  const auto k = exp_coefficients(theta);
  const auto dk = exp_coefficient_derivatives(theta);
  const Vec3 wx = w.cross(x);
  return wx * (dk.a * w).transpose() - k.a * skew(x) + w.cross(wx) * (dk.b * w).transpose() +
         k.b * double_cross_derivative(w, x);
}

bool is_rotation(const Mat3& R, double tol) {
  return (R.transpose() * R - Mat3::Identity()).norm() < tol && std::abs(R.determinant() - 1.0) < tol;
}

}  // namespace driftalign
