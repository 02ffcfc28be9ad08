#pragma once

#include "driftalign/types.hpp"

namespace driftalign {

/// se(3) exponential coordinates, stored as (omega, v).
struct Twist {
  Vec3 omega = Vec3::Zero();  // radians
  Vec3 v = Vec3::Zero();      // meters

  Twist() = default;
  Twist(const Vec3& w, const Vec3& t) : omega(w), v(t) {}

  Vec6 vector() const {
    Vec6 x;
    x << omega, v;
    return x;
  }
  static Twist from_vector(const Vec6& x) { return {x.head<3>(), x.tail<3>()}; }
  bool finite() const { return omega.allFinite() && v.allFinite(); }
};

struct RigidTransform {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  Vec3 operator()(const Vec3& p) const { return R * p + t; }
  /// (this * other)(p) == this(other(p))
  RigidTransform operator*(const RigidTransform& other) const {
    return {R * other.R, R * other.t + t};
  }
  RigidTransform inverse() const { return {R.transpose(), -(R.transpose() * t)}; }
};

/// Below this rotation angle the exp/log coefficients switch to their Taylor series.
inline constexpr double kSmallAngle = 1e-6;

Mat3 skew(const Vec3& w);

RigidTransform twist_exp(const Twist& xi);

/// Requires a rotation angle below pi - 1e-6; throws Error("domain") otherwise.
Twist twist_log(const RigidTransform& T);

inline Vec3 apply_transform(const RigidTransform& T, const Vec3& p) { return T.R * p + T.t; }

/// Jacobian of exp(xi) * x with respect to the six twist coordinates,
/// columns ordered (omega, v).
Mat36 twist_action_jacobian(const Twist& xi, const Vec3& x);

/// d(R(omega) x)/d(omega) for the rotation part alone.
Mat3 rotation_action_jacobian(const Vec3& omega, const Vec3& x);

/// Frobenius norm of R^T R - I and |det R - 1| both under `tol`.
bool is_rotation(const Mat3& R, double tol = 1e-9);

}  // namespace driftalign
