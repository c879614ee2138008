#pragma once

// Six-dimensional spatial vector algebra (Plücker coordinates, angular part
// first). Motion and force vectors are distinct types so they can only be
// combined through the dot product.

#include <Eigen/Dense>

#include <cmath>

namespace abd {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

inline Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return s;
}

struct MotionTag {};
struct ForceTag {};

template <class Tag>
struct SpatialVec {
  Vec3 angular = Vec3::Zero();
  Vec3 linear = Vec3::Zero();

  SpatialVec() = default;
  SpatialVec(const Vec3& ang, const Vec3& lin) : angular(ang), linear(lin) {}
  explicit SpatialVec(const Vec6& v) : angular(v.head<3>()), linear(v.tail<3>()) {}

  static SpatialVec Zero() { return {}; }

  Vec6 vec() const {
    Vec6 out;
    out << angular, linear;
    return out;
  }

  SpatialVec operator+(const SpatialVec& o) const { return {angular + o.angular, linear + o.linear}; }
  SpatialVec operator-(const SpatialVec& o) const { return {angular - o.angular, linear - o.linear}; }
  SpatialVec operator-() const { return {-angular, -linear}; }
  SpatialVec operator*(double s) const { return {angular * s, linear * s}; }
  SpatialVec& operator+=(const SpatialVec& o) {
    angular += o.angular;
    linear += o.linear;
    return *this;
  }
  SpatialVec& operator-=(const SpatialVec& o) {
    angular -= o.angular;
    linear -= o.linear;
    return *this;
  }
  bool allFinite() const { return angular.allFinite() && linear.allFinite(); }
};

using Motion = SpatialVec<MotionTag>;
using Force = SpatialVec<ForceTag>;

/// Power pairing between a motion and a force.
inline double dot(const Motion& v, const Force& f) {
  return v.angular.dot(f.angular) + v.linear.dot(f.linear);
}

/// Pose of a source frame expressed in a destination frame: `rotation` maps
/// source coordinates to destination coordinates and `translation` is the
/// source origin in destination coordinates. Stored factored; the dense 6x6
/// form exists only for tests.
struct SpatialTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static SpatialTransform Identity() { return {}; }

  static SpatialTransform FromTranslation(const Vec3& r) { return {Mat3::Identity(), r}; }
  static SpatialTransform FromRotation(const Mat3& R) { return {R, Vec3::Zero()}; }

  /// URDF-style origin: fixed-axis roll, pitch, yaw (R = Rz(yaw) Ry(pitch) Rx(roll)).
  static SpatialTransform FromXyzRpy(const Vec3& xyz, const Vec3& rpy) {
    Mat3 R = (Eigen::AngleAxisd(rpy.z(), Vec3::UnitZ()) * Eigen::AngleAxisd(rpy.y(), Vec3::UnitY()) *
              Eigen::AngleAxisd(rpy.x(), Vec3::UnitX()))
                 .toRotationMatrix();
    return {R, xyz};
  }

  /// Frame composition: (*this) maps B->C, `inner` maps A->B; result maps A->C.
  SpatialTransform operator*(const SpatialTransform& inner) const {
    return {rotation * inner.rotation, rotation * inner.translation + translation};
  }

  SpatialTransform inverse() const {
    Mat3 Rt = rotation.transpose();
    return {Rt, -(Rt * translation)};
  }

  Vec3 apply_point(const Vec3& p) const { return rotation * p + translation; }

  bool valid(double tol = 1e-10) const {
    return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(rotation.determinant() - 1.0) <= tol && translation.allFinite();
  }

  /// Roll/pitch/yaw matching FromXyzRpy.
  Vec3 rpy() const {
    const Mat3& R = rotation;
    double pitch = std::atan2(-R(2, 0), std::hypot(R(0, 0), R(1, 0)));
    double roll, yaw;
    if (std::abs(std::cos(pitch)) > 1e-12) {
      roll = std::atan2(R(2, 1), R(2, 2));
      yaw = std::atan2(R(1, 0), R(0, 0));
    } else {
      roll = 0.0;
      yaw = std::atan2(-R(0, 1), R(1, 1));
    }
    return {roll, pitch, yaw};
  }
};

/// Expresses a motion vector given in the source frame in the destination frame.
inline Motion transform_motion(const SpatialTransform& X, const Motion& v) {
  Vec3 w = X.rotation * v.angular;
  return {w, X.rotation * v.linear - w.cross(X.translation)};
}

/// Dual of transform_motion; preserves dot(motion, force).
inline Force transform_force(const SpatialTransform& X, const Force& f) {
  Vec3 lin = X.rotation * f.linear;
  return {X.rotation * f.angular + X.translation.cross(lin), lin};
}

/// Motion cross product v x w.
inline Motion spatial_cross_motion(const Motion& v, const Motion& w) {
  return {v.angular.cross(w.angular), v.angular.cross(w.linear) + v.linear.cross(w.angular)};
}

/// Force cross product v x* f.
inline Force spatial_cross_force(const Motion& v, const Force& f) {
  return {v.angular.cross(f.angular) + v.linear.cross(f.linear), v.angular.cross(f.linear)};
}

/// Rigid-body inertia about the link frame origin.
struct SpatialInertia {
  double mass = 0.0;
  Vec3 com = Vec3::Zero();
  Mat3 rot_inertia = Mat3::Zero();  // about the frame origin, not the COM

  static SpatialInertia FromComInertia(double mass, const Vec3& com, const Mat3& inertia_about_com) {
    Mat3 parallel = mass * (com.squaredNorm() * Mat3::Identity() - com * com.transpose());
    return {mass, com, inertia_about_com + parallel};
  }

  Mat3 inertia_about_com() const {
    return rot_inertia - mass * (com.squaredNorm() * Mat3::Identity() - com * com.transpose());
  }

  Mat6 matrix() const {
    Mat6 M;
    Mat3 cx = skew(com);
    M.topLeftCorner<3, 3>() = rot_inertia;
    M.topRightCorner<3, 3>() = mass * cx;
    M.bottomLeftCorner<3, 3>() = -mass * cx;
    M.bottomRightCorner<3, 3>() = mass * Mat3::Identity();
    return M;
  }

  /// Same body expressed in the destination frame of X (X is the body frame's pose there).
  SpatialInertia transformed(const SpatialTransform& X) const {
    Vec3 c = X.apply_point(com);
    Mat3 Ic = X.rotation * inertia_about_com() * X.rotation.transpose();
    return FromComInertia(mass, c, Ic);
  }

  SpatialInertia operator+(const SpatialInertia& o) const {
    double m = mass + o.mass;
    Vec3 c = m > 0.0 ? Vec3((mass * com + o.mass * o.com) / m) : Vec3::Zero();
    return {m, c, rot_inertia + o.rot_inertia};
  }

  bool valid(double sym_tol = 1e-12) const {
    if (!(mass > 0.0) || !com.allFinite() || !rot_inertia.allFinite()) return false;
    if ((rot_inertia - rot_inertia.transpose()).cwiseAbs().maxCoeff() > sym_tol) return false;
    Eigen::LLT<Mat6> llt(matrix());
    return llt.info() == Eigen::Success;
  }
};

inline Force inertia_apply(const SpatialInertia& I, const Motion& v) {
  return {I.rot_inertia * v.angular + I.mass * I.com.cross(v.linear),
          I.mass * (v.linear - I.com.cross(v.angular))};
}

/// Joint-permitted motion directions, one column per degree of freedom.
using MotionSubspace = Eigen::Matrix<double, 6, Eigen::Dynamic, Eigen::ColMajor, 6, 6>;

inline Force to_force(const Vec6& v) { return Force(v); }
inline Motion to_motion(const Vec6& v) { return Motion(v); }

/// Carries a dense (child-frame) 6x6 force-from-motion operator into the
/// parent frame: I_parent = X* I X^-1 where X is the child's pose in the parent.
inline Mat6 transform_inertia_to_parent(const SpatialTransform& X, const Mat6& I) {
  // X^-1 = (X*)^T, so the result is X* I X*^T = X* (X* I)^T for symmetric I.
  Mat6 FI;
  for (int c = 0; c < 6; ++c) FI.col(c) = transform_force(X, Force(Vec6(I.col(c)))).vec();
  Mat6 FIt = FI.transpose();
  Mat6 out;
  for (int c = 0; c < 6; ++c) out.col(c) = transform_force(X, Force(Vec6(FIt.col(c)))).vec();
  return out;
}

}  // namespace abd
