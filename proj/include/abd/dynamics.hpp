#pragma once

// Fixed-base forward dynamics on a KinematicTree: the Articulated Body
// Algorithm, an independent CRBA + RNEA oracle, kinematics helpers and a
// semi-implicit Euler integrator.

#include <abd/errors.hpp>
#include <abd/morphology.hpp>
#include <abd/spatial.hpp>

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace abd {

using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

struct JointState {
  VecX q;
  VecX qd;
};

inline void check_dims(const KinematicTree& tree, const JointState& s, const VecX& tau) {
  const auto n = static_cast<Eigen::Index>(tree.dof());
  if (s.q.size() != n || s.qd.size() != n || tau.size() != n)
    throw DimensionError("state/torque sizes (" + std::to_string(s.q.size()) + ", " + std::to_string(s.qd.size()) +
                         ", " + std::to_string(tau.size()) + ") do not match tree dof " + std::to_string(n));
}

namespace detail {

inline double joint_q(const KinematicTree& tree, const VecX& q, int i) {
  int k = tree.q_index(i);
  return k < 0 ? 0.0 : q[k];
}

/// Child pose in parent for every non-root link (index 0 unused).
inline std::vector<SpatialTransform> child_poses(const KinematicTree& tree, const VecX& q) {
  std::vector<SpatialTransform> X(tree.size());
  for (int i = 1; i < tree.size(); ++i) X[i] = tree.joint(i).child_pose(joint_q(tree, q, i));
  return X;
}

inline Vec6 joint_velocity(const KinematicTree& tree, const MotionSubspace& S, const VecX& qd, int i) {
  int k = tree.q_index(i);
  if (k < 0) return Vec6::Zero();
  return S * qd.segment(k, S.cols());
}

}  // namespace detail

/// Per-link quantities of one ABA evaluation, kept for inspection.
struct AbaResult {
  VecX qdd;
  std::vector<Mat6> articulated_inertia;   // I^A_i, link frame
  std::vector<Mat6> child_contribution;    // I^a_i, link frame (index 0 unused)
  std::vector<Force> bias_force;           // b^A_i (p^A), link frame
};

/// Articulated Body Algorithm. Gravity enters as a fictitious base acceleration.
inline AbaResult aba_detailed(const KinematicTree& tree, const JointState& state, const VecX& tau, const Vec3& gravity) {
  check_dims(tree, state, tau);
  const int K = tree.size();
  auto X = detail::child_poses(tree, state.q);
  std::vector<MotionSubspace> S(K);
  std::vector<Motion> v(K), c(K), a(K);
  AbaResult r;
  r.articulated_inertia.assign(K, Mat6::Zero());
  r.child_contribution.assign(K, Mat6::Zero());
  r.bias_force.assign(K, Force::Zero());

  // Velocities, velocity-product accelerations, rigid-body inertias.
  for (int i : tree.root_to_leaf()) {
    r.articulated_inertia[i] = tree.link(i).inertia.matrix();
    if (i == 0) continue;
    S[i] = tree.joint(i).motion_subspace();
    Motion vJ(detail::joint_velocity(tree, S[i], state.qd, i));
    v[i] = transform_motion(X[i].inverse(), v[tree.parent(i)]) + vJ;
    c[i] = spatial_cross_motion(v[i], vJ);
    r.bias_force[i] = spatial_cross_force(v[i], inertia_apply(tree.link(i).inertia, v[i]));
  }

  // Leaf-to-root articulated inertias and bias forces.
  std::vector<Eigen::Matrix<double, 6, Eigen::Dynamic, 0, 6, 6>> U(K);
  std::vector<MatX> Dinv(K);
  std::vector<VecX> u(K);
  for (int i : tree.leaf_to_root()) {
    if (i == 0) continue;
    const Mat6& IA = r.articulated_inertia[i];
    Mat6 Ia = IA;
    Vec6 pa = r.bias_force[i].vec() + IA * c[i].vec();
    const auto n = S[i].cols();
    if (n > 0) {
      U[i] = IA * S[i];
      MatX D = S[i].transpose() * U[i];
      Eigen::LDLT<MatX> ldlt(D);
      if (ldlt.info() != Eigen::Success || ldlt.vectorD().cwiseAbs().minCoeff() < 1e-12)
        throw SingularJointInertiaError("joint '" + tree.joint(i).name + "': S^T I^A S is singular");
      Dinv[i] = ldlt.solve(MatX::Identity(n, n));
      int k = tree.q_index(i);
      u[i] = tau.segment(k, n) - S[i].transpose() * r.bias_force[i].vec();
      Ia = IA - U[i] * Dinv[i] * U[i].transpose();
      pa = r.bias_force[i].vec() + Ia * c[i].vec() + U[i] * (Dinv[i] * u[i]);
    }
    r.child_contribution[i] = Ia;
    int p = tree.parent(i);
    r.articulated_inertia[p] += transform_inertia_to_parent(X[i], Ia);
    r.bias_force[p] += transform_force(X[i], Force(pa));
  }

  // Root-to-leaf accelerations.
  r.qdd = VecX::Zero(tree.dof());
  a[0] = Motion(Vec3::Zero(), -gravity);
  for (int i : tree.root_to_leaf()) {
    if (i == 0) continue;
    a[i] = transform_motion(X[i].inverse(), a[tree.parent(i)]) + c[i];
    if (S[i].cols() > 0) {
      int k = tree.q_index(i);
      VecX qdd = Dinv[i] * (u[i] - U[i].transpose() * a[i].vec());
      r.qdd.segment(k, qdd.size()) = qdd;
      a[i] += Motion(Vec6(S[i] * qdd));
    }
  }
  return r;
}

inline VecX aba_forward_dynamics(const KinematicTree& tree, const JointState& state, const VecX& tau,
                                 const Vec3& gravity) {
  return aba_detailed(tree, state, tau, gravity).qdd;
}

/// Joint-space mass matrix by the Composite Rigid Body Algorithm.
inline MatX crba_mass_matrix(const KinematicTree& tree, const VecX& q) {
  const int K = tree.size();
  auto X = detail::child_poses(tree, q);
  std::vector<Mat6> Ic(K);
  for (int i = 0; i < K; ++i) Ic[i] = tree.link(i).inertia.matrix();
  for (int i : tree.leaf_to_root())
    if (i != 0) Ic[tree.parent(i)] += transform_inertia_to_parent(X[i], Ic[i]);

  MatX M = MatX::Zero(tree.dof(), tree.dof());
  for (int i = 1; i < K; ++i) {
    MotionSubspace Si = tree.joint(i).motion_subspace();
    if (Si.cols() == 0) continue;
    int ki = tree.q_index(i);
    Eigen::Matrix<double, 6, Eigen::Dynamic> F = Ic[i] * Si;
    M.block(ki, ki, Si.cols(), Si.cols()) = Si.transpose() * F;
    for (int j = i; tree.parent(j) != 0;) {
      for (int col = 0; col < F.cols(); ++col) F.col(col) = transform_force(X[j], Force(Vec6(F.col(col)))).vec();
      j = tree.parent(j);
      MotionSubspace Sj = tree.joint(j).motion_subspace();
      if (Sj.cols() == 0) continue;
      int kj = tree.q_index(j);
      M.block(ki, kj, Si.cols(), Sj.cols()) = F.transpose() * Sj;
      M.block(kj, ki, Sj.cols(), Si.cols()) = M.block(ki, kj, Si.cols(), Sj.cols()).transpose();
    }
  }
  return M;
}

/// Inverse dynamics by the Recursive Newton-Euler Algorithm.
inline VecX rnea_inverse_dynamics(const KinematicTree& tree, const JointState& state, const VecX& qdd,
                                  const Vec3& gravity) {
  const int K = tree.size();
  auto X = detail::child_poses(tree, state.q);
  std::vector<Motion> v(K), a(K);
  std::vector<Force> f(K);
  a[0] = Motion(Vec3::Zero(), -gravity);
  for (int i : tree.root_to_leaf()) {
    if (i == 0) continue;
    MotionSubspace S = tree.joint(i).motion_subspace();
    int p = tree.parent(i);
    Motion vJ(detail::joint_velocity(tree, S, state.qd, i));
    Motion aJ(detail::joint_velocity(tree, S, qdd, i));
    SpatialTransform Xup = X[i].inverse();
    v[i] = transform_motion(Xup, v[p]) + vJ;
    a[i] = transform_motion(Xup, a[p]) + aJ + spatial_cross_motion(v[i], vJ);
    const SpatialInertia& I = tree.link(i).inertia;
    f[i] = inertia_apply(I, a[i]) + spatial_cross_force(v[i], inertia_apply(I, v[i]));
  }
  VecX tau = VecX::Zero(tree.dof());
  for (int i : tree.leaf_to_root()) {
    if (i == 0) continue;
    int k = tree.q_index(i);
    if (k >= 0) {
      MotionSubspace S = tree.joint(i).motion_subspace();
      tau.segment(k, S.cols()) = S.transpose() * f[i].vec();
    }
    int p = tree.parent(i);
    if (p != 0) f[p] += transform_force(X[i], f[i]);
  }
  return tau;
}

/// Reference forward dynamics: M(q) qdd = tau - C(q, qd) solved by Cholesky.
inline VecX crba_oracle_dynamics(const KinematicTree& tree, const JointState& state, const VecX& tau,
                                 const Vec3& gravity) {
  check_dims(tree, state, tau);
  MatX M = crba_mass_matrix(tree, state.q);
  VecX bias = rnea_inverse_dynamics(tree, state, VecX::Zero(tree.dof()), gravity);
  Eigen::LLT<MatX> llt(M);
  if (llt.info() != Eigen::Success) throw NonPosDefMassMatrixError("joint-space mass matrix is not positive definite");
  return llt.solve(tau - bias);
}

// ---------------------------------------------------------------------------
// Kinematics.

/// Pose of every link frame in the root frame.
inline std::vector<SpatialTransform> forward_kinematics(const KinematicTree& tree, const VecX& q) {
  std::vector<SpatialTransform> world(tree.size());
  for (int i : tree.root_to_leaf())
    if (i != 0) world[i] = world[tree.parent(i)] * tree.joint(i).child_pose(detail::joint_q(tree, q, i));
  return world;
}

/// 3 x dof Jacobian of a point fixed in `link` (coordinates in that link's frame), root frame.
inline MatX point_jacobian(const KinematicTree& tree, const VecX& q, int link, const Vec3& point) {
  auto world = forward_kinematics(tree, q);
  Vec3 p = world[link].apply_point(point);
  MatX J = MatX::Zero(3, tree.dof());
  for (int i = link; i > 0; i = tree.parent(i)) {
    int k = tree.q_index(i);
    if (k < 0) continue;
    const Joint& j = tree.joint(i);
    Vec3 axis = world[i].rotation * j.axis;
    if (j.kind == JointKind::kRevolute) J.col(k) = axis.cross(p - world[i].translation);
    else J.col(k) = axis;
  }
  return J;
}

inline double kinetic_energy(const KinematicTree& tree, const JointState& s) {
  return 0.5 * s.qd.dot(crba_mass_matrix(tree, s.q) * s.qd);
}

/// Gravitational potential relative to the root frame origin.
inline double potential_energy(const KinematicTree& tree, const VecX& q, const Vec3& gravity) {
  auto world = forward_kinematics(tree, q);
  double V = 0.0;
  for (int i = 1; i < tree.size(); ++i) {
    const auto& I = tree.link(i).inertia;
    V -= I.mass * gravity.dot(world[i].apply_point(I.com));
  }
  return V;
}

// ---------------------------------------------------------------------------
// Integration and morphology edits.

/// Clamps q into joint limits; velocity pointing further out of range is zeroed.
inline void enforce_limits(const KinematicTree& tree, JointState& s) {
  for (int i = 1; i < tree.size(); ++i) {
    int k = tree.q_index(i);
    const auto& lim = tree.joint(i).limits;
    if (k < 0 || !lim) continue;
    if (s.q[k] < lim->lower) {
      s.q[k] = lim->lower;
      if (s.qd[k] < 0.0) s.qd[k] = 0.0;
    } else if (s.q[k] > lim->upper) {
      s.q[k] = lim->upper;
      if (s.qd[k] > 0.0) s.qd[k] = 0.0;
    }
  }
}

inline JointState step_semi_implicit(const KinematicTree& tree, const JointState& state, const VecX& tau,
                                     const Vec3& gravity, double dt) {
  if (!(dt > 0.0)) throw ConfigError("dt must be positive");
  VecX qdd = aba_forward_dynamics(tree, state, tau, gravity);
  JointState next;
  next.qd = state.qd + dt * qdd;
  next.q = state.q + dt * next.qd;
  enforce_limits(tree, next);
  return next;
}

/// Copy of `tree` with one link's mass and rotational inertia scaled (COM fixed).
inline KinematicTree mass_scaled(const KinematicTree& tree, const std::string& link_name, double factor) {
  if (!(factor > 0.0)) throw ConfigError("mass scale factor must be positive");
  auto idx = tree.find_link(link_name);
  if (!idx) throw UnknownLinkError("unknown link '" + link_name + "'");
  KinematicTree out = tree;
  SpatialInertia I = tree.link(*idx).inertia;
  I.mass *= factor;
  I.rot_inertia *= factor;
  out.set_inertia(*idx, I);
  return out;
}

}  // namespace abd
