#include <abd/dynamics.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "test_util.hpp"

namespace abd {
namespace {

using testing::random_state;
using testing::random_tree;
using testing::random_vec;

const Vec3 kGravity(0, 0, -9.81);

KinematicTree pendulum() { return load_tree(testing::data_path("models/pendulum.json")); }
KinematicTree double_pendulum() { return load_tree(testing::data_path("models/double_pendulum.json")); }

JointState state1(double q, double qd = 0.0) { return {VecX::Constant(1, q), VecX::Constant(1, qd)}; }

TEST(DynamicsTest, PendulumAtRestHangingIsEquilibrium) {
  VecX qdd = aba_forward_dynamics(pendulum(), state1(0.0), VecX::Zero(1), kGravity);
  EXPECT_NEAR(qdd[0], 0.0, 1e-12);
}

TEST(DynamicsTest, UniformRodPendulumMatchesAnalyticSolution) {
  // Uniform rod of length l about its end: qdd = -(3 g / 2 l) sin q.
  const double g = 9.81, l = 1.0;
  KinematicTree t = pendulum();
  for (int k = 0; k < 100; ++k) {
    double q = -3.0 + 6.0 * k / 99.0;
    double expected = -(3.0 * g / (2.0 * l)) * std::sin(q);
    EXPECT_NEAR(aba_forward_dynamics(t, state1(q), VecX::Zero(1), kGravity)[0], expected, 1e-10);
    EXPECT_NEAR(crba_oracle_dynamics(t, state1(q), VecX::Zero(1), kGravity)[0], expected, 1e-10);
  }
}

TEST(DynamicsTest, PendulumMassMatrixIsRodAboutPivot) {
  MatX M = crba_mass_matrix(pendulum(), VecX::Constant(1, 0.7));
  EXPECT_NEAR(M(0, 0), 1.0 * 1.0 * 1.0 / 3.0, 1e-12);
}

TEST(DynamicsTest, AbaMatchesOracleOnRandomBranchedTree) {
  std::mt19937_64 rng(30);
  KinematicTree t = random_tree(rng, {.links = 6});
  for (int trial = 0; trial < 20; ++trial) {
    JointState s = random_state(rng, t);
    VecX tau = random_vec(rng, t.dof());
    VecX a = aba_forward_dynamics(t, s, tau, kGravity);
    VecX b = crba_oracle_dynamics(t, s, tau, kGravity);
    EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(DynamicsTest, AbaMatchesOracleOn200RandomTrees) {
  std::mt19937_64 rng(31);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    int K = std::uniform_int_distribution<int>(2, 8)(rng);
    KinematicTree t = random_tree(rng, {.links = K});
    if (t.dof() == 0) continue;
    JointState s = random_state(rng, t);
    VecX tau = random_vec(rng, t.dof());
    VecX a = aba_forward_dynamics(t, s, tau, kGravity);
    VecX b = crba_oracle_dynamics(t, s, tau, kGravity);
    worst = std::max(worst, (a - b).cwiseAbs().maxCoeff());
  }
  EXPECT_LE(worst, 1e-8);
}

TEST(DynamicsTest, MassMatrixIsSymmetricPositiveDefinite) {
  std::mt19937_64 rng(32);
  KinematicTree t = random_tree(rng, {.links = 7});
  for (int trial = 0; trial < 1000; ++trial) {
    MatX M = crba_mass_matrix(t, random_state(rng, t).q);
    EXPECT_LT((M - M.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(Eigen::LLT<MatX>(M).info(), Eigen::Success);
  }
}

TEST(DynamicsTest, NoForcingMeansNoAcceleration) {
  std::mt19937_64 rng(33);
  KinematicTree t = random_tree(rng, {.links = 6});
  JointState s{random_state(rng, t).q, VecX::Zero(t.dof())};
  VecX zero = VecX::Zero(t.dof());
  EXPECT_LT(crba_oracle_dynamics(t, s, zero, Vec3::Zero()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(aba_forward_dynamics(t, s, zero, Vec3::Zero()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DynamicsTest, ChildContributionAnnihilatesJointDirections) {
  std::mt19937_64 rng(34);
  for (int trial = 0; trial < 200; ++trial) {
    KinematicTree t = random_tree(rng, {.links = std::uniform_int_distribution<int>(2, 8)(rng)});
    JointState s = random_state(rng, t);
    AbaResult r = aba_detailed(t, s, random_vec(rng, t.dof()), kGravity);
    for (int i = 1; i < t.size(); ++i) {
      const Mat6& Ia = r.child_contribution[i];
      MotionSubspace S = t.joint(i).motion_subspace();
      if (S.cols() > 0) EXPECT_LE((S.transpose() * Ia * S).cwiseAbs().maxCoeff(), 1e-9);
      EXPECT_LT((Ia - Ia.transpose()).cwiseAbs().maxCoeff(), 1e-10);
      Eigen::SelfAdjointEigenSolver<Mat6> eig(0.5 * (Ia + Ia.transpose()));
      EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-9);
    }
  }
}

TEST(DynamicsTest, LinearInTorque) {
  std::mt19937_64 rng(35);
  for (int trial = 0; trial < 50; ++trial) {
    KinematicTree t = random_tree(rng, {.links = 6});
    if (t.dof() == 0) continue;
    JointState s = random_state(rng, t);
    VecX t1 = random_vec(rng, t.dof()), t2 = random_vec(rng, t.dof());
    VecX q0 = aba_forward_dynamics(t, s, VecX::Zero(t.dof()), kGravity);
    VecX lhs = aba_forward_dynamics(t, s, t1 + t2, kGravity) - q0;
    VecX rhs = (aba_forward_dynamics(t, s, t1, kGravity) - q0) + (aba_forward_dynamics(t, s, t2, kGravity) - q0);
    EXPECT_LE((lhs - rhs).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(DynamicsTest, InvariantUnderLinkRelabeling) {
  std::mt19937_64 rng(36);
  for (int trial = 0; trial < 50; ++trial) {
    auto [links, joints] = testing::random_tree_specs(rng, {.links = 7});
    KinematicTree a = build_tree(links, joints);
    std::vector<LinkSpec> shuffled = links;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    std::vector<JointSpec> shuffled_joints = joints;
    std::shuffle(shuffled_joints.begin(), shuffled_joints.end(), rng);
    KinematicTree b = build_tree(shuffled, shuffled_joints);
    ASSERT_EQ(a.dof(), b.dof());

    // Map a's q layout onto b's by link name.
    std::vector<int> a_to_b(a.dof());
    for (int i = 1; i < a.size(); ++i) {
      if (a.q_index(i) < 0) continue;
      a_to_b[a.q_index(i)] = b.q_index(*b.find_link(a.link(i).name));
    }
    JointState sa = random_state(rng, a);
    VecX tau_a = random_vec(rng, a.dof());
    JointState sb{VecX(a.dof()), VecX(a.dof())};
    VecX tau_b(a.dof());
    for (int k = 0; k < a.dof(); ++k) {
      sb.q[a_to_b[k]] = sa.q[k];
      sb.qd[a_to_b[k]] = sa.qd[k];
      tau_b[a_to_b[k]] = tau_a[k];
    }
    VecX qa = aba_forward_dynamics(a, sa, tau_a, kGravity);
    VecX qb = aba_forward_dynamics(b, sb, tau_b, kGravity);
    for (int k = 0; k < a.dof(); ++k) EXPECT_LE(std::abs(qa[k] - qb[a_to_b[k]]), 1e-12);
  }
}

TEST(DynamicsTest, DegenerateInertiaIsReported) {
  KinematicTree good = pendulum();
  std::vector<Link> links = good.links();
  links[1].inertia = SpatialInertia{};
  KinematicTree bad(links, good.joints());
  EXPECT_THROW(aba_forward_dynamics(bad, state1(0.3), VecX::Zero(1), kGravity), SingularJointInertiaError);
  EXPECT_THROW(crba_oracle_dynamics(bad, state1(0.3), VecX::Zero(1), kGravity), NonPosDefMassMatrixError);
}

TEST(DynamicsTest, DimensionMismatchIsReported) {
  EXPECT_THROW(aba_forward_dynamics(pendulum(), state1(0.0), VecX::Zero(2), kGravity), DimensionError);
}

TEST(DynamicsTest, PointJacobianMatchesFiniteDifferences) {
  std::mt19937_64 rng(37);
  KinematicTree t = random_tree(rng, {.links = 6});
  VecX q = random_state(rng, t).q;
  int link = t.size() - 1;
  Vec3 p(0.1, -0.2, 0.3);
  MatX J = point_jacobian(t, q, link, p);
  const double h = 1e-6;
  for (int k = 0; k < t.dof(); ++k) {
    VecX qp = q, qm = q;
    qp[k] += h;
    qm[k] -= h;
    Vec3 fd = (forward_kinematics(t, qp)[link].apply_point(p) - forward_kinematics(t, qm)[link].apply_point(p)) / (2 * h);
    EXPECT_LT((fd - J.col(k)).norm(), 1e-7);
  }
}

// ---------------------------------------------------------------------------
// Integration.

TEST(IntegratorTest, EquilibriumStateIsUnchanged) {
  KinematicTree t = pendulum();
  JointState next = step_semi_implicit(t, state1(0.0), VecX::Zero(1), kGravity, 1e-3);
  EXPECT_EQ(next.q[0], 0.0);
  EXPECT_EQ(next.qd[0], 0.0);
}

TEST(IntegratorTest, DoublePendulumEnergyDriftBelowOnePercent) {
  KinematicTree t = double_pendulum();
  // Released from horizontal; potential measured from the hanging rest pose.
  JointState s{VecX(2), VecX::Zero(2)};
  s.q << M_PI / 2, 0.0;
  VecX hanging(2);
  hanging << M_PI, 0.0;
  const double v_rest = potential_energy(t, hanging, kGravity);
  auto energy = [&](const JointState& x) {
    return kinetic_energy(t, x) + potential_energy(t, x.q, kGravity) - v_rest;
  };
  const double e0 = energy(s);
  double worst = 0.0;
  const double dt = 1e-4;
  for (int k = 0; k < static_cast<int>(10.0 / dt); ++k) {
    s = step_semi_implicit(t, s, VecX::Zero(2), kGravity, dt);
    if (k % 100 == 0) worst = std::max(worst, std::abs(energy(s) - e0));
  }
  EXPECT_LT(std::abs(energy(s) - e0), 0.01 * std::abs(e0));
  EXPECT_LT(worst, 0.01 * std::abs(e0));
}

TEST(IntegratorTest, LimitClampOnlyWhenViolated) {
  KinematicTree hopper = load_tree(testing::data_path("models/hopper.json"));
  int foot = *hopper.find_link("foot");
  int k = hopper.q_index(foot);
  const auto lim = *hopper.joint(foot).limits;

  // At the upper limit moving inward: velocity survives.
  JointState s{VecX::Zero(hopper.dof()), VecX::Zero(hopper.dof())};
  s.q[k] = lim.upper;
  s.qd[k] = -0.5;
  JointState inside = s;
  enforce_limits(hopper, inside);
  EXPECT_EQ(inside.qd[k], -0.5);
  EXPECT_EQ(inside.q[k], lim.upper);

  // Beyond the limit moving outward: clamped and stopped.
  s.q[k] = lim.upper + 0.1;
  s.qd[k] = 0.5;
  enforce_limits(hopper, s);
  EXPECT_EQ(s.q[k], lim.upper);
  EXPECT_EQ(s.qd[k], 0.0);
}

TEST(IntegratorTest, RejectsNonPositiveStep) {
  EXPECT_THROW(step_semi_implicit(pendulum(), state1(0.0), VecX::Zero(1), kGravity, 0.0), ConfigError);
}

// ---------------------------------------------------------------------------
// Mass scaling.

TEST(MassScaledTest, UnitFactorIsIdentity) {
  KinematicTree t = double_pendulum();
  EXPECT_TRUE(structurally_equal(mass_scaled(t, "link1", 1.0), t, 0.0));
}

TEST(MassScaledTest, FixedBaseMassIsInert) {
  KinematicTree t = pendulum();
  KinematicTree heavy = mass_scaled(t, "base", 2.0);
  for (double q : {0.3, -1.1, 2.0}) {
    VecX tau = VecX::Constant(1, 0.7);
    EXPECT_NEAR(aba_forward_dynamics(heavy, state1(q, 0.4), tau, kGravity)[0],
                aba_forward_dynamics(t, state1(q, 0.4), tau, kGravity)[0], 1e-12);
  }
}

TEST(MassScaledTest, DoublingRodMassHalvesTorqueResponse) {
  KinematicTree t = pendulum();
  KinematicTree heavy = mass_scaled(t, "rod", 2.0);
  EXPECT_EQ(t.link(1).inertia.mass, 1.0);  // original untouched
  EXPECT_EQ(heavy.link(1).inertia.com, t.link(1).inertia.com);
  for (double q : {0.3, -1.1, 2.0}) {
    VecX zero = VecX::Zero(1), tau = VecX::Constant(1, 0.9);
    double g_light = aba_forward_dynamics(t, state1(q), zero, kGravity)[0];
    double g_heavy = aba_forward_dynamics(heavy, state1(q), zero, kGravity)[0];
    EXPECT_NEAR(g_heavy, g_light, 1e-12);
    double t_light = aba_forward_dynamics(t, state1(q), tau, Vec3::Zero())[0];
    double t_heavy = aba_forward_dynamics(heavy, state1(q), tau, Vec3::Zero())[0];
    EXPECT_NEAR(t_heavy, 0.5 * t_light, 1e-12);
  }
}

TEST(MassScaledTest, ErrorsOnUnknownLinkOrBadFactor) {
  EXPECT_THROW(mass_scaled(pendulum(), "nope", 2.0), UnknownLinkError);
  EXPECT_THROW(mass_scaled(pendulum(), "rod", 0.0), ConfigError);
}

}  // namespace
}  // namespace abd
