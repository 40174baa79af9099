#include <gtest/gtest.h>

#include <random>

#include "affine_reserve/horizon_model.hpp"

using namespace affine_reserve;

namespace {

StageDynamics memoryless() {
    StageDynamics s;
    s.A_tilde = MatrixXd::Zero(1, 1);
    s.B_tilde = VectorXd::Ones(1);
    s.C_tilde = RowVectorXd::Ones(1);
    return s;
}

ThermalGeneratorSpec generator_one() { return {20.0, 0.020, 1.0, 1800.0, 400.0}; }

StorageSpec storage_unit() { return {1000.0, 0.01, 200.0, 500.0, 0.25}; }

/// Memoryless participant with J = sum u^2 / 2 (H_u = h).
Participant quadratic_input_participant(int T, Index nd, double h) {
    StageCost c;
    c.f_x = VectorXd::Zero(1);
    c.H_x = MatrixXd::Zero(1, 1);
    c.H_u = h;
    StageBounds b;
    b.x_lo = VectorXd::Constant(1, -1e6);
    b.x_hi = VectorXd::Constant(1, 1e6);
    b.u_lo = -1e6;
    b.u_hi = 1e6;
    return make_elastic_participant("Q", 0, make_elastic_model(memoryless(), c, b, T, nd), VectorXd::Zero(1), nd);
}

}  // namespace

TEST(StackDynamics, TwoStateExpansion) {
    StageDynamics s;
    s.A_tilde = MatrixXd::Zero(2, 2);
    s.A_tilde(1, 0) = 1.0;
    s.B_tilde = VectorXd::Zero(2);
    s.B_tilde(0) = 1.0;
    s.C_tilde = RowVectorXd::Zero(2);
    s.C_tilde(0) = 1.0;
    const auto d = stack_dynamics(s, 2);
    MatrixXd expect(4, 2);
    expect << 1, 0, 0, 0, 0, 1, 1, 0;
    EXPECT_EQ(d.B, expect);
}

TEST(StackDynamics, MemorylessParticipant) {
    const auto d = stack_dynamics(memoryless(), 3);
    EXPECT_EQ(d.B, MatrixXd::Identity(3, 3));
    EXPECT_EQ(d.A, MatrixXd::Zero(3, 1));
}

TEST(StackDynamics, StorageBlockBelowDiagonal) {
    const auto p = build_storage_unit(storage_unit(), 2, 1);
    const auto& B = p.elastic->dynamics.B;
    EXPECT_DOUBLE_EQ(B(3, 0), 0.0);
    EXPECT_DOUBLE_EQ(B(4, 0), 1.0);
    EXPECT_DOUBLE_EQ(B(5, 0), -0.25);
}

TEST(StackDynamics, BlocksArePowersOfTheStateMatrix) {
    std::mt19937_64 gen(1);
    std::normal_distribution<double> N(0.0, 0.5);
    StageDynamics s;
    s.A_tilde.resize(3, 3);
    s.B_tilde.resize(3);
    s.C_tilde = RowVectorXd::Unit(3, 0);
    for (Index r = 0; r < 3; ++r) {
        s.B_tilde(r) = N(gen);
        for (Index c = 0; c < 3; ++c) s.A_tilde(r, c) = N(gen);
    }
    const int T = 5;
    const auto d = stack_dynamics(s, T);
    // simulate the recursion directly and compare with x = A x0 + B u
    VectorXd x0(3), u(T);
    for (auto& v : x0) v = N(gen);
    for (auto& v : u) v = N(gen);
    VectorXd x = x0;
    const VectorXd stacked = d.A * x0 + d.B * u;
    for (int k = 0; k < T; ++k) {
        x = s.A_tilde * x + s.B_tilde * u(k);
        EXPECT_LE((stacked.segment(3 * k, 3) - x).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Feedthrough, HoldsForArchetypesAtEveryHorizon) {
    for (int T : {1, 4, 8, 16}) {
        const auto g = build_thermal_generator(generator_one(), T, 2);
        const auto s = build_storage_unit(storage_unit(), T, 2);
        EXPECT_TRUE(verify_direct_feedthrough(g.elastic->dynamics)) << T;
        EXPECT_TRUE(verify_direct_feedthrough(s.elastic->dynamics)) << T;
        EXPECT_EQ(g.elastic->dynamics.C * g.elastic->dynamics.B, MatrixXd::Identity(T, T));
        EXPECT_EQ(s.elastic->dynamics.C * s.elastic->dynamics.B, MatrixXd::Identity(T, T));
    }
}

TEST(Feedthrough, FailsWhenOutputDependsOnMemory) {
    StageDynamics s;
    s.A_tilde = MatrixXd::Zero(2, 2);
    s.A_tilde(0, 1) = 1.0;
    s.A_tilde(1, 0) = 1.0;
    s.B_tilde = VectorXd::Unit(2, 0);
    s.C_tilde = RowVectorXd::Unit(2, 0);
    EXPECT_FALSE(verify_direct_feedthrough(stack_dynamics(s, 3)));
}

TEST(Generator, SixLocalRowsPerStep) {
    for (int T : {1, 3, 8}) EXPECT_EQ(build_thermal_generator(generator_one(), T, 2).elastic->local.rows(), 6 * T);
}

TEST(Generator, ZeroRampCostWithoutAlpha) {
    ThermalGeneratorSpec spec{20.0, 0.02, 0.0, 500.0, 0.0};
    const auto p = build_thermal_generator(spec, 4, 1);
    EXPECT_EQ(p.elastic->cost.H_x.cwiseAbs().maxCoeff(), 0.0);
    VectorXd u(4);
    u << 0, 300, 10, 250;
    // pure fuel cost
    EXPECT_NEAR(trajectory_cost(p, u), 20.0 * u.sum() + 0.01 * u.squaredNorm(), 1e-9);
}

TEST(Generator, StageCostOfGeneratorSeven) {
    const auto p = build_thermal_generator({20.0, 0.200, 1.0, 180.0, 0.0}, 1, 1);
    VectorXd x(2);
    x << 100.0, 100.0;  // no ramp
    EXPECT_DOUBLE_EQ(p.elastic->stage_cost.evaluate(x, 100.0), 3000.0);
}

TEST(Storage, PenaltyVanishesAtMidpoint) {
    const auto p = build_storage_unit(storage_unit(), 1, 1);
    VectorXd x(3);
    x << 0.0, 0.0, 500.0;
    EXPECT_NEAR(p.elastic->stage_cost.evaluate(x, 0.0), 0.0, 1e-9);
    x(2) = 0.0;
    EXPECT_NEAR(p.elastic->stage_cost.evaluate(x, 0.0), 2500.0, 1e-9);
    x(2) = 1000.0;
    EXPECT_NEAR(p.elastic->stage_cost.evaluate(x, 0.0), 2500.0, 1e-9);
}

TEST(Storage, LevelHoldsUnderZeroInput) {
    const int T = 6;
    const auto p = build_storage_unit(storage_unit(), T, 1);
    const VectorXd x = p.elastic->dynamics.A * p.x0;
    for (int k = 0; k < T; ++k) EXPECT_DOUBLE_EQ(x(3 * k + 2), 500.0);
}

TEST(Storage, DischargingDrainsTheLevel) {
    const auto p = build_storage_unit(storage_unit(), 2, 1);
    const VectorXd x = p.elastic->dynamics.A * p.x0 + p.elastic->dynamics.B * Eigen::Vector2d(100.0, 100.0);
    EXPECT_DOUBLE_EQ(x(2), 475.0);
    EXPECT_DOUBLE_EQ(x(5), 450.0);
}

TEST(Builders, RejectInvalidParameters) {
    EXPECT_THROW(build_thermal_generator({20.0, -1.0, 1.0, 100.0, 0.0}, 2, 1), ValidationError);
    EXPECT_THROW(build_thermal_generator({20.0, 0.1, 1.0, 100.0, 200.0}, 2, 1), ValidationError);
    EXPECT_THROW(build_storage_unit({1000.0, 0.01, 200.0, 1200.0, 0.25}, 2, 1), ValidationError);
    EXPECT_THROW(stack_dynamics(memoryless(), 0), ValidationError);
}

TEST(ExpectedCost, CollapsesToDeterministicCostWithoutResponse) {
    const int T = 4;
    const auto p = build_thermal_generator(generator_one(), T, 2);
    MomentEstimate m = MomentEstimate::zero(2 * T);
    m.second_moment = MatrixXd::Identity(2 * T, 2 * T) * 50.0;
    VectorXd e(T);
    e << 400, 500, 450, 300;
    const auto pq = expected_cost_coefficients(p, m);
    EXPECT_NEAR(pq.evaluate(e, MatrixXd::Zero(T, 2 * T)), trajectory_cost(p, e), 1e-8 * trajectory_cost(p, e));
}

TEST(ExpectedCost, TraceIdentityUnderUnitCovariance) {
    const int T = 3;
    const Index nd = 2;
    const auto p = quadratic_input_participant(T, nd, 1.0);
    MomentEstimate m = MomentEstimate::zero(nd * T);
    m.second_moment.setIdentity();
    MatrixXd D = MatrixXd::Zero(T, nd * T);
    D(0, 1) = 1.5;
    D(2, 3) = -2.0;
    D(2, 0) = 0.5;
    const auto pq = expected_cost_coefficients(p, m);
    EXPECT_NEAR(pq.evaluate(VectorXd::Zero(T), D), 0.5 * D.squaredNorm(), 1e-12);
}

TEST(ExpectedCost, ScalarHandEvaluation) {
    const auto p = quadratic_input_participant(1, 1, 2.0);
    MomentEstimate m = MomentEstimate::zero(1);
    m.second_moment(0, 0) = 9.0;
    const auto pq = expected_cost_coefficients(p, m);
    EXPECT_DOUBLE_EQ(pq.evaluate(VectorXd::Zero(1), MatrixXd::Constant(1, 1, 3.0)), 81.0);
}

TEST(ExpectedCost, AgreesWithMonteCarloMean) {
    // delta = mu + L xi with Gaussian xi matches the first two moments
    const int T = 3;
    const Index nd = 2, n = nd * T;
    const auto p = build_storage_unit(storage_unit(), T, nd);
    std::mt19937_64 gen(99);
    std::normal_distribution<double> N(0.0, 1.0);
    MatrixXd L(n, n);
    VectorXd mu(n);
    for (Index r = 0; r < n; ++r) {
        mu(r) = 3.0 * N(gen);
        for (Index c = 0; c < n; ++c) L(r, c) = 5.0 * N(gen);
    }
    MomentEstimate m = MomentEstimate::zero(n);
    m.mean_delta = mu;
    m.second_moment = L * L.transpose() + mu * mu.transpose();
    VectorXd e(T);
    e << 50, -30, 20;
    MatrixXd D = MatrixXd::Zero(T, n);
    for (int l = 0; l < T; ++l)
        for (Index j = 0; j < (l + 1) * nd; ++j) D(l, j) = 0.5 * N(gen);
    const double analytic = expected_cost_coefficients(p, m).evaluate(e, D);

    const int samples = 100000;
    double sum = 0.0, sum2 = 0.0;
    VectorXd xi(n);
    for (int s = 0; s < samples; ++s) {
        for (auto& v : xi) v = N(gen);
        const VectorXd delta = mu + L * xi;
        const double J = trajectory_cost(p, D * delta + e);
        sum += J;
        sum2 += J * J;
    }
    const double mean = sum / samples;
    const double se = std::sqrt((sum2 / samples - mean * mean) / samples);
    EXPECT_LE(std::abs(mean - analytic), 3.0 * se);
}

TEST(HorizonCost, ConstantTrajectoryIsStageCostTimesHorizon) {
    const int T = 6;
    auto p = build_thermal_generator(generator_one(), T, 1);
    const VectorXd u = VectorXd::Constant(T, 400.0);  // equal to p_0: states stay [400, 400]
    VectorXd x(2);
    x << 400.0, 400.0;
    EXPECT_NEAR(trajectory_cost(p, u), T * p.elastic->stage_cost.evaluate(x, 400.0), 1e-8);
}

TEST(LocalPolytope, RowsMatchStageBoundsAlongTrajectories) {
    const int T = 5;
    const auto p = build_storage_unit(storage_unit(), T, 2);
    const auto& m = *p.elastic;
    std::mt19937_64 gen(8);
    std::uniform_real_distribution<double> U(-250.0, 250.0);
    for (int trial = 0; trial < 50; ++trial) {
        VectorXd u(T);
        for (auto& v : u) v = U(gen);
        const VectorXd x = m.dynamics.A * p.x0 + m.dynamics.B * u;
        const VectorXd slack = m.local.slack(x, u, VectorXd::Zero(2 * T));
        bool stage_ok = true;
        for (int k = 0; k < T; ++k) stage_ok = stage_ok && m.bounds.violation(x.segment(3 * k, 3), u(k)) == 0.0;
        EXPECT_EQ((slack.array() >= 0.0).all(), stage_ok);
    }
}
