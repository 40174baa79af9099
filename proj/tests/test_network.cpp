#include <gtest/gtest.h>

#include <random>

#include "affine_reserve/case_file.hpp"
#include "affine_reserve/network.hpp"
#include "affine_reserve/robust_builder.hpp"

using namespace affine_reserve;

namespace {

constexpr double inf = std::numeric_limits<double>::infinity();

Grid triangle() {
    Grid g;
    g.n_nodes = 3;
    g.lines = {{0, 1, 1.0, inf}, {1, 2, 1.0, inf}, {0, 2, 1.0, inf}};
    return g;
}

/// Random connected grid: a spanning path plus a few chords.
Grid random_grid(std::mt19937_64& gen, int n) {
    std::uniform_real_distribution<double> S(0.5, 20.0);
    std::uniform_int_distribution<int> node(0, n - 1);
    Grid g;
    g.n_nodes = n;
    for (int k = 0; k + 1 < n; ++k) g.lines.push_back({k, k + 1, S(gen), inf});
    for (int c = 0; c < n; ++c) {
        const int a = node(gen), b = node(gen);
        if (a != b) g.lines.push_back({a, b, S(gen), inf});
    }
    return g;
}

VectorXd balanced_injection(std::mt19937_64& gen, int n) {
    std::normal_distribution<double> N(0.0, 100.0);
    VectorXd p(n);
    for (auto& v : p) v = N(gen);
    p.array() -= p.mean();
    return p;
}

}  // namespace

TEST(ShiftFactors, TwoNodesCarryTheWholeTransfer) {
    Grid g;
    g.n_nodes = 2;
    g.lines = {{0, 1, 3.0, inf}};
    const FlowMap fm = build_flow_maps(g, {}, 1);
    MatrixXd inj(2, 1);
    inj << 100.0, -100.0;
    const VectorXd f = line_flows(fm, inj);
    EXPECT_NEAR(f(0), 100.0, 1e-9);
    EXPECT_NEAR(f(1), -100.0, 1e-9);
}

TEST(ShiftFactors, TriangleSplitsByImpedance) {
    const FlowMap fm = build_flow_maps(triangle(), {}, 1);
    MatrixXd inj(3, 1);
    inj << 90.0, -90.0, 0.0;
    const VectorXd f = line_flows(fm, inj);
    EXPECT_NEAR(f(0), 60.0, 1e-9);   // 0 -> 1 direct
    EXPECT_NEAR(f(2), -30.0, 1e-9);  // 1 -> 2 carries 30 from 2 to 1
    EXPECT_NEAR(f(4), 30.0, 1e-9);   // 0 -> 2
}

TEST(ShiftFactors, SlackChoiceDoesNotChangeBalancedFlows) {
    std::mt19937_64 gen(4);
    for (int trial = 0; trial < 20; ++trial) {
        const Grid g = random_grid(gen, 6);
        const VectorXd p = balanced_injection(gen, 6);
        const VectorXd f0 = injection_shift_factors(g, 0) * p;
        for (int s = 1; s < 6; ++s)
            EXPECT_LE((injection_shift_factors(g, s) * p - f0).cwiseAbs().maxCoeff(), 1e-8);
    }
}

TEST(ShiftFactors, FlowsAreLinearAndAntisymmetric) {
    std::mt19937_64 gen(5);
    const Grid g = random_grid(gen, 7);
    const FlowMap fm = build_flow_maps(g, {}, 1);
    const VectorXd p1 = balanced_injection(gen, 7), p2 = balanced_injection(gen, 7);
    const VectorXd f1 = line_flows(fm, p1), f2 = line_flows(fm, p2);
    const VectorXd f12 = line_flows(fm, MatrixXd(2.0 * p1 - 3.0 * p2));
    EXPECT_LE((f12 - (2.0 * f1 - 3.0 * f2)).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LE((line_flows(fm, MatrixXd(-p1)) + f1).cwiseAbs().maxCoeff(), 1e-10);
    for (Index k = 0; k < f1.size(); k += 2) EXPECT_DOUBLE_EQ(f1(k), -f1(k + 1));
}

TEST(ShiftFactors, FlowsSatisfyKirchhoffAtEveryNode) {
    std::mt19937_64 gen(6);
    const Grid g = random_grid(gen, 8);
    const VectorXd p = balanced_injection(gen, 8);
    const VectorXd f = injection_shift_factors(g, g.slack) * p;
    VectorXd net = VectorXd::Zero(8);
    for (std::size_t k = 0; k < g.lines.size(); ++k) {
        net(g.lines[k].from) += f(k);
        net(g.lines[k].to) -= f(k);
    }
    EXPECT_LE((net - p).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(FlowMap, UnbalancedInjectionIsRejected) {
    const FlowMap fm = build_flow_maps(triangle(), {}, 1);
    MatrixXd inj(3, 1);
    inj << 90.0, -80.0, 0.0;
    EXPECT_THROW(line_flows(fm, inj), ValidationError);
}

TEST(FlowMap, CaseStudyHasTwoLimitedLines) {
    const CaseFile c = load_case(default_case_path());
    for (int T : {1, 8}) {
        const FlowMap fm = build_flow_maps(c.grid, {}, T);
        EXPECT_EQ(fm.limited_lines.size(), 2u);
        EXPECT_EQ(fm.rows(), 4 * T);
    }
}

TEST(FlowMap, ParticipantMapsAreBlockDiagonalColumns) {
    Grid g = triangle();
    g.lines[0].limit = 50.0;
    std::vector<Participant> parts{make_load("L", 2, VectorXd::Constant(3, 10.0), 1)};
    const FlowMap fm = build_flow_maps(g, parts, 3);
    ASSERT_EQ(fm.gamma.size(), 1u);
    const MatrixXd& G = fm.gamma[0];
    EXPECT_EQ(G.rows(), 6);
    EXPECT_EQ(G.cols(), 3);
    for (Index r = 0; r < 6; ++r)
        for (Index t = 0; t < 3; ++t)
            EXPECT_DOUBLE_EQ(G(r, t), r / 2 == t ? fm.static_map(r % 2, 2) : 0.0);
}

TEST(Validation, DisconnectedAndOutOfRangeGridsAreRejected) {
    Grid g;
    g.n_nodes = 3;
    g.lines = {{0, 1, 1.0, inf}};
    EXPECT_THROW(validate(g), ValidationError);
    Grid h = triangle();
    h.slack = 5;
    EXPECT_THROW(validate(h), ValidationError);
    Grid k = triangle();
    std::vector<Participant> parts{make_load("L", 4, VectorXd::Constant(1, 1.0), 1)};
    EXPECT_THROW(build_flow_maps(k, parts, 1), ValidationError);
}

TEST(Balance, SolvedPoliciesBalanceAndAZeroedRowBreaksIt) {
    const int T = 3;
    std::vector<Participant> parts;
    parts.push_back(build_thermal_generator({20.0, 0.02, 1.0, 500.0, 150.0}, T, 1, "A", 0));
    parts.push_back(build_thermal_generator({25.0, 0.05, 0.5, 500.0, 100.0}, T, 1, "B", 1));
    RowVectorXd g(1);
    g << 1.0;
    parts.push_back(make_wind_farm("W", 1, g, VectorXd::Constant(T, 40.0), T));
    parts.push_back(make_load("L", 0, VectorXd::Constant(T, 300.0), 1));
    Grid grid;
    grid.n_nodes = 2;
    grid.lines = {{0, 1, 5.0, inf}};
    const FlowMap fm = build_flow_maps(grid, parts, T);
    const auto box = UncertaintyPolytope::from_box(VectorXd::Constant(T, -20.0), VectorXd::Constant(T, 30.0));
    MomentEstimate mom = MomentEstimate::zero(T);
    mom.second_moment = MatrixXd::Identity(T, T) * 100.0;
    const RobustProgram prog = assemble_robust_program(parts, fm, box, mom);
    const QpSolution sol = solve_qp(prog.qp);
    ASSERT_TRUE(sol.optimal());
    auto pol = read_policies(prog, parts, sol.x);

    std::mt19937_64 gen(3);
    std::uniform_real_distribution<double> U(-20.0, 30.0);
    VectorXd delta(T);
    for (int trial = 0; trial < 20; ++trial) {
        for (auto& v : delta) v = U(gen);
        EXPECT_LE(balance_residual(parts, pol, delta).cwiseAbs().maxCoeff(), 1e-6);
    }
    pol[0].D.row(1).setZero();
    pol[1].D.row(1).setZero();
    delta.setZero();
    delta(1) = 10.0;
    EXPECT_NEAR(std::abs(balance_residual(parts, pol, delta)(1)), 10.0, 1e-6);
}
