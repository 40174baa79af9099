#pragma once

// Independent reference computations used by the unit and acceptance
// suites. Nothing here calls into the interior point engine.

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "affine_reserve/qp_core.hpp"

namespace affine_reserve::testing {

struct DenseQp {
    Eigen::MatrixXd P;
    Eigen::VectorXd q;
    Eigen::MatrixXd A;  // equalities
    Eigen::VectorXd b;
    Eigen::MatrixXd G;  // inequalities
    Eigen::VectorXd h;

    QpProblem to_problem() const {
        QpProblem p;
        p.num_vars = P.rows();
        p.P = P.sparseView();
        p.q = q;
        p.A_eq = A.sparseView();
        p.b_eq = b;
        p.A_in = G.sparseView();
        p.b_in = h;
        p.eq_blocks = {{"eq", 0, A.rows()}};
        p.in_blocks = {{"in", 0, G.rows()}};
        return p;
    }
};

struct ActiveSetResult {
    Eigen::VectorXd x, y, z;
    double objective = 0.0;
};

/// Brute-force enumeration of active sets for a strictly convex QP. Returns
/// the unique KKT point (primal feasible, z >= 0) or nothing if none exists.
inline std::optional<ActiveSetResult> active_set_oracle(const DenseQp& qp) {
    const Eigen::Index n = qp.P.rows(), me = qp.A.rows(), mi = qp.G.rows();
    for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << mi); ++mask) {
        std::vector<Eigen::Index> act;
        for (Eigen::Index i = 0; i < mi; ++i)
            if (mask & (std::uint64_t{1} << i)) act.push_back(i);
        const Eigen::Index na = static_cast<Eigen::Index>(act.size());
        if (me + na > n) continue;
        const Eigen::Index N = n + me + na;
        Eigen::MatrixXd K = Eigen::MatrixXd::Zero(N, N);
        Eigen::VectorXd rhs(N);
        K.topLeftCorner(n, n) = qp.P;
        rhs.head(n) = -qp.q;
        if (me) {
            K.block(0, n, n, me) = qp.A.transpose();
            K.block(n, 0, me, n) = qp.A;
            rhs.segment(n, me) = qp.b;
        }
        for (Eigen::Index k = 0; k < na; ++k) {
            K.block(0, n + me + k, n, 1) = qp.G.row(act[k]).transpose();
            K.block(n + me + k, 0, 1, n) = qp.G.row(act[k]);
            rhs(n + me + k) = qp.h(act[k]);
        }
        Eigen::FullPivLU<Eigen::MatrixXd> lu(K);
        if (lu.rank() < N) continue;
        const Eigen::VectorXd sol = lu.solve(rhs);
        const Eigen::VectorXd x = sol.head(n);
        if (mi && ((qp.G * x - qp.h).array() > 1e-9).any()) continue;
        Eigen::VectorXd z = Eigen::VectorXd::Zero(mi);
        bool dual_ok = true;
        for (Eigen::Index k = 0; k < na; ++k) {
            z(act[k]) = sol(n + me + k);
            if (z(act[k]) < -1e-9) dual_ok = false;
        }
        if (!dual_ok) continue;
        ActiveSetResult r;
        r.x = x;
        r.y = me ? Eigen::VectorXd(sol.segment(n, me)) : Eigen::VectorXd();
        r.z = z;
        r.objective = 0.5 * x.dot(qp.P * x) + qp.q.dot(x);
        return r;
    }
    return std::nullopt;
}

/// Random strictly convex QP with a known strictly feasible point.
inline DenseQp random_strictly_convex_qp(std::mt19937_64& gen, int n, int me, int mi) {
    std::normal_distribution<double> nd(0.0, 1.0);
    std::uniform_real_distribution<double> ud(0.1, 1.0);
    auto randn = [&](Eigen::Index r, Eigen::Index c) {
        Eigen::MatrixXd m(r, c);
        for (Eigen::Index i = 0; i < r; ++i)
            for (Eigen::Index j = 0; j < c; ++j) m(i, j) = nd(gen);
        return m;
    };
    DenseQp qp;
    const Eigen::MatrixXd L = randn(n, n);
    qp.P = L * L.transpose() + 0.5 * Eigen::MatrixXd::Identity(n, n);
    qp.q = randn(n, 1);
    const Eigen::VectorXd x_feas = randn(n, 1);
    qp.A = randn(me, n);
    qp.b = qp.A * x_feas;
    qp.G = randn(mi, n);
    qp.h = qp.G * x_feas;
    for (int i = 0; i < mi; ++i) qp.h(i) += ud(gen);
    return qp;
}

}  // namespace affine_reserve::testing
