#pragma once

// Explicit robust program: every constraint imposed at every vertex of a box
// uncertainty set, solved with a dense ADMM. Shares no code with the
// dualized assembly or the interior point engine; only the participant data
// and the expected-cost quadratic are reused.

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <vector>

#include "affine_reserve/horizon_model.hpp"
#include "affine_reserve/network.hpp"
#include "affine_reserve/robust_builder.hpp"
#include "affine_reserve/uncertainty.hpp"

namespace affine_reserve::testing {

struct AdmmResult {
    Eigen::VectorXd x;
    double objective = 0.0;
    int iterations = 0;
    bool converged = false;
};

/// min x'Px/2 + q'x s.t. lo <= A x <= hi, dense ADMM with residual balancing.
inline AdmmResult admm_solve(const Eigen::MatrixXd& P, const Eigen::VectorXd& q, const Eigen::MatrixXd& A,
                             const Eigen::VectorXd& lo, const Eigen::VectorXd& hi, double tol = 1e-10,
                             int max_iter = 200000) {
    const Eigen::Index n = P.rows(), m = A.rows();
    const double sigma = 1e-6, alpha = 1.6;
    double rho = 0.1;
    Eigen::VectorXd x = Eigen::VectorXd::Zero(n), z = Eigen::VectorXd::Zero(m), y = Eigen::VectorXd::Zero(m);
    auto factor = [&] {
        return Eigen::LDLT<Eigen::MatrixXd>(P + sigma * Eigen::MatrixXd::Identity(n, n) + rho * A.transpose() * A);
    };
    Eigen::LDLT<Eigen::MatrixXd> ldlt = factor();
    AdmmResult out;
    for (int it = 1; it <= max_iter; ++it) {
        const Eigen::VectorXd xt = ldlt.solve(sigma * x - q + A.transpose() * (rho * z - y));
        const Eigen::VectorXd zt = A * xt;
        const Eigen::VectorXd xn = alpha * xt + (1 - alpha) * x;
        const Eigen::VectorXd zr = alpha * zt + (1 - alpha) * z;
        const Eigen::VectorXd zn = (zr + y / rho).cwiseMax(lo).cwiseMin(hi);
        y += rho * (zr - zn);
        x = xn;
        z = zn;
        if (it % 25 == 0) {
            const Eigen::VectorXd ax = A * x;
            const double rp = (ax - z).lpNorm<Eigen::Infinity>();
            const double rd = (P * x + q + A.transpose() * y).lpNorm<Eigen::Infinity>();
            const double sp = std::max({1.0, ax.lpNorm<Eigen::Infinity>(), z.lpNorm<Eigen::Infinity>()});
            const double sd = std::max({1.0, (P * x).lpNorm<Eigen::Infinity>(), q.lpNorm<Eigen::Infinity>(),
                                        (A.transpose() * y).lpNorm<Eigen::Infinity>()});
            if (rp <= tol * sp && rd <= tol * sd) {
                out.converged = true;
                out.iterations = it;
                break;
            }
            const double ratio = std::sqrt((rp / sp) / std::max(rd / sd, 1e-300));
            if (ratio > 5.0 || ratio < 0.2) {
                rho = std::clamp(rho * ratio, 1e-6, 1e6);
                ldlt = factor();
            }
        }
        out.iterations = it;
    }
    out.x = x;
    out.objective = 0.5 * x.dot(P * x) + q.dot(x);
    return out;
}

struct VertexProgramResult {
    bool converged = false;
    double objective = 0.0;  // including cost constants
    std::vector<AffinePolicy> policies;
    int rows = 0;
};

/// Every corner of an axis-aligned box.
inline std::vector<Eigen::VectorXd> box_vertices(const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
    const Eigen::Index n = lo.size();
    std::vector<Eigen::VectorXd> out;
    for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
        Eigen::VectorXd v(n);
        for (Eigen::Index c = 0; c < n; ++c) v(c) = (mask >> c) & 1 ? hi(c) : lo(c);
        out.push_back(v);
    }
    return out;
}

/// Robust program with vertex-wise constraints. `allowed(l, j)` masks D.
inline VertexProgramResult solve_vertex_program(const std::vector<Participant>& parts, const FlowMap& flows,
                                                const UncertaintyPolytope& box, const MomentEstimate& mom,
                                                const PolicyStructure& structure, double reg = 1e-8) {
    const int T = parts.front().horizon();
    const Eigen::Index ndt = parts.front().n_delta_total();
    const Eigen::Index nd = ndt / T;
    auto allowed = [&](int l, Eigen::Index j) { return structure.allows(l, static_cast<int>(j / nd)); };

    // variable layout: per elastic participant e (T) then masked D row-major
    std::vector<Eigen::Index> e0(parts.size(), -1);
    std::vector<std::vector<Eigen::Index>> dvar(parts.size());
    Eigen::Index n = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (!parts[i].is_elastic()) continue;
        e0[i] = n;
        n += T;
        dvar[i].assign(static_cast<std::size_t>(T * ndt), -1);
        for (int l = 0; l < T; ++l)
            for (Eigen::Index j = 0; j < ndt; ++j)
                if (allowed(l, j)) dvar[i][l * ndt + j] = n++;
    }

    Eigen::MatrixXd P = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd q = Eigen::VectorXd::Zero(n);
    double constant = 0.0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (!parts[i].is_elastic()) continue;
        const PolicyQuadratic pq = expected_cost_coefficients(parts[i], mom);
        std::vector<Eigen::Index> map(static_cast<std::size_t>(T + T * ndt), -1);
        for (int k = 0; k < T; ++k) map[k] = e0[i] + k;
        for (int k = 0; k < T * ndt; ++k) map[T + k] = dvar[i][k];
        for (std::size_t a = 0; a < map.size(); ++a) {
            if (map[a] < 0) continue;
            q(map[a]) += pq.linear(static_cast<Eigen::Index>(a));
            for (std::size_t b = 0; b < map.size(); ++b)
                if (map[b] >= 0) P(map[a], map[b]) += pq.hessian(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
        }
        constant += pq.constant;
    }
    P.diagonal().array() += reg;

    const auto [lo, hi] = box.box();
    const auto verts = box_vertices(lo, hi);
    std::vector<Eigen::RowVectorXd> rows;
    std::vector<double> rlo, rhi;

    // injection of participant i at step l as (coefficients, constant) for vertex d
    auto injection = [&](std::size_t i, int l, const Eigen::VectorXd& d, Eigen::RowVectorXd& coef, double& c) {
        const Participant& p = parts[i];
        c += p.r(l) + p.G.row(l).dot(d);
        if (!p.is_elastic()) return;
        const auto& dyn = p.elastic->dynamics;
        const Eigen::MatrixXd cb = dyn.C * dyn.B;
        c += (dyn.C * dyn.A * p.x0)(l);
        for (int k = 0; k < T; ++k) {
            if (cb(l, k) == 0.0) continue;
            coef(e0[i] + k) += cb(l, k);
            for (Eigen::Index j = 0; j < ndt; ++j)
                if (dvar[i][k * ndt + j] >= 0) coef(dvar[i][k * ndt + j]) += cb(l, k) * d(j);
        }
    };

    for (const auto& d : verts) {
        for (int l = 0; l < T; ++l) {
            Eigen::RowVectorXd coef = Eigen::RowVectorXd::Zero(n);
            double c = 0.0;
            for (std::size_t i = 0; i < parts.size(); ++i) injection(i, l, d, coef, c);
            rows.push_back(coef);
            rlo.push_back(-c);
            rhi.push_back(-c);
        }
        for (Eigen::Index rho = 0; rho < flows.rows(); ++rho) {
            Eigen::RowVectorXd coef = Eigen::RowVectorXd::Zero(n);
            double c = 0.0;
            for (std::size_t i = 0; i < parts.size(); ++i)
                for (int l = 0; l < T; ++l) {
                    const double g = flows.gamma[i](rho, l);
                    if (g == 0.0) continue;
                    Eigen::RowVectorXd ci = Eigen::RowVectorXd::Zero(n);
                    double cc = 0.0;
                    injection(i, l, d, ci, cc);
                    coef += g * ci;
                    c += g * cc;
                }
            rows.push_back(coef);
            rlo.push_back(-1e30);
            rhi.push_back(flows.p_bar(rho) - c);
        }
        for (std::size_t i = 0; i < parts.size(); ++i) {
            if (!parts[i].is_elastic()) continue;
            const auto& m = *parts[i].elastic;
            const Eigen::MatrixXd resp = m.local.T_mat * m.dynamics.B + m.local.U_mat;
            const Eigen::VectorXd base = m.local.T_mat * m.dynamics.A * parts[i].x0;
            for (Eigen::Index r = 0; r < m.local.rows(); ++r) {
                Eigen::RowVectorXd coef = Eigen::RowVectorXd::Zero(n);
                double c = base(r);
                if (m.local.V_mat.cols() > 0) c += m.local.V_mat.row(r).dot(d);
                for (int k = 0; k < T; ++k) {
                    if (resp(r, k) == 0.0) continue;
                    coef(e0[i] + k) += resp(r, k);
                    for (Eigen::Index j = 0; j < ndt; ++j)
                        if (dvar[i][k * ndt + j] >= 0) coef(dvar[i][k * ndt + j]) += resp(r, k) * d(j);
                }
                rows.push_back(coef);
                rlo.push_back(-1e30);
                rhi.push_back(m.local.w(r) - c);
            }
        }
    }

    Eigen::MatrixXd A(static_cast<Eigen::Index>(rows.size()), n);
    for (std::size_t r = 0; r < rows.size(); ++r) A.row(static_cast<Eigen::Index>(r)) = rows[r];
    const Eigen::VectorXd vlo = Eigen::Map<Eigen::VectorXd>(rlo.data(), static_cast<Eigen::Index>(rlo.size()));
    const Eigen::VectorXd vhi = Eigen::Map<Eigen::VectorXd>(rhi.data(), static_cast<Eigen::Index>(rhi.size()));
    const AdmmResult sol = admm_solve(P, q, A, vlo, vhi);

    VertexProgramResult out;
    out.converged = sol.converged;
    out.objective = sol.objective + constant;
    out.rows = static_cast<int>(rows.size());
    out.policies.resize(parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (!parts[i].is_elastic()) continue;
        out.policies[i].e = sol.x.segment(e0[i], T);
        out.policies[i].D = Eigen::MatrixXd::Zero(T, ndt);
        for (int l = 0; l < T; ++l)
            for (Eigen::Index j = 0; j < ndt; ++j)
                if (dvar[i][l * ndt + j] >= 0) out.policies[i].D(l, j) = sol.x(dvar[i][l * ndt + j]);
    }
    return out;
}

/// Random small instance: a 3-node line network with one limited line, 2 or
/// 3 elastic participants, one wind farm and one load; N_delta = 1 and a box
/// uncertainty set.
struct SmallInstance {
    Grid grid;
    std::vector<Participant> parts;
    FlowMap flows;
    UncertaintyPolytope box;
    MomentEstimate moments;
};

inline SmallInstance random_small_instance(std::mt19937_64& gen, int T, int n_elastic) {
    std::uniform_real_distribution<double> U(0.0, 1.0);
    SmallInstance s;
    s.grid.n_nodes = 3;
    s.grid.slack = 0;
    s.grid.lines = {{0, 1, 10.0, std::numeric_limits<double>::infinity()}, {1, 2, 8.0, 140.0 + 60.0 * U(gen)}};
    const Eigen::Index nd = 1;
    for (int i = 0; i < n_elastic; ++i) {
        const int node = i % 3;
        if (i == 2) {
            StorageSpec st{200.0, 0.002 + 0.01 * U(gen), 60.0, 60.0 + 80.0 * U(gen), 0.25};
            s.parts.push_back(build_storage_unit(st, T, nd, "S" + std::to_string(i), node));
        } else {
            ThermalGeneratorSpec g{15.0 + 20.0 * U(gen), 0.01 + 0.1 * U(gen), 0.5 * U(gen), 400.0, 100.0 + 50.0 * U(gen)};
            s.parts.push_back(build_thermal_generator(g, T, nd, "G" + std::to_string(i), node));
        }
    }
    Eigen::VectorXd mean_q(T);
    for (int k = 0; k < T; ++k) mean_q(k) = 40.0 + 20.0 * U(gen);
    Eigen::RowVectorXd gt(1);
    gt << 1.0;
    s.parts.push_back(make_wind_farm("W", 2, gt, mean_q, T));
    Eigen::VectorXd demand(T);
    for (int k = 0; k < T; ++k) demand(k) = 200.0 + 60.0 * U(gen);
    s.parts.push_back(make_load("L", 1, demand, nd));
    s.flows = build_flow_maps(s.grid, s.parts, T);

    Eigen::VectorXd lo(T), hi(T);
    for (int k = 0; k < T; ++k) {
        lo(k) = -(5.0 + 20.0 * U(gen));
        hi(k) = 5.0 + 20.0 * U(gen);
    }
    s.box = UncertaintyPolytope::from_box(lo, hi);
    Eigen::MatrixXd F(T, T);
    for (int r = 0; r < T; ++r)
        for (int c = 0; c < T; ++c) F(r, c) = 10.0 * (U(gen) - 0.5);
    s.moments = MomentEstimate::zero(T);
    s.moments.second_moment = F * F.transpose();
    s.moments.mean_q = mean_q;
    return s;
}

}  // namespace affine_reserve::testing
