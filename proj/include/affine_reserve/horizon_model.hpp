#pragma once

// Power-system participants as stacked finite-horizon LTI systems with
// quadratic costs and polytopic local constraints.

#include <optional>
#include <string>
#include <vector>

#include "affine_reserve/errors.hpp"
#include "affine_reserve/linalg.hpp"
#include "affine_reserve/moments.hpp"

namespace affine_reserve {

/// Single-step dynamics x+ = A x + B u, output y = C x (net injection).
struct StageDynamics {
    MatrixXd A_tilde;
    VectorXd B_tilde;
    RowVectorXd C_tilde;

    Index state_dim() const { return A_tilde.rows(); }
};

/// Horizon-stacked dynamics: x = A x0 + B u over T steps, C selects the
/// injected power at each step.
struct StackedDynamics {
    MatrixXd A;  // (nT x n)
    MatrixXd B;  // (nT x T), block lower triangular
    MatrixXd C;  // (T x nT)
    int horizon = 0;
    Index state_dim = 0;
};

inline void validate(const StageDynamics& s) {
    const Index n = s.A_tilde.rows();
    if (n < 1 || s.A_tilde.cols() != n) throw ValidationError("A_tilde must be square and non-empty", "dynamics.A");
    if (s.B_tilde.size() != n) throw ValidationError("B_tilde length must equal the state dimension", "dynamics.B");
    if (s.C_tilde.size() != n) throw ValidationError("C_tilde length must equal the state dimension", "dynamics.C");
}

inline StackedDynamics stack_dynamics(const StageDynamics& stage, int horizon) {
    validate(stage);
    if (horizon < 1) throw ValidationError("horizon must be at least 1", "horizon");
    const Index n = stage.state_dim();
    const Index T = horizon;

    // powers[k] = A_tilde^k
    std::vector<MatrixXd> powers(T + 1);
    powers[0] = MatrixXd::Identity(n, n);
    for (Index k = 1; k <= T; ++k) powers[k] = stage.A_tilde * powers[k - 1];

    StackedDynamics out;
    out.horizon = horizon;
    out.state_dim = n;
    out.A.resize(n * T, n);
    out.B = MatrixXd::Zero(n * T, T);
    for (Index k = 0; k < T; ++k) {
        out.A.block(k * n, 0, n, n) = powers[k + 1];
        for (Index j = 0; j <= k; ++j) out.B.block(k * n, j, n, 1) = powers[k - j] * stage.B_tilde;
    }
    out.C = linalg::kron(MatrixXd::Identity(T, T), stage.C_tilde);
    return out;
}

/// True iff C B = I_T elementwise to 1e-12, i.e. the input at step k sets the
/// injection at step k + 1 directly.
inline bool verify_direct_feedthrough(const StackedDynamics& dyn) {
    if (dyn.horizon < 1) return false;
    const MatrixXd cb = dyn.C * dyn.B;
    return (cb - MatrixXd::Identity(dyn.horizon, dyn.horizon)).cwiseAbs().maxCoeff() <= 1e-12;
}

/// Per-step cost f_x'x + x'H_x x / 2 + f_u u + H_u u^2 / 2 + c.
struct StageCost {
    VectorXd f_x;
    MatrixXd H_x;
    double f_u = 0.0;
    double H_u = 0.0;
    double c = 0.0;

    double evaluate(const VectorXd& x, double u) const {
        return f_x.dot(x) + 0.5 * x.dot(H_x * x) + f_u * u + 0.5 * H_u * u * u + c;
    }
};

/// Horizon cost J(x, u) over stacked trajectories.
struct QuadraticCost {
    VectorXd f_x;  // nT
    MatrixXd H_x;  // nT x nT
    VectorXd f_u;  // T
    MatrixXd H_u;  // T x T
    double c = 0.0;

    double evaluate(const VectorXd& x, const VectorXd& u) const {
        return f_x.dot(x) + 0.5 * x.dot(H_x * x) + f_u.dot(u) + 0.5 * u.dot(H_u * u) + c;
    }
};

inline QuadraticCost replicate_cost(const StageCost& stage, int horizon) {
    const Index n = stage.f_x.size();
    if (stage.H_x.rows() != n || stage.H_x.cols() != n)
        throw ValidationError("state Hessian dimension mismatch", "cost.H_x");
    linalg::require_psd(stage.H_x, "cost.H_x");
    if (stage.H_u < 0.0) throw ValidationError("input cost curvature must be nonnegative", "cost.H_u");

    const MatrixXd eye = MatrixXd::Identity(horizon, horizon);
    QuadraticCost out;
    out.f_x = linalg::kron(VectorXd::Ones(horizon), stage.f_x);
    out.H_x = linalg::kron(eye, stage.H_x);
    out.f_u = VectorXd::Constant(horizon, stage.f_u);
    out.H_u = stage.H_u * eye;
    out.c = horizon * stage.c;
    return out;
}

/// Per-step box limits on state and input; the source of the archetype
/// local polytopes and of the closed-loop constraint audit.
struct StageBounds {
    VectorXd x_lo, x_hi;
    double u_lo = 0.0, u_hi = 0.0;

    double violation(const VectorXd& x, double u) const {
        double v = std::max(u_lo - u, u - u_hi);
        for (Index c = 0; c < x.size(); ++c) v = std::max({v, x_lo(c) - x(c), x(c) - x_hi(c)});
        return std::max(v, 0.0);
    }
};

/// { (x, u, delta) : T x + U u + V delta <= w }. An empty V (zero columns)
/// means the constraints do not see the uncertainty.
struct LocalPolytope {
    MatrixXd T_mat;
    MatrixXd U_mat;
    MatrixXd V_mat;
    VectorXd w;

    Index rows() const { return w.size(); }

    VectorXd slack(const VectorXd& x, const VectorXd& u, const VectorXd& delta) const {
        VectorXd lhs = T_mat * x + U_mat * u;
        if (V_mat.cols() > 0) lhs += V_mat * delta;
        return w - lhs;
    }
};

/// Rows per step k = 1..T: [x_c <= hi, -x_c <= -lo] for each state
/// component c, then [u_{k-1} <= hi, -u_{k-1} <= -lo].
inline LocalPolytope box_local_polytope(const StageBounds& b, int horizon, Index n_delta) {
    const Index n = b.x_lo.size();
    const Index T = horizon;
    const Index per_step = 2 * n + 2;
    LocalPolytope p;
    p.T_mat = MatrixXd::Zero(per_step * T, n * T);
    p.U_mat = MatrixXd::Zero(per_step * T, T);
    p.V_mat = MatrixXd::Zero(per_step * T, n_delta * T);
    p.w = VectorXd::Zero(per_step * T);
    for (Index k = 0; k < T; ++k) {
        Index row = k * per_step;
        for (Index c = 0; c < n; ++c) {
            p.T_mat(row, k * n + c) = 1.0;
            p.w(row++) = b.x_hi(c);
            p.T_mat(row, k * n + c) = -1.0;
            p.w(row++) = -b.x_lo(c);
        }
        p.U_mat(row, k) = 1.0;
        p.w(row++) = b.u_hi;
        p.U_mat(row, k) = -1.0;
        p.w(row++) = -b.u_lo;
    }
    return p;
}

/// Everything a controllable participant carries.
struct ElasticModel {
    StageDynamics stage;
    StackedDynamics dynamics;
    StageCost stage_cost;
    QuadraticCost cost;
    StageBounds bounds;
    LocalPolytope local;
};

struct Participant {
    std::string id;
    int node = 0;  // 0-based network node
    std::optional<ElasticModel> elastic;
    VectorXd r;  // nominal inelastic injection, T
    MatrixXd G;  // T x (N_delta T)
    VectorXd x0;

    bool is_elastic() const { return elastic.has_value(); }
    int horizon() const { return static_cast<int>(r.size()); }
    Index n_delta_total() const { return G.cols(); }
};

struct ThermalGeneratorSpec {
    double f_u = 0.0;
    double H_u = 0.0;
    double alpha = 0.0;
    double p_max = 0.0;
    double p_0 = 0.0;
};

struct StorageSpec {
    double s_max = 0.0;
    double gamma = 0.0;
    double p_max = 0.0;
    double s_0 = 0.0;
    double tau = 0.25;
};

inline ElasticModel make_elastic_model(StageDynamics stage, StageCost cost, StageBounds bounds, int horizon,
                                       Index n_delta) {
    ElasticModel m;
    m.dynamics = stack_dynamics(stage, horizon);
    m.stage = std::move(stage);
    m.cost = replicate_cost(cost, horizon);
    m.stage_cost = std::move(cost);
    m.local = box_local_polytope(bounds, horizon, n_delta);
    m.bounds = std::move(bounds);
    return m;
}

inline Participant make_elastic_participant(std::string id, int node, ElasticModel model, VectorXd x0,
                                            Index n_delta) {
    if (x0.size() != model.stage.state_dim()) throw ValidationError("initial state dimension mismatch", id + ".x0");
    const int T = model.dynamics.horizon;
    Participant p;
    p.id = std::move(id);
    p.node = node;
    p.r = VectorXd::Zero(T);
    p.G = MatrixXd::Zero(T, n_delta * T);
    p.x0 = std::move(x0);
    p.elastic = std::move(model);
    return p;
}

/// Two-state generator: [current output, previous output], quadratic fuel
/// cost and a ramping penalty alpha (p_k - p_{k-1})^2 / 2.
inline Participant build_thermal_generator(const ThermalGeneratorSpec& spec, int horizon, Index n_delta,
                                           std::string id = "generator", int node = 0) {
    if (spec.H_u < 0.0) throw ValidationError("negative fuel cost curvature", id + ".h_u");
    if (spec.alpha < 0.0) throw ValidationError("negative ramping cost", id + ".alpha");
    if (!(spec.p_max > 0.0)) throw ValidationError("p_max must be positive", id + ".p_max");
    if (spec.p_0 < 0.0 || spec.p_0 > spec.p_max) throw ValidationError("p_0 outside [0, p_max]", id + ".p_0");

    StageDynamics stage;
    stage.A_tilde = MatrixXd::Zero(2, 2);
    stage.A_tilde(1, 0) = 1.0;
    stage.B_tilde = VectorXd::Zero(2);
    stage.B_tilde(0) = 1.0;
    stage.C_tilde = RowVectorXd::Zero(2);
    stage.C_tilde(0) = 1.0;

    StageCost cost;
    cost.f_x = VectorXd::Zero(2);
    cost.H_x.resize(2, 2);
    cost.H_x << spec.alpha, -spec.alpha, -spec.alpha, spec.alpha;
    cost.f_u = spec.f_u;
    cost.H_u = spec.H_u;
    cost.c = 0.0;

    StageBounds bounds;
    bounds.x_lo = VectorXd::Zero(2);
    bounds.x_hi = VectorXd::Constant(2, spec.p_max);
    bounds.u_lo = 0.0;
    bounds.u_hi = spec.p_max;

    VectorXd x0 = VectorXd::Constant(2, spec.p_0);
    return make_elastic_participant(std::move(id), node,
                                    make_elastic_model(stage, cost, bounds, horizon, n_delta), x0, n_delta);
}

/// Three-state storage: [current output, previous output, level]; the level
/// integrates -tau * output and pays gamma (s - s_max/2)^2 per step.
inline Participant build_storage_unit(const StorageSpec& spec, int horizon, Index n_delta,
                                      std::string id = "storage", int node = 0) {
    if (!(spec.s_max > 0.0)) throw ValidationError("s_max must be positive", id + ".s_max");
    if (spec.s_0 < 0.0 || spec.s_0 > spec.s_max) throw ValidationError("s_0 outside [0, s_max]", id + ".s_0");
    if (!(spec.tau > 0.0)) throw ValidationError("tau must be positive", id + ".tau");
    if (spec.gamma < 0.0) throw ValidationError("gamma must be nonnegative", id + ".gamma");
    if (!(spec.p_max > 0.0)) throw ValidationError("p_max must be positive", id + ".p_max");

    StageDynamics stage;
    stage.A_tilde = MatrixXd::Zero(3, 3);
    stage.A_tilde(1, 0) = 1.0;
    stage.A_tilde(2, 2) = 1.0;
    stage.B_tilde = VectorXd::Zero(3);
    stage.B_tilde(0) = 1.0;
    stage.B_tilde(2) = -spec.tau;
    stage.C_tilde = RowVectorXd::Zero(3);
    stage.C_tilde(0) = 1.0;

    StageCost cost;
    cost.f_x = VectorXd::Zero(3);
    cost.f_x(2) = -2.0 * spec.gamma * spec.s_max / 2.0;
    cost.H_x = MatrixXd::Zero(3, 3);
    cost.H_x(2, 2) = 2.0 * spec.gamma;
    cost.f_u = 0.0;
    cost.H_u = 0.0;
    cost.c = spec.gamma * (spec.s_max / 2.0) * (spec.s_max / 2.0);

    StageBounds bounds;
    bounds.x_lo.resize(3);
    bounds.x_lo << -spec.p_max, -spec.p_max, 0.0;
    bounds.x_hi.resize(3);
    bounds.x_hi << spec.p_max, spec.p_max, spec.s_max;
    bounds.u_lo = -spec.p_max;
    bounds.u_hi = spec.p_max;

    VectorXd x0(3);
    x0 << 0.0, 0.0, spec.s_0;
    return make_elastic_participant(std::move(id), node,
                                    make_elastic_model(stage, cost, bounds, horizon, n_delta), x0, n_delta);
}

/// Inelastic load: r = -nominal, no uncertainty dependence.
inline Participant make_load(std::string id, int node, const VectorXd& demand, Index n_delta) {
    Participant p;
    p.id = std::move(id);
    p.node = node;
    p.r = -demand;
    p.G = MatrixXd::Zero(demand.size(), n_delta * demand.size());
    return p;
}

/// Uncurtailed wind farm: G = I_T (x) g_tilde, r = G E[q].
inline Participant make_wind_farm(std::string id, int node, const RowVectorXd& g_tilde, const VectorXd& mean_q,
                                  int horizon) {
    if (mean_q.size() != g_tilde.size() * horizon)
        throw ValidationError("mean path length must be N_delta * T", id + ".mean_q");
    Participant p;
    p.id = std::move(id);
    p.node = node;
    p.G = linalg::kron(MatrixXd::Identity(horizon, horizon), g_tilde);
    p.r = p.G * mean_q;
    return p;
}

/// Deterministic horizon cost J(A x0 + B u, u).
inline double trajectory_cost(const Participant& p, const VectorXd& u) {
    const auto& m = *p.elastic;
    const VectorXd x = m.dynamics.A * p.x0 + m.dynamics.B * u;
    return m.cost.evaluate(x, u);
}

/// Expected cost as a quadratic in z = [e; vec(D)] where vec is row-major
/// over the T x (N_delta T) policy matrix:  z' H z / 2 + g' z + c.
struct PolicyQuadratic {
    MatrixXd hessian;
    VectorXd linear;
    double constant = 0.0;
    Index horizon = 0;
    Index n_delta_total = 0;

    static VectorXd stack(const VectorXd& e, const MatrixXd& D) {
        VectorXd z(e.size() + D.size());
        z.head(e.size()) = e;
        for (Index l = 0; l < D.rows(); ++l) z.segment(e.size() + l * D.cols(), D.cols()) = D.row(l).transpose();
        return z;
    }

    double evaluate(const VectorXd& e, const MatrixXd& D) const {
        const VectorXd z = stack(e, D);
        return 0.5 * z.dot(hessian * z) + linear.dot(z) + constant;
    }

    VectorXd gradient(const VectorXd& e, const MatrixXd& D) const { return hessian * stack(e, D) + linear; }
};

inline PolicyQuadratic expected_cost_coefficients(const Participant& p, const VectorXd& mean_delta,
                                                  const MatrixXd& second_moment) {
    if (!p.is_elastic()) throw ValidationError("expected cost requires an elastic participant", p.id);
    const auto& m = *p.elastic;
    const Index T = m.dynamics.horizon;
    const Index nd = p.G.cols();
    if (mean_delta.size() != nd || second_moment.rows() != nd || second_moment.cols() != nd)
        throw ValidationError("moment dimensions must match N_delta * T", p.id + ".moments");
    if (!linalg::is_psd(second_moment)) throw ValidationError("second moment is not PSD", p.id + ".moments");

    const MatrixXd& A = m.dynamics.A;
    const MatrixXd& B = m.dynamics.B;
    const MatrixXd& Hx = m.cost.H_x;
    const VectorXd ax0 = A * p.x0;

    const MatrixXd M = linalg::symmetrize(B.transpose() * Hx * B + m.cost.H_u);
    const VectorXd g = B.transpose() * (m.cost.f_x + Hx * ax0) + m.cost.f_u;

    PolicyQuadratic q;
    q.horizon = T;
    q.n_delta_total = nd;
    const Index dim = T + T * nd;
    q.hessian = MatrixXd::Zero(dim, dim);
    q.linear = VectorXd::Zero(dim);

    q.hessian.topLeftCorner(T, T) = M;
    q.linear.head(T) = g;
    const MatrixXd Es = linalg::symmetrize(second_moment);
    for (Index l = 0; l < T; ++l) {
        for (Index j = 0; j < nd; ++j) {
            const Index a = T + l * nd + j;
            q.linear(a) = g(l) * mean_delta(j);
            for (Index k = 0; k < T; ++k) {
                q.hessian(k, a) = M(k, l) * mean_delta(j);
                q.hessian(a, k) = q.hessian(k, a);
            }
            for (Index l2 = 0; l2 < T; ++l2) {
                if (M(l, l2) == 0.0) continue;
                for (Index j2 = 0; j2 < nd; ++j2) q.hessian(a, T + l2 * nd + j2) = M(l, l2) * Es(j, j2);
            }
        }
    }
    q.constant = m.cost.c + m.cost.f_x.dot(ax0) + 0.5 * ax0.dot(Hx * ax0);
    return q;
}

inline PolicyQuadratic expected_cost_coefficients(const Participant& p, const MomentEstimate& moments) {
    return expected_cost_coefficients(p, moments.mean_delta, moments.second_moment);
}

}  // namespace affine_reserve
