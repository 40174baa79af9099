#pragma once

// Lossless DC transmission model: power balance and directed line-flow maps.

#include <cmath>
#include <limits>
#include <queue>
#include <vector>

#include "affine_reserve/errors.hpp"
#include "affine_reserve/horizon_model.hpp"
#include "affine_reserve/linalg.hpp"

namespace affine_reserve {

struct Line {
    int from = 0;  // 0-based node
    int to = 0;
    double susceptance = 1.0;  // 1 / reactance
    double limit = std::numeric_limits<double>::infinity();  // MW, both directions

    bool limited() const { return std::isfinite(limit); }
};

struct Grid {
    int n_nodes = 0;
    std::vector<Line> lines;
    int slack = 0;
};

inline bool is_connected(const Grid& g) {
    if (g.n_nodes <= 0) return false;
    std::vector<std::vector<int>> adj(g.n_nodes);
    for (const auto& l : g.lines) {
        adj[l.from].push_back(l.to);
        adj[l.to].push_back(l.from);
    }
    std::vector<bool> seen(g.n_nodes, false);
    std::queue<int> open;
    open.push(0);
    seen[0] = true;
    int count = 1;
    while (!open.empty()) {
        const int v = open.front();
        open.pop();
        for (int w : adj[v])
            if (!seen[w]) {
                seen[w] = true;
                ++count;
                open.push(w);
            }
    }
    return count == g.n_nodes;
}

inline void validate(const Grid& g) {
    if (g.n_nodes < 1) throw ValidationError("network needs at least one node", "network.n_nodes");
    if (g.slack < 0 || g.slack >= g.n_nodes) throw ValidationError("slack node out of range", "network.slack");
    for (std::size_t k = 0; k < g.lines.size(); ++k) {
        const auto& l = g.lines[k];
        const std::string path = "network.lines[" + std::to_string(k) + "]";
        if (l.from < 0 || l.from >= g.n_nodes || l.to < 0 || l.to >= g.n_nodes || l.from == l.to)
            throw ValidationError("line endpoints invalid", path);
        if (!(l.susceptance > 0.0)) throw ValidationError("susceptance must be positive", path);
        if (!(l.limit > 0.0)) throw ValidationError("limit must be positive", path);
    }
    if (!is_connected(g)) throw ValidationError("network graph is disconnected", "network.lines");
}

/// Line-flow sensitivity to nodal injections (L x N_n), reference angle at
/// `slack`. Each row gives the flow from -> to for a balanced injection.
inline MatrixXd injection_shift_factors(const Grid& g, int slack) {
    const Index n = g.n_nodes;
    MatrixXd bbus = MatrixXd::Zero(n, n);
    for (const auto& l : g.lines) {
        bbus(l.from, l.from) += l.susceptance;
        bbus(l.to, l.to) += l.susceptance;
        bbus(l.from, l.to) -= l.susceptance;
        bbus(l.to, l.from) -= l.susceptance;
    }
    std::vector<Index> keep;
    for (Index k = 0; k < n; ++k)
        if (k != slack) keep.push_back(k);
    const Index m = static_cast<Index>(keep.size());
    MatrixXd reduced(m, m);
    for (Index a = 0; a < m; ++a)
        for (Index b = 0; b < m; ++b) reduced(a, b) = bbus(keep[a], keep[b]);

    // theta = X p with X the inverse reduced admittance, zero on the slack.
    MatrixXd x_full = MatrixXd::Zero(n, n);
    if (m > 0) {
        const MatrixXd x_red = reduced.ldlt().solve(MatrixXd::Identity(m, m));
        for (Index a = 0; a < m; ++a)
            for (Index b = 0; b < m; ++b) x_full(keep[a], keep[b]) = x_red(a, b);
    }
    MatrixXd ptdf(g.lines.size(), n);
    for (std::size_t k = 0; k < g.lines.size(); ++k) {
        const auto& l = g.lines[k];
        ptdf.row(k) = l.susceptance * (x_full.row(l.from) - x_full.row(l.to));
    }
    return ptdf;
}

/// Directed flow constraint data over a horizon. Only lines with a finite
/// limit produce constraint rows; the row order at each step is
/// [line_0 forward, line_0 reverse, line_1 forward, ...].
struct FlowMap {
    int horizon = 0;
    int n_nodes = 0;
    MatrixXd shift_factors;            // L x N_n, all lines
    std::vector<int> limited_lines;    // indices into Grid::lines
    MatrixXd static_map;               // 2 L_lim x N_n
    VectorXd static_limits;            // 2 L_lim
    VectorXd p_bar;                    // 2 L_lim T
    std::vector<MatrixXd> gamma;       // per participant, 2 L_lim T x T

    Index rows() const { return p_bar.size(); }
    Index rows_per_step() const { return static_limits.size(); }
};

inline FlowMap build_flow_maps(const Grid& grid, const std::vector<Participant>& participants, int horizon) {
    validate(grid);
    if (horizon < 1) throw ValidationError("horizon must be at least 1", "horizon");
    FlowMap fm;
    fm.horizon = horizon;
    fm.n_nodes = grid.n_nodes;
    fm.shift_factors = injection_shift_factors(grid, grid.slack);
    for (std::size_t k = 0; k < grid.lines.size(); ++k)
        if (grid.lines[k].limited()) fm.limited_lines.push_back(static_cast<int>(k));

    const Index nl = static_cast<Index>(fm.limited_lines.size());
    fm.static_map.resize(2 * nl, grid.n_nodes);
    fm.static_limits.resize(2 * nl);
    for (Index a = 0; a < nl; ++a) {
        const int k = fm.limited_lines[a];
        fm.static_map.row(2 * a) = fm.shift_factors.row(k);
        fm.static_map.row(2 * a + 1) = -fm.shift_factors.row(k);
        fm.static_limits(2 * a) = grid.lines[k].limit;
        fm.static_limits(2 * a + 1) = grid.lines[k].limit;
    }
    fm.p_bar = linalg::kron(VectorXd::Ones(horizon), fm.static_limits);
    const MatrixXd eye = MatrixXd::Identity(horizon, horizon);
    for (const auto& p : participants) {
        if (p.node < 0 || p.node >= grid.n_nodes) throw ValidationError("participant node out of range", p.id);
        fm.gamma.push_back(linalg::kron(eye, MatrixXd(fm.static_map.col(p.node))));
    }
    return fm;
}

/// Directed flows on every line (not only limited ones) for a nodal
/// injection matrix (N_n x T). Output is 2 L T: per step, per line,
/// [forward, reverse].
inline VectorXd line_flows(const FlowMap& fm, const MatrixXd& injections, double balance_tol = 1e-6) {
    if (injections.rows() != fm.n_nodes) throw ValidationError("injection matrix must have N_n rows", "injections");
    const Index L = fm.shift_factors.rows();
    VectorXd out(2 * L * injections.cols());
    for (Index t = 0; t < injections.cols(); ++t) {
        const double sum = injections.col(t).sum();
        const double scale = std::max(1.0, injections.col(t).cwiseAbs().maxCoeff());
        if (std::abs(sum) > balance_tol * scale)
            throw ValidationError("injections are not balanced at step " + std::to_string(t), "injections");
        const VectorXd f = fm.shift_factors * injections.col(t);
        for (Index k = 0; k < L; ++k) {
            out(t * 2 * L + 2 * k) = f(k);
            out(t * 2 * L + 2 * k + 1) = -f(k);
        }
    }
    return out;
}

/// Affine policy (D, e): u = D delta + e, D block lower triangular.
struct AffinePolicy {
    MatrixXd D;  // T x (N_delta T)
    VectorXd e;  // T

    VectorXd inputs(const VectorXd& delta) const { return D * delta + e; }
};

/// Stacked elastic state trajectory for a realized delta.
inline VectorXd policy_states(const Participant& p, const AffinePolicy& pol, const VectorXd& delta) {
    const auto& dyn = p.elastic->dynamics;
    return dyn.A * p.x0 + dyn.B * pol.inputs(delta);
}

/// Per-step horizon injection of one participant for a realized delta.
inline VectorXd participant_injection(const Participant& p, const AffinePolicy* pol, const VectorXd& delta) {
    VectorXd inj = p.r + p.G * delta;
    if (p.is_elastic()) inj += p.elastic->dynamics.C * policy_states(p, *pol, delta);
    return inj;
}

/// Sum over participants of r + G delta + C x, per step. `policies` is
/// indexed like `participants`; entries for inelastic participants are
/// ignored.
inline VectorXd balance_residual(const std::vector<Participant>& participants,
                                 const std::vector<AffinePolicy>& policies, const VectorXd& delta) {
    if (participants.empty()) return {};
    if (policies.size() != participants.size())
        throw ValidationError("one policy slot per participant is required", "policies");
    VectorXd res = VectorXd::Zero(participants.front().horizon());
    for (std::size_t i = 0; i < participants.size(); ++i)
        res += participant_injection(participants[i], &policies[i], delta);
    return res;
}

/// Nodal injection matrix (N_n x T) for a realized delta.
inline MatrixXd nodal_injections(const FlowMap& fm, const std::vector<Participant>& participants,
                                 const std::vector<AffinePolicy>& policies, const VectorXd& delta) {
    MatrixXd inj = MatrixXd::Zero(fm.n_nodes, fm.horizon);
    for (std::size_t i = 0; i < participants.size(); ++i)
        inj.row(participants[i].node) += participant_injection(participants[i], &policies[i], delta).transpose();
    return inj;
}

}  // namespace affine_reserve
