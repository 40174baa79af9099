#pragma once

// Prices from the duals of the robust program.
//
// Sign convention: the program writes balance as sum(injections) = 0 and the
// solver's Lagrangian adds y'(A x - b). A participant's nodal price
// lambda_i = -B'C'(lambda + Gamma_i' nu) is then the amount paid per MW of
// scheduled injection per step, so a marginal generator sees a positive
// price equal to its marginal cost. Policy prices follow the same rule per
// entry of D. Native units are currency per MW per step; divide by the step
// length in hours for currency per MWh.

#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "affine_reserve/errors.hpp"
#include "affine_reserve/horizon_model.hpp"
#include "affine_reserve/network.hpp"
#include "affine_reserve/qp_core.hpp"
#include "affine_reserve/robust_builder.hpp"

namespace affine_reserve {

struct PriceSet {
    int horizon = 0;
    Index n_delta = 0;
    VectorXd lambda;   // T, balance multipliers
    MatrixXd Pi;       // T x N_delta T, response-balance multipliers
    VectorXd nu;       // flow rows, >= 0; zero for rows without variables
    MatrixXd Psi;      // flow rows x N_delta T
    std::vector<VectorXd> lambda_i;  // per participant, T
    std::vector<MatrixXd> Pi_i;      // per participant, T x N_delta T, non-causal entries zeroed

    /// Entry (l, j) responds to an error revealed no later than step l.
    bool causal(int l, Index j) const { return j / n_delta <= l; }
};

inline PriceSet extract_prices(const RobustProgram& prog, const std::vector<Participant>& participants,
                               const FlowMap& flows, const QpSolution& sol) {
    if (!sol.optimal()) throw NumericalError("prices need an optimal solution (" + sol.message + ")", "pricing");
    if (participants.size() != prog.block_of.size())
        throw ValidationError("participants do not match the program", "pricing");
    const int T = prog.horizon;
    const Index ndt = prog.n_delta_total;
    const Index nf = flows.rows();
    PriceSet ps;
    ps.horizon = T;
    ps.n_delta = prog.n_delta;

    ps.lambda = eq_block_duals(prog.qp, sol, labels::balance_nominal);
    if (ps.lambda.size() != T) throw NumericalError("balance rows missing from the program", labels::balance_nominal);

    ps.Pi = MatrixXd::Zero(T, ndt);
    const VectorXd pi = eq_block_duals(prog.qp, sol, labels::balance_response);
    for (std::size_t k = 0; k < prog.balance_response_rows.size(); ++k) {
        const auto [l, j] = prog.balance_response_rows[k];
        ps.Pi(l, j) = pi(static_cast<Index>(k));
    }

    ps.nu = VectorXd::Zero(nf);
    if (has_block(prog.qp.in_blocks, labels::line_limit)) {
        const VectorXd nu = in_block_duals(prog.qp, sol, labels::line_limit);
        for (std::size_t k = 0; k < prog.line_limit_rows.size(); ++k)
            ps.nu(prog.line_limit_rows[k]) = nu(static_cast<Index>(k));
    }
    ps.Psi = MatrixXd::Zero(nf, ndt);
    if (has_block(prog.qp.eq_blocks, labels::line_response)) {
        const VectorXd psi = eq_block_duals(prog.qp, sol, labels::line_response);
        for (std::size_t k = 0; k < prog.line_response_rows.size(); ++k) {
            const auto [rho, j] = prog.line_response_rows[k];
            ps.Psi(rho, j) = psi(static_cast<Index>(k));
        }
    }

    for (std::size_t i = 0; i < participants.size(); ++i) {
        const MatrixXd& g = flows.gamma[i];
        VectorXd lam = ps.lambda;
        MatrixXd pim = ps.Pi;
        if (nf > 0) {
            lam += g.transpose() * ps.nu;
            pim += g.transpose() * ps.Psi;
        }
        if (participants[i].is_elastic()) {
            const auto& dyn = participants[i].elastic->dynamics;
            const MatrixXd map = -(dyn.C * dyn.B).transpose();
            ps.lambda_i.push_back(map * lam);
            ps.Pi_i.push_back(map * pim);
        } else {
            ps.lambda_i.push_back(-lam);
            ps.Pi_i.push_back(-pim);
        }
        for (int l = 0; l < T; ++l)
            for (Index j = 0; j < ndt; ++j)
                if (!ps.causal(l, j)) ps.Pi_i.back()(l, j) = 0.0;
    }
    return ps;
}

inline double per_mwh(double price_per_step, double step_hours) { return price_per_step / step_hours; }

struct Settlement {
    double power_payment = 0.0;    // lambda_i' e_i
    double reserve_payment = 0.0;  // <Pi_i, D_i> over causal entries
    double expected_cost = 0.0;    // expected operating cost of the policy
    double expected_profit = 0.0;  // payments minus expected cost
};

inline void check_dims(const PriceSet& ps, std::size_t i, const AffinePolicy& pol) {
    if (i >= ps.lambda_i.size()) throw ValidationError("participant index out of range", "settlement");
    if (pol.e.size() != ps.horizon || pol.D.rows() != ps.horizon || pol.D.cols() != ps.Pi_i[i].cols())
        throw ValidationError("policy and price dimensions differ", "settlement");
}

inline Settlement settlement(const AffinePolicy& pol, const PriceSet& ps, const Participant& p, std::size_t i,
                             const MomentEstimate& moments) {
    check_dims(ps, i, pol);
    if (!p.is_elastic()) throw ValidationError("inelastic participants are not settled", p.id);
    Settlement s;
    s.power_payment = ps.lambda_i[i].dot(pol.e);
    s.reserve_payment = (ps.Pi_i[i].array() * pol.D.array()).sum();
    s.expected_cost = expected_cost_coefficients(p, moments).evaluate(pol.e, pol.D);
    s.expected_profit = s.power_payment + s.reserve_payment - s.expected_cost;
    return s;
}

struct QuoteTerm {
    int row = 0;
    Index col = 0;
    double price = 0.0;
    double amount = 0.0;
    double payment = 0.0;
};

/// Itemized payment for one decision u_l (row reading) or for the response
/// to one revealed error step m (column reading).
struct Quote {
    int index = 0;
    double power_payment = 0.0;
    std::vector<QuoteTerm> reserve_terms;

    double reserve_payment() const {
        double s = 0.0;
        for (const auto& t : reserve_terms) s += t.payment;
        return s;
    }
    double total() const { return power_payment + reserve_payment(); }
};

/// Row l: [lambda_i]_l [e_i]_l plus the causal terms of row l of D_i.
/// Only nonzero policy entries are itemized.
inline Quote per_product_quote(const PriceSet& ps, std::size_t i, const AffinePolicy& pol, int l) {
    check_dims(ps, i, pol);
    if (l < 0 || l >= ps.horizon) throw ValidationError("row outside the horizon", "per_product_quote");
    Quote q;
    q.index = l;
    q.power_payment = ps.lambda_i[i](l) * pol.e(l);
    for (Index j = 0; j < (l + 1) * ps.n_delta; ++j)
        if (pol.D(l, j) != 0.0) q.reserve_terms.push_back({l, j, ps.Pi_i[i](l, j), pol.D(l, j), ps.Pi_i[i](l, j) * pol.D(l, j)});
    return q;
}

/// Column block m: the planned response at steps l >= m to the error
/// revealed at step m. Carries no power payment.
inline Quote column_quote(const PriceSet& ps, std::size_t i, const AffinePolicy& pol, int m) {
    check_dims(ps, i, pol);
    if (m < 0 || m >= ps.horizon) throw ValidationError("column outside the horizon", "column_quote");
    Quote q;
    q.index = m;
    for (int l = m; l < ps.horizon; ++l)
        for (Index c = 0; c < ps.n_delta; ++c) {
            const Index j = m * ps.n_delta + c;
            if (pol.D(l, j) != 0.0)
                q.reserve_terms.push_back({l, j, ps.Pi_i[i](l, j), pol.D(l, j), ps.Pi_i[i](l, j) * pol.D(l, j)});
        }
    return q;
}

/// Infinity norm of the per-participant stationarity condition: gradient of
/// the expected cost (plus the policy regularization), minus the prices,
/// plus the participant's local-constraint dual terms, over e_i and the free
/// entries of D_i. Duals of fixed (shifted) entries are included.
inline double stationarity_residual(const RobustProgram& prog, const std::vector<Participant>& participants,
                                    const QpSolution& sol, const PriceSet& ps, std::size_t i) {
    if (i >= prog.block_of.size() || prog.block_of[i] < 0)
        throw ValidationError("stationarity needs an elastic participant", "pricing");
    const PolicyBlock& b = prog.blocks[prog.block_of[i]];
    const int T = prog.horizon;
    const Index ndt = prog.n_delta_total;
    const auto pols = read_policies(prog, participants, sol.x);
    const AffinePolicy& pol = pols[i];
    const VectorXd grad = b.cost.gradient(pol.e, pol.D);

    // duals of fixed entries, mapped onto variables
    VectorXd fixed = VectorXd::Zero(prog.num_vars());
    if (has_block(prog.qp.eq_blocks, labels::policy_shift)) {
        const auto& blk = find_block(prog.qp.eq_blocks, labels::policy_shift);
        VectorXd y = VectorXd::Zero(sol.y.size());
        y.segment(blk.begin, blk.size) = sol.y.segment(blk.begin, blk.size);
        fixed = prog.qp.A_eq.transpose() * y;
    }

    VectorXd res_e = grad.head(T) + prog.policy_regularization * pol.e - ps.lambda_i[i];
    for (std::size_t k = 0; k < b.limit_rows.size(); ++k)
        res_e += b.response_map.row(b.limit_rows[k]).transpose() * sol.z(b.limit_row_begin + static_cast<Index>(k));
    for (int l = 0; l < T; ++l) res_e(l) += fixed(b.e_begin + l);
    double worst = res_e.cwiseAbs().maxCoeff();

    MatrixXd res_d = MatrixXd::Zero(T, ndt);
    for (std::size_t k = 0; k < b.response_rows.size(); ++k) {
        const auto [r, j] = b.response_rows[k];
        const double phi = sol.y(b.response_row_begin + static_cast<Index>(k));
        for (int l = 0; l < T; ++l) res_d(l, j) += b.response_map(r, l) * phi;
    }
    for (std::size_t k = 0; k < b.d_entries.size(); ++k) {
        const auto& m = b.d_entries[k];
        const Index var = b.d_begin + static_cast<Index>(k);
        const double r = grad(T + m.row * ndt + m.col) + prog.policy_regularization * pol.D(m.row, m.col) -
                         ps.Pi_i[i](m.row, m.col) + res_d(m.row, m.col) + fixed(var);
        worst = std::max(worst, std::abs(r));
    }
    return worst;
}

namespace price_csv {

inline std::string num(double v) {
    std::ostringstream os;
    os << std::setprecision(12) << v;
    return os.str();
}

/// participant,node,step,price,price_per_mwh (step is 1-based; node 1-based)
inline void write_nodal(std::ostream& os, const std::vector<Participant>& participants, const PriceSet& ps,
                        double step_hours) {
    os << "participant,node,step,price,price_per_mwh\n";
    for (std::size_t i = 0; i < participants.size(); ++i)
        for (int l = 0; l < ps.horizon; ++l)
            os << participants[i].id << "," << participants[i].node + 1 << "," << l + 1 << ","
               << num(ps.lambda_i[i](l)) << "," << num(per_mwh(ps.lambda_i[i](l), step_hours)) << "\n";
}

/// participant,row,col,error_step,component,price over causal entries of
/// elastic participants (rows and error steps 1-based).
inline void write_policy(std::ostream& os, const std::vector<Participant>& participants, const PriceSet& ps) {
    os << "participant,row,col,error_step,component,price\n";
    for (std::size_t i = 0; i < participants.size(); ++i) {
        if (!participants[i].is_elastic()) continue;
        for (int l = 0; l < ps.horizon; ++l)
            for (Index j = 0; j < (l + 1) * ps.n_delta; ++j)
                os << participants[i].id << "," << l + 1 << "," << j + 1 << "," << j / ps.n_delta + 1 << ","
                   << j % ps.n_delta + 1 << "," << num(ps.Pi_i[i](l, j)) << "\n";
    }
}

}  // namespace price_csv

}  // namespace affine_reserve
