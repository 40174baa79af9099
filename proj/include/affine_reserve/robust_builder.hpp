#pragma once

// Assembly of the finite robust QP over affine policies u_i = D_i delta + e_i:
// expected-cost objective, power balance for the nominal schedule and for the
// response, line limits and local constraints made robust over Delta through
// LP duality.

#include <iomanip>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "affine_reserve/errors.hpp"
#include "affine_reserve/horizon_model.hpp"
#include "affine_reserve/moments.hpp"
#include "affine_reserve/network.hpp"
#include "affine_reserve/qp_core.hpp"
#include "affine_reserve/uncertainty.hpp"

namespace affine_reserve {

namespace labels {
inline constexpr const char* balance_nominal = "balance_nominal";
inline constexpr const char* balance_response = "balance_response";
inline constexpr const char* line_limit = "line_limit";
inline constexpr const char* line_response = "line_response";
inline constexpr const char* local_limit = "local_limit";
inline constexpr const char* local_response = "local_response";
inline constexpr const char* policy_shift = "policy_shift";
inline constexpr const char* dual_nonneg = "dual_nonneg";
}  // namespace labels

/// Which blocks (l, m) of D may be nonzero. Blocks are N_delta wide; block
/// (l, m) multiplies the error revealed for step m in the rule for u_l.
struct PolicyStructure {
    enum class Kind { none, diagonal, banded, full };
    Kind kind = Kind::full;
    int band = 0;  // banded: 0 <= l - m < band

    static PolicyStructure none() { return {Kind::none, 0}; }
    static PolicyStructure diagonal() { return {Kind::diagonal, 1}; }
    static PolicyStructure banded(int k) {
        if (k < 1) throw ValidationError("band width must be at least 1", "structure.band");
        return {Kind::banded, k};
    }
    static PolicyStructure full() { return {Kind::full, 0}; }

    bool allows(int l, int m) const {
        if (m > l) return false;
        switch (kind) {
            case Kind::none: return false;
            case Kind::diagonal: return l == m;
            case Kind::banded: return l - m < band;
            case Kind::full: return true;
        }
        return false;
    }

    std::string describe() const {
        switch (kind) {
            case Kind::none: return "none";
            case Kind::diagonal: return "diagonal";
            case Kind::banded: return "banded(" + std::to_string(band) + ")";
            case Kind::full: return "full";
        }
        return "unknown";
    }
};

struct MaskEntry {
    int row = 0;    // l, input step
    Index col = 0;  // column of D: m * N_delta + component

    bool operator==(const MaskEntry& o) const { return row == o.row && col == o.col; }
};

/// Free entries of D in row-major order.
inline std::vector<MaskEntry> causality_mask(int horizon, Index n_delta,
                                             const PolicyStructure& s = PolicyStructure::full()) {
    if (horizon < 1 || n_delta < 1) throw ValidationError("horizon and driver dimension must be positive", "mask");
    std::vector<MaskEntry> out;
    for (int l = 0; l < horizon; ++l)
        for (int m = 0; m <= l; ++m)
            if (s.allows(l, m))
                for (Index c = 0; c < n_delta; ++c) out.push_back({l, m * n_delta + c});
    return out;
}

/// Rows of S that a dual vector for a row with the given delta support may
/// use. For a box only the two rows of each supported coordinate matter;
/// otherwise every row does.
inline std::vector<Index> dual_rows_for_support(const UncertaintyPolytope& set, const std::vector<Index>& support) {
    std::vector<Index> rows;
    if (support.empty()) return rows;
    if (!set.axis_aligned()) {
        for (Index r = 0; r < set.rows(); ++r) rows.push_back(r);
        return rows;
    }
    std::vector<bool> want(set.dim(), false);
    for (Index j : support) want[j] = true;
    for (Index r = 0; r < set.rows(); ++r)
        for (Index c = 0; c < set.dim(); ++c)
            if (set.S(r, c) != 0.0 && want[c]) {
                rows.push_back(r);
                break;
            }
    return rows;
}

/// Columns that the equality a = S'z must cover for a row with this support.
inline std::vector<Index> dual_columns_for_support(const UncertaintyPolytope& set, const std::vector<Index>& support) {
    if (support.empty() || set.axis_aligned()) return support;
    std::vector<Index> all(set.dim());
    for (Index c = 0; c < set.dim(); ++c) all[c] = c;
    return all;
}

/// Robust form of a'delta <= s over Delta: z >= 0, S'z = a, h'z <= s. The
/// returned value is min h'z, the support function of Delta at a.
struct DualizedRow {
    std::vector<Index> rows;  // rows of S carrying a dual variable
    VectorXd z;               // optimal dual on those rows
    double support_value = 0.0;
};

inline DualizedRow dualize_row(const VectorXd& a, const UncertaintyPolytope& set, const QpSettings& settings = {}) {
    validate(set);
    if (a.size() != set.dim()) throw ValidationError("coefficient length must match the set dimension", "dualize_row");
    auto [lo, hi] = set.box();
    if (set.axis_aligned() && (!lo.allFinite() || !hi.allFinite()))
        throw ValidationError("uncertainty set is unbounded", "uncertainty_set");

    std::vector<Index> support;
    for (Index j = 0; j < a.size(); ++j)
        if (a(j) != 0.0) support.push_back(j);
    DualizedRow out;
    out.rows = dual_rows_for_support(set, support);
    if (out.rows.empty()) return out;
    const std::vector<Index> cols = dual_columns_for_support(set, support);

    const Index nz = static_cast<Index>(out.rows.size());
    QpProblem lp;
    lp.num_vars = nz;
    lp.P.resize(nz, nz);
    lp.q.resize(nz);
    std::vector<Triplet> trips;
    for (Index k = 0; k < nz; ++k) {
        lp.q(k) = set.h(out.rows[k]);
        for (std::size_t c = 0; c < cols.size(); ++c)
            if (set.S(out.rows[k], cols[c]) != 0.0)
                trips.emplace_back(static_cast<int>(c), static_cast<int>(k), set.S(out.rows[k], cols[c]));
        lp.nonneg.push_back(k);
    }
    lp.A_eq.resize(static_cast<Index>(cols.size()), nz);
    lp.A_eq.setFromTriplets(trips.begin(), trips.end());
    lp.b_eq.resize(static_cast<Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) lp.b_eq(c) = a(cols[c]);
    lp.A_in.resize(0, nz);
    lp.b_in.resize(0);
    const QpSolution sol = solve_qp(lp, settings);
    if (!sol.optimal()) throw NumericalError("dual LP did not converge: " + sol.message, "dualize_row");
    out.z = sol.x;
    out.support_value = sol.objective;
    return out;
}

/// Entry of D fixed to a value (shifted policies in the shift-and-append
/// operating mode); `row` < 0 fixes entry `col` of e instead.
struct FixedPolicyEntry {
    std::size_t participant = 0;
    int row = -1;
    Index col = 0;
    double value = 0.0;
};

struct AssemblyOptions {
    PolicyStructure structure = PolicyStructure::full();
    double policy_regularization = 1e-8;
    std::vector<FixedPolicyEntry> fixed;
};

/// Variable layout and row bookkeeping for one elastic participant.
struct PolicyBlock {
    std::size_t participant = 0;
    Index e_begin = 0;
    Index d_begin = 0;
    std::vector<MaskEntry> d_entries;
    Index y_begin = 0;
    Index y_count = 0;
    MatrixXd response_map;                     // T_i B_i + U_i
    VectorXd local_offset;                     // w_i - T_i A_i x0
    std::vector<Index> limit_rows;             // local row index of each local_limit row, in order
    Index limit_row_begin = 0;                 // first row in A_in
    std::vector<std::pair<Index, Index>> response_rows;  // (local row, delta column) per local_response row
    Index response_row_begin = 0;              // first row in A_eq
    PolicyQuadratic cost;
    std::vector<Index> d_lookup;  // (l * N_delta T + j) -> variable, -1 when masked
    Index n_delta_total = 0;

    Index d_var(int l, Index j) const { return d_lookup[static_cast<std::size_t>(l * n_delta_total + j)]; }
};

struct RobustProgram {
    QpProblem qp;
    int horizon = 0;
    Index n_delta = 0;        // driver dimension per step
    Index n_delta_total = 0;  // N_delta * T
    PolicyStructure structure;
    std::vector<PolicyBlock> blocks;
    std::vector<int> block_of;  // participant -> block index, -1 if inelastic
    Index z_begin = 0;
    Index z_count = 0;
    double policy_regularization = 0.0;  // added to the diagonal on e and D
    std::vector<std::pair<int, Index>> balance_response_rows;  // (l, j)
    std::vector<Index> line_limit_rows;                        // flow-map row per line_limit row
    std::vector<std::pair<Index, Index>> line_response_rows;   // (flow-map row, j)

    Index num_vars() const { return qp.num_vars; }
};

namespace detail {

inline std::vector<Index> sorted(const std::set<Index>& s) { return {s.begin(), s.end()}; }

}  // namespace detail

/// Builds the robust program. Participants share the horizon and driver;
/// `moments` and `delta_set` are N_delta * T dimensional.
inline RobustProgram assemble_robust_program(const std::vector<Participant>& participants, const FlowMap& flows,
                                             const UncertaintyPolytope& delta_set, const MomentEstimate& moments,
                                             const AssemblyOptions& options = {}) {
    if (participants.empty()) throw ValidationError("no participants", "participants");
    const int T = participants.front().horizon();
    const Index nd_total = participants.front().n_delta_total();
    if (T < 1 || nd_total % T != 0) throw ValidationError("driver dimension must be a multiple of T", "participants");
    const Index nd = nd_total / T;
    for (const auto& p : participants) {
        if (p.horizon() != T || p.n_delta_total() != nd_total || p.G.rows() != T)
            throw ValidationError("participants disagree on horizon or driver dimension", p.id);
        if (p.is_elastic() && p.elastic->dynamics.horizon != T)
            throw ValidationError("participant dynamics horizon mismatch", p.id);
    }
    if (flows.horizon != T || flows.gamma.size() != participants.size())
        throw ValidationError("flow maps do not match participants", "flows");
    if (moments.dim() != nd_total || moments.mean_delta.size() != nd_total)
        throw ValidationError("moment dimensions must be N_delta * T", "moments");

    RobustProgram prog;
    prog.horizon = T;
    prog.n_delta = nd;
    prog.n_delta_total = nd_total;
    prog.structure = options.structure;
    prog.policy_regularization = options.policy_regularization;
    prog.block_of.assign(participants.size(), -1);

    const std::vector<MaskEntry> mask = causality_mask(T, nd, options.structure);
    std::vector<std::vector<bool>> allowed(T, std::vector<bool>(nd_total, false));
    for (const auto& m : mask) allowed[m.row][m.col] = true;

    const bool set_needed_hint = !mask.empty();
    if (set_needed_hint) {
        if (delta_set.dim() != nd_total) throw ValidationError("uncertainty set dimension mismatch", "uncertainty_set");
        validate(delta_set);
    }

    // ---- variable layout -------------------------------------------------
    Index nv = 0;
    for (std::size_t i = 0; i < participants.size(); ++i) {
        const auto& p = participants[i];
        if (!p.is_elastic()) continue;
        const auto& m = *p.elastic;
        prog.block_of[i] = static_cast<int>(prog.blocks.size());
        PolicyBlock b;
        b.participant = i;
        b.e_begin = nv;
        nv += T;
        b.d_begin = nv;
        b.d_entries = mask;
        b.n_delta_total = nd_total;
        b.d_lookup.assign(static_cast<std::size_t>(T * nd_total), -1);
        for (std::size_t k = 0; k < mask.size(); ++k)
            b.d_lookup[static_cast<std::size_t>(mask[k].row * nd_total + mask[k].col)] = nv + static_cast<Index>(k);
        nv += static_cast<Index>(mask.size());
        b.response_map = m.local.T_mat * m.dynamics.B + m.local.U_mat;
        b.local_offset = m.local.w - m.local.T_mat * (m.dynamics.A * p.x0);
        b.cost = expected_cost_coefficients(p, moments);
        prog.blocks.push_back(std::move(b));
    }
    if (prog.blocks.empty())
        throw InfeasibleError("no elastic participant is available to balance the system", labels::balance_nominal);

    // delta support of every local row, then the Y layout
    std::vector<std::vector<std::vector<Index>>> row_support(prog.blocks.size());
    for (std::size_t bi = 0; bi < prog.blocks.size(); ++bi) {
        auto& b = prog.blocks[bi];
        const auto& m = *participants[b.participant].elastic;
        const Index rows = m.local.rows();
        row_support[bi].resize(rows);
        for (Index r = 0; r < rows; ++r) {
            std::set<Index> cols;
            for (int l = 0; l < T; ++l) {
                if (b.response_map(r, l) == 0.0) continue;
                for (Index j = 0; j < nd_total; ++j)
                    if (allowed[l][j]) cols.insert(j);
            }
            if (m.local.V_mat.cols() > 0)
                for (Index j = 0; j < nd_total; ++j)
                    if (m.local.V_mat(r, j) != 0.0) cols.insert(j);
            row_support[bi][r] = detail::sorted(cols);
        }
    }
    const bool any_local_support = [&] {
        for (const auto& rs : row_support)
            for (const auto& s : rs)
                if (!s.empty()) return true;
        return false;
    }();
    if (any_local_support && !set_needed_hint) {
        if (delta_set.dim() != nd_total) throw ValidationError("uncertainty set dimension mismatch", "uncertainty_set");
        validate(delta_set);
    }

    // y variable index per (block, local row, S row)
    std::vector<std::vector<std::vector<Index>>> y_rows(prog.blocks.size());
    for (std::size_t bi = 0; bi < prog.blocks.size(); ++bi) {
        auto& b = prog.blocks[bi];
        b.y_begin = nv;
        y_rows[bi].resize(row_support[bi].size());
        for (std::size_t r = 0; r < row_support[bi].size(); ++r) {
            y_rows[bi][r] = dual_rows_for_support(delta_set, row_support[bi][r]);
            nv += static_cast<Index>(y_rows[bi][r].size());
        }
        b.y_count = nv - b.y_begin;
    }

    // ---- network data ----------------------------------------------------
    // Sum of inelastic uncertainty maps and of Gamma_i G_i.
    MatrixXd g_sum = MatrixXd::Zero(T, nd_total);
    VectorXd nominal_sum = VectorXd::Zero(T);  // sum r_i + C_i A_i x0
    const Index nf = flows.rows();
    MatrixXd flow_g = MatrixXd::Zero(nf, nd_total);
    VectorXd flow_nominal = VectorXd::Zero(nf);
    std::vector<MatrixXd> cb(participants.size());
    for (std::size_t i = 0; i < participants.size(); ++i) {
        const auto& p = participants[i];
        VectorXd nominal = p.r;
        if (p.is_elastic()) {
            const auto& dyn = p.elastic->dynamics;
            nominal += dyn.C * (dyn.A * p.x0);
            cb[i] = dyn.C * dyn.B;
        }
        g_sum += p.G;
        nominal_sum += nominal;
        if (nf > 0) {
            flow_g += flows.gamma[i] * p.G;
            flow_nominal += flows.gamma[i] * nominal;
        }
    }

    // line rows: structural delta support
    std::vector<std::vector<Index>> line_support(nf);
    for (Index rho = 0; rho < nf; ++rho) {
        std::set<Index> cols;
        for (Index j = 0; j < nd_total; ++j)
            if (flow_g(rho, j) != 0.0) cols.insert(j);
        for (const auto& b : prog.blocks) {
            const MatrixXd& g = flows.gamma[b.participant];
            const MatrixXd& cbi = cb[b.participant];
            for (int l = 0; l < T; ++l) {
                if (g(rho, l) == 0.0) continue;
                for (int k = 0; k < T; ++k) {
                    if (cbi(l, k) == 0.0) continue;
                    for (Index j = 0; j < nd_total; ++j)
                        if (allowed[k][j]) cols.insert(j);
                }
            }
        }
        line_support[rho] = detail::sorted(cols);
    }
    if (!set_needed_hint && !any_local_support)
        for (const auto& s : line_support)
            if (!s.empty()) {
                if (delta_set.dim() != nd_total)
                    throw ValidationError("uncertainty set dimension mismatch", "uncertainty_set");
                validate(delta_set);
                break;
            }
    std::vector<std::vector<Index>> z_rows(nf);
    prog.z_begin = nv;
    for (Index rho = 0; rho < nf; ++rho) {
        z_rows[rho] = dual_rows_for_support(delta_set, line_support[rho]);
        nv += static_cast<Index>(z_rows[rho].size());
    }
    prog.z_count = nv - prog.z_begin;

    QpProblem& qp = prog.qp;
    qp.num_vars = nv;
    qp.nonneg_label = labels::dual_nonneg;
    for (const auto& b : prog.blocks)
        for (Index k = 0; k < b.y_count; ++k) qp.nonneg.push_back(b.y_begin + k);
    for (Index k = 0; k < prog.z_count; ++k) qp.nonneg.push_back(prog.z_begin + k);

    // ---- objective -------------------------------------------------------
    std::vector<Triplet> p_trips;
    qp.q = VectorXd::Zero(nv);
    qp.constant = 0.0;
    for (const auto& b : prog.blocks) {
        // map from cost-vector index to variable index
        const Index dim = T + T * nd_total;
        std::vector<Index> var(dim, -1);
        for (int l = 0; l < T; ++l) var[l] = b.e_begin + l;
        for (std::size_t k = 0; k < b.d_entries.size(); ++k)
            var[T + b.d_entries[k].row * nd_total + b.d_entries[k].col] = b.d_begin + static_cast<Index>(k);
        std::vector<Index> used;
        for (Index a = 0; a < dim; ++a)
            if (var[a] >= 0) used.push_back(a);
        for (Index a : used) {
            qp.q(var[a]) += b.cost.linear(a);
            for (Index c : used) {
                const double v = b.cost.hessian(a, c);
                if (v != 0.0) p_trips.emplace_back(static_cast<int>(var[a]), static_cast<int>(var[c]), v);
            }
            p_trips.emplace_back(static_cast<int>(var[a]), static_cast<int>(var[a]), options.policy_regularization);
        }
        qp.constant += b.cost.constant;
    }
    qp.P.resize(nv, nv);
    qp.P.setFromTriplets(p_trips.begin(), p_trips.end());

    // ---- equalities ------------------------------------------------------
    std::vector<Triplet> eq;
    std::vector<double> beq;
    auto eq_block = [&](const char* label, Index begin) {
        const Index size = static_cast<Index>(beq.size()) - begin;
        qp.eq_blocks.push_back({label, begin, size});
    };

    // nominal balance: sum C_i B_i e_i = -sum (r_i + C_i A_i x0)
    Index row0 = 0;
    for (int l = 0; l < T; ++l) {
        const int row = static_cast<int>(beq.size());
        for (const auto& b : prog.blocks) {
            const MatrixXd& cbi = cb[b.participant];
            for (int k = 0; k < T; ++k)
                if (cbi(l, k) != 0.0) eq.emplace_back(row, static_cast<int>(b.e_begin + k), cbi(l, k));
        }
        beq.push_back(-nominal_sum(l));
    }
    eq_block(labels::balance_nominal, row0);

    // response balance: sum_i G_i + C_i B_i D_i = 0, entry by entry
    row0 = static_cast<Index>(beq.size());
    for (int l = 0; l < T; ++l)
        for (Index j = 0; j < nd_total; ++j) {
            std::vector<Triplet> local;
            const int row = static_cast<int>(beq.size());
            for (const auto& b : prog.blocks) {
                const MatrixXd& cbi = cb[b.participant];
                for (int k = 0; k < T; ++k) {
                    if (cbi(l, k) == 0.0 || !allowed[k][j]) continue;
                    local.emplace_back(row, static_cast<int>(b.d_var(k, j)), cbi(l, k));
                }
            }
            if (local.empty()) {
                if (g_sum(l, j) != 0.0)
                    throw InfeasibleError("uncertainty at step " + std::to_string(l) +
                                              " cannot be balanced under the '" + options.structure.describe() +
                                              "' policy structure",
                                          labels::balance_response);
                continue;
            }
            eq.insert(eq.end(), local.begin(), local.end());
            beq.push_back(-g_sum(l, j));
            prog.balance_response_rows.emplace_back(l, j);
        }
    eq_block(labels::balance_response, row0);

    // line response: sum_i Gamma_i (G_i + C_i B_i D_i) - Z'S = 0
    row0 = static_cast<Index>(beq.size());
    {
        Index zvar = prog.z_begin;
        for (Index rho = 0; rho < nf; ++rho) {
            const auto cols = dual_columns_for_support(delta_set, line_support[rho]);
            for (Index j : cols) {
                const int row = static_cast<int>(beq.size());
                for (const auto& b : prog.blocks) {
                    const MatrixXd& g = flows.gamma[b.participant];
                    const MatrixXd& cbi = cb[b.participant];
                    for (int l = 0; l < T; ++l) {
                        if (g(rho, l) == 0.0) continue;
                        for (int k = 0; k < T; ++k) {
                            if (cbi(l, k) == 0.0 || !allowed[k][j]) continue;
                            eq.emplace_back(row, static_cast<int>(b.d_var(k, j)), g(rho, l) * cbi(l, k));
                        }
                    }
                }
                for (std::size_t s = 0; s < z_rows[rho].size(); ++s) {
                    const double sv = delta_set.S(z_rows[rho][s], j);
                    if (sv != 0.0) eq.emplace_back(row, static_cast<int>(zvar + s), -sv);
                }
                beq.push_back(-flow_g(rho, j));
                prog.line_response_rows.emplace_back(rho, j);
            }
            zvar += static_cast<Index>(z_rows[rho].size());
        }
    }
    eq_block(labels::line_response, row0);

    // local response: (T_i B_i + U_i) D_i + V_i - Y_i'S = 0
    row0 = static_cast<Index>(beq.size());
    for (std::size_t bi = 0; bi < prog.blocks.size(); ++bi) {
        auto& b = prog.blocks[bi];
        const auto& m = *participants[b.participant].elastic;
        b.response_row_begin = static_cast<Index>(beq.size());
        Index yvar = b.y_begin;
        for (std::size_t r = 0; r < row_support[bi].size(); ++r) {
            const auto cols = dual_columns_for_support(delta_set, row_support[bi][r]);
            for (Index j : cols) {
                const int row = static_cast<int>(beq.size());
                for (int l = 0; l < T; ++l)
                    if (b.response_map(r, l) != 0.0 && allowed[l][j])
                        eq.emplace_back(row, static_cast<int>(b.d_var(l, j)), b.response_map(r, l));
                for (std::size_t s = 0; s < y_rows[bi][r].size(); ++s) {
                    const double sv = delta_set.S(y_rows[bi][r][s], j);
                    if (sv != 0.0) eq.emplace_back(row, static_cast<int>(yvar + s), -sv);
                }
                const double v = m.local.V_mat.cols() > 0 ? m.local.V_mat(r, j) : 0.0;
                beq.push_back(-v);
                b.response_rows.emplace_back(static_cast<Index>(r), j);
            }
            yvar += static_cast<Index>(y_rows[bi][r].size());
        }
    }
    eq_block(labels::local_response, row0);

    // fixed policy entries
    row0 = static_cast<Index>(beq.size());
    for (const auto& f : options.fixed) {
        if (f.participant >= participants.size() || prog.block_of[f.participant] < 0)
            throw ValidationError("fixed entry refers to an inelastic participant", labels::policy_shift);
        const auto& b = prog.blocks[prog.block_of[f.participant]];
        const Index var = f.row < 0 ? b.e_begin + f.col : b.d_var(f.row, f.col);
        if (var < 0 || (f.row < 0 && (f.col < 0 || f.col >= T)))
            throw ValidationError("fixed entry is not a free policy variable", labels::policy_shift);
        eq.emplace_back(static_cast<int>(beq.size()), static_cast<int>(var), 1.0);
        beq.push_back(f.value);
    }
    if (!options.fixed.empty()) eq_block(labels::policy_shift, row0);

    qp.A_eq.resize(static_cast<Index>(beq.size()), nv);
    qp.A_eq.setFromTriplets(eq.begin(), eq.end());
    qp.b_eq = Eigen::Map<const VectorXd>(beq.data(), static_cast<Index>(beq.size()));

    // ---- inequalities ----------------------------------------------------
    std::vector<Triplet> in;
    std::vector<double> bin;

    // line limits: Z'h + sum Gamma_i C_i B_i e_i <= p_bar - sum Gamma_i (r_i + C_i A_i x0)
    row0 = 0;
    {
        Index zvar = prog.z_begin;
        for (Index rho = 0; rho < nf; ++rho) {
            const int row = static_cast<int>(bin.size());
            bool has_var = false;
            for (const auto& b : prog.blocks) {
                const MatrixXd& g = flows.gamma[b.participant];
                const MatrixXd& cbi = cb[b.participant];
                for (int l = 0; l < T; ++l) {
                    if (g(rho, l) == 0.0) continue;
                    for (int k = 0; k < T; ++k)
                        if (cbi(l, k) != 0.0) {
                            in.emplace_back(row, static_cast<int>(b.e_begin + k), g(rho, l) * cbi(l, k));
                            has_var = true;
                        }
                }
            }
            for (std::size_t s = 0; s < z_rows[rho].size(); ++s) {
                const double hv = delta_set.h(z_rows[rho][s]);
                if (hv != 0.0) in.emplace_back(row, static_cast<int>(zvar + s), hv);
                has_var = true;
            }
            zvar += static_cast<Index>(z_rows[rho].size());
            const double rhs = flows.p_bar(rho) - flow_nominal(rho);
            if (!has_var) {
                if (rhs < 0.0)
                    throw InfeasibleError("line row " + std::to_string(rho) + " is overloaded by fixed injections",
                                          labels::line_limit);
                continue;
            }
            bin.push_back(rhs);
            prog.line_limit_rows.push_back(rho);
        }
    }
    qp.in_blocks.push_back({labels::line_limit, row0, static_cast<Index>(bin.size()) - row0});

    // local limits: T A x0 + (T B + U) e + Y'h <= w
    row0 = static_cast<Index>(bin.size());
    for (std::size_t bi = 0; bi < prog.blocks.size(); ++bi) {
        auto& b = prog.blocks[bi];
        b.limit_row_begin = static_cast<Index>(bin.size());
        Index yvar = b.y_begin;
        for (std::size_t r = 0; r < row_support[bi].size(); ++r) {
            const int row = static_cast<int>(bin.size());
            bool has_var = false;
            for (int l = 0; l < T; ++l)
                if (b.response_map(r, l) != 0.0) {
                    in.emplace_back(row, static_cast<int>(b.e_begin + l), b.response_map(r, l));
                    has_var = true;
                }
            for (std::size_t s = 0; s < y_rows[bi][r].size(); ++s) {
                const double hv = delta_set.h(y_rows[bi][r][s]);
                if (hv != 0.0) in.emplace_back(row, static_cast<int>(yvar + s), hv);
                has_var = true;
            }
            yvar += static_cast<Index>(y_rows[bi][r].size());
            if (!has_var) {
                if (b.local_offset(r) < 0.0)
                    throw InfeasibleError(participants[b.participant].id + ": local row " + std::to_string(r) +
                                              " is violated by the initial state",
                                          labels::local_limit);
                continue;
            }
            bin.push_back(b.local_offset(r));
            b.limit_rows.push_back(static_cast<Index>(r));
        }
    }
    qp.in_blocks.push_back({labels::local_limit, row0, static_cast<Index>(bin.size()) - row0});

    qp.A_in.resize(static_cast<Index>(bin.size()), nv);
    qp.A_in.setFromTriplets(in.begin(), in.end());
    qp.b_in = Eigen::Map<const VectorXd>(bin.data(), static_cast<Index>(bin.size()));
    validate(qp);
    return prog;
}

/// Policies for every participant (empty for inelastic ones), read from a
/// primal solution vector.
inline std::vector<AffinePolicy> read_policies(const RobustProgram& prog, const std::vector<Participant>& participants,
                                               const VectorXd& x) {
    if (x.size() != prog.num_vars()) throw ValidationError("primal vector length mismatch", "extract_policies");
    std::vector<AffinePolicy> out(participants.size());
    for (const auto& b : prog.blocks) {
        AffinePolicy& pol = out[b.participant];
        pol.e = x.segment(b.e_begin, prog.horizon);
        pol.D = MatrixXd::Zero(prog.horizon, prog.n_delta_total);
        for (std::size_t k = 0; k < b.d_entries.size(); ++k)
            pol.D(b.d_entries[k].row, b.d_entries[k].col) = x(b.d_begin + static_cast<Index>(k));
    }
    return out;
}

/// Largest constraint excess over a set of realized errors.
struct AuditReport {
    double balance = 0.0;  // max |sum of injections|
    double line = 0.0;     // max flow above its limit (<= 0 means slack)
    double local = 0.0;    // max local-row excess
    std::string worst_label = "none";
    int vertices = 0;

    double worst() const { return std::max({balance, line, local}); }
};

inline void audit_point(AuditReport& rep, const std::vector<Participant>& participants, const FlowMap& flows,
                        const std::vector<AffinePolicy>& policies, const VectorXd& delta) {
    const VectorXd bal = balance_residual(participants, policies, delta);
    const double b = bal.size() ? bal.cwiseAbs().maxCoeff() : 0.0;
    if (b > rep.balance) rep.balance = b;
    if (flows.rows_per_step() > 0) {
        const MatrixXd inj = nodal_injections(flows, participants, policies, delta);
        for (Index t = 0; t < inj.cols(); ++t) {
            const double ex = (flows.static_map * inj.col(t) - flows.static_limits).maxCoeff();
            if (ex > rep.line) rep.line = ex;
        }
    }
    for (std::size_t i = 0; i < participants.size(); ++i) {
        const auto& p = participants[i];
        if (!p.is_elastic()) continue;
        const VectorXd u = policies[i].inputs(delta);
        const VectorXd x = policy_states(p, policies[i], delta);
        const double ex = (-p.elastic->local.slack(x, u, delta)).maxCoeff();
        if (ex > rep.local) rep.local = ex;
    }
    ++rep.vertices;
}

/// Checks balance, line and local rows at `count` random vertices of a box
/// Delta (plus the all-low and all-high corners and the origin).
inline AuditReport audit_vertices(const std::vector<Participant>& participants, const FlowMap& flows,
                                  const UncertaintyPolytope& delta_set, const std::vector<AffinePolicy>& policies,
                                  int count, std::uint64_t seed = 1) {
    AuditReport rep;
    rep.line = -std::numeric_limits<double>::infinity();
    rep.local = -std::numeric_limits<double>::infinity();
    const Index nd = participants.front().n_delta_total();
    audit_point(rep, participants, flows, policies, VectorXd::Zero(nd));
    if (delta_set.rows() > 0 && delta_set.axis_aligned()) {
        auto [lo, hi] = delta_set.box();
        audit_point(rep, participants, flows, policies, lo);
        audit_point(rep, participants, flows, policies, hi);
        std::mt19937_64 gen(seed);
        std::bernoulli_distribution coin(0.5);
        for (int v = 0; v < count; ++v) {
            VectorXd d(nd);
            for (Index j = 0; j < nd; ++j) d(j) = coin(gen) ? hi(j) : lo(j);
            audit_point(rep, participants, flows, policies, d);
        }
    }
    if (rep.balance >= rep.line && rep.balance >= rep.local) rep.worst_label = labels::balance_response;
    else if (rep.line >= rep.local) rep.worst_label = labels::line_limit;
    else rep.worst_label = labels::local_limit;
    return rep;
}

struct ExtractOptions {
    int audit_vertices = 100;
    double audit_tolerance = 1e-5;
    std::uint64_t audit_seed = 1;
};

/// Policies from an optimal solution, audited at sampled vertices of Delta.
inline std::vector<AffinePolicy> extract_policies(const RobustProgram& prog,
                                                  const std::vector<Participant>& participants,
                                                  const FlowMap& flows, const UncertaintyPolytope& delta_set,
                                                  const QpSolution& sol, const ExtractOptions& opt = {}) {
    if (!sol.optimal()) throw NumericalError("solver did not report an optimal solution: " + sol.message, "solve");
    auto policies = read_policies(prog, participants, sol.x);
    const AuditReport rep = audit_vertices(participants, flows, delta_set, policies, opt.audit_vertices, opt.audit_seed);
    if (rep.worst() > opt.audit_tolerance) {
        std::ostringstream msg;
        msg << "policy audit failed: excess " << rep.worst() << " on " << rep.worst_label;
        throw NumericalError(msg.str(), rep.worst_label);
    }
    return policies;
}

/// Sparse text dump of an assembled program: one header per section, then
/// `row col value` triplets (0-based), then block labels.
inline void dump_program(std::ostream& os, const RobustProgram& prog) {
    const QpProblem& qp = prog.qp;
    os << std::setprecision(17);
    os << "# robust program: vars " << qp.num_vars << " eq " << qp.b_eq.size() << " ineq " << qp.b_in.size()
       << " nonneg " << qp.nonneg.size() << "\n";
    os << "constant " << qp.constant << "\n";
    auto dump = [&](const char* name, const SparseMatrix& m) {
        os << "[" << name << "] " << m.rows() << " " << m.cols() << " " << m.nonZeros() << "\n";
        for (Index c = 0; c < m.outerSize(); ++c)
            for (SparseMatrix::InnerIterator it(m, c); it; ++it) os << it.row() << " " << c << " " << it.value() << "\n";
    };
    auto dumpv = [&](const char* name, const VectorXd& v) {
        os << "[" << name << "] " << v.size() << "\n";
        for (Index k = 0; k < v.size(); ++k) os << v(k) << "\n";
    };
    dump("P", qp.P);
    dumpv("q", qp.q);
    dump("A_eq", qp.A_eq);
    dumpv("b_eq", qp.b_eq);
    dump("A_in", qp.A_in);
    dumpv("b_in", qp.b_in);
    os << "[nonneg] " << qp.nonneg.size() << "\n";
    for (Index j : qp.nonneg) os << j << "\n";
    os << "[blocks]\n";
    for (const auto& b : qp.eq_blocks) os << "eq " << b.label << " " << b.begin << " " << b.size << "\n";
    for (const auto& b : qp.in_blocks) os << "in " << b.label << " " << b.begin << " " << b.size << "\n";
}

}  // namespace affine_reserve
