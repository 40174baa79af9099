#pragma once

// Convex QP solver with dual recovery:
//
//   minimize    x'P x / 2 + q'x + constant
//   subject to  A_eq x  = b_eq      (multipliers y, free)
//               A_in x <= b_in      (multipliers z >= 0)
//               x_j    >= 0, j in nonneg   (multipliers z_nonneg >= 0)
//
// Sign convention: the Lagrangian is f(x) + y'(A_eq x - b_eq)
// + z'(A_in x - b_in) - z_nonneg' x_nonneg, so stationarity reads
// P x + q + A_eq'y + A_in'z - E z_nonneg = 0.

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "affine_reserve/errors.hpp"
#include "affine_reserve/linalg.hpp"

namespace affine_reserve {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::ColMajor, int>;
using Triplet = Eigen::Triplet<double, int>;

struct RowBlock {
    std::string label;
    Index begin = 0;
    Index size = 0;
};

struct QpProblem {
    Index num_vars = 0;
    SparseMatrix P;  // symmetric, both triangles stored
    VectorXd q;
    double constant = 0.0;

    SparseMatrix A_eq;
    VectorXd b_eq;
    std::vector<RowBlock> eq_blocks;

    SparseMatrix A_in;
    VectorXd b_in;
    std::vector<RowBlock> in_blocks;

    std::vector<Index> nonneg;
    std::string nonneg_label = "dual_nonneg";

    double objective(const VectorXd& x) const { return 0.5 * x.dot(P * x) + q.dot(x) + constant; }
};

inline void validate(const QpProblem& p) {
    const Index n = p.num_vars;
    auto fail = [](const std::string& m) { throw ValidationError(m, "qp"); };
    if (p.P.rows() != n || p.P.cols() != n) fail("P must be n x n");
    if (p.q.size() != n) fail("q must have n entries");
    if (p.A_eq.cols() != n || p.A_eq.rows() != p.b_eq.size()) fail("equality block dimensions");
    if (p.A_in.cols() != n || p.A_in.rows() != p.b_in.size()) fail("inequality block dimensions");
    for (Index j : p.nonneg)
        if (j < 0 || j >= n) fail("nonnegativity index out of range");
    auto finite = [](const SparseMatrix& m) {
        for (Index k = 0; k < m.outerSize(); ++k)
            for (SparseMatrix::InnerIterator it(m, k); it; ++it)
                if (!std::isfinite(it.value())) return false;
        return true;
    };
    if (!finite(p.P) || !finite(p.A_eq) || !finite(p.A_in) || !p.q.allFinite() || !p.b_eq.allFinite() ||
        !p.b_in.allFinite())
        fail("problem data must be finite");
}

enum class QpStatus { optimal, infeasible, max_iter, numerical_failure };

inline const char* to_string(QpStatus s) {
    switch (s) {
        case QpStatus::optimal: return "optimal";
        case QpStatus::infeasible: return "infeasible";
        case QpStatus::max_iter: return "max_iter";
        case QpStatus::numerical_failure: return "numerical_failure";
    }
    return "unknown";
}

struct KktResiduals {
    double stationarity = 0.0;
    double primal_eq = 0.0;
    double primal_ineq = 0.0;
    double complementarity = 0.0;
    double gap = 0.0;  // primal objective - dual objective
};

struct QpSettings {
    double tolerance = 1e-9;  // on the equilibrated problem
    double acceptable_tolerance = 1e-7;  // accepted once progress stalls
    int max_iter = 200;
    double regularization = 1e-9;
    int ruiz_iterations = 15;
    int refinement_steps = 3;
    std::ostream* log = nullptr;
};

struct QpSolution {
    QpStatus status = QpStatus::numerical_failure;
    VectorXd x;
    VectorXd y;         // equality multipliers
    VectorXd z;         // inequality multipliers
    VectorXd z_nonneg;  // bound multipliers, aligned with QpProblem::nonneg
    KktResiduals kkt;          // unscaled, recomputed from the problem data
    KktResiduals scaled_kkt;   // on the equilibrated problem the solver saw
    int iterations = 0;
    double objective = 0.0;
    double seconds = 0.0;
    std::string message;

    bool optimal() const { return status == QpStatus::optimal; }
};

inline const RowBlock& find_block(const std::vector<RowBlock>& blocks, const std::string& label) {
    for (const auto& b : blocks)
        if (b.label == label) return b;
    throw ValidationError("no constraint block labelled '" + label + "'", "qp");
}

inline bool has_block(const std::vector<RowBlock>& blocks, const std::string& label) {
    return std::any_of(blocks.begin(), blocks.end(), [&](const RowBlock& b) { return b.label == label; });
}

inline VectorXd eq_block_duals(const QpProblem& p, const QpSolution& s, const std::string& label) {
    const auto& b = find_block(p.eq_blocks, label);
    return s.y.segment(b.begin, b.size);
}

inline VectorXd in_block_duals(const QpProblem& p, const QpSolution& s, const std::string& label) {
    const auto& b = find_block(p.in_blocks, label);
    return s.z.segment(b.begin, b.size);
}

/// Recomputes the residual norms from problem data alone.
inline KktResiduals kkt_residuals(const QpProblem& p, const VectorXd& x, const VectorXd& y, const VectorXd& z,
                                  const VectorXd& z_nonneg) {
    KktResiduals r;
    VectorXd grad = p.P * x + p.q;
    if (y.size()) grad += p.A_eq.transpose() * y;
    if (z.size()) grad += p.A_in.transpose() * z;
    for (std::size_t k = 0; k < p.nonneg.size(); ++k) grad(p.nonneg[k]) -= z_nonneg(k);
    r.stationarity = grad.size() ? grad.cwiseAbs().maxCoeff() : 0.0;

    if (p.b_eq.size()) r.primal_eq = (p.A_eq * x - p.b_eq).cwiseAbs().maxCoeff();
    double comp = 0.0, viol = 0.0;
    if (p.b_in.size()) {
        const VectorXd slack = p.b_in - p.A_in * x;
        viol = std::max(viol, (-slack).maxCoeff());
        comp = std::max(comp, (z.array() * slack.array()).abs().maxCoeff());
    }
    for (std::size_t k = 0; k < p.nonneg.size(); ++k) {
        const double xv = x(p.nonneg[k]);
        viol = std::max(viol, -xv);
        comp = std::max(comp, std::abs(z_nonneg(k) * xv));
    }
    r.primal_ineq = std::max(viol, 0.0);
    r.complementarity = comp;

    const double primal = p.objective(x);
    double dual = -0.5 * x.dot(p.P * x) + p.constant;
    if (y.size()) dual -= p.b_eq.dot(y);
    if (z.size()) dual -= p.b_in.dot(z);
    r.gap = primal - dual;
    return r;
}

inline KktResiduals kkt_residuals(const QpProblem& p, const QpSolution& s) {
    return kkt_residuals(p, s.x, s.y, s.z, s.z_nonneg);
}

/// Solver engine interface; any conforming engine returns a QpSolution in
/// the sign convention above.
class QpEngine {
public:
    virtual ~QpEngine() = default;
    virtual std::string name() const = 0;
    virtual QpSolution solve(const QpProblem& problem, const QpSettings& settings) const = 0;
};

namespace detail {

inline VectorXd row_inf_norms(const SparseMatrix& m) {
    VectorXd out = VectorXd::Zero(m.rows());
    for (Index k = 0; k < m.outerSize(); ++k)
        for (SparseMatrix::InnerIterator it(m, k); it; ++it)
            out(it.row()) = std::max(out(it.row()), std::abs(it.value()));
    return out;
}

inline VectorXd col_inf_norms(const SparseMatrix& m) {
    VectorXd out = VectorXd::Zero(m.cols());
    for (Index k = 0; k < m.outerSize(); ++k)
        for (SparseMatrix::InnerIterator it(m, k); it; ++it)
            out(k) = std::max(out(k), std::abs(it.value()));
    return out;
}

inline double inf_norm(const VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

/// Modified Ruiz equilibration of the KKT matrix [P A' G'; A 0 0; G 0 0]
/// followed by a cost scaling.
struct Scaling {
    VectorXd var;  // x = var .* x_scaled
    VectorXd eq;   // row scaling of A_eq
    VectorXd in;   // row scaling of A_in
    double cost = 1.0;
};

struct ScaledProblem {
    SparseMatrix P, A, G;
    VectorXd q, b, h;
    Scaling scale;
};

inline ScaledProblem equilibrate(const QpProblem& p, int iterations) {
    ScaledProblem s;
    s.P = p.P;
    s.A = p.A_eq;
    s.G = p.A_in;
    s.q = p.q;
    s.b = p.b_eq;
    s.h = p.b_in;
    const Index n = p.num_vars;
    s.scale.var = VectorXd::Ones(n);
    s.scale.eq = VectorXd::Ones(s.A.rows());
    s.scale.in = VectorXd::Ones(s.G.rows());

    auto clamp_inv_sqrt = [](double v) {
        if (v < 1e-8) return 1.0;
        return std::clamp(1.0 / std::sqrt(v), 1e-4, 1e4);
    };
    for (int it = 0; it < iterations; ++it) {
        VectorXd cn = col_inf_norms(s.P).cwiseMax(col_inf_norms(s.A)).cwiseMax(col_inf_norms(s.G));
        VectorXd rn_eq = row_inf_norms(s.A), rn_in = row_inf_norms(s.G);
        VectorXd dv = cn.unaryExpr(clamp_inv_sqrt);
        VectorXd de = rn_eq.unaryExpr(clamp_inv_sqrt);
        VectorXd di = rn_in.unaryExpr(clamp_inv_sqrt);
        s.P = dv.asDiagonal() * s.P * dv.asDiagonal();
        s.A = de.asDiagonal() * s.A * dv.asDiagonal();
        s.G = di.asDiagonal() * s.G * dv.asDiagonal();
        s.q = dv.cwiseProduct(s.q);
        s.b = de.cwiseProduct(s.b);
        s.h = di.cwiseProduct(s.h);
        s.scale.var = s.scale.var.cwiseProduct(dv);
        s.scale.eq = s.scale.eq.cwiseProduct(de);
        s.scale.in = s.scale.in.cwiseProduct(di);
    }
    const VectorXd pcn = col_inf_norms(s.P);
    const double mean_p = n ? pcn.mean() : 0.0;
    const double c_norm = std::max({mean_p, inf_norm(s.q), 1e-8});
    s.scale.cost = std::clamp(1.0 / c_norm, 1e-6, 1e6);
    s.P *= s.scale.cost;
    s.q *= s.scale.cost;
    s.P.prune(0.0);
    s.A.prune(0.0);
    s.G.prune(0.0);
    return s;
}

}  // namespace detail

/// Mehrotra predictor-corrector primal-dual interior point method on the
/// equilibrated problem. The Newton systems are solved through a sparse
/// LDL' factorization of the regularized quasi-definite KKT matrix; bound
/// rows are eliminated into its diagonal.
class InteriorPointEngine final : public QpEngine {
public:
    static constexpr double kMaxRegularization = 1e-5;

    std::string name() const override { return "interior_point"; }

    QpSolution solve(const QpProblem& problem, const QpSettings& settings) const override {
        const auto start = std::chrono::steady_clock::now();
        validate(problem);
        QpSolution sol = run(problem, settings);
        sol.kkt = kkt_residuals(problem, sol);
        sol.objective = problem.objective(sol.x);
        sol.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        return sol;
    }

private:
    struct Kkt {
        SparseMatrix K;                // upper triangle
        std::vector<Index> diag_pos;   // position of each diagonal entry in valuePtr
        VectorXd p_diag;               // diagonal of scaled P
    };

    static Kkt build_kkt(const detail::ScaledProblem& sp) {
        const Index n = sp.P.rows(), me = sp.A.rows(), mi = sp.G.rows();
        const Index N = n + me + mi;
        std::vector<Triplet> trips;
        trips.reserve(sp.P.nonZeros() + sp.A.nonZeros() + sp.G.nonZeros() + N);
        Kkt k;
        k.p_diag = VectorXd::Zero(n);
        for (Index c = 0; c < n; ++c)
            for (SparseMatrix::InnerIterator it(sp.P, c); it; ++it) {
                if (it.row() < c) trips.emplace_back(it.row(), c, it.value());
                if (it.row() == c) k.p_diag(c) = it.value();
            }
        for (Index c = 0; c < n; ++c)
            for (SparseMatrix::InnerIterator it(sp.A, c); it; ++it)
                trips.emplace_back(static_cast<int>(c), static_cast<int>(n + it.row()), it.value());
        for (Index c = 0; c < n; ++c)
            for (SparseMatrix::InnerIterator it(sp.G, c); it; ++it)
                trips.emplace_back(static_cast<int>(c), static_cast<int>(n + me + it.row()), it.value());
        // explicit diagonal so its pattern never changes
        for (Index d = 0; d < N; ++d) trips.emplace_back(static_cast<int>(d), static_cast<int>(d), 1.0);
        k.K.resize(N, N);
        k.K.setFromTriplets(trips.begin(), trips.end());
        k.K.makeCompressed();
        k.diag_pos.resize(N);
        for (Index c = 0; c < N; ++c) {
            const int end = k.K.outerIndexPtr()[c + 1] - 1;  // diagonal is the last entry of an upper column
            k.diag_pos[c] = end;
        }
        return k;
    }

    static QpSolution run(const QpProblem& problem, const QpSettings& settings) {
        using detail::inf_norm;
        const detail::ScaledProblem sp = detail::equilibrate(problem, settings.ruiz_iterations);
        const Index n = problem.num_vars;
        const Index me = sp.A.rows();
        const Index mg = sp.G.rows();
        const Index nb = static_cast<Index>(problem.nonneg.size());
        const Index m_total = mg + nb;
        const auto& bidx = problem.nonneg;

        Kkt kkt = build_kkt(sp);
        Eigen::SimplicialLDLT<SparseMatrix, Eigen::Upper> ldlt;
        ldlt.analyzePattern(kkt.K);

        const SparseMatrix At = sp.A.transpose();
        const SparseMatrix Gt = sp.G.transpose();

        double reg = settings.regularization;
        VectorXd w_g = VectorXd::Ones(mg), w_b = VectorXd::Ones(nb);

        auto factor = [&]() -> bool {
            double* val = kkt.K.valuePtr();
            for (int attempt = 0; attempt < 4; ++attempt) {
                for (Index j = 0; j < n; ++j) val[kkt.diag_pos[j]] = kkt.p_diag(j) + reg;
                for (Index k = 0; k < nb; ++k) val[kkt.diag_pos[bidx[k]]] += 1.0 / w_b(k);
                for (Index i = 0; i < me; ++i) val[kkt.diag_pos[n + i]] = -reg;
                for (Index i = 0; i < mg; ++i) val[kkt.diag_pos[n + me + i]] = -(w_g(i) + reg);
                ldlt.factorize(kkt.K);
                if (ldlt.info() == Eigen::Success) return true;
                reg *= 100.0;
            }
            return false;
        };

        // Unregularized KKT product for iterative refinement.
        auto kkt_apply = [&](const VectorXd& v) {
            VectorXd out = kkt.K.selfadjointView<Eigen::Upper>() * v;
            out.head(n) -= reg * v.head(n);
            out.segment(n, me) += reg * v.segment(n, me);
            out.tail(mg) += reg * v.tail(mg);
            return out;
        };

        // Refinement steps are kept only while they reduce the residual; on a
        // nearly singular system they can otherwise diverge.
        auto kkt_solve = [&](const VectorXd& rhs) {
            VectorXd sol = ldlt.solve(rhs);
            double res_norm = inf_norm(rhs - kkt_apply(sol));
            for (int r = 0; r < settings.refinement_steps; ++r) {
                if (res_norm <= 1e-14 * (1.0 + inf_norm(rhs))) break;
                const VectorXd next = sol + ldlt.solve(rhs - kkt_apply(sol));
                const double next_norm = inf_norm(rhs - kkt_apply(next));
                if (!(next_norm < res_norm)) break;
                sol = next;
                res_norm = next_norm;
            }
            return sol;
        };

        struct Direction {
            VectorXd dx, dy, dz, ds, dzb, dsb;
        };

        // Residuals: rd stationarity, rp equality, rg general inequality,
        // rgb bound rows (-x_j + s_b = 0).
        VectorXd x = VectorXd::Zero(n), y = VectorXd::Zero(me), z = VectorXd::Zero(mg), s = VectorXd::Zero(mg);
        VectorXd zb = VectorXd::Zero(nb), sb = VectorXd::Zero(nb);

        auto bound_sum = [&](const VectorXd& v) {  // E v : bound duals embedded in x-space
            VectorXd out = VectorXd::Zero(n);
            for (Index k = 0; k < nb; ++k) out(bidx[k]) += v(k);
            return out;
        };

        auto direction = [&](const VectorXd& rd, const VectorXd& rp, const VectorXd& rg, const VectorXd& rgb,
                             const VectorXd& rsz, const VectorXd& rszb) {
            VectorXd rhs(n + me + mg);
            VectorXd rhs_b = -rgb + rszb.cwiseQuotient(zb);
            rhs.head(n) = -rd;
            for (Index k = 0; k < nb; ++k) rhs(bidx[k]) -= rhs_b(k) / w_b(k);
            rhs.segment(n, me) = -rp;
            rhs.tail(mg) = -rg + rsz.cwiseQuotient(z);
            const VectorXd v = kkt_solve(rhs);
            Direction d;
            d.dx = v.head(n);
            d.dy = v.segment(n, me);
            d.dz = v.tail(mg);
            d.ds = -(rsz + s.cwiseProduct(d.dz)).cwiseQuotient(z);
            d.dzb.resize(nb);
            for (Index k = 0; k < nb; ++k) d.dzb(k) = -(d.dx(bidx[k]) + rhs_b(k)) / w_b(k);
            d.dsb = -(rszb + sb.cwiseProduct(d.dzb)).cwiseQuotient(zb);
            return d;
        };

        auto max_step = [](const VectorXd& v, const VectorXd& dv) {
            double a = 1.0;
            for (Index i = 0; i < v.size(); ++i)
                if (dv(i) < 0.0) a = std::min(a, -v(i) / dv(i));
            return a;
        };

        QpSolution sol;
        auto finish = [&](QpStatus status, const std::string& msg) {
            const auto& sc = sp.scale;
            sol.status = status;
            sol.message = msg;
            sol.x = sc.var.cwiseProduct(x);
            sol.y = sc.eq.cwiseProduct(y) / sc.cost;
            sol.z = sc.in.cwiseProduct(z) / sc.cost;
            sol.z_nonneg.resize(nb);
            for (Index k = 0; k < nb; ++k) sol.z_nonneg(k) = zb(k) / (sc.cost * sc.var(bidx[k]));
            return sol;
        };

        // Initial point from the W = I system.
        if (!factor()) return finish(QpStatus::numerical_failure, "initial KKT factorization failed");
        {
            VectorXd rhs(n + me + mg);
            rhs.head(n) = -sp.q;
            rhs.segment(n, me) = sp.b;
            rhs.tail(mg) = sp.h;
            const VectorXd v = kkt_solve(rhs);
            x = v.head(n);
            y = v.segment(n, me);
            VectorXd zg = v.tail(mg);
            s = sp.h - sp.G * x;
            z = zg;
            sb.resize(nb);
            zb.resize(nb);
            for (Index k = 0; k < nb; ++k) {
                sb(k) = x(bidx[k]);
                zb(k) = -x(bidx[k]);
            }
            auto shift = [](VectorXd& a, VectorXd& b) {
                double mn = std::numeric_limits<double>::infinity();
                if (a.size()) mn = std::min(mn, a.minCoeff());
                if (b.size()) mn = std::min(mn, b.minCoeff());
                if (!std::isfinite(mn)) return;
                const double shift_by = mn <= 0.0 ? 1.0 - mn : 0.0;
                a.array() += shift_by;
                b.array() += shift_by;
            };
            shift(s, sb);
            shift(z, zb);
        }

        const double b_norm = std::max(inf_norm(sp.b), inf_norm(sp.h));
        const double q_norm = inf_norm(sp.q);
        const double tol = settings.tolerance;
        int stall = 0;
        bool stalled = false;
        double progress_merit = std::numeric_limits<double>::infinity();
        int last_progress = 0;
        struct Snapshot {
            double merit = std::numeric_limits<double>::infinity();
            VectorXd x, y, z, s, zb, sb;
            KktResiduals scaled_kkt;
        } best;

        for (int it = 0; it <= settings.max_iter; ++it) {
            sol.iterations = it;
            const VectorXd rd = sp.P * x + sp.q + At * y + Gt * z - bound_sum(zb);
            const VectorXd rp = sp.A * x - sp.b;
            const VectorXd rg = sp.G * x + s - sp.h;
            VectorXd rgb(nb);
            for (Index k = 0; k < nb; ++k) rgb(k) = -x(bidx[k]) + sb(k);
            const double gap = s.dot(z) + sb.dot(zb);
            const double mu = m_total > 0 ? gap / static_cast<double>(m_total) : 0.0;
            const double pobj = 0.5 * x.dot(sp.P * x) + sp.q.dot(x);

            const double pres = std::max({inf_norm(rp), inf_norm(rg), inf_norm(rgb)});
            const double dres = inf_norm(rd);
            sol.scaled_kkt.stationarity = dres;
            sol.scaled_kkt.primal_eq = inf_norm(rp);
            sol.scaled_kkt.primal_ineq = std::max(inf_norm(rg), inf_norm(rgb));
            sol.scaled_kkt.complementarity = std::max(mg ? s.cwiseProduct(z).cwiseAbs().maxCoeff() : 0.0,
                                                      nb ? sb.cwiseProduct(zb).cwiseAbs().maxCoeff() : 0.0);
            sol.scaled_kkt.gap = gap;

            if (settings.log)
                *settings.log << std::setw(4) << it << "  pobj " << std::setw(14) << pobj << "  pres "
                              << std::setw(10) << pres << "  dres " << std::setw(10) << dres << "  mu " << mu << '\n';

            const double merit = std::max({pres / (1.0 + b_norm), dres / (1.0 + q_norm), gap / (1.0 + std::abs(pobj))});
            if (merit <= tol) return finish(QpStatus::optimal, "converged");
            if (merit < best.merit) best = {merit, x, y, z, s, zb, sb, sol.scaled_kkt};
            if (merit < 0.5 * progress_merit) {
                progress_merit = merit;
                last_progress = it;
            }
            if (it - last_progress >= 10) {
                stalled = true;
                break;
            }

            // Farkas certificate on a diverging dual sequence.
            const double dual_norm = std::max({inf_norm(y), inf_norm(z), inf_norm(zb)});
            if (dual_norm > 1e8) {
                const VectorXd ray = (At * y + Gt * z - bound_sum(zb)) / dual_norm;
                const double lin = (sp.b.dot(y) + sp.h.dot(z)) / dual_norm;
                if (inf_norm(ray) < 1e-7 && lin < -1e-7) return finish(QpStatus::infeasible, "primal infeasible");
            }
            if (it == settings.max_iter) break;

            w_g = s.cwiseQuotient(z);
            w_b = sb.cwiseQuotient(zb);
            if (!factor()) return finish(QpStatus::numerical_failure, "KKT factorization failed");

            // predictor
            const VectorXd rsz_aff = s.cwiseProduct(z), rszb_aff = sb.cwiseProduct(zb);
            const Direction aff = direction(rd, rp, rg, rgb, rsz_aff, rszb_aff);
            const double a_aff = std::min({max_step(s, aff.ds), max_step(z, aff.dz), max_step(sb, aff.dsb),
                                           max_step(zb, aff.dzb)});
            const double gap_aff = (s + a_aff * aff.ds).dot(z + a_aff * aff.dz) +
                                   (sb + a_aff * aff.dsb).dot(zb + a_aff * aff.dzb);
            const double sigma = m_total > 0 ? std::pow(std::clamp(gap_aff / gap, 0.0, 1.0), 3) : 0.0;

            // corrector
            const VectorXd rsz = rsz_aff + aff.ds.cwiseProduct(aff.dz) - VectorXd::Constant(mg, sigma * mu);
            const VectorXd rszb = rszb_aff + aff.dsb.cwiseProduct(aff.dzb) - VectorXd::Constant(nb, sigma * mu);
            const Direction d = direction(rd, rp, rg, rgb, rsz, rszb);
            const double a_max =
                std::min({max_step(s, d.ds), max_step(z, d.dz), max_step(sb, d.dsb), max_step(zb, d.dzb)});
            const double alpha = std::min(1.0, 0.99 * a_max);

            const bool finite = d.dx.allFinite() && d.dy.allFinite() && d.dz.allFinite() && d.ds.allFinite() &&
                                d.dzb.allFinite() && d.dsb.allFinite();
            if (!finite || alpha < 1e-8) {
                // inaccurate direction: keep the iterate, regularize harder
                if (reg >= kMaxRegularization || ++stall >= 8) {
                    stalled = true;
                    break;
                }
                reg = std::min(reg * 100.0, kMaxRegularization);
                continue;
            }
            stall = 0;
            x += alpha * d.dx;
            y += alpha * d.dy;
            z += alpha * d.dz;
            s += alpha * d.ds;
            zb += alpha * d.dzb;
            sb += alpha * d.dsb;
        }

        // accuracy floor reached short of the target: fall back to the best iterate
        if (best.merit <= settings.acceptable_tolerance) {
            x = best.x, y = best.y, z = best.z, s = best.s, zb = best.zb, sb = best.sb;
            sol.scaled_kkt = best.scaled_kkt;
            return finish(QpStatus::optimal, "converged to the acceptable tolerance");
        }
        finish(QpStatus::max_iter, stalled ? "no progress" : "iteration limit reached");
        sol.message += "; most violated block: " + most_violated_block(problem, sol);
        return sol;
    }

public:
    /// Label of the constraint block with the largest unscaled violation.
    static std::string most_violated_block(const QpProblem& p, const QpSolution& s) {
        std::string label = "none";
        double worst = 0.0;
        if (p.b_eq.size()) {
            const VectorXd r = (p.A_eq * s.x - p.b_eq).cwiseAbs();
            for (const auto& b : p.eq_blocks) {
                const double v = b.size ? r.segment(b.begin, b.size).maxCoeff() : 0.0;
                if (v > worst) worst = v, label = b.label;
            }
        }
        if (p.b_in.size()) {
            const VectorXd r = p.A_in * s.x - p.b_in;
            for (const auto& b : p.in_blocks) {
                const double v = b.size ? r.segment(b.begin, b.size).maxCoeff() : 0.0;
                if (v > worst) worst = v, label = b.label;
            }
        }
        for (Index j : p.nonneg)
            if (-s.x(j) > worst) worst = -s.x(j), label = p.nonneg_label;
        return label;
    }
};

inline const QpEngine& default_engine() {
    static const InteriorPointEngine engine;
    return engine;
}

inline QpSolution solve_qp(const QpProblem& problem, const QpSettings& settings = {},
                           const QpEngine& engine = default_engine()) {
    return engine.solve(problem, settings);
}

}  // namespace affine_reserve
