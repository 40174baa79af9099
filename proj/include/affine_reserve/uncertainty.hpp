#pragma once

// Forecast-error model: saturating correlated random walk, truncated
// Gaussian steps, Monte-Carlo moments and the per-state uncertainty box.

#include <cstdint>
#include <random>

#include "affine_reserve/errors.hpp"
#include "affine_reserve/linalg.hpp"
#include "affine_reserve/moments.hpp"

namespace affine_reserve {

/// Seedable generator whose substreams are independent of the order in
/// which they are drawn.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix(seed)) {}

    std::uint64_t seed() const { return seed_; }

    Rng substream(std::uint64_t index) const { return Rng(mix(seed_ ^ mix(index + 0x9e3779b97f4a7c15ULL))); }

    double normal() { return normal_(engine_); }
    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    std::uint64_t bits() { return engine_(); }

private:
    static std::uint64_t mix(std::uint64_t z) {  // splitmix64 finalizer
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

struct ProcessModel {
    MatrixXd sigma;   // covariance of beta
    MatrixXd A_beta;  // beta polytope A_beta beta <= b_beta
    VectorXd b_beta;
    VectorXd q_min, q_max;

    Index dim() const { return sigma.rows(); }

    /// Per-component step bounds implied by axis-aligned rows of A_beta.
    VectorXd step_upper() const { return axis_bound(+1.0); }
    VectorXd step_lower() const { return -axis_bound(-1.0); }

    /// q_max and beta bounds scaled by phi, sigma by phi^2.
    ProcessModel scaled(double phi) const {
        ProcessModel m = *this;
        m.sigma *= phi * phi;
        m.b_beta *= phi;
        m.q_min *= phi;
        m.q_max *= phi;
        return m;
    }

private:
    VectorXd axis_bound(double sign) const {
        VectorXd out = VectorXd::Constant(dim(), std::numeric_limits<double>::infinity());
        for (Index r = 0; r < A_beta.rows(); ++r)
            for (Index c = 0; c < A_beta.cols(); ++c)
                if (sign * A_beta(r, c) > 0.0) out(c) = std::min(out(c), b_beta(r) / (sign * A_beta(r, c)));
        return out;
    }
};

inline void validate(const ProcessModel& m) {
    const Index n = m.dim();
    if (n < 1 || m.sigma.cols() != n) throw ValidationError("sigma must be square and non-empty", "uncertainty.sigma");
    if (!linalg::is_psd(m.sigma)) throw ValidationError("sigma is not positive semidefinite", "uncertainty.sigma");
    if (m.A_beta.cols() != n || m.A_beta.rows() != m.b_beta.size())
        throw ValidationError("beta polytope dimensions inconsistent", "uncertainty.a_beta");
    if (m.q_min.size() != n || m.q_max.size() != n) throw ValidationError("bound length mismatch", "uncertainty.q_min");
    for (Index c = 0; c < n; ++c)
        if (!(m.q_min(c) < m.q_max(c))) throw ValidationError("q_min must be below q_max", "uncertainty.q_max");
    if ((m.b_beta.array() <= 0.0).any())
        throw ValidationError("beta polytope must contain 0 in its interior", "uncertainty.b_beta");
    for (Index r = 0; r < m.A_beta.rows(); ++r) {
        if ((m.A_beta.row(r).array() != 0.0).count() != 1)
            throw ValidationError("beta polytope rows must be axis aligned", "uncertainty.a_beta");
    }
    const VectorXd up = m.step_upper(), lo = m.step_lower();
    if (!up.allFinite() || !lo.allFinite()) throw ValidationError("beta polytope is unbounded", "uncertainty.a_beta");
}

/// q_{k+1} = min(max(q_min, q_k + beta_k), q_max).
inline VectorXd step_process(const VectorXd& q, const VectorXd& beta, const ProcessModel& m) {
    if (q.size() != m.dim() || beta.size() != m.dim()) throw ValidationError("dimension mismatch", "step_process");
    return (q + beta).cwiseMax(m.q_min).cwiseMin(m.q_max);
}

/// Rejection sampler for N(0, sigma) truncated to the beta polytope.
class BetaSampler {
public:
    explicit BetaSampler(const ProcessModel& m) : model_(&m), factor_(linalg::psd_sqrt_factor(m.sigma)) {}

    static constexpr long kMaxAttempts = 100000;  // acceptance rate floor 1e-5 < 1e-4

    VectorXd operator()(Rng& rng) const {
        const Index n = model_->dim();
        VectorXd xi(n);
        for (long attempt = 0; attempt < kMaxAttempts; ++attempt) {
            for (Index c = 0; c < n; ++c) xi(c) = rng.normal();
            VectorXd beta = factor_ * xi;
            if (((model_->A_beta * beta - model_->b_beta).array() <= 0.0).all()) return beta;
        }
        throw ValidationError("truncated normal acceptance rate below 1e-4; reparameterize sigma or beta bounds",
                              "uncertainty.sigma");
    }

private:
    const ProcessModel* model_;
    MatrixXd factor_;
};

inline VectorXd sample_beta(const ProcessModel& m, Rng& rng) { return BetaSampler(m)(rng); }

/// One T-step path q_1..q_T stacked (N_delta T).
inline VectorXd simulate_path(const VectorXd& q0, const ProcessModel& m, int horizon, Rng& rng,
                              const BetaSampler& sampler) {
    const Index n = m.dim();
    VectorXd path(n * horizon);
    VectorXd q = q0;
    for (int k = 0; k < horizon; ++k) {
        q = step_process(q, sampler(rng), m);
        path.segment(k * n, n) = q;
    }
    return path;
}

/// Monte-Carlo mean path and error covariance from `n_mc` paths. Path p uses
/// substream p of `rng`, and the reduction runs in path order, so the result
/// depends only on (seed, n_mc, model, q0).
inline MomentEstimate estimate_moments(const VectorXd& q0, const ProcessModel& m, int horizon, long n_mc,
                                       const Rng& rng) {
    if (n_mc < 1000) throw ValidationError("at least 1000 Monte-Carlo paths are required", "n_mc");
    if (q0.size() != m.dim()) throw ValidationError("q0 dimension mismatch", "q0");
    const Index d = m.dim() * horizon;
    const BetaSampler sampler(m);

    MatrixXd paths(d, n_mc);
    for (long p = 0; p < n_mc; ++p) {
        Rng sub = rng.substream(static_cast<std::uint64_t>(p));
        paths.col(p) = simulate_path(q0, m, horizon, sub, sampler);
    }
    MomentEstimate est;
    est.n_samples = n_mc;
    est.mean_q = paths.rowwise().mean();
    paths.colwise() -= est.mean_q;
    est.second_moment = linalg::project_psd(paths * paths.transpose() / static_cast<double>(n_mc - 1));
    est.mean_delta = VectorXd::Zero(d);
    return est;
}

/// Delta = { delta : S delta <= h }.
struct UncertaintyPolytope {
    MatrixXd S;
    VectorXd h;

    Index rows() const { return h.size(); }
    Index dim() const { return S.cols(); }

    /// Rows with exactly one nonzero; such polytopes are boxes and admit
    /// per-coordinate pruning of dual multipliers.
    bool axis_aligned() const {
        for (Index r = 0; r < S.rows(); ++r)
            if ((S.row(r).array() != 0.0).count() != 1) return false;
        return true;
    }

    /// Per-coordinate bounds of an axis-aligned polytope.
    std::pair<VectorXd, VectorXd> box() const {
        VectorXd lo = VectorXd::Constant(dim(), -std::numeric_limits<double>::infinity());
        VectorXd hi = VectorXd::Constant(dim(), std::numeric_limits<double>::infinity());
        for (Index r = 0; r < S.rows(); ++r)
            for (Index c = 0; c < S.cols(); ++c) {
                if (S(r, c) > 0.0) hi(c) = std::min(hi(c), h(r) / S(r, c));
                if (S(r, c) < 0.0) lo(c) = std::max(lo(c), h(r) / S(r, c));
            }
        return {lo, hi};
    }

    bool contains(const VectorXd& delta, double tol = 0.0) const {
        return ((S * delta - h).array() <= tol).all();
    }

    static UncertaintyPolytope from_box(const VectorXd& lo, const VectorXd& hi) {
        const Index n = lo.size();
        UncertaintyPolytope p;
        p.S = MatrixXd::Zero(2 * n, n);
        p.h.resize(2 * n);
        for (Index c = 0; c < n; ++c) {
            p.S(2 * c, c) = 1.0;
            p.h(2 * c) = hi(c);
            p.S(2 * c + 1, c) = -1.0;
            p.h(2 * c + 1) = -lo(c);
        }
        return p;
    }
};

inline void validate(const UncertaintyPolytope& p) {
    if (p.S.rows() != p.h.size()) throw ValidationError("S and h row counts differ", "uncertainty_set");
    if (!((p.h.array() > 0.0).all())) throw ValidationError("origin is not interior to the set", "uncertainty_set");
    if (p.axis_aligned()) {
        auto [lo, hi] = p.box();
        if (!lo.allFinite() || !hi.allFinite()) throw ValidationError("uncertainty set is unbounded", "uncertainty_set");
    }
}

/// Box of reachable errors around the mean path: at step k (1-based) the
/// driver lies in [max(q_min, q0 - k b_lo), min(q_max, q0 + k b_hi)], so
/// delta_k is bounded by those limits minus mean_q_k. Bounds are floored at
/// +-floor so the origin stays interior.
inline UncertaintyPolytope build_uncertainty_polytope(const VectorXd& q0, const ProcessModel& m,
                                                      const VectorXd& mean_q, int horizon, double floor = 1e-6) {
    const Index n = m.dim();
    if (q0.size() != n || mean_q.size() != n * horizon)
        throw ValidationError("dimension mismatch", "build_uncertainty_polytope");
    const VectorXd up = m.step_upper(), down = m.step_lower();
    VectorXd lo(n * horizon), hi(n * horizon);
    for (int k = 1; k <= horizon; ++k)
        for (Index c = 0; c < n; ++c) {
            const Index idx = (k - 1) * n + c;
            const double reach_hi = std::min(m.q_max(c), q0(c) + k * up(c));
            const double reach_lo = std::max(m.q_min(c), q0(c) + k * down(c));
            hi(idx) = std::max(reach_hi - mean_q(idx), floor);
            lo(idx) = std::min(reach_lo - mean_q(idx), -floor);
        }
    return UncertaintyPolytope::from_box(lo, hi);
}

}  // namespace affine_reserve
