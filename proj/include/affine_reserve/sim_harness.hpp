#pragma once

// Closed-loop simulation: per step, estimate the forecast moments from the
// current wind state, solve the scheme's robust program, apply the first
// input to the realized error and advance every participant.

#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "affine_reserve/case_file.hpp"
#include "affine_reserve/errors.hpp"
#include "affine_reserve/horizon_model.hpp"
#include "affine_reserve/network.hpp"
#include "affine_reserve/qp_core.hpp"
#include "affine_reserve/robust_builder.hpp"
#include "affine_reserve/uncertainty.hpp"

namespace affine_reserve {

/// Policy structure benchmarked in the simulation. Prescient solves with the
/// realized future substituted for the forecast and no response matrices.
struct Scheme {
    enum class Kind { prescient, diagonal, banded, full };
    Kind kind = Kind::full;
    int band = 0;

    std::string name() const {
        switch (kind) {
            case Kind::prescient: return "prescient";
            case Kind::diagonal: return "diagonal";
            case Kind::banded: return "banded(" + std::to_string(band) + ")";
            case Kind::full: return "full";
        }
        return "unknown";
    }

    std::string description() const {
        switch (kind) {
            case Kind::prescient: return "future errors known at solve time, schedules only";
            case Kind::diagonal: return "response to the current error only";
            case Kind::banded: return "response to the last " + std::to_string(band) + " errors";
            case Kind::full: return "response to all revealed errors";
        }
        return "";
    }

    PolicyStructure structure(int horizon) const {
        switch (kind) {
            case Kind::prescient: return PolicyStructure::none();
            case Kind::diagonal: return PolicyStructure::diagonal();
            case Kind::banded:
                if (band <= 1) return PolicyStructure::diagonal();
                if (band >= horizon) return PolicyStructure::full();
                return PolicyStructure::banded(band);
            case Kind::full: return PolicyStructure::full();
        }
        return PolicyStructure::full();
    }

    bool prescient() const { return kind == Kind::prescient; }

    /// Accepts prescient | diagonal | full | banded(k) | banded:k.
    static Scheme parse(const std::string& text) {
        if (text == "prescient") return {Kind::prescient, 0};
        if (text == "diagonal") return {Kind::diagonal, 1};
        if (text == "full") return {Kind::full, 0};
        std::string digits;
        if (text.rfind("banded(", 0) == 0 && text.size() > 8 && text.back() == ')')
            digits = text.substr(7, text.size() - 8);
        else if (text.rfind("banded:", 0) == 0)
            digits = text.substr(7);
        if (!digits.empty() && digits.find_first_not_of("0123456789") == std::string::npos) {
            const int k = std::stoi(digits);
            if (k < 1) throw ValidationError("band width must be at least 1", "schemes");
            return {Kind::banded, k};
        }
        throw ValidationError("unknown scheme '" + text + "'", "schemes");
    }
};

inline std::vector<Scheme> parse_schemes(const std::vector<std::string>& names) {
    std::vector<Scheme> out;
    for (const auto& n : names) out.push_back(Scheme::parse(n));
    return out;
}

/// Input for step k of a policy from the errors revealed so far: the row
/// rule u_k = e_k + sum_{m <= k} D_{k,m} delta_m.
inline double apply_policy(const AffinePolicy& pol, const VectorXd& observed_prefix, int k) {
    const Index T = pol.e.size();
    if (k < 0 || k >= T) throw ValidationError("step outside the policy horizon", "apply_policy");
    const Index nd = T > 0 ? pol.D.cols() / T : 0;
    const Index need = (k + 1) * nd;
    if (observed_prefix.size() < need) throw ValidationError("observed error prefix too short", "apply_policy");
    return pol.e(k) + pol.D.row(k).head(need).dot(observed_prefix.head(need));
}

enum class OperatingMode { receding, batchwise, shift };

inline OperatingMode parse_mode(const std::string& s) {
    if (s == "receding") return OperatingMode::receding;
    if (s == "batchwise") return OperatingMode::batchwise;
    if (s == "shift") return OperatingMode::shift;
    throw ValidationError("unknown mode '" + s + "'", "simulation.mode");
}

inline const char* to_string(OperatingMode m) {
    switch (m) {
        case OperatingMode::receding: return "receding";
        case OperatingMode::batchwise: return "batchwise";
        case OperatingMode::shift: return "shift";
    }
    return "unknown";
}

/// Everything that stays fixed over one simulation.
struct SimulationSetup {
    const CaseFile* case_data = nullptr;
    ProcessModel model;  // possibly scaled
    VectorXd q0;
    int horizon = 8;
    int steps = 96;
    long n_mc = 20000;
    OperatingMode mode = OperatingMode::receding;
    QpSettings qp;
    double policy_regularization = 1e-8;
    int audit_vertices = 20;
    double audit_tolerance = 1e-5;

    static SimulationSetup from_case(const CaseFile& c, double phi = 1.0) {
        SimulationSetup s;
        s.case_data = &c;
        s.model = c.uncertainty.model.scaled(phi);
        s.q0 = c.uncertainty.q0 * phi;
        s.horizon = c.simulation.horizon;
        s.steps = c.simulation.steps;
        s.n_mc = c.uncertainty.n_mc;
        s.mode = parse_mode(c.simulation.mode);
        s.qp = c.solver.settings();
        s.policy_regularization = c.solver.policy_regularization;
        return s;
    }
};

/// Initial participant states from the case (empty for inelastic ones).
inline std::vector<VectorXd> initial_states(const CaseFile& c) {
    std::vector<VectorXd> x(c.participants.size());
    for (std::size_t i = 0; i < c.participants.size(); ++i) {
        const auto& p = c.participants[i];
        if (p.type == ParticipantType::thermal_generator) x[i] = VectorXd::Constant(2, p.generator.p_0);
        if (p.type == ParticipantType::storage) {
            x[i] = VectorXd::Zero(3);
            x[i](2) = p.storage.s_0;
        }
    }
    return x;
}

/// Participants over the horizon starting at absolute step t (inputs u(t)
/// .. u(t + T - 1), injections at t + 1 .. t + T). `wind_path` is the mean
/// driver path, or the realized one when `known` (prescient).
inline std::vector<Participant> horizon_participants(const CaseFile& c, long t, int horizon,
                                                     const std::vector<VectorXd>& states, const VectorXd& wind_path,
                                                     bool known) {
    const Index nd = c.n_delta();
    if (wind_path.size() != nd * horizon) throw ValidationError("wind path length mismatch", "horizon_participants");
    std::vector<Participant> out;
    out.reserve(c.participants.size());
    for (std::size_t i = 0; i < c.participants.size(); ++i) {
        const auto& s = c.participants[i];
        switch (s.type) {
            case ParticipantType::thermal_generator: {
                Participant p = build_thermal_generator(s.generator, horizon, nd, s.id, s.node);
                p.x0 = states[i];
                out.push_back(std::move(p));
                break;
            }
            case ParticipantType::storage: {
                StorageSpec spec = s.storage;
                spec.tau = c.simulation.tau;
                Participant p = build_storage_unit(spec, horizon, nd, s.id, s.node);
                p.x0 = states[i];
                out.push_back(std::move(p));
                break;
            }
            case ParticipantType::wind: {
                Participant p = make_wind_farm(s.id, s.node, s.wind_map, wind_path, horizon);
                if (known) p.G.setZero();
                out.push_back(std::move(p));
                break;
            }
            case ParticipantType::load: {
                VectorXd demand(horizon);
                for (int k = 0; k < horizon; ++k) demand(k) = s.p_nom * c.load_factor(t + 1 + k);
                out.push_back(make_load(s.id, s.node, demand, nd));
                break;
            }
        }
    }
    return out;
}

/// One step of the realized closed loop.
struct StepRecord {
    long t = 0;  // inputs u(t), states x(t + 1)
    double load = 0.0;
    double wind = 0.0;
    std::vector<double> inputs;     // per participant (0 for inelastic)
    std::vector<double> levels;     // storage level after the step (NaN otherwise)
    double stage_cost = 0.0;
};

struct SimulationResult {
    std::string scheme;
    int run = 0;
    bool aborted = false;
    std::string abort_reason;
    std::string abort_label;
    double realized_cost = 0.0;
    int solves = 0;
    double solve_seconds = 0.0;  // build + solve, summed
    int qp_iterations = 0;
    double max_balance_residual = 0.0;
    double max_line_excess = -std::numeric_limits<double>::infinity();
    double max_local_excess = -std::numeric_limits<double>::infinity();
    std::vector<StepRecord> steps;
};

/// Realized driver path q(1) .. q(steps + horizon) for one run.
inline MatrixXd realized_wind_path(const SimulationSetup& s, const Rng& run_rng) {
    Rng rng = run_rng.substream(0);
    const BetaSampler sampler(s.model);
    const long len = s.steps + s.horizon;
    MatrixXd path(s.model.dim(), len + 1);
    path.col(0) = s.q0;
    for (long k = 1; k <= len; ++k) path.col(k) = step_process(path.col(k - 1), sampler(rng), s.model);
    return path;
}

/// Forecast moments at absolute step t, from q(t); shared by every scheme of a
/// run because the stream depends only on (run, t).
inline MomentEstimate step_moments(const SimulationSetup& s, const Rng& run_rng, long t, const VectorXd& q_t) {
    return estimate_moments(q_t, s.model, s.horizon, s.n_mc, run_rng.substream(1 + static_cast<std::uint64_t>(t)));
}

/// Closed-loop state of one scheme within a run.
class SchemeRunner {
public:
    SchemeRunner(const SimulationSetup& setup, Scheme scheme, int run)
        : s_(setup), scheme_(scheme), flows_(), states_(initial_states(*setup.case_data)) {
        result_.scheme = scheme.name();
        result_.run = run;
        const auto parts = horizon_participants(*s_.case_data, 0, s_.horizon, states_,
                                                VectorXd::Zero(s_.model.dim() * s_.horizon), false);
        flows_ = build_flow_maps(s_.case_data->grid, parts, s_.horizon);
    }

    const SimulationResult& result() const { return result_; }
    bool active() const { return !result_.aborted; }

    /// True when a new program is solved at step t under the operating mode.
    bool solves_at(long t) const {
        const long last = s_.steps - s_.horizon;
        if (t > last) return false;
        if (s_.mode == OperatingMode::batchwise) return t % s_.horizon == 0;
        return true;
    }

    /// Advances the loop from x(t) to x(t + 1). `path` holds q(0..), `moments`
    /// are those at step t (ignored by the prescient scheme).
    void step(long t, const MatrixXd& path, const std::function<const MomentEstimate&()>& moments) {
        if (result_.aborted) return;
        const CaseFile& c = *s_.case_data;
        const Index nd = s_.model.dim();
        const int T = s_.horizon;
        try {
            if (solves_at(t)) solve(t, path, moments);
            if (!policy_) throw NumericalError("no policy available", "simulation");

            // errors revealed since the policy was issued
            const int k = static_cast<int>(t - issued_at_);
            VectorXd observed = VectorXd::Zero(nd * T);
            for (int m = 0; m <= k; ++m)
                observed.segment(m * nd, nd) = path.col(issued_at_ + 1 + m) - issued_mean_.segment(m * nd, nd);

            StepRecord rec;
            rec.t = t;
            rec.inputs.assign(c.participants.size(), 0.0);
            rec.levels.assign(c.participants.size(), std::numeric_limits<double>::quiet_NaN());
            VectorXd nodal = VectorXd::Zero(c.grid.n_nodes);
            const VectorXd q_next = path.col(t + 1);
            for (std::size_t i = 0; i < c.participants.size(); ++i) {
                const auto& spec = c.participants[i];
                double injection = 0.0;
                if (spec.type == ParticipantType::load) {
                    injection = -spec.p_nom * c.load_factor(t + 1);
                    rec.load -= injection;
                } else if (spec.type == ParticipantType::wind) {
                    injection = spec.wind_map.dot(q_next);
                    rec.wind += injection;
                } else {
                    const auto& model = *participants_[i].elastic;
                    const double u = apply_policy((*policy_)[i], observed, k);
                    states_[i] = model.stage.A_tilde * states_[i] + model.stage.B_tilde * u;
                    injection = model.stage.C_tilde.dot(states_[i]);
                    rec.inputs[i] = u;
                    if (spec.type == ParticipantType::storage) rec.levels[i] = states_[i](2);
                    rec.stage_cost += model.stage_cost.evaluate(states_[i], u);
                    local_excess(model.bounds, states_[i], u);
                }
                nodal(spec.node) += injection;
            }
            const double bal = std::abs(nodal.sum());
            result_.max_balance_residual = std::max(result_.max_balance_residual, bal);
            if (flows_.rows_per_step() > 0)
                result_.max_line_excess = std::max(
                    result_.max_line_excess, (flows_.static_map * nodal - flows_.static_limits).maxCoeff());
            result_.realized_cost += rec.stage_cost;
            result_.steps.push_back(std::move(rec));
        } catch (const InfeasibleError& e) {
            abort(e.what(), e.label().empty() ? "infeasible" : e.label());
        } catch (const NumericalError& e) {
            abort(e.what(), e.label().empty() ? "numerical" : e.label());
        }
    }

private:
    void abort(const std::string& why, const std::string& label) {
        result_.aborted = true;
        result_.abort_reason = why;
        result_.abort_label = label;
    }

    void local_excess(const StageBounds& b, const VectorXd& x, double u) {
        double v = std::max(b.u_lo - u, u - b.u_hi);
        for (Index c = 0; c < x.size(); ++c) v = std::max({v, b.x_lo(c) - x(c), x(c) - b.x_hi(c)});
        result_.max_local_excess = std::max(result_.max_local_excess, v);
    }

    void solve(long t, const MatrixXd& path, const std::function<const MomentEstimate&()>& moments) {
        const auto start = std::chrono::steady_clock::now();
        const CaseFile& c = *s_.case_data;
        const Index nd = s_.model.dim();
        const int T = s_.horizon;
        const Index ndt = nd * T;

        MomentEstimate mom;
        UncertaintyPolytope delta;
        VectorXd wind_path(ndt);
        const bool prescient = scheme_.prescient();
        if (prescient) {
            for (int k = 0; k < T; ++k) wind_path.segment(k * nd, nd) = path.col(t + 1 + k);
            mom = MomentEstimate::zero(ndt);
            mom.mean_q = wind_path;
            delta = UncertaintyPolytope::from_box(VectorXd::Constant(ndt, -1e-6), VectorXd::Constant(ndt, 1e-6));
        } else {
            mom = moments();
            wind_path = mom.mean_q;
            delta = build_uncertainty_polytope(path.col(t), s_.model, mom.mean_q, T);
        }
        participants_ = horizon_participants(c, t, T, states_, wind_path, prescient);

        AssemblyOptions opt;
        opt.structure = scheme_.structure(T);
        opt.policy_regularization = s_.policy_regularization;
        if (s_.mode == OperatingMode::shift && policy_ && !prescient) opt.fixed = shifted_entries(t, path, mom);

        const RobustProgram prog = assemble_robust_program(participants_, flows_, delta, mom, opt);
        const QpSolution sol = solve_qp(prog.qp, s_.qp);
        result_.qp_iterations += sol.iterations;
        if (sol.status == QpStatus::infeasible)
            throw InfeasibleError("step " + std::to_string(t) + ": " + sol.message, "solve");
        if (!sol.optimal())
            throw NumericalError("step " + std::to_string(t) + ": " + sol.message,
                                 InteriorPointEngine::most_violated_block(prog.qp, sol));
        ExtractOptions eo;
        eo.audit_vertices = s_.audit_vertices;
        eo.audit_tolerance = s_.audit_tolerance;
        eo.audit_seed = static_cast<std::uint64_t>(t) + 1;
        policy_ = extract_policies(prog, participants_, flows_, delta, sol, eo);
        issued_at_ = t;
        issued_mean_ = wind_path;
        result_.solves += 1;
        result_.solve_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }

    /// Shift-and-append: rows 0..T-2 of the new policy are the previous rows
    /// 1..T-1 re-expressed in the new error coordinates; the realized error
    /// of the dropped step is absorbed into the nominal schedule.
    std::vector<FixedPolicyEntry> shifted_entries(long t, const MatrixXd& path, const MomentEstimate& mom) const {
        std::vector<FixedPolicyEntry> fixed;
        const Index nd = s_.model.dim();
        const int T = s_.horizon;
        if (t != issued_at_ + 1) return fixed;
        const PolicyStructure st = scheme_.structure(T);
        const VectorXd realized0 = path.col(t) - issued_mean_.head(nd);
        for (std::size_t i = 0; i < participants_.size(); ++i) {
            if (!participants_[i].is_elastic()) continue;
            const AffinePolicy& old = (*policy_)[i];
            for (int l = 0; l + 1 < T; ++l) {
                // u_{l+1}^old = e + D0 delta0 + sum_{m>=1} D_m (q_m - mean_old_m)
                double e = old.e(l + 1) + old.D.row(l + 1).head(nd).dot(realized0);
                for (int m = 1; m <= l + 1; ++m) {
                    const VectorXd shift = mom.mean_q.segment((m - 1) * nd, nd) - issued_mean_.segment(m * nd, nd);
                    e += old.D.block(l + 1, m * nd, 1, nd).row(0).dot(shift);
                }
                fixed.push_back({i, -1, l, e});
                for (int m = 0; m <= l; ++m) {
                    if (!st.allows(l, m)) continue;
                    for (Index c = 0; c < nd; ++c)
                        fixed.push_back({i, l, m * nd + c, old.D(l + 1, (m + 1) * nd + c)});
                }
            }
        }
        return fixed;
    }

    const SimulationSetup& s_;
    Scheme scheme_;
    FlowMap flows_;
    std::vector<VectorXd> states_;
    std::vector<Participant> participants_;
    std::optional<std::vector<AffinePolicy>> policy_;
    long issued_at_ = 0;
    VectorXd issued_mean_;
    SimulationResult result_;
};

/// Runs several schemes in lockstep on one realization (common random
/// numbers; moments computed once per step and shared).
inline std::vector<SimulationResult> run_schemes(const SimulationSetup& setup, const std::vector<Scheme>& schemes,
                                                 int run, std::uint64_t base_seed, bool keep_steps = false) {
    if (!setup.case_data) throw ValidationError("simulation setup has no case", "simulation");
    if (setup.steps < setup.horizon) throw ValidationError("simulation shorter than the horizon", "simulation.steps");
    const Rng run_rng = Rng(base_seed).substream(static_cast<std::uint64_t>(run));
    const MatrixXd path = realized_wind_path(setup, run_rng);
    std::vector<SchemeRunner> runners;
    runners.reserve(schemes.size());
    for (const auto& sc : schemes) runners.emplace_back(setup, sc, run);

    for (long t = 0; t < setup.steps; ++t) {
        std::optional<MomentEstimate> mom;
        const std::function<const MomentEstimate&()> get = [&]() -> const MomentEstimate& {
            if (!mom) mom = step_moments(setup, run_rng, t, path.col(t));
            return *mom;
        };
        for (auto& r : runners) r.step(t, path, get);
    }
    std::vector<SimulationResult> out;
    for (auto& r : runners) {
        SimulationResult res = r.result();
        if (!keep_steps) res.steps.clear();
        out.push_back(std::move(res));
    }
    return out;
}

inline SimulationResult run_receding_horizon(const SimulationSetup& setup, const Scheme& scheme, int run,
                                             std::uint64_t base_seed, bool keep_steps = true) {
    return run_schemes(setup, {scheme}, run, base_seed, keep_steps).front();
}

struct SchemeSummary {
    std::string scheme;
    int completed = 0;
    int aborted = 0;
    double mean_cost = 0.0;
    double std_cost = 0.0;
    double se_cost = 0.0;
    double mean_increase_pct = 0.0;  // realized cost over prescient, per run, averaged
    double se_increase_pct = 0.0;
    double mean_reserve_cost = 0.0;  // scheme minus prescient
    double reserve_vs_diagonal_pct = std::numeric_limits<double>::quiet_NaN();
    double mean_solve_ms = 0.0;
};

struct ExperimentResult {
    std::vector<std::string> schemes;
    std::vector<std::vector<SimulationResult>> runs;  // [run][scheme]
    std::vector<SchemeSummary> summary;
    std::vector<int> complete_runs;  // runs where every scheme finished

    int scheme_index(const std::string& name) const {
        for (std::size_t k = 0; k < schemes.size(); ++k)
            if (schemes[k] == name) return static_cast<int>(k);
        return -1;
    }

    /// Realized costs of one scheme over the complete runs.
    std::vector<double> costs(int scheme) const {
        std::vector<double> out;
        for (int r : complete_runs) out.push_back(runs[r][scheme].realized_cost);
        return out;
    }
};

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(v.size());
}

inline double stddev_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline void summarize(ExperimentResult& ex) {
    const std::size_t ns = ex.schemes.size();
    ex.complete_runs.clear();
    for (std::size_t r = 0; r < ex.runs.size(); ++r) {
        bool ok = true;
        for (const auto& res : ex.runs[r]) ok = ok && !res.aborted;
        if (ok) ex.complete_runs.push_back(static_cast<int>(r));
    }
    const int pre = ex.scheme_index("prescient");
    const int diag = ex.scheme_index("diagonal");
    ex.summary.assign(ns, {});
    for (std::size_t k = 0; k < ns; ++k) {
        auto& s = ex.summary[k];
        s.scheme = ex.schemes[k];
        int solves = 0;
        double seconds = 0.0;
        for (const auto& run : ex.runs) {
            if (run[k].aborted) ++s.aborted;
            else ++s.completed;
            solves += run[k].solves;
            seconds += run[k].solve_seconds;
        }
        s.mean_solve_ms = solves ? 1000.0 * seconds / solves : 0.0;
        const auto c = ex.costs(static_cast<int>(k));
        s.mean_cost = mean_of(c);
        s.std_cost = stddev_of(c);
        s.se_cost = c.size() ? s.std_cost / std::sqrt(static_cast<double>(c.size())) : 0.0;
        if (pre >= 0) {
            const auto p = ex.costs(pre);
            std::vector<double> inc, res;
            for (std::size_t r = 0; r < c.size(); ++r) {
                inc.push_back(100.0 * (c[r] - p[r]) / p[r]);
                res.push_back(c[r] - p[r]);
            }
            s.mean_increase_pct = mean_of(inc);
            s.se_increase_pct = inc.size() ? stddev_of(inc) / std::sqrt(static_cast<double>(inc.size())) : 0.0;
            s.mean_reserve_cost = mean_of(res);
        }
    }
    if (pre >= 0 && diag >= 0)
        for (std::size_t k = 0; k < ns; ++k)
            ex.summary[k].reserve_vs_diagonal_pct =
                100.0 * ex.summary[k].mean_reserve_cost / ex.summary[diag].mean_reserve_cost;
}

struct ExperimentOptions {
    int threads = 1;
    std::function<void(int run)> on_run_done;
};

/// Runs n_runs realizations; each run drives every scheme with the same
/// wind path. Runs are independent and may use several threads; results are
/// stored by run index so the output does not depend on scheduling.
inline ExperimentResult run_experiment(const SimulationSetup& setup, const std::vector<Scheme>& schemes, int n_runs,
                                       std::uint64_t base_seed, const ExperimentOptions& opt = {}) {
    if (n_runs < 1) throw ValidationError("at least one run is required", "runs");
    ExperimentResult ex;
    for (const auto& s : schemes) ex.schemes.push_back(s.name());
    ex.runs.resize(n_runs);
    const int threads = std::max(1, std::min(opt.threads, n_runs));
    if (threads == 1) {
        for (int r = 0; r < n_runs; ++r) {
            ex.runs[r] = run_schemes(setup, schemes, r, base_seed);
            if (opt.on_run_done) opt.on_run_done(r);
        }
    } else {
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        std::mutex report;
        for (int w = 0; w < threads; ++w)
            pool.emplace_back([&] {
                for (int r = next++; r < n_runs; r = next++) {
                    ex.runs[r] = run_schemes(setup, schemes, r, base_seed);
                    if (opt.on_run_done) {
                        std::lock_guard<std::mutex> lock(report);
                        opt.on_run_done(r);
                    }
                }
            });
        for (auto& th : pool) th.join();
    }
    summarize(ex);
    return ex;
}

struct SweepRow {
    double phi = 1.0;
    double wind_capacity = 0.0;
    ExperimentResult experiment;
};

/// Wind capacity: sum over farms of g_tilde * q_max.
inline double wind_capacity(const CaseFile& c, const ProcessModel& m) {
    double cap = 0.0;
    for (const auto& p : c.participants)
        if (p.type == ParticipantType::wind) cap += p.wind_map.dot(m.q_max);
    return cap;
}

/// Experiment per scaling factor phi: q_max, q0 and the step bounds scale by
/// phi, the step covariance by phi^2.
inline std::vector<SweepRow> sensitivity_sweep(const CaseFile& c, const std::vector<double>& phis,
                                               const std::vector<Scheme>& schemes, int n_runs,
                                               std::uint64_t base_seed, const SimulationSetup& base,
                                               const ExperimentOptions& opt = {}) {
    std::vector<SweepRow> out;
    for (double phi : phis) {
        if (!(phi > 0.0)) throw ValidationError("scaling factors must be positive", "phi");
        SimulationSetup s = base;
        s.case_data = &c;
        s.model = c.uncertainty.model.scaled(phi);
        s.q0 = c.uncertainty.q0 * phi;
        SweepRow row;
        row.phi = phi;
        row.wind_capacity = wind_capacity(c, s.model);
        row.experiment = run_experiment(s, schemes, n_runs, base_seed, opt);
        out.push_back(std::move(row));
    }
    return out;
}

// ---- CSV output -------------------------------------------------------------

namespace csv {

inline std::string num(double v) {
    if (std::isnan(v)) return "nan";
    std::ostringstream os;
    os << std::setprecision(12) << v;
    return os.str();
}

/// run,scheme,status,realized_cost,reserve_cost,increase_pct,solves,abort_label
inline void write_runs(std::ostream& os, const ExperimentResult& ex) {
    os << "run,scheme,status,realized_cost,reserve_cost,increase_pct,solves,abort_label\n";
    const int pre = ex.scheme_index("prescient");
    for (std::size_t r = 0; r < ex.runs.size(); ++r)
        for (std::size_t k = 0; k < ex.schemes.size(); ++k) {
            const auto& res = ex.runs[r][k];
            const bool have_pre = pre >= 0 && !ex.runs[r][pre].aborted && !res.aborted;
            const double base = have_pre ? ex.runs[r][pre].realized_cost : std::nan("");
            os << r << "," << ex.schemes[k] << "," << (res.aborted ? "aborted" : "ok") << ","
               << (res.aborted ? "nan" : num(res.realized_cost)) << ","
               << (have_pre ? num(res.realized_cost - base) : "nan") << ","
               << (have_pre ? num(100.0 * (res.realized_cost - base) / base) : "nan") << "," << res.solves << ","
               << (res.aborted ? res.abort_label : "") << "\n";
        }
}

/// metric,<scheme 1>,<scheme 2>,...
inline void write_comparison(std::ostream& os, const ExperimentResult& ex) {
    os << "metric";
    for (const auto& s : ex.schemes) os << "," << s;
    os << "\n";
    auto row = [&](const char* name, auto get) {
        os << name;
        for (const auto& s : ex.summary) os << "," << get(s);
        os << "\n";
    };
    row("completed_runs", [](const SchemeSummary& s) { return std::to_string(s.completed); });
    row("aborted_runs", [](const SchemeSummary& s) { return std::to_string(s.aborted); });
    row("mean_cost", [](const SchemeSummary& s) { return num(s.mean_cost); });
    row("std_cost", [](const SchemeSummary& s) { return num(s.std_cost); });
    row("se_cost", [](const SchemeSummary& s) { return num(s.se_cost); });
    row("mean_increase_pct", [](const SchemeSummary& s) { return num(s.mean_increase_pct); });
    row("se_increase_pct", [](const SchemeSummary& s) { return num(s.se_increase_pct); });
    row("mean_reserve_cost", [](const SchemeSummary& s) { return num(s.mean_reserve_cost); });
    row("reserve_vs_diagonal_pct", [](const SchemeSummary& s) { return num(s.reserve_vs_diagonal_pct); });
}

/// phi,wind_capacity_mw,reserve_pct_<scheme>...,reduction_pct_<scheme>...
/// Reductions are relative to the diagonal scheme's reserve cost.
inline void write_sweep(std::ostream& os, const std::vector<SweepRow>& rows) {
    if (rows.empty()) return;
    const auto& names = rows.front().experiment.schemes;
    os << "phi,wind_capacity_mw";
    for (const auto& n : names)
        if (n != "prescient") os << ",reserve_pct_" << n;
    for (const auto& n : names)
        if (n != "prescient" && n != "diagonal") os << ",reduction_pct_" << n;
    os << ",completed_runs\n";
    for (const auto& r : rows) {
        os << num(r.phi) << "," << num(r.wind_capacity);
        for (const auto& s : r.experiment.summary)
            if (s.scheme != "prescient") os << "," << num(s.mean_increase_pct);
        for (const auto& s : r.experiment.summary)
            if (s.scheme != "prescient" && s.scheme != "diagonal") os << "," << num(100.0 - s.reserve_vs_diagonal_pct);
        os << "," << r.experiment.complete_runs.size() << "\n";
    }
}

/// t,load_mw,wind_mw,<input per elastic participant>,<level per storage>
inline void write_trace(std::ostream& os, const CaseFile& c, const SimulationResult& res) {
    os << "t,load_mw,wind_mw";
    for (const auto& p : c.participants)
        if (p.type == ParticipantType::thermal_generator || p.type == ParticipantType::storage) os << ",u_" << p.id;
    for (const auto& p : c.participants)
        if (p.type == ParticipantType::storage) os << ",level_" << p.id;
    os << ",stage_cost\n";
    for (const auto& s : res.steps) {
        os << s.t + 1 << "," << num(s.load) << "," << num(s.wind);
        for (std::size_t i = 0; i < c.participants.size(); ++i) {
            const auto t = c.participants[i].type;
            if (t == ParticipantType::thermal_generator || t == ParticipantType::storage) os << "," << num(s.inputs[i]);
        }
        for (std::size_t i = 0; i < c.participants.size(); ++i)
            if (c.participants[i].type == ParticipantType::storage) os << "," << num(s.levels[i]);
        os << "," << num(s.stage_cost) << "\n";
    }
}

}  // namespace csv

}  // namespace affine_reserve
