// reserve_sim: validate cases, solve single horizons, price policies and run
// closed-loop experiments. CSV schemas are described in docs/outputs.md.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "affine_reserve/case_file.hpp"
#include "affine_reserve/pricing.hpp"
#include "affine_reserve/sim_harness.hpp"

namespace fs = std::filesystem;
using namespace affine_reserve;

namespace {

enum Exit { ok = 0, usage = 1, validation = 2, infeasible = 3, numerical = 4 };

constexpr const char* kOutputEnv = "RESERVE_SIM_OUTPUT_DIR";

struct Common {
    std::string case_path = default_case_path();
    std::string out_dir;
    bool paper_scale = false;
    int horizon = 0;
    int steps = 0;
    long n_mc = 0;
    std::string mode;
    int threads = 1;
    bool quiet = false;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

fs::path output_dir(const Common& c) {
    fs::path p = !c.out_dir.empty() ? fs::path(c.out_dir)
                 : std::getenv(kOutputEnv) ? fs::path(std::getenv(kOutputEnv))
                                           : fs::path("reserve_out");
    fs::create_directories(p);
    return p;
}

/// Loads the case and applies scale and command-line overrides.
CaseFile prepare_case(const Common& o) {
    CaseFile c = load_case(o.case_path);
    if (o.paper_scale) {
        c.simulation.runs = 50;
        c.simulation.steps = 288;
        c.uncertainty.n_mc = 20000;
    }
    if (o.horizon > 0) c.simulation.horizon = o.horizon;
    if (o.steps > 0) c.simulation.steps = o.steps;
    if (o.n_mc > 0) c.uncertainty.n_mc = o.n_mc;
    if (!o.mode.empty()) c.simulation.mode = o.mode;
    if (o.seed_set) c.simulation.seed = o.seed;
    parse_mode(c.simulation.mode);
    if (c.simulation.steps < c.simulation.horizon)
        throw ValidationError("steps must be at least the horizon", "simulation.steps");
    return c;
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw ValidationError("cannot write " + p.string(), "output");
    f << text;
}

template <class F>
void write_with(const fs::path& p, F&& fn) {
    std::ostringstream os;
    fn(os);
    write_file(p, os.str());
}

Json base_metadata(const CaseFile& c, const std::string& command) {
    Json m;
    m["command"] = command;
    m["case"] = c.name;
    m["case_hash"] = case_hash(c);
    m["seed"] = c.simulation.seed;
    m["horizon"] = c.simulation.horizon;
    m["steps"] = c.simulation.steps;
    m["n_mc"] = c.uncertainty.n_mc;
    m["mode"] = c.simulation.mode;
    m["price_units"] = "currency per MW per step; price_per_mwh divides by the step length";
    return m;
}

/// Single horizon at t = 0 on the run-0 realization.
struct SingleSolve {
    std::vector<Participant> participants;
    FlowMap flows;
    UncertaintyPolytope delta;
    MomentEstimate moments;
    RobustProgram program;
    QpSolution solution;
    std::vector<AffinePolicy> policies;
    double seconds = 0.0;
};

SingleSolve solve_once(const CaseFile& c, const Scheme& scheme) {
    const auto start = std::chrono::steady_clock::now();
    SingleSolve s;
    const SimulationSetup setup = SimulationSetup::from_case(c);
    const Rng run_rng = Rng(c.simulation.seed).substream(0);
    s.moments = step_moments(setup, run_rng, 0, setup.q0);
    s.participants = horizon_participants(c, 0, setup.horizon, initial_states(c), s.moments.mean_q, false);
    s.flows = build_flow_maps(c.grid, s.participants, setup.horizon);
    s.delta = build_uncertainty_polytope(setup.q0, setup.model, s.moments.mean_q, setup.horizon);
    AssemblyOptions opt;
    opt.structure = scheme.structure(setup.horizon);
    opt.policy_regularization = setup.policy_regularization;
    s.program = assemble_robust_program(s.participants, s.flows, s.delta, s.moments, opt);
    s.solution = solve_qp(s.program.qp, setup.qp);
    if (s.solution.status == QpStatus::infeasible) throw InfeasibleError(s.solution.message, "solve");
    if (!s.solution.optimal())
        throw NumericalError(s.solution.message, InteriorPointEngine::most_violated_block(s.program.qp, s.solution));
    s.policies = extract_policies(s.program, s.participants, s.flows, s.delta, s.solution, {});
    s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return s;
}

void write_policies(std::ostream& os, const std::vector<Participant>& parts, const std::vector<AffinePolicy>& pols) {
    os << "participant,row,col,kind,value\n";
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (!parts[i].is_elastic()) continue;
        const auto& p = pols[i];
        for (Index l = 0; l < p.e.size(); ++l) os << parts[i].id << "," << l + 1 << ",0,nominal," << csv::num(p.e(l)) << "\n";
        for (Index l = 0; l < p.D.rows(); ++l)
            for (Index j = 0; j < p.D.cols(); ++j)
                if (p.D(l, j) != 0.0)
                    os << parts[i].id << "," << l + 1 << "," << j + 1 << ",response," << csv::num(p.D(l, j)) << "\n";
    }
}

int cmd_validate(const Common& o) {
    const CaseFile c = prepare_case(o);
    int gens = 0, stores = 0, loads = 0, winds = 0;
    for (const auto& p : c.participants) {
        gens += p.type == ParticipantType::thermal_generator;
        stores += p.type == ParticipantType::storage;
        loads += p.type == ParticipantType::load;
        winds += p.type == ParticipantType::wind;
    }
    std::cout << "case " << c.name << " ok: " << c.grid.n_nodes << " nodes, " << c.grid.lines.size() << " lines, "
              << c.participants.size() << " participants (" << gens << " generators, " << stores << " storage, "
              << loads << " loads, " << winds << " wind farms), hash " << case_hash(c) << "\n";
    return ok;
}

int cmd_solve_once(const Common& o, const std::string& scheme_name, bool dump) {
    const CaseFile c = prepare_case(o);
    const Scheme scheme = Scheme::parse(scheme_name);
    if (scheme.prescient()) throw ValidationError("solve-once needs a policy scheme", "scheme");
    const SingleSolve s = solve_once(c, scheme);
    const fs::path dir = output_dir(o);
    write_with(dir / "policies.csv", [&](std::ostream& os) { write_policies(os, s.participants, s.policies); });
    if (dump) write_with(dir / "program.txt", [&](std::ostream& os) { dump_program(os, s.program); });
    const AuditReport audit = audit_vertices(s.participants, s.flows, s.delta, s.policies, 1000, 1);
    Json m = base_metadata(c, "solve-once");
    m["scheme"] = scheme.name();
    m["variables"] = s.program.num_vars();
    m["equality_rows"] = s.program.qp.A_eq.rows();
    m["inequality_rows"] = s.program.qp.A_in.rows();
    m["iterations"] = s.solution.iterations;
    m["objective"] = s.solution.objective;
    m["kkt"] = {{"stationarity", s.solution.kkt.stationarity},
                {"primal_eq", s.solution.kkt.primal_eq},
                {"primal_ineq", s.solution.kkt.primal_ineq},
                {"complementarity", s.solution.kkt.complementarity},
                {"gap", s.solution.kkt.gap}};
    m["audit"] = {{"vertices", audit.vertices}, {"balance", audit.balance}, {"line", audit.line}, {"local", audit.local}};
    m["seconds"] = s.seconds;
    write_file(dir / "solve.json", m.dump(2) + "\n");
    if (!o.quiet)
        std::cout << scheme.name() << ": " << s.program.num_vars() << " variables, " << s.solution.iterations
                  << " iterations, objective " << s.solution.objective << ", " << s.seconds << " s -> " << dir.string()
                  << "\n";
    return ok;
}

int cmd_prices(const Common& o, const std::string& scheme_name) {
    const CaseFile c = prepare_case(o);
    const Scheme scheme = Scheme::parse(scheme_name);
    if (scheme.prescient()) throw ValidationError("prices need a policy scheme", "scheme");
    const SingleSolve s = solve_once(c, scheme);
    const PriceSet ps = extract_prices(s.program, s.participants, s.flows, s.solution);
    const fs::path dir = output_dir(o);
    write_with(dir / "nodal_prices.csv",
               [&](std::ostream& os) { price_csv::write_nodal(os, s.participants, ps, c.simulation.tau); });
    write_with(dir / "policy_prices.csv", [&](std::ostream& os) { price_csv::write_policy(os, s.participants, ps); });
    write_with(dir / "settlement.csv", [&](std::ostream& os) {
        os << "participant,power_payment,reserve_payment,expected_cost,expected_profit,stationarity_residual\n";
        for (std::size_t i = 0; i < s.participants.size(); ++i) {
            if (!s.participants[i].is_elastic()) continue;
            const Settlement st = settlement(s.policies[i], ps, s.participants[i], i, s.moments);
            const double r = stationarity_residual(s.program, s.participants, s.solution, ps, i);
            os << s.participants[i].id << "," << csv::num(st.power_payment) << "," << csv::num(st.reserve_payment)
               << "," << csv::num(st.expected_cost) << "," << csv::num(st.expected_profit) << ","
               << csv::num(r) << "\n";
        }
    });
    if (!o.quiet) std::cout << "prices for " << scheme.name() << " written to " << dir.string() << "\n";
    return ok;
}

int cmd_simulate(const Common& o, const std::string& scheme_name, int run) {
    const CaseFile c = prepare_case(o);
    const Scheme scheme = Scheme::parse(scheme_name);
    const SimulationSetup setup = SimulationSetup::from_case(c);
    const auto start = std::chrono::steady_clock::now();
    const SimulationResult res = run_receding_horizon(setup, scheme, run, c.simulation.seed);
    const fs::path dir = output_dir(o);
    write_with(dir / "trace.csv", [&](std::ostream& os) { csv::write_trace(os, c, res); });
    Json m = base_metadata(c, "simulate");
    m["scheme"] = res.scheme;
    m["run"] = run;
    m["status"] = res.aborted ? "aborted" : "ok";
    m["abort_reason"] = res.abort_reason;
    m["realized_cost"] = res.realized_cost;
    m["solves"] = res.solves;
    m["max_balance_residual"] = res.max_balance_residual;
    m["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_file(dir / "simulate.json", m.dump(2) + "\n");
    if (res.aborted) {
        std::cerr << "run aborted (" << res.abort_label << "): " << res.abort_reason << "\n";
        return res.abort_label == "numerical" ? numerical : infeasible;
    }
    if (!o.quiet) std::cout << res.scheme << " run " << run << ": realized cost " << res.realized_cost << "\n";
    return ok;
}

Json summary_json(const ExperimentResult& ex) {
    Json arr = Json::array();
    for (const auto& s : ex.summary)
        arr.push_back({{"scheme", s.scheme}, {"completed", s.completed}, {"aborted", s.aborted},
                       {"mean_solve_ms", s.mean_solve_ms}});
    return arr;
}

int cmd_experiment(const Common& o, std::vector<std::string> schemes, int runs) {
    const CaseFile c = prepare_case(o);
    if (schemes.empty()) schemes = c.simulation.schemes;
    if (runs <= 0) runs = c.simulation.runs;
    const SimulationSetup setup = SimulationSetup::from_case(c);
    ExperimentOptions eo;
    eo.threads = o.threads;
    if (!o.quiet) eo.on_run_done = [&](int r) { std::cerr << "run " << r + 1 << "/" << runs << " done\n"; };
    const auto start = std::chrono::steady_clock::now();
    const ExperimentResult ex = run_experiment(setup, parse_schemes(schemes), runs, c.simulation.seed, eo);
    const fs::path dir = output_dir(o);
    write_with(dir / "runs.csv", [&](std::ostream& os) { csv::write_runs(os, ex); });
    write_with(dir / "comparison.csv", [&](std::ostream& os) { csv::write_comparison(os, ex); });
    Json m = base_metadata(c, "experiment");
    m["runs"] = runs;
    m["schemes"] = ex.schemes;
    m["summary"] = summary_json(ex);
    m["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_file(dir / "experiment.json", m.dump(2) + "\n");
    if (!o.quiet) {
        for (const auto& s : ex.summary)
            std::cout << s.scheme << ": mean cost " << s.mean_cost << ", +" << s.mean_increase_pct
                      << "% over prescient, " << s.aborted << " aborted\n";
    }
    return ok;
}

int cmd_sweep(const Common& o, std::vector<double> phis, std::vector<std::string> schemes, int runs) {
    const CaseFile c = prepare_case(o);
    if (phis.empty()) phis = c.simulation.phi;
    if (schemes.empty()) schemes = {"prescient", "diagonal", "full"};
    if (runs <= 0) runs = c.simulation.runs;
    const SimulationSetup setup = SimulationSetup::from_case(c);
    ExperimentOptions eo;
    eo.threads = o.threads;
    const auto start = std::chrono::steady_clock::now();
    const auto rows = sensitivity_sweep(c, phis, parse_schemes(schemes), runs, c.simulation.seed, setup, eo);
    const fs::path dir = output_dir(o);
    write_with(dir / "sweep.csv", [&](std::ostream& os) { csv::write_sweep(os, rows); });
    Json m = base_metadata(c, "sweep");
    m["runs"] = runs;
    m["phi"] = phis;
    m["schemes"] = schemes;
    m["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_file(dir / "sweep.json", m.dump(2) + "\n");
    if (!o.quiet) std::cout << rows.size() << " scaling factors written to " << (dir / "sweep.csv").string() << "\n";
    return ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Affine reserve policies under forecast uncertainty"};
    app.require_subcommand(1);
    Common o;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--case", o.case_path, "case file")->check(CLI::ExistingFile);
        sub->add_option("--out", o.out_dir, std::string("output directory (default $") + kOutputEnv + " or ./reserve_out)");
        sub->add_flag("--paper-scale", o.paper_scale, "50 runs, 288 steps, 20000 Monte-Carlo paths");
        sub->add_option("--horizon", o.horizon, "planning horizon T")->check(CLI::PositiveNumber);
        sub->add_option("--steps", o.steps, "simulated steps")->check(CLI::PositiveNumber);
        sub->add_option("--n-mc", o.n_mc, "Monte-Carlo paths per moment estimate")->check(CLI::Range(1000L, 100000000L));
        sub->add_option("--mode", o.mode, "receding | batchwise | shift");
        sub->add_option("--threads", o.threads, "worker threads for independent runs")->check(CLI::PositiveNumber);
        sub->add_option("--seed", o.seed, "base seed")->each([&](const std::string&) { o.seed_set = true; });
        sub->add_flag("-q,--quiet", o.quiet, "no progress output");
    };

    auto* validate_cmd = app.add_subcommand("validate", "load and check a case file");
    common(validate_cmd);

    std::string scheme = "full";
    bool dump = false;
    auto* solve_cmd = app.add_subcommand("solve-once", "solve one horizon and audit the policy");
    common(solve_cmd);
    solve_cmd->add_option("--scheme", scheme, "diagonal | banded(k) | full");
    solve_cmd->add_flag("--dump-qp", dump, "write the assembled program");

    auto* prices_cmd = app.add_subcommand("prices", "nodal and policy prices of one horizon");
    common(prices_cmd);
    prices_cmd->add_option("--scheme", scheme, "diagonal | banded(k) | full");

    int run = 0;
    auto* sim_cmd = app.add_subcommand("simulate", "closed-loop simulation of one scheme");
    common(sim_cmd);
    sim_cmd->add_option("--scheme", scheme, "prescient | diagonal | banded(k) | full");
    sim_cmd->add_option("--run", run, "run index (selects the realization)")->check(CLI::NonNegativeNumber);

    std::vector<std::string> schemes;
    int runs = 0;
    auto* exp_cmd = app.add_subcommand("experiment", "compare schemes over several runs");
    common(exp_cmd);
    exp_cmd->add_option("--schemes", schemes, "comma separated schemes")->delimiter(',');
    exp_cmd->add_option("--runs", runs, "number of runs")->check(CLI::PositiveNumber);

    std::vector<double> phis;
    auto* sweep_cmd = app.add_subcommand("sweep", "reserve cost against wind scaling");
    common(sweep_cmd);
    sweep_cmd->add_option("--phi", phis, "comma separated scaling factors")->delimiter(',');
    sweep_cmd->add_option("--schemes", schemes, "comma separated schemes")->delimiter(',');
    sweep_cmd->add_option("--runs", runs, "runs per scaling factor")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return usage;
    }

    try {
        if (*validate_cmd) return cmd_validate(o);
        if (*solve_cmd) return cmd_solve_once(o, scheme, dump);
        if (*prices_cmd) return cmd_prices(o, scheme);
        if (*sim_cmd) return cmd_simulate(o, scheme, run);
        if (*exp_cmd) return cmd_experiment(o, schemes, runs);
        if (*sweep_cmd) return cmd_sweep(o, phis, schemes, runs);
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return validation;
    } catch (const InfeasibleError& e) {
        std::cerr << "infeasible (" << e.label() << "): " << e.what() << "\n";
        return infeasible;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure (" << e.label() << "): " << e.what() << "\n";
        return numerical;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "file error: " << e.what() << "\n";
        return validation;
    }
    return usage;
}
