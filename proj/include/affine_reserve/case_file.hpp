#pragma once

// Case documents: network, participants, load profile, uncertainty,
// simulation and solver settings in one JSON file. Node numbers are 1-based
// in the file and 0-based in memory.

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "affine_reserve/errors.hpp"
#include "affine_reserve/horizon_model.hpp"
#include "affine_reserve/network.hpp"
#include "affine_reserve/qp_core.hpp"
#include "affine_reserve/uncertainty.hpp"

namespace affine_reserve {

using Json = nlohmann::ordered_json;

enum class ParticipantType { thermal_generator, storage, wind, load };

inline const char* to_string(ParticipantType t) {
    switch (t) {
        case ParticipantType::thermal_generator: return "thermal_generator";
        case ParticipantType::storage: return "storage";
        case ParticipantType::wind: return "wind";
        case ParticipantType::load: return "load";
    }
    return "unknown";
}

struct ParticipantSpec {
    std::string id;
    ParticipantType type = ParticipantType::load;
    int node = 0;  // 0-based
    ThermalGeneratorSpec generator;
    StorageSpec storage;  // tau comes from the simulation section
    RowVectorXd wind_map;  // 1 x N_delta
    double p_nom = 0.0;    // load peak, MW
};

struct UncertaintySection {
    ProcessModel model;
    VectorXd q0;
    long n_mc = 20000;
};

struct SimulationSection {
    int horizon = 8;
    double tau = 0.25;
    int steps = 96;
    int runs = 10;
    std::uint64_t seed = 42;
    std::vector<std::string> schemes{"prescient", "diagonal", "banded(2)", "full"};
    std::vector<double> phi{0.2, 0.4, 0.6, 0.8, 1.0, 1.2};
    std::string mode = "receding";
};

struct SolverSection {
    std::string engine = "interior_point";
    double tolerance = 1e-9;
    int max_iter = 200;
    double regularization = 1e-9;
    double policy_regularization = 1e-8;

    QpSettings settings() const {
        QpSettings s;
        s.tolerance = tolerance;
        s.max_iter = max_iter;
        s.regularization = regularization;
        return s;
    }
};

struct CaseFile {
    std::string name;
    Grid grid;
    std::vector<double> reactance;  // per line, as given
    std::vector<ParticipantSpec> participants;
    VectorXd load_profile;  // per step, peak-normalized; repeats cyclically
    UncertaintySection uncertainty;
    SimulationSection simulation;
    SolverSection solver;

    Index n_delta() const { return uncertainty.model.dim(); }

    /// Load multiplier at absolute step t (profile repeats).
    double load_factor(long t) const {
        const long n = static_cast<long>(load_profile.size());
        return load_profile(((t % n) + n) % n);
    }
};

namespace detail {

inline void check_keys(const Json& obj, const std::set<std::string>& allowed, const std::string& path) {
    if (!obj.is_object()) throw ValidationError("expected an object", path);
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key())) throw ValidationError("unknown key '" + it.key() + "'", path);
}

inline const Json& require(const Json& obj, const std::string& key, const std::string& path) {
    if (!obj.contains(key)) throw ValidationError("missing required key", path + "." + key);
    return obj.at(key);
}

inline double get_number(const Json& obj, const std::string& key, const std::string& path) {
    const Json& v = require(obj, key, path);
    if (!v.is_number()) throw ValidationError("expected a number", path + "." + key);
    return v.get<double>();
}

inline double get_number_or(const Json& obj, const std::string& key, const std::string& path, double fallback) {
    return obj.contains(key) ? get_number(obj, key, path) : fallback;
}

inline long get_integer(const Json& obj, const std::string& key, const std::string& path) {
    const Json& v = require(obj, key, path);
    if (!v.is_number_integer()) throw ValidationError("expected an integer", path + "." + key);
    return v.get<long>();
}

inline std::string get_string(const Json& obj, const std::string& key, const std::string& path) {
    const Json& v = require(obj, key, path);
    if (!v.is_string()) throw ValidationError("expected a string", path + "." + key);
    return v.get<std::string>();
}

inline VectorXd get_vector(const Json& v, const std::string& path) {
    if (!v.is_array()) throw ValidationError("expected an array of numbers", path);
    VectorXd out(static_cast<Index>(v.size()));
    for (std::size_t k = 0; k < v.size(); ++k) {
        if (!v[k].is_number()) throw ValidationError("expected a number", path + "[" + std::to_string(k) + "]");
        out(static_cast<Index>(k)) = v[k].get<double>();
    }
    return out;
}

inline MatrixXd get_matrix(const Json& v, const std::string& path) {
    if (!v.is_array() || v.empty()) throw ValidationError("expected a non-empty array of rows", path);
    const Index rows = static_cast<Index>(v.size());
    Index cols = -1;
    MatrixXd out;
    for (Index r = 0; r < rows; ++r) {
        const VectorXd row = get_vector(v[r], path + "[" + std::to_string(r) + "]");
        if (cols < 0) {
            cols = row.size();
            out.resize(rows, cols);
        }
        if (row.size() != cols) throw ValidationError("ragged matrix", path + "[" + std::to_string(r) + "]");
        out.row(r) = row.transpose();
    }
    return out;
}

inline Json to_json(const VectorXd& v) {
    Json a = Json::array();
    for (Index k = 0; k < v.size(); ++k) a.push_back(v(k));
    return a;
}

inline Json to_json(const MatrixXd& m) {
    Json a = Json::array();
    for (Index r = 0; r < m.rows(); ++r) a.push_back(to_json(VectorXd(m.row(r).transpose())));
    return a;
}

/// Line and column (1-based) of a byte offset.
inline std::pair<std::size_t, std::size_t> line_column(const std::string& text, std::size_t byte) {
    std::size_t line = 1, col = 1;
    for (std::size_t k = 0; k < byte && k < text.size(); ++k) {
        if (text[k] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return {line, col};
}

inline int get_node(const Json& obj, const std::string& key, const std::string& path, int n_nodes) {
    const long node = get_integer(obj, key, path);
    if (node < 1 || node > n_nodes)
        throw ValidationError("node " + std::to_string(node) + " does not exist", path + "." + key);
    return static_cast<int>(node - 1);
}

}  // namespace detail

/// Parses and validates a case document.
inline CaseFile parse_case(const std::string& text) {
    using namespace detail;
    Json doc;
    try {
        doc = Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        const auto [line, col] = line_column(text, e.byte == 0 ? 0 : e.byte - 1);
        throw ValidationError("parse error at line " + std::to_string(line) + ", column " + std::to_string(col) +
                                  ": " + e.what(),
                              "");
    }
    check_keys(doc, {"name", "network", "participants", "load_profile", "uncertainty", "simulation", "solver"}, "$");

    CaseFile c;
    c.name = doc.contains("name") ? get_string(doc, "name", "$") : "case";

    // network
    const Json& net = require(doc, "network", "$");
    check_keys(net, {"n_nodes", "slack", "lines"}, "network");
    c.grid.n_nodes = static_cast<int>(get_integer(net, "n_nodes", "network"));
    if (c.grid.n_nodes < 1) throw ValidationError("must be positive", "network.n_nodes");
    c.grid.slack = get_node(net, "slack", "network", c.grid.n_nodes);
    const Json& lines = require(net, "lines", "network");
    if (!lines.is_array() || lines.empty()) throw ValidationError("expected a non-empty array", "network.lines");
    for (std::size_t k = 0; k < lines.size(); ++k) {
        const std::string path = "network.lines[" + std::to_string(k) + "]";
        check_keys(lines[k], {"from", "to", "reactance", "limit_mw"}, path);
        Line l;
        l.from = get_node(lines[k], "from", path, c.grid.n_nodes);
        l.to = get_node(lines[k], "to", path, c.grid.n_nodes);
        if (l.from == l.to) throw ValidationError("line endpoints must differ", path);
        const double x = get_number(lines[k], "reactance", path);
        if (!(x > 0.0)) throw ValidationError("reactance must be positive", path + ".reactance");
        l.susceptance = 1.0 / x;
        if (lines[k].contains("limit_mw") && !lines[k]["limit_mw"].is_null()) {
            l.limit = get_number(lines[k], "limit_mw", path);
            if (!(l.limit > 0.0)) throw ValidationError("limit must be positive", path + ".limit_mw");
        }
        c.grid.lines.push_back(l);
        c.reactance.push_back(x);
    }
    validate(c.grid);

    // uncertainty
    const Json& unc = require(doc, "uncertainty", "$");
    check_keys(unc, {"sigma", "a_beta", "b_beta", "q_min", "q_max", "q0", "n_mc"}, "uncertainty");
    auto& m = c.uncertainty.model;
    m.sigma = get_matrix(require(unc, "sigma", "uncertainty"), "uncertainty.sigma");
    m.A_beta = get_matrix(require(unc, "a_beta", "uncertainty"), "uncertainty.a_beta");
    m.b_beta = get_vector(require(unc, "b_beta", "uncertainty"), "uncertainty.b_beta");
    m.q_min = get_vector(require(unc, "q_min", "uncertainty"), "uncertainty.q_min");
    m.q_max = get_vector(require(unc, "q_max", "uncertainty"), "uncertainty.q_max");
    c.uncertainty.q0 = get_vector(require(unc, "q0", "uncertainty"), "uncertainty.q0");
    c.uncertainty.n_mc = unc.contains("n_mc") ? get_integer(unc, "n_mc", "uncertainty") : 20000;
    validate(m);
    if (c.uncertainty.q0.size() != m.dim()) throw ValidationError("length must equal the driver dimension", "uncertainty.q0");
    for (Index k = 0; k < m.dim(); ++k)
        if (c.uncertainty.q0(k) < m.q_min(k) || c.uncertainty.q0(k) > m.q_max(k))
            throw ValidationError("q0 outside [q_min, q_max]", "uncertainty.q0");
    if (c.uncertainty.n_mc < 1000) throw ValidationError("at least 1000 paths are required", "uncertainty.n_mc");

    // simulation
    if (doc.contains("simulation")) {
        const Json& sim = doc.at("simulation");
        check_keys(sim, {"horizon", "tau", "steps", "runs", "seed", "schemes", "phi", "mode"}, "simulation");
        auto& s = c.simulation;
        if (sim.contains("horizon")) s.horizon = static_cast<int>(get_integer(sim, "horizon", "simulation"));
        if (sim.contains("tau")) s.tau = get_number(sim, "tau", "simulation");
        if (sim.contains("steps")) s.steps = static_cast<int>(get_integer(sim, "steps", "simulation"));
        if (sim.contains("runs")) s.runs = static_cast<int>(get_integer(sim, "runs", "simulation"));
        if (sim.contains("seed")) {
            const long seed = get_integer(sim, "seed", "simulation");
            if (seed < 0) throw ValidationError("must be nonnegative", "simulation.seed");
            s.seed = static_cast<std::uint64_t>(seed);
        }
        if (sim.contains("schemes")) {
            const Json& a = sim.at("schemes");
            if (!a.is_array()) throw ValidationError("expected an array of strings", "simulation.schemes");
            s.schemes.clear();
            for (std::size_t k = 0; k < a.size(); ++k) {
                if (!a[k].is_string())
                    throw ValidationError("expected a string", "simulation.schemes[" + std::to_string(k) + "]");
                s.schemes.push_back(a[k].get<std::string>());
            }
        }
        if (sim.contains("phi")) {
            const VectorXd v = get_vector(sim.at("phi"), "simulation.phi");
            s.phi.assign(v.data(), v.data() + v.size());
        }
        if (sim.contains("mode")) s.mode = get_string(sim, "mode", "simulation");
    }
    {
        const auto& s = c.simulation;
        if (s.horizon < 1) throw ValidationError("must be at least 1", "simulation.horizon");
        if (!(s.tau > 0.0)) throw ValidationError("must be positive", "simulation.tau");
        if (s.steps < s.horizon) throw ValidationError("must be at least the horizon", "simulation.steps");
        if (s.runs < 1) throw ValidationError("must be at least 1", "simulation.runs");
        for (double p : s.phi)
            if (!(p > 0.0)) throw ValidationError("scaling factors must be positive", "simulation.phi");
        if (s.mode != "receding" && s.mode != "batchwise" && s.mode != "shift")
            throw ValidationError("mode must be receding, batchwise or shift", "simulation.mode");
    }

    // solver
    if (doc.contains("solver")) {
        const Json& sol = doc.at("solver");
        check_keys(sol, {"engine", "tolerance", "max_iter", "regularization", "policy_regularization"}, "solver");
        auto& s = c.solver;
        if (sol.contains("engine")) s.engine = get_string(sol, "engine", "solver");
        if (s.engine != "interior_point") throw ValidationError("unknown engine '" + s.engine + "'", "solver.engine");
        s.tolerance = get_number_or(sol, "tolerance", "solver", s.tolerance);
        if (sol.contains("max_iter")) s.max_iter = static_cast<int>(get_integer(sol, "max_iter", "solver"));
        s.regularization = get_number_or(sol, "regularization", "solver", s.regularization);
        s.policy_regularization = get_number_or(sol, "policy_regularization", "solver", s.policy_regularization);
        if (!(s.tolerance > 0.0)) throw ValidationError("must be positive", "solver.tolerance");
        if (s.max_iter < 1) throw ValidationError("must be positive", "solver.max_iter");
        if (s.regularization < 0.0) throw ValidationError("must be nonnegative", "solver.regularization");
        if (s.policy_regularization < 0.0) throw ValidationError("must be nonnegative", "solver.policy_regularization");
    }

    // load profile
    c.load_profile = get_vector(require(doc, "load_profile", "$"), "load_profile");
    if (c.load_profile.size() < 1) throw ValidationError("must not be empty", "load_profile");
    if ((c.load_profile.array() < 0.0).any()) throw ValidationError("entries must be nonnegative", "load_profile");

    // participants
    const Json& parts = require(doc, "participants", "$");
    if (!parts.is_array() || parts.empty()) throw ValidationError("expected a non-empty array", "participants");
    std::set<std::string> ids;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const std::string path = "participants[" + std::to_string(k) + "]";
        const Json& pj = parts[k];
        check_keys(pj, {"id", "type", "node", "params"}, path);
        ParticipantSpec p;
        p.id = get_string(pj, "id", path);
        if (!ids.insert(p.id).second) throw ValidationError("duplicate participant id '" + p.id + "'", path + ".id");
        p.node = get_node(pj, "node", path, c.grid.n_nodes);
        const std::string type = get_string(pj, "type", path);
        const Json& params = require(pj, "params", path);
        const std::string pp = path + ".params";
        if (type == "thermal_generator") {
            p.type = ParticipantType::thermal_generator;
            check_keys(params, {"f_u", "h_u", "alpha", "p_max", "p_0"}, pp);
            auto& g = p.generator;
            g.f_u = get_number(params, "f_u", pp);
            g.H_u = get_number(params, "h_u", pp);
            g.alpha = get_number(params, "alpha", pp);
            g.p_max = get_number(params, "p_max", pp);
            g.p_0 = get_number(params, "p_0", pp);
            if (g.H_u < 0.0) throw ValidationError("must be nonnegative", pp + ".h_u");
            if (g.alpha < 0.0) throw ValidationError("must be nonnegative", pp + ".alpha");
            if (!(g.p_max > 0.0)) throw ValidationError("must be positive", pp + ".p_max");
            if (g.p_0 < 0.0 || g.p_0 > g.p_max) throw ValidationError("must lie in [0, p_max]", pp + ".p_0");
        } else if (type == "storage") {
            p.type = ParticipantType::storage;
            check_keys(params, {"s_max", "gamma", "p_max", "s_0"}, pp);
            auto& s = p.storage;
            s.s_max = get_number(params, "s_max", pp);
            s.gamma = get_number(params, "gamma", pp);
            s.p_max = get_number(params, "p_max", pp);
            s.s_0 = get_number(params, "s_0", pp);
            s.tau = c.simulation.tau;
            if (!(s.s_max > 0.0)) throw ValidationError("must be positive", pp + ".s_max");
            if (s.gamma < 0.0) throw ValidationError("must be nonnegative", pp + ".gamma");
            if (!(s.p_max > 0.0)) throw ValidationError("must be positive", pp + ".p_max");
            if (s.s_0 < 0.0 || s.s_0 > s.s_max) throw ValidationError("must lie in [0, s_max]", pp + ".s_0");
        } else if (type == "wind") {
            p.type = ParticipantType::wind;
            check_keys(params, {"g"}, pp);
            const VectorXd g = get_vector(require(params, "g", pp), pp + ".g");
            if (g.size() != c.n_delta()) throw ValidationError("length must equal the driver dimension", pp + ".g");
            p.wind_map = g.transpose();
        } else if (type == "load") {
            p.type = ParticipantType::load;
            check_keys(params, {"p_nom"}, pp);
            p.p_nom = get_number(params, "p_nom", pp);
            if (p.p_nom < 0.0) throw ValidationError("must be nonnegative", pp + ".p_nom");
        } else {
            throw ValidationError("unknown participant type '" + type + "'", path + ".type");
        }
        c.participants.push_back(std::move(p));
    }
    return c;
}

inline CaseFile load_case(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open case file '" + path + "'", "path");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_case(ss.str());
}

/// Canonical document: fixed key order, every optional key written out.
inline Json case_to_json(const CaseFile& c) {
    using detail::to_json;
    Json doc;
    doc["name"] = c.name;
    Json net;
    net["n_nodes"] = c.grid.n_nodes;
    net["slack"] = c.grid.slack + 1;
    Json lines = Json::array();
    for (std::size_t k = 0; k < c.grid.lines.size(); ++k) {
        const auto& l = c.grid.lines[k];
        Json lj;
        lj["from"] = l.from + 1;
        lj["to"] = l.to + 1;
        lj["reactance"] = c.reactance[k];
        if (l.limited()) lj["limit_mw"] = l.limit;
        else lj["limit_mw"] = nullptr;
        lines.push_back(lj);
    }
    net["lines"] = lines;
    doc["network"] = net;

    Json parts = Json::array();
    for (const auto& p : c.participants) {
        Json pj;
        pj["id"] = p.id;
        pj["type"] = to_string(p.type);
        pj["node"] = p.node + 1;
        Json params;
        switch (p.type) {
            case ParticipantType::thermal_generator:
                params["f_u"] = p.generator.f_u;
                params["h_u"] = p.generator.H_u;
                params["alpha"] = p.generator.alpha;
                params["p_max"] = p.generator.p_max;
                params["p_0"] = p.generator.p_0;
                break;
            case ParticipantType::storage:
                params["s_max"] = p.storage.s_max;
                params["gamma"] = p.storage.gamma;
                params["p_max"] = p.storage.p_max;
                params["s_0"] = p.storage.s_0;
                break;
            case ParticipantType::wind: params["g"] = to_json(VectorXd(p.wind_map.transpose())); break;
            case ParticipantType::load: params["p_nom"] = p.p_nom; break;
        }
        pj["params"] = params;
        parts.push_back(pj);
    }
    doc["participants"] = parts;
    doc["load_profile"] = to_json(c.load_profile);

    const auto& m = c.uncertainty.model;
    Json unc;
    unc["sigma"] = to_json(m.sigma);
    unc["a_beta"] = to_json(m.A_beta);
    unc["b_beta"] = to_json(m.b_beta);
    unc["q_min"] = to_json(m.q_min);
    unc["q_max"] = to_json(m.q_max);
    unc["q0"] = to_json(c.uncertainty.q0);
    unc["n_mc"] = c.uncertainty.n_mc;
    doc["uncertainty"] = unc;

    const auto& s = c.simulation;
    Json sim;
    sim["horizon"] = s.horizon;
    sim["tau"] = s.tau;
    sim["steps"] = s.steps;
    sim["runs"] = s.runs;
    sim["seed"] = s.seed;
    sim["schemes"] = s.schemes;
    sim["phi"] = s.phi;
    sim["mode"] = s.mode;
    doc["simulation"] = sim;

    Json sol;
    sol["engine"] = c.solver.engine;
    sol["tolerance"] = c.solver.tolerance;
    sol["max_iter"] = c.solver.max_iter;
    sol["regularization"] = c.solver.regularization;
    sol["policy_regularization"] = c.solver.policy_regularization;
    doc["solver"] = sol;
    return doc;
}

inline std::string serialize_case(const CaseFile& c) { return case_to_json(c).dump(2) + "\n"; }

/// FNV-1a hash of the canonical serialization, as 16 hex digits.
inline std::string case_hash(const CaseFile& c) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : serialize_case(c)) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

/// Default location of the bundled 39-bus case.
inline std::string default_case_path() {
#ifdef AFFINE_RESERVE_DATA_DIR
    return std::string(AFFINE_RESERVE_DATA_DIR) + "/case39.json";
#else
    return "data/case39.json";
#endif
}

}  // namespace affine_reserve
