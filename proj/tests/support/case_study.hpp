#pragma once

// The shipped 39-bus case at the first step of run 0, ready to assemble.

#include "affine_reserve/case_file.hpp"
#include "affine_reserve/robust_builder.hpp"
#include "affine_reserve/sim_harness.hpp"

namespace affine_reserve::testing {

struct CaseHorizon {
    CaseFile case_data;
    SimulationSetup setup;
    std::vector<Participant> parts;
    FlowMap flows;
    UncertaintyPolytope delta;
    MomentEstimate moments;
};

/// `edit` may change the case before the horizon is built.
template <class Edit>
CaseHorizon edited_case_horizon(Edit&& edit, long n_mc = 20000) {
    CaseHorizon h;
    h.case_data = load_case(default_case_path());
    edit(h.case_data);
    h.case_data.uncertainty.n_mc = n_mc;
    h.setup = SimulationSetup::from_case(h.case_data);
    const Rng run_rng = Rng(h.case_data.simulation.seed).substream(0);
    h.moments = step_moments(h.setup, run_rng, 0, h.setup.q0);
    h.parts = horizon_participants(h.case_data, 0, h.setup.horizon, initial_states(h.case_data), h.moments.mean_q,
                                   false);
    h.flows = build_flow_maps(h.case_data.grid, h.parts, h.setup.horizon);
    h.delta = build_uncertainty_polytope(h.setup.q0, h.setup.model, h.moments.mean_q, h.setup.horizon);
    return h;
}

inline CaseHorizon case_study_horizon(long n_mc = 20000) {
    return edited_case_horizon([](CaseFile&) {}, n_mc);
}

}  // namespace affine_reserve::testing
