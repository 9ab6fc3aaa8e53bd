// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "moedge/placement.hpp"
#include "moedge/report.hpp"
#include "moedge/scenario.hpp"
#include "moedge/simcore.hpp"

namespace moedge {

// Everything the simulator needs that the planner produces: the profiling
// trace, its co-activation estimate, and the chosen deployment.
struct PreparedScenario {
    RoutingTrace planning_trace;
    CoActivationMatrix coact;
    DeploymentPlan plan;
};

// Profile a planning trace (scenario workload + seed), estimate
// co-activation, and either run the deployment planner or load the fixed
// placement/quant files named by the scenario.
PreparedScenario prepare_scenario(const Scenario& scenario, std::uint64_t seed);

// prepare_scenario + simulate every bucket of the sweep with the same seed.
RunReport run_scenario(const Scenario& scenario, std::uint64_t seed);

// A NeighborView that believes every server is fully available; the
// planning-time default when no hello traffic has been observed yet.
NeighborView full_availability_view(const EdgeTopology& topology);

}  // namespace moedge
