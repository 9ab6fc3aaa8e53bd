// SPDX-License-Identifier: Apache-2.0
#include "moedge/pipeline.hpp"

#include <fstream>
#include <sstream>

namespace moedge {

namespace {

std::string slurp(const std::string& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw ConfigError(std::string(what) + ": cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

}  // namespace

NeighborView full_availability_view(const EdgeTopology& topology) {
    NeighborView view;
    for (const ServerSpec& s : topology.servers)
        view.observe(HelloMessage{static_cast<std::uint32_t>(s.id), 1, ResourceStatus{}});
    return view;
}

PreparedScenario prepare_scenario(const Scenario& scenario, std::uint64_t seed) {
    scenario.validate();
    PreparedScenario out;
    out.planning_trace = generate_trace(scenario.model, scenario.workload, seed);
    out.coact = estimate_coactivation(out.planning_trace, scenario.model);

    if (!scenario.placement_file.empty()) {
        out.plan.placement = Placement::from_json(
            slurp(scenario.placement_file, "placement"), scenario.model, scenario.topology);
        if (!scenario.quant_file.empty())
            out.plan.quant = quant_from_json(slurp(scenario.quant_file, "quant"), scenario.model);
        out.plan.quant.shared_bits = scenario.quantization.shared_bits;
        out.plan.placement.check_coverage(scenario.model);
        out.plan.placement.check_capacity(scenario.model, scenario.topology, out.plan.quant);
        out.plan.objective = expected_objective(
            out.plan.placement, out.coact, scenario.model, scenario.topology,
            full_availability_view(scenario.topology), out.plan.quant, scenario.cost,
            scenario.placement);
        return out;
    }

    out.plan = plan_deployment(out.coact, scenario.model, scenario.topology,
                               full_availability_view(scenario.topology), scenario.cost,
                               scenario.placement, scenario.quantization.enabled,
                               scenario.quantization.shared_bits);
    return out;
}

RunReport run_scenario(const Scenario& scenario, std::uint64_t seed) {
    const PreparedScenario prepared = prepare_scenario(scenario, seed);
    RunReport report;
    report.scenario_name = scenario.name;
    report.seed = seed;
    SimInputs inputs{scenario, prepared.plan.placement, prepared.plan.quant, prepared.coact,
                     prepared.plan.objective.value()};
    for (const SweepPoint& bucket : scenario.buckets())
        report.buckets.push_back(simulate(inputs, bucket.input_len, bucket.output_len, seed));
    return report;
}

}  // namespace moedge
