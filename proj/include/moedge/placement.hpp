// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "moedge/compression.hpp"
#include "moedge/costmodel.hpp"
#include "moedge/edgenet.hpp"
#include "moedge/model.hpp"

namespace moedge {

// One co-activation-coherent slice of the model: a set of experts per layer.
// Sub-models may overlap when the replication budget places extra copies.
struct SubModel {
    std::vector<std::set<int>> layers;  // [layer] -> expert indices
};

// Expert-to-server map. A (layer, expert) may appear on several servers
// (replicas); shared (non-expert) weights live on every server that hosts at
// least one expert.
struct Placement {
    std::map<int, std::set<ExpertRef>> assignment;  // server id -> hosted experts
    std::set<int> shared_hosts;

    // Sorted host ids per expert; empty if unplaced.
    const std::vector<int>& hosts(ExpertRef e) const;
    bool hosts_expert(int server, ExpertRef e) const;
    int total_slots() const;

    // Rebuild the expert -> hosts index after editing `assignment`. Also
    // refreshes shared_hosts to the set of non-empty servers.
    void rebuild_index(const MoEModelSpec& spec);

    // Every (layer, expert) hosted somewhere; throws StructuralError.
    void check_coverage(const MoEModelSpec& spec) const;
    // Quantized resident bytes (experts + shared copy) fit each server's
    // GPU + SSD capacity; throws InfeasibleError with the worst shortfall.
    void check_capacity(const MoEModelSpec& spec, const EdgeTopology& topology,
                        const QuantPolicy& quant) const;

    std::string to_json(const EdgeTopology& topology) const;
    static Placement from_json(const std::string& text, const MoEModelSpec& spec,
                               const EdgeTopology& topology);

private:
    std::vector<std::vector<int>> hosts_;  // [layer * E + expert] -> sorted server ids
    int experts_per_layer_ = 0;
};

struct PlacementObjective {
    double expected_latency_s = 0.0;        // per-token expected critical path
    double expected_cross_transitions = 0.0;  // per-token expected boundary crossings
    double alpha = 1.0;
    double beta = 0.0;

    double value() const {
        return alpha * expected_latency_s + beta * expected_cross_transitions;
    }
};

struct RouteConfig {
    double low_water_pct = 10.0;  // local copy wins unless compute fell below this
    double queue_clamp = 100.0;   // max queueing inflation at ~0% availability
};

struct PlanConfig {
    int num_submodels = 0;       // 0 = one per participating server
    int replication_budget = 0;  // extra expert slots spread across sub-models
    double alpha = 1.0;
    double beta = -1.0;  // < 0 = auto: mean activation transfer time across links
    int local_search_max_iters = 1000;
    RouteConfig route;
    int ingress_server = 0;  // where requests enter
    // Feasibility floor used while searching: capacity checks assume experts
    // can be narrowed to this width. plan_deployment sets 4 when
    // quantization is enabled; the final policy is verified afterwards.
    int capacity_floor_bits = 16;
};

// Mean full-precision activation transfer time over all links (0 if none);
// the default crossing weight beta.
double auto_beta(const MoEModelSpec& spec, const EdgeTopology& topology, const CostModel& cost);

// Split each layer's experts into `num_submodels` groups so that adjacent-
// layer transition mass stays inside a group. Greedy seed-and-grow, then
// spends `replication_budget` extra slots on the highest-mass duplicates,
// then swap-refines until no single-expert swap with a non-member improves a
// group's internal mass. Per-layer group size is capped at
// ceil(E / num_submodels) + 1.
std::vector<SubModel> segment_submodels(const CoActivationMatrix& coact, const MoEModelSpec& spec,
                                        int num_submodels, int replication_budget);

// Adjacent-layer transition mass kept inside one sub-model:
// sum over l of sum_{i in m[l], j in m[l+1]} marginal_l(i) * P_l(i, j).
double submodel_internal_mass(const SubModel& submodel, const CoActivationMatrix& coact);

// Pick the serving replica for one routed expert. Prefers the local copy
// while local available compute stays above the low-water mark; otherwise
// takes the host minimizing transfer + queue-inflated compute cost (ties:
// smallest server id).
int route_replica(ExpertRef e, const Placement& placement, int current_server,
                  const NeighborView& view, const EdgeTopology& topology,
                  const MoEModelSpec& spec, const QuantPolicy& quant, const CostModel& cost,
                  const RouteConfig& route);

// Expected per-token objective under the chain model: propagate the joint
// (expert, host) distribution layer by layer using the co-activation kernel
// and the routing rule, accumulating expected crossings and the expected
// compute + transfer time. Token position carry-over between consecutive
// tokens is solved to its fixpoint.
PlacementObjective expected_objective(const Placement& placement, const CoActivationMatrix& coact,
                                      const MoEModelSpec& spec, const EdgeTopology& topology,
                                      const NeighborView& view, const QuantPolicy& quant,
                                      const CostModel& cost, const PlanConfig& config);

// Greedy capacity-aware assignment of sub-models to servers followed by
// first-improvement local search (moves and swaps of single expert slots).
Placement place(const std::vector<SubModel>& submodels, const CoActivationMatrix& coact,
                const MoEModelSpec& spec, const EdgeTopology& topology, const NeighborView& view,
                const QuantPolicy& quant, const CostModel& cost, const PlanConfig& config);

// Exact minimizer by exhaustive enumeration of all server^(L*E) single-copy
// assignments. Guarded: throws ConfigError when the space exceeds
// `max_assignments` (default 1e7). Ties resolve to the lexicographically
// smallest assignment vector.
Placement brute_force_place(const CoActivationMatrix& coact, const MoEModelSpec& spec,
                            const EdgeTopology& topology, const NeighborView& view,
                            const QuantPolicy& quant, const CostModel& cost,
                            const PlanConfig& config, double max_assignments = 1e7);

struct DeploymentPlan {
    std::vector<SubModel> submodels;
    Placement placement;
    QuantPolicy quant;
    PlacementObjective objective;
    int replication_used = 0;
};

// End-to-end planning: segment, place, and quantize, trying every
// replication spend r in [0, replication_budget] and keeping the plan with
// the best objective (ties: smaller r). Bit-widths are assigned from the
// co-activation marginals against each server's GPU + SSD budget.
DeploymentPlan plan_deployment(const CoActivationMatrix& coact, const MoEModelSpec& spec,
                               const EdgeTopology& topology, const NeighborView& view,
                               const CostModel& cost, const PlanConfig& config,
                               bool quantize_enabled, int shared_bits);

}  // namespace moedge
