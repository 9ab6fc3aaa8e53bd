// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "moedge/paging.hpp"
#include "moedge/placement.hpp"
#include "moedge/scenario.hpp"

namespace moedge {

// Per-token (or per-request) latency split. Components are measured along
// the critical path, so they sum to the elapsed time exactly.
struct LatencyBreakdown {
    double compute_s = 0.0;
    double stall_s = 0.0;     // waiting for expert weights to page in
    double transfer_s = 0.0;  // on-the-wire time (LAN and intra-server bus)
    double queue_s = 0.0;     // waiting for a busy link, bus, or GPU

    double total() const { return compute_s + stall_s + transfer_s + queue_s; }
};

struct RequestRecord {
    int request = 0;
    double arrival_s = 0.0;
    double completion_s = 0.0;
    double latency_s = 0.0;
    int input_len = 0;
    int output_len = 0;
};

struct SimReport {
    std::uint64_t seed = 0;
    int input_len = 0;
    int output_len = 0;
    int num_requests = 0;
    double makespan_s = 0.0;
    std::uint64_t total_output_tokens = 0;
    double avg_generation_throughput_tps = 0.0;  // output tokens / makespan
    double avg_request_latency_s = 0.0;
    double p95_request_latency_s = 0.0;
    double avg_token_latency_s = 0.0;  // decode tokens only

    std::uint64_t cross_server_transfers = 0;  // expert-boundary crossings within a token
    double cross_server_bytes = 0.0;
    std::uint64_t token_handoff_transfers = 0;  // position carry between tokens / into layer 0
    double token_handoff_bytes = 0.0;

    std::uint64_t hello_messages = 0;  // per-link deliveries
    std::uint64_t hello_bytes = 0;
    // Model-requirement advertisements: 64 bytes per hosting server per
    // deployment epoch, accounted separately so hello_bytes stays exactly
    // 12 bytes x hello_messages.
    std::uint64_t deployment_advert_bytes = 0;
    std::uint64_t events_processed = 0;

    LatencyBreakdown decode_breakdown;       // summed over decode-token critical paths
    double max_decomposition_error_s = 0.0;  // worst |token time - component sum|
    double total_expert_compute_s = 0.0;     // all expert executions, every branch

    std::uint64_t cache_hits = 0;
    std::uint64_t cache_misses = 0;
    std::uint64_t cache_prefetch_hits = 0;
    double cache_hit_rate = 0.0;
    double mean_stall_s = 0.0;
    double p95_stall_s = 0.0;
    std::uint64_t cache_bytes_loaded = 0;

    PenaltyLedger penalties;
    double quality = 1.0;  // quality_score(penalties)
    std::uint64_t fusion_volume_saved_bytes = 0;
    std::uint64_t prune_volume_saved_bytes = 0;
    int merged_tokens = 0;
    int pruned_tokens = 0;

    int replan_checks = 0;
    int replan_count = 0;
    int replan_failures = 0;
    double migration_bytes = 0.0;
    std::map<std::string, std::uint64_t> peak_resident_bytes;  // per server, GPU tier

    double expected_objective_value = 0.0;  // planner's prediction, for reference

    std::vector<RequestRecord> requests;
    std::vector<std::uint64_t> tokens_per_second;
};

// True when the observed popularity or resource state drifted far enough
// from the planning-time baseline to justify replanning.
struct ReplanSignal {
    bool popularity_shift = false;
    bool resource_shift = false;
    double popularity_tv = 0.0;          // mean per-layer total variation
    double max_resource_delta_pct = 0.0;

    bool triggered() const { return popularity_shift || resource_shift; }
};

ReplanSignal check_replan(const std::vector<std::vector<double>>& baseline_popularity,
                          const std::vector<std::vector<double>>& current_popularity,
                          const std::map<int, ResourceStatus>& baseline_resources,
                          const std::map<int, ResourceStatus>& current_resources,
                          const ReplanTriggerConfig& config);

// Where to fetch a higher-precision copy of an expert. Narrow copies cannot
// be widened locally, so the source is either a peer currently holding the
// expert at >= target_bits (reachable over a direct link) or the cloud's
// full-precision master; the cheapest transfer wins, peers break ties.
struct UpgradeSource {
    int server = -1;  // -1 = cloud
    bool from_cloud = false;
    double transfer_s = 0.0;
    std::uint64_t bytes = 0;
};

UpgradeSource precision_upgrade(ExpertRef e, int target_bits, int requester,
                                const std::map<int, int>& holder_bits,
                                const EdgeTopology& topology, const MoEModelSpec& spec);
UpgradeSource precision_upgrade(ExpertRef e, int target_bits, int requester,
                                const Placement& placement, const QuantPolicy& quant,
                                const EdgeTopology& topology, const MoEModelSpec& spec);

// A planned deployment ready to execute: the scenario plus the initial
// placement, bit-width policy, and the co-activation estimate used both for
// prefetch prediction and for replanning comparisons.
struct SimInputs {
    Scenario scenario;
    Placement placement;
    QuantPolicy quant;
    CoActivationMatrix coact;
    double expected_objective_value = 0.0;
};

// Deterministic discrete-event simulation of one (input_len, output_len)
// bucket. Identical inputs produce an identical report.
SimReport simulate(const SimInputs& in, int input_len, int output_len, std::uint64_t seed);

}  // namespace moedge
