// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "moedge/compression.hpp"
#include "moedge/costmodel.hpp"
#include "moedge/edgenet.hpp"
#include "moedge/model.hpp"
#include "moedge/placement.hpp"

namespace moedge {

struct PagingConfig {
    int prefetch_depth = 2;
    double ewma_lambda = 0.98;
    double blend_gamma = 0.5;
    int prefetch_per_layer = 8;
    // Demand-load reserve, in units of the largest placed expert.
    // 0 = auto (top_k + 1).
    int headroom_experts = 0;
    // Re-verify every cache's byte accounting after each cache event
    // (O(resident) per event; meant for instrumented invariant runs).
    bool verify_every_event = false;

    void validate() const {
        if (prefetch_depth < 0) throw ConfigError("paging: prefetch_depth must be >= 0");
        if (ewma_lambda <= 0.0 || ewma_lambda >= 1.0)
            throw ConfigError("paging: ewma_lambda must be in (0, 1)");
        if (blend_gamma < 0.0 || blend_gamma > 1.0)
            throw ConfigError("paging: blend_gamma must be in [0, 1]");
        if (prefetch_per_layer < 0) throw ConfigError("paging: prefetch_per_layer must be >= 0");
        if (headroom_experts < 0) throw ConfigError("paging: headroom_experts must be >= 0");
    }
};

struct PerceptionConfig {
    double hello_period_s = 2.0;
    double threshold_pct = 5.0;

    void validate() const {
        if (hello_period_s <= 0.0) throw ConfigError("perception: hello_period_s must be > 0");
        if (threshold_pct < 0.0 || threshold_pct > 100.0)
            throw ConfigError("perception: threshold_pct must be in [0, 100]");
    }
};

struct ReplanTriggerConfig {
    bool enabled = false;
    double check_period_s = 5.0;
    double popularity_tv_threshold = 0.3;  // mean per-layer total variation
    double resource_threshold_pct = 20.0;

    void validate() const {
        if (check_period_s <= 0.0) throw ConfigError("replanning: check_period_s must be > 0");
        if (popularity_tv_threshold <= 0.0 || popularity_tv_threshold > 1.0)
            throw ConfigError("replanning: popularity_tv_threshold must be in (0, 1]");
        if (resource_threshold_pct < 0.0 || resource_threshold_pct > 100.0)
            throw ConfigError("replanning: resource_threshold_pct must be in [0, 100]");
    }
};

struct QuantizeConfig {
    bool enabled = false;
    int shared_bits = 16;

    void validate() const {
        if (shared_bits != 4 && shared_bits != 8 && shared_bits != 16)
            throw ConfigError("quantization: shared_bits must be 4, 8, or 16");
    }
};

// Scripted ground-truth resource change on one server.
struct ResourceEvent {
    double time_s = 0.0;
    int server = 0;
    int avail_compute_pct = 100;
    int avail_gpu_mem_pct = 100;
};

struct SweepPoint {
    int input_len = 0;
    int output_len = 0;
};

// A fully resolved run description: model geometry, synthetic workload,
// hardware, and every subsystem's knobs. Parsed strictly from JSON
// (schema_version 1): unknown keys and type mismatches are ConfigErrors that
// name the offending path.
struct Scenario {
    int schema_version = 1;
    std::string name;
    std::uint64_t seed = 0;
    MoEModelSpec model;
    WorkloadParams workload;
    double arrival_spacing_s = 0.0;
    std::vector<SweepPoint> sweep;  // empty = single bucket from `workload`
    std::string origin_server;
    EdgeTopology topology;
    PlanConfig placement;  // ingress_server resolved from origin_server
    // Fixed-deployment mode: load these files instead of running the
    // planner. Empty = plan. quant_file without placement_file is invalid.
    std::string placement_file;
    std::string quant_file;
    std::string output_dir = "out";  // default for run/plan/trace artifacts
    QuantizeConfig quantization;
    PagingConfig paging;
    FusionConfig fusion;
    PruneConfig pruning;
    PerceptionConfig perception;
    ReplanTriggerConfig replanning;
    CostModel cost;
    std::vector<ResourceEvent> resource_events;

    int ingress_id() const { return placement.ingress_server; }
    std::vector<SweepPoint> buckets() const;
    int cache_headroom() const {
        return paging.headroom_experts > 0 ? paging.headroom_experts : model.top_k + 1;
    }

    void validate() const;
    std::string to_json() const;
    static Scenario from_json(const std::string& text);
    static Scenario load_file(const std::string& path);
};

}  // namespace moedge
