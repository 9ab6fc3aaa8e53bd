// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include "moedge/model.hpp"

namespace moedge {

// Per-expert bit-width assignment. Resident size of an expert at b bits is
// expert_param_bytes * b / 16; 16 bits is full precision.
struct QuantPolicy {
    std::map<ExpertRef, int> bits;  // values in {4, 8, 16}
    int shared_bits = 16;
    // Unitless penalty charged per expert-token activation at each width.
    std::map<int, double> quality_penalty_table = {{16, 0.0}, {8, 0.001}, {4, 0.005}};

    int bits_for(const ExpertRef& e) const {
        auto it = bits.find(e);
        return it == bits.end() ? 16 : it->second;
    }

    std::uint64_t expert_resident_bytes(const ExpertRef& e, const MoEModelSpec& spec) const {
        return spec.expert_param_bytes * static_cast<std::uint64_t>(bits_for(e)) / 16;
    }

    std::uint64_t shared_resident_bytes(const MoEModelSpec& spec) const {
        return spec.shared_param_bytes * static_cast<std::uint64_t>(shared_bits) / 16;
    }

    static QuantPolicy uniform(const MoEModelSpec& spec, int bits_everywhere);
};

struct FusionConfig {
    bool enabled = false;
    double cosine_threshold = 0.9;  // tau, <= 1
    double penalty_per_merged_token = 0.002;

    void validate() const {
        if (cosine_threshold > 1.0) throw ConfigError("fusion: cosine_threshold must be <= 1");
    }
};

struct PruneConfig {
    bool enabled = false;
    enum class Mode { threshold, fraction } mode = Mode::threshold;
    double threshold = 0.0;  // drop importance < threshold
    double fraction = 0.0;   // drop the floor(fraction * n) lowest
    double penalty_per_token = 0.01;

    void validate() const {
        if (mode == Mode::threshold) {
            if (threshold < 0.0 || threshold > 1.0)
                throw ConfigError("prune: threshold must be in [0, 1]");
        } else {
            if (fraction < 0.0 || fraction > 1.0)
                throw ConfigError("prune: fraction must be in [0, 1]");
        }
    }
};

// Popularity-ordered greedy width assignment per server: widest precision
// that still leaves room for the remaining experts at 4 bits. Popularity
// order and bit-width order never invert within a server.
//
// popularity_per_layer: num_layers rows of experts_per_layer scores (each
// row a distribution, so scores are comparable across layers).
QuantPolicy assign_bitwidths(const std::vector<std::vector<double>>& popularity_per_layer,
                             const std::map<int, std::set<ExpertRef>>& assignment,
                             const MoEModelSpec& spec,
                             const std::map<int, std::uint64_t>& expert_budget_bytes,
                             int shared_bits = 16);

struct FusionResult {
    std::vector<std::vector<float>> fused;  // one centroid per group
    std::vector<int> group_of;              // batch index -> group index
    std::uint64_t volume_saved_bytes = 0;
    int merged_tokens = 0;  // batch size - group count
};

// Greedy first-fit clustering in token order: join the first group whose
// centroid cosine >= tau, else open a new group.
FusionResult fuse_tokens(const std::vector<std::vector<float>>& batch, const FusionConfig& config,
                         const MoEModelSpec& spec);

struct PruneResult {
    std::vector<int> retained;  // indices into the batch, original order
    std::uint64_t volume_saved_bytes = 0;
    int pruned_tokens = 0;
};

PruneResult prune_tokens(const std::vector<double>& importance, const PruneConfig& config,
                         const MoEModelSpec& spec);

// Run-level ledger of compression penalties.
struct PenaltyLedger {
    double quantization_penalty = 0.0;
    double fusion_penalty = 0.0;
    double prune_penalty = 0.0;
    std::uint64_t token_events = 0;  // tokens processed; the normalizer

    double total() const { return quantization_penalty + fusion_penalty + prune_penalty; }
};

// 1 - normalized penalty sum, clamped to [0, 1]. Monotone non-increasing in
// every penalty count.
double quality_score(const PenaltyLedger& ledger);

}  // namespace moedge
