// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "moedge/compression.hpp"
#include "moedge/model.hpp"

namespace moedge {

// Exponentially weighted per-layer expert popularity. Each layer keeps a
// normalized distribution; an observation decays the whole layer and bumps
// the selected experts.
class PopularityModel {
public:
    PopularityModel() = default;
    PopularityModel(int num_layers, int experts_per_layer, double lambda);

    // Seed from measured marginals (e.g. the planning trace) instead of uniform.
    void reset_to(const std::vector<std::vector<double>>& marginals);

    // One token selected `experts` at `layer`.
    void observe_layer(int layer, std::span<const int> experts);

    double lambda() const { return lambda_; }
    const std::vector<std::vector<double>>& scores() const { return scores_; }
    double score(ExpertRef e) const { return scores_[e.layer][e.expert]; }

private:
    double lambda_ = 0.98;
    std::vector<std::vector<double>> scores_;  // [layer][expert], each row sums to 1
};

struct RankedLayer {
    int layer = 0;
    std::vector<int> ranked;  // expert indices, best first
};

// Predict which experts the token now at `layer` holding selections
// `current` will want at layers layer+1 .. layer+depth. Transition mass is
// propagated through the co-activation kernel; at each depth the propagated
// mass is blended with the long-run popularity of that layer
// (gamma * propagated + (1-gamma) * popularity) before ranking. Ties rank the
// smaller expert index first.
std::vector<RankedLayer> predict_ahead(const PopularityModel& popularity,
                                       std::span<const int> current, int layer,
                                       const CoActivationMatrix& coact, int depth,
                                       double gamma);

// Single shared transfer lane (PCIe-style). Reservations are FIFO in call
// order: a reservation starts when the bus frees up and holds it for the
// duration.
struct BusTimeline {
    double free_at_s = 0.0;
    double start_after(double now) const { return now > free_at_s ? now : free_at_s; }
    double reserve(double now, double duration_s) {
        const double s = start_after(now);
        free_at_s = s + duration_s;
        return s;
    }
};

// GPU-resident expert cache for one server. Tracks resident and in-flight
// weight bytes against a fixed budget, pins experts that are actively being
// used, and evicts the least popular unpinned resident first (LRU order
// breaks popularity ties).
class ExpertCacheState {
public:
    struct LoadCommand {
        ExpertRef expert;
        double completion_s = 0.0;
        std::uint64_t bytes = 0;
        bool prefetch = false;
    };
    struct AccessResult {
        double stall_s = 0.0;
        bool hit = false;           // resident at access time
        bool prefetch_hit = false;  // served by a previously issued prefetch
        std::optional<LoadCommand> demand_load;
        std::vector<ExpertRef> evicted;
    };
    struct Stats {
        std::uint64_t hits = 0;
        std::uint64_t misses = 0;
        std::uint64_t prefetch_hits = 0;
        std::uint64_t bytes_loaded = 0;
        double stall_total_s = 0.0;
        std::vector<double> stalls_s;  // one entry per access
    };

    ExpertCacheState() = default;
    ExpertCacheState(std::uint64_t gpu_budget_bytes, const MoEModelSpec& spec,
                     const QuantPolicy& quant, const std::set<ExpertRef>& placed,
                     int headroom_experts);

    // Deployment-time warm start: mark experts resident in the given order
    // (no bus traffic, no stats) until the prefetch share of the budget is
    // full. Later entries that no longer fit are skipped.
    void preload(std::span<const ExpertRef> order);

    // Issue background loads for `candidates` (most urgent first). Skips
    // experts already resident or in flight, keeps a headroom reserve free
    // for demand loads, and evicts less popular residents to make room.
    std::vector<LoadCommand> schedule_prefetch(std::span<const ExpertRef> candidates,
                                               double now, BusTimeline& bus,
                                               double bus_bandwidth,
                                               const PopularityModel& popularity);

    // A token needs `e` now. Returns the stall until its weights are usable
    // plus any demand load that had to be issued.
    AccessResult access(ExpertRef e, double now, BusTimeline& bus, double bus_bandwidth,
                        const PopularityModel& popularity);

    // Called when a previously issued load's completion time is reached.
    void complete_load(ExpertRef e);

    void pin(ExpertRef e);
    void unpin(ExpertRef e);

    bool resident(ExpertRef e) const { return resident_.count(e) != 0; }
    bool in_flight(ExpertRef e) const { return in_flight_.count(e) != 0; }
    std::uint64_t resident_bytes() const { return resident_bytes_; }
    std::uint64_t in_flight_bytes() const { return in_flight_bytes_; }
    std::uint64_t occupancy_bytes() const { return resident_bytes_ + in_flight_bytes_; }
    std::uint64_t budget_bytes() const { return budget_; }
    const Stats& stats() const { return stats_; }

    // Throws StructuralError if occupancy exceeds the budget or the byte
    // counters drifted from the entry maps.
    void check_budget() const;

private:
    struct Entry {
        std::uint64_t bytes = 0;
        std::uint64_t last_access = 0;  // access sequence number, for LRU ties
        bool unconsumed_prefetch = false;
    };
    struct Flight {
        std::uint64_t bytes = 0;
        double completion_s = 0.0;
        bool prefetch = false;
    };

    std::uint64_t expert_bytes(ExpertRef e) const;
    // Evict unpinned residents until `bytes` fit under `limit`. Victims must
    // be strictly less popular than `incoming_score` when `guard` is set.
    bool make_room(std::uint64_t bytes, std::uint64_t limit, const PopularityModel& popularity,
                   bool guard, double incoming_score, std::vector<ExpertRef>* evicted);

    std::uint64_t budget_ = 0;
    std::uint64_t headroom_bytes_ = 0;
    std::uint64_t resident_bytes_ = 0;
    std::uint64_t in_flight_bytes_ = 0;
    std::uint64_t access_seq_ = 0;
    std::map<ExpertRef, Entry> resident_;
    std::map<ExpertRef, Flight> in_flight_;
    std::map<ExpertRef, int> pins_;
    std::map<ExpertRef, std::uint64_t> bytes_of_;  // placed experts only
    Stats stats_;
};

}  // namespace moedge
