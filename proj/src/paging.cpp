// SPDX-License-Identifier: Apache-2.0
#include "moedge/paging.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moedge/kernels.hpp"

namespace moedge {

PopularityModel::PopularityModel(int num_layers, int experts_per_layer, double lambda)
    : lambda_(lambda) {
    if (num_layers < 1 || experts_per_layer < 1)
        throw ConfigError("popularity: geometry must be positive");
    if (lambda <= 0.0 || lambda >= 1.0) throw ConfigError("popularity: lambda must be in (0, 1)");
    scores_.assign(num_layers,
                   std::vector<double>(experts_per_layer, 1.0 / experts_per_layer));
}

void PopularityModel::reset_to(const std::vector<std::vector<double>>& marginals) {
    if (marginals.size() != scores_.size())
        throw StructuralError("popularity: marginal layer count mismatch");
    for (std::size_t l = 0; l < marginals.size(); ++l) {
        if (marginals[l].size() != scores_[l].size())
            throw StructuralError("popularity: marginal width mismatch");
        const double total = std::accumulate(marginals[l].begin(), marginals[l].end(), 0.0);
        if (total <= 0.0) continue;  // keep the uniform row
        for (std::size_t e = 0; e < marginals[l].size(); ++e)
            scores_[l][e] = marginals[l][e] / total;
    }
}

void PopularityModel::observe_layer(int layer, std::span<const int> experts) {
    auto& row = scores_.at(layer);
    for (double& v : row) v *= lambda_;
    for (int e : experts) row.at(e) += 1.0 - lambda_;
    // k selections add k*(1-lambda); renormalize so the row stays a pmf.
    const double total = std::accumulate(row.begin(), row.end(), 0.0);
    for (double& v : row) v /= total;
}

std::vector<RankedLayer> predict_ahead(const PopularityModel& popularity,
                                       std::span<const int> current, int layer,
                                       const CoActivationMatrix& coact, int depth,
                                       double gamma) {
    if (depth < 0) throw ConfigError("predict_ahead: depth must be >= 0");
    if (gamma < 0.0 || gamma > 1.0) throw ConfigError("predict_ahead: gamma must be in [0, 1]");
    const int e_per_layer = coact.experts_per_layer;
    std::vector<RankedLayer> out;
    if (current.empty()) return out;

    // Mass currently at `layer`: uniform over the active selections.
    std::vector<double> mass(e_per_layer, 0.0);
    for (int e : current) mass.at(e) += 1.0 / static_cast<double>(current.size());

    std::vector<double> next(e_per_layer, 0.0);
    for (int step = 1; step <= depth; ++step) {
        const int target = layer + step;
        if (target >= coact.num_layers) break;
        const std::size_t e_sz = static_cast<std::size_t>(e_per_layer);
        kernels::vecmat(mass, coact.layer_pair(target - 1), e_sz, e_sz, next);
        // Rows with no observed mass leak probability; renormalize what's left.
        const double total = std::accumulate(next.begin(), next.end(), 0.0);
        if (total > 0.0)
            for (double& v : next) v /= total;
        mass = next;

        const auto& pop = popularity.scores().at(target);
        std::vector<double> blended(e_per_layer);
        for (int e = 0; e < e_per_layer; ++e)
            blended[e] = gamma * mass[e] + (1.0 - gamma) * pop[e];

        RankedLayer rl;
        rl.layer = target;
        rl.ranked.resize(e_per_layer);
        std::iota(rl.ranked.begin(), rl.ranked.end(), 0);
        std::stable_sort(rl.ranked.begin(), rl.ranked.end(),
                         [&](int a, int b) { return blended[a] > blended[b]; });
        out.push_back(std::move(rl));
    }
    return out;
}

ExpertCacheState::ExpertCacheState(std::uint64_t gpu_budget_bytes, const MoEModelSpec& spec,
                                   const QuantPolicy& quant, const std::set<ExpertRef>& placed,
                                   int headroom_experts)
    : budget_(gpu_budget_bytes) {
    if (headroom_experts < 0) throw ConfigError("cache: headroom_experts must be >= 0");
    std::uint64_t largest = 0;
    for (const ExpertRef& e : placed) {
        const std::uint64_t b = quant.expert_resident_bytes(e, spec);
        bytes_of_[e] = b;
        largest = std::max(largest, b);
    }
    if (largest > budget_)
        throw ConfigError("cache: gpu budget smaller than a single placed expert");
    headroom_bytes_ = static_cast<std::uint64_t>(headroom_experts) * largest;
    if (headroom_bytes_ > budget_) headroom_bytes_ = budget_;
}

std::uint64_t ExpertCacheState::expert_bytes(ExpertRef e) const {
    auto it = bytes_of_.find(e);
    if (it == bytes_of_.end())
        throw StructuralError("cache: expert not placed on this server");
    return it->second;
}

bool ExpertCacheState::make_room(std::uint64_t bytes, std::uint64_t limit,
                                 const PopularityModel& popularity, bool guard,
                                 double incoming_score, std::vector<ExpertRef>* evicted) {
    while (resident_bytes_ + in_flight_bytes_ + bytes > limit) {
        // Victim: lowest popularity, then least recently used.
        const Entry* victim_entry = nullptr;
        ExpertRef victim{};
        double victim_score = 0.0;
        for (const auto& [e, entry] : resident_) {
            if (pins_.count(e) != 0) continue;
            const double s = popularity.score(e);
            if (victim_entry == nullptr || s < victim_score ||
                (s == victim_score && entry.last_access < victim_entry->last_access)) {
                victim_entry = &entry;
                victim = e;
                victim_score = s;
            }
        }
        if (victim_entry == nullptr) return false;
        if (guard && victim_score >= incoming_score) return false;
        resident_bytes_ -= victim_entry->bytes;
        resident_.erase(victim);
        if (evicted != nullptr) evicted->push_back(victim);
    }
    return true;
}

void ExpertCacheState::preload(std::span<const ExpertRef> order) {
    const std::uint64_t limit = budget_ - headroom_bytes_;
    for (const ExpertRef& e : order) {
        if (resident_.count(e) != 0) continue;
        const std::uint64_t bytes = expert_bytes(e);
        if (resident_bytes_ + bytes > limit) continue;
        Entry entry;
        entry.bytes = bytes;
        entry.last_access = access_seq_++;
        resident_.emplace(e, entry);
        resident_bytes_ += bytes;
    }
}

std::vector<ExpertCacheState::LoadCommand> ExpertCacheState::schedule_prefetch(
    std::span<const ExpertRef> candidates, double now, BusTimeline& bus, double bus_bandwidth,
    const PopularityModel& popularity) {
    std::vector<LoadCommand> issued;
    for (const ExpertRef& e : candidates) {
        if (resident_.count(e) != 0 || in_flight_.count(e) != 0) continue;
        const std::uint64_t bytes = expert_bytes(e);
        // Leave the demand-load reserve untouched.
        const std::uint64_t limit = budget_ - headroom_bytes_;
        if (bytes > limit) continue;
        if (!make_room(bytes, limit, popularity, /*guard=*/true, popularity.score(e), nullptr))
            continue;
        const double dur = static_cast<double>(bytes) / bus_bandwidth;
        const double start = bus.reserve(now, dur);
        Flight f;
        f.bytes = bytes;
        f.completion_s = start + dur;
        f.prefetch = true;
        in_flight_.emplace(e, f);
        in_flight_bytes_ += bytes;
        stats_.bytes_loaded += bytes;
        LoadCommand cmd;
        cmd.expert = e;
        cmd.completion_s = f.completion_s;
        cmd.bytes = bytes;
        cmd.prefetch = true;
        issued.push_back(cmd);
    }
    return issued;
}

ExpertCacheState::AccessResult ExpertCacheState::access(ExpertRef e, double now,
                                                        BusTimeline& bus, double bus_bandwidth,
                                                        const PopularityModel& popularity) {
    AccessResult r;
    ++access_seq_;
    if (auto it = resident_.find(e); it != resident_.end()) {
        it->second.last_access = access_seq_;
        r.hit = true;
        if (it->second.unconsumed_prefetch) {
            it->second.unconsumed_prefetch = false;
            r.prefetch_hit = true;
            ++stats_.prefetch_hits;
        }
        ++stats_.hits;
        stats_.stalls_s.push_back(0.0);
        return r;
    }
    ++stats_.misses;
    if (auto it = in_flight_.find(e); it != in_flight_.end()) {
        // Already on the bus; wait for it.
        r.stall_s = std::max(0.0, it->second.completion_s - now);
        if (it->second.prefetch) {
            it->second.prefetch = false;  // consumed in flight
            r.prefetch_hit = true;
            ++stats_.prefetch_hits;
        }
    } else {
        const std::uint64_t bytes = expert_bytes(e);
        std::vector<ExpertRef> evicted;
        if (!make_room(bytes, budget_, popularity, /*guard=*/false, 0.0, &evicted))
            throw ConfigError("cache: budget too small for pinned working set");
        r.evicted = std::move(evicted);
        const double dur = static_cast<double>(bytes) / bus_bandwidth;
        const double start = bus.reserve(now, dur);
        Flight f;
        f.bytes = bytes;
        f.completion_s = start + dur;
        f.prefetch = false;
        in_flight_.emplace(e, f);
        in_flight_bytes_ += bytes;
        stats_.bytes_loaded += bytes;
        LoadCommand cmd;
        cmd.expert = e;
        cmd.completion_s = f.completion_s;
        cmd.bytes = bytes;
        cmd.prefetch = false;
        r.demand_load = cmd;
        r.stall_s = f.completion_s - now;
    }
    stats_.stall_total_s += r.stall_s;
    stats_.stalls_s.push_back(r.stall_s);
    return r;
}

void ExpertCacheState::complete_load(ExpertRef e) {
    auto it = in_flight_.find(e);
    if (it == in_flight_.end()) return;  // duplicate completion events are harmless
    Entry entry;
    entry.bytes = it->second.bytes;
    entry.last_access = access_seq_;
    entry.unconsumed_prefetch = it->second.prefetch;
    in_flight_bytes_ -= it->second.bytes;
    in_flight_.erase(it);
    resident_bytes_ += entry.bytes;
    resident_.emplace(e, entry);
}

void ExpertCacheState::pin(ExpertRef e) { ++pins_[e]; }

void ExpertCacheState::unpin(ExpertRef e) {
    auto it = pins_.find(e);
    if (it == pins_.end()) throw StructuralError("cache: unpin without matching pin");
    if (--it->second == 0) pins_.erase(it);
}

void ExpertCacheState::check_budget() const {
    std::uint64_t res = 0, fly = 0;
    for (const auto& [e, entry] : resident_) res += entry.bytes;
    for (const auto& [e, f] : in_flight_) fly += f.bytes;
    if (res != resident_bytes_ || fly != in_flight_bytes_)
        throw StructuralError("cache: byte counters drifted");
    if (res + fly > budget_) throw StructuralError("cache: occupancy exceeds budget");
}

}  // namespace moedge
