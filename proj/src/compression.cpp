// SPDX-License-Identifier: Apache-2.0
#include "moedge/compression.hpp"

#include <algorithm>
#include <cmath>

#include "moedge/kernels.hpp"

namespace moedge {

QuantPolicy QuantPolicy::uniform(const MoEModelSpec& spec, int bits_everywhere) {
    QuantPolicy q;
    q.shared_bits = bits_everywhere;
    for (int l = 0; l < spec.num_layers; ++l)
        for (int e = 0; e < spec.experts_per_layer; ++e) q.bits[{l, e}] = bits_everywhere;
    return q;
}

QuantPolicy assign_bitwidths(const std::vector<std::vector<double>>& popularity_per_layer,
                             const std::map<int, std::set<ExpertRef>>& assignment,
                             const MoEModelSpec& spec,
                             const std::map<int, std::uint64_t>& expert_budget_bytes,
                             int shared_bits) {
    if (shared_bits != 4 && shared_bits != 8 && shared_bits != 16)
        throw ConfigError("quant: shared_bits must be one of {4, 8, 16}");
    QuantPolicy policy;
    policy.shared_bits = shared_bits;

    const std::uint64_t b16 = spec.expert_param_bytes;
    const std::uint64_t b8 = spec.expert_param_bytes / 2;
    const std::uint64_t b4 = spec.expert_param_bytes / 4;

    for (const auto& [server, experts] : assignment) {
        if (experts.empty()) continue;
        auto bit = expert_budget_bytes.find(server);
        if (bit == expert_budget_bytes.end())
            throw ConfigError("quant: missing budget for server id " + std::to_string(server));
        const std::uint64_t budget = bit->second;

        std::vector<ExpertRef> order(experts.begin(), experts.end());
        std::stable_sort(order.begin(), order.end(), [&](const ExpertRef& a, const ExpertRef& b) {
            const double pa = popularity_per_layer[a.layer][a.expert];
            const double pb = popularity_per_layer[b.layer][b.expert];
            if (pa != pb) return pa > pb;
            return a < b;
        });

        const std::uint64_t floor_bytes = b4 * order.size();
        if (floor_bytes > budget)
            throw InfeasibleError("quant: server id " + std::to_string(server) + " needs " +
                                      std::to_string(floor_bytes) + " bytes even at 4 bits, budget " +
                                      std::to_string(budget),
                                  floor_bytes - budget);

        std::uint64_t used = 0;
        std::uint64_t remaining_floor = floor_bytes;
        for (const auto& e : order) {
            remaining_floor -= b4;
            int chosen = 4;
            for (const auto& [width, bytes] : {std::pair{16, b16}, std::pair{8, b8}}) {
                if (used + bytes + remaining_floor <= budget) {
                    chosen = width;
                    break;
                }
            }
            const std::uint64_t bytes = chosen == 16 ? b16 : (chosen == 8 ? b8 : b4);
            used += bytes;
            // A replicated expert keeps one global width; the narrowest of
            // its hosts' choices wins so every copy still fits.
            auto it = policy.bits.find(e);
            if (it == policy.bits.end() || it->second > chosen) policy.bits[e] = chosen;
        }
    }
    return policy;
}

FusionResult fuse_tokens(const std::vector<std::vector<float>>& batch, const FusionConfig& config,
                         const MoEModelSpec& spec) {
    config.validate();
    FusionResult result;
    result.group_of.assign(batch.size(), -1);
    if (batch.empty()) return result;

    std::vector<std::vector<float>> sums;    // running member sums per group
    std::vector<int> counts;
    for (std::size_t t = 0; t < batch.size(); ++t) {
        int joined = -1;
        for (std::size_t g = 0; g < sums.size(); ++g) {
            std::vector<float> centroid = sums[g];
            kernels::scale(centroid, 1.0f / static_cast<float>(counts[g]));
            if (kernels::cosine(batch[t], centroid) >= config.cosine_threshold) {
                joined = static_cast<int>(g);
                break;
            }
        }
        if (joined < 0) {
            sums.push_back(batch[t]);
            counts.push_back(1);
            joined = static_cast<int>(sums.size()) - 1;
        } else {
            kernels::axpy(1.0f, batch[t], sums[joined]);
            ++counts[joined];
        }
        result.group_of[t] = joined;
    }

    result.fused.reserve(sums.size());
    for (std::size_t g = 0; g < sums.size(); ++g) {
        std::vector<float> centroid = std::move(sums[g]);
        kernels::scale(centroid, 1.0f / static_cast<float>(counts[g]));
        result.fused.push_back(std::move(centroid));
    }
    result.merged_tokens = static_cast<int>(batch.size() - result.fused.size());
    result.volume_saved_bytes = static_cast<std::uint64_t>(result.merged_tokens) *
                                spec.hidden_dim * spec.activation_bytes_per_element;
    return result;
}

PruneResult prune_tokens(const std::vector<double>& importance, const PruneConfig& config,
                         const MoEModelSpec& spec) {
    config.validate();
    PruneResult result;
    const int n = static_cast<int>(importance.size());
    std::vector<bool> drop(n, false);
    if (config.mode == PruneConfig::Mode::threshold) {
        for (int i = 0; i < n; ++i) drop[i] = importance[i] < config.threshold;
    } else {
        const int k = static_cast<int>(std::floor(config.fraction * n));
        std::vector<int> by_score(n);
        for (int i = 0; i < n; ++i) by_score[i] = i;
        std::stable_sort(by_score.begin(), by_score.end(), [&](int a, int b) {
            if (importance[a] != importance[b]) return importance[a] < importance[b];
            return a < b;  // ties by token id
        });
        for (int i = 0; i < k; ++i) drop[by_score[i]] = true;
    }
    for (int i = 0; i < n; ++i)
        if (!drop[i]) result.retained.push_back(i);
    result.pruned_tokens = n - static_cast<int>(result.retained.size());
    result.volume_saved_bytes = static_cast<std::uint64_t>(result.pruned_tokens) *
                                spec.hidden_dim * spec.activation_bytes_per_element;
    return result;
}

double quality_score(const PenaltyLedger& ledger) {
    const double normalizer = ledger.token_events > 0 ? static_cast<double>(ledger.token_events) : 1.0;
    const double score = 1.0 - ledger.total() / normalizer;
    return std::clamp(score, 0.0, 1.0);
}

}  // namespace moedge
