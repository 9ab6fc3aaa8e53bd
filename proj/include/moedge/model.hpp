// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <compare>
#include <cstdint>
#include <string>
#include <vector>

#include "moedge/errors.hpp"

namespace moedge {

// Geometry of the simulated MoE model. Parameter sizes are full-precision
// (16-bit) byte counts; per-expert bit-width scaling is the quantization
// policy's concern.
struct MoEModelSpec {
    int num_layers = 1;
    int experts_per_layer = 1;
    std::uint64_t expert_param_bytes = 0;  // per expert, full precision
    std::uint64_t shared_param_bytes = 0;  // non-expert weights, full precision
    int top_k = 1;
    int hidden_dim = 1;
    int activation_bytes_per_element = 2;

    std::uint64_t total_param_bytes() const {
        return shared_param_bytes + static_cast<std::uint64_t>(num_layers) * experts_per_layer *
                                        expert_param_bytes;
    }

    int total_experts() const { return num_layers * experts_per_layer; }

    void validate() const {
        if (num_layers < 1) throw ConfigError("model: num_layers must be >= 1");
        if (experts_per_layer < 1) throw ConfigError("model: experts_per_layer must be >= 1");
        if (top_k < 1 || top_k > experts_per_layer)
            throw ConfigError("model: top_k must be in [1, experts_per_layer]");
        if (hidden_dim < 1) throw ConfigError("model: hidden_dim must be >= 1");
        if (activation_bytes_per_element < 1)
            throw ConfigError("model: activation_bytes_per_element must be >= 1");
    }

    std::uint64_t content_hash() const;

    bool operator==(const MoEModelSpec&) const = default;
};

// Names one expert: (layer, expert-within-layer).
struct ExpertRef {
    int layer = 0;
    int expert = 0;

    auto operator<=>(const ExpertRef&) const = default;
};

struct WorkloadParams {
    int num_requests = 1;
    int input_len = 1;
    int output_len = 1;
    double zipf_s = 1.0;          // first-layer popularity skew
    double kappa = 4.0;           // layer-transition concentration
    double cluster_noise = 0.25;  // activation cluster spread

    void validate() const {
        if (num_requests < 1) throw ConfigError("workload: num_requests must be >= 1");
        if (input_len < 0 || output_len < 0)
            throw ConfigError("workload: token lengths must be non-negative");
        if (input_len + output_len < 1)
            throw ConfigError("workload: each request needs at least one token");
        if (zipf_s < 0.0) throw ConfigError("workload: zipf_s must be >= 0");
        if (kappa < 0.0) throw ConfigError("workload: kappa must be >= 0");
        if (cluster_noise < 0.0) throw ConfigError("workload: cluster_noise must be >= 0");
    }
};

// Per-token expert selections for every layer plus the synthetic-activation
// seed. Selections are stored flattened: token-major, then layer, then slot.
class RoutingTrace {
public:
    RoutingTrace() = default;
    RoutingTrace(const MoEModelSpec& spec, std::vector<std::pair<int, int>> requests,
                 std::uint64_t embedding_seed);

    int num_tokens() const { return num_tokens_; }
    int num_layers() const { return num_layers_; }
    int top_k() const { return top_k_; }
    const std::vector<std::pair<int, int>>& requests() const { return requests_; }
    std::uint64_t token_embedding_seed() const { return token_embedding_seed_; }

    // Slot s of token t at layer l; slot 0 is the primary gate choice.
    int selection(int token, int layer, int slot) const {
        return selections_[(static_cast<std::size_t>(token) * num_layers_ + layer) * top_k_ + slot];
    }
    void set_selection(int token, int layer, int slot, int expert) {
        selections_[(static_cast<std::size_t>(token) * num_layers_ + layer) * top_k_ + slot] =
            static_cast<std::uint16_t>(expert);
    }

    double importance(int token) const { return importance_[token]; }
    void set_importance(int token, double v) { importance_[token] = v; }

    // First token index of a request; input tokens precede output tokens.
    int request_token_begin(int request) const { return request_offsets_[request]; }

    // Exactly top_k distinct selections per (token, layer), indices in range.
    void check_conserved(const MoEModelSpec& spec) const;

    std::string to_json(const MoEModelSpec& spec, std::uint64_t seed) const;
    static RoutingTrace from_json(const std::string& text, const MoEModelSpec& spec);

private:
    int num_tokens_ = 0;
    int num_layers_ = 0;
    int top_k_ = 0;
    std::vector<std::pair<int, int>> requests_;  // (input_len, output_len)
    std::vector<int> request_offsets_;
    std::vector<std::uint16_t> selections_;
    std::vector<double> importance_;
    std::uint64_t token_embedding_seed_ = 0;
};

// Layer-adjacent transition probabilities P_l[i][j] plus the observed
// per-layer expert marginals (used as the popularity prior and as the
// chain's initial distribution).
struct CoActivationMatrix {
    int num_layers = 0;
    int experts_per_layer = 0;
    // (num_layers - 1) row-major E x E matrices.
    std::vector<std::vector<double>> transitions;
    // num_layers marginal distributions over experts.
    std::vector<std::vector<double>> layer_marginals;

    const std::vector<double>& layer_pair(int l) const { return transitions[l]; }
    double at(int l, int i, int j) const { return transitions[l][i * experts_per_layer + j]; }

    void check_stochastic(double tol = 1e-9) const;
};

// Synthetic routing workload. First-layer choices follow Zipf(zipf_s);
// deeper layers follow a seeded ground-truth Markov kernel whose rows are
// softmax(kappa * g) for seeded standard normals g. Bit-identical for a
// fixed (spec, workload, seed).
RoutingTrace generate_trace(const MoEModelSpec& spec, const WorkloadParams& workload,
                            std::uint64_t seed);

// The generator's ground-truth kernel, exposed so estimator tests can
// compare against it. Layout matches CoActivationMatrix::transitions.
std::vector<std::vector<double>> ground_truth_kernel(const MoEModelSpec& spec,
                                                     const WorkloadParams& workload,
                                                     std::uint64_t seed);

// Maximum-likelihood transition counting. For top_k > 1 each of the k
// sources is attributed to each of the k destinations with weight 1/k, so
// observed rows still normalize. Rows with zero observations stay all-zero.
CoActivationMatrix estimate_coactivation(const RoutingTrace& trace, const MoEModelSpec& spec);

// Deterministic synthetic activation vector for (token, layer): the primary
// expert's cluster center plus cluster_noise Gaussian jitter, unit-normalized.
std::vector<float> activation_vector(const RoutingTrace& trace, const MoEModelSpec& spec,
                                     int token, int layer, double cluster_noise);

// Batch form used by the fusion tests.
std::vector<std::vector<float>> synthesize_activations(const RoutingTrace& trace,
                                                       const MoEModelSpec& spec, int layer,
                                                       double cluster_noise);

}  // namespace moedge
