// SPDX-License-Identifier: Apache-2.0
#include "moedge/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <json.hpp>

#include "moedge/kernels.hpp"
#include "moedge/rng.hpp"

namespace moedge {

std::uint64_t MoEModelSpec::content_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    h = fnv1a_u64(static_cast<std::uint64_t>(num_layers), h);
    h = fnv1a_u64(static_cast<std::uint64_t>(experts_per_layer), h);
    h = fnv1a_u64(expert_param_bytes, h);
    h = fnv1a_u64(shared_param_bytes, h);
    h = fnv1a_u64(static_cast<std::uint64_t>(top_k), h);
    h = fnv1a_u64(static_cast<std::uint64_t>(hidden_dim), h);
    h = fnv1a_u64(static_cast<std::uint64_t>(activation_bytes_per_element), h);
    return h;
}

RoutingTrace::RoutingTrace(const MoEModelSpec& spec, std::vector<std::pair<int, int>> requests,
                           std::uint64_t embedding_seed)
    : num_layers_(spec.num_layers),
      top_k_(spec.top_k),
      requests_(std::move(requests)),
      token_embedding_seed_(embedding_seed) {
    request_offsets_.reserve(requests_.size());
    for (const auto& [in, out] : requests_) {
        request_offsets_.push_back(num_tokens_);
        num_tokens_ += in + out;
    }
    selections_.assign(static_cast<std::size_t>(num_tokens_) * num_layers_ * top_k_, 0);
    importance_.assign(num_tokens_, 0.0);
}

void RoutingTrace::check_conserved(const MoEModelSpec& spec) const {
    if (num_layers_ != spec.num_layers || top_k_ != spec.top_k)
        throw StructuralError("trace: geometry does not match model spec");
    std::vector<bool> seen(spec.experts_per_layer);
    for (int t = 0; t < num_tokens_; ++t) {
        for (int l = 0; l < num_layers_; ++l) {
            std::fill(seen.begin(), seen.end(), false);
            for (int s = 0; s < top_k_; ++s) {
                const int e = selection(t, l, s);
                if (e < 0 || e >= spec.experts_per_layer)
                    throw StructuralError("trace: expert index out of range");
                if (seen[e]) throw StructuralError("trace: duplicate expert within top_k");
                seen[e] = true;
            }
        }
    }
}

std::string RoutingTrace::to_json(const MoEModelSpec& spec, std::uint64_t seed) const {
    nlohmann::json j;
    j["format_version"] = 1;
    j["header"] = {{"spec_hash", spec.content_hash()},
                   {"seed", seed},
                   {"token_count", num_tokens_}};
    j["num_layers"] = num_layers_;
    j["top_k"] = top_k_;
    j["token_embedding_seed"] = token_embedding_seed_;
    auto& reqs = j["requests"] = nlohmann::json::array();
    for (const auto& [in, out] : requests_) reqs.push_back({in, out});
    j["selections"] = selections_;
    j["importance"] = importance_;
    return j.dump();
}

RoutingTrace RoutingTrace::from_json(const std::string& text, const MoEModelSpec& spec) {
    nlohmann::json j = nlohmann::json::parse(text);
    if (!j.contains("format_version") || j["format_version"].get<int>() != 1)
        throw ConfigError("trace: unsupported format_version");
    if (j["header"]["spec_hash"].get<std::uint64_t>() != spec.content_hash())
        throw StructuralError("trace: spec hash mismatch");
    std::vector<std::pair<int, int>> requests;
    for (const auto& r : j["requests"]) requests.emplace_back(r[0].get<int>(), r[1].get<int>());
    RoutingTrace trace(spec, std::move(requests), j["token_embedding_seed"].get<std::uint64_t>());
    if (j["num_layers"].get<int>() != trace.num_layers_ || j["top_k"].get<int>() != trace.top_k_)
        throw StructuralError("trace: geometry fields inconsistent with spec");
    trace.selections_ = j["selections"].get<std::vector<std::uint16_t>>();
    trace.importance_ = j["importance"].get<std::vector<double>>();
    const auto expect =
        static_cast<std::size_t>(trace.num_tokens_) * trace.num_layers_ * trace.top_k_;
    if (trace.selections_.size() != expect ||
        trace.importance_.size() != static_cast<std::size_t>(trace.num_tokens_))
        throw StructuralError("trace: payload length mismatch");
    return trace;
}

void CoActivationMatrix::check_stochastic(double tol) const {
    for (const auto& mat : transitions) {
        for (int i = 0; i < experts_per_layer; ++i) {
            double row = 0.0;
            bool any = false;
            for (int j = 0; j < experts_per_layer; ++j) {
                const double p = mat[i * experts_per_layer + j];
                if (p < 0.0) throw StructuralError("coactivation: negative entry");
                if (p > 0.0) any = true;
                row += p;
            }
            if (any && std::abs(row - 1.0) > tol)
                throw StructuralError("coactivation: observed row does not sum to 1");
        }
    }
}

namespace {

// Row-stochastic kernel for one layer pair: softmax(kappa * g) with seeded
// standard normals g. kappa = 0 gives the uniform kernel.
std::vector<double> make_kernel(int experts, double kappa, std::uint64_t seed, int layer_pair) {
    Rng rng(mix_seed(seed, 0x6b65726eULL, static_cast<std::uint64_t>(layer_pair)));
    std::vector<double> k(static_cast<std::size_t>(experts) * experts);
    for (int i = 0; i < experts; ++i) {
        double maxg = -1e300;
        std::vector<double> g(experts);
        for (int j = 0; j < experts; ++j) {
            g[j] = kappa * rng.gaussian();
            maxg = std::max(maxg, g[j]);
        }
        double total = 0.0;
        for (int j = 0; j < experts; ++j) {
            g[j] = std::exp(g[j] - maxg);
            total += g[j];
        }
        for (int j = 0; j < experts; ++j) k[static_cast<std::size_t>(i) * experts + j] = g[j] / total;
    }
    return k;
}

// Sample `count` distinct experts from `weights`; the first draw follows the
// raw distribution, later draws renormalize over the remainder.
void sample_distinct(Rng& rng, const std::vector<double>& weights, int count,
                     std::vector<int>& out) {
    out.clear();
    std::vector<double> w = weights;
    for (int s = 0; s < count; ++s) {
        const auto pick = rng.pick_weighted(w);
        out.push_back(static_cast<int>(pick));
        w[pick] = 0.0;
    }
}

}  // namespace

std::vector<std::vector<double>> ground_truth_kernel(const MoEModelSpec& spec,
                                                     const WorkloadParams& workload,
                                                     std::uint64_t seed) {
    spec.validate();
    workload.validate();
    std::vector<std::vector<double>> kernels;
    kernels.reserve(std::max(0, spec.num_layers - 1));
    for (int l = 0; l + 1 < spec.num_layers; ++l)
        kernels.push_back(make_kernel(spec.experts_per_layer, workload.kappa, seed, l));
    return kernels;
}

RoutingTrace generate_trace(const MoEModelSpec& spec, const WorkloadParams& workload,
                            std::uint64_t seed) {
    spec.validate();
    workload.validate();

    std::vector<std::pair<int, int>> requests(workload.num_requests,
                                              {workload.input_len, workload.output_len});
    RoutingTrace trace(spec, std::move(requests), mix_seed(seed, 0x656d6264ULL));

    const auto first_layer = zipf_weights(spec.experts_per_layer, workload.zipf_s);
    const auto kernels = ground_truth_kernel(spec, workload, seed);

    Rng rng(mix_seed(seed, 0x74726163ULL));
    std::vector<int> current, next;
    std::vector<double> row(spec.experts_per_layer);
    for (int t = 0; t < trace.num_tokens(); ++t) {
        sample_distinct(rng, first_layer, spec.top_k, current);
        for (int s = 0; s < spec.top_k; ++s) trace.set_selection(t, 0, s, current[s]);
        for (int l = 1; l < spec.num_layers; ++l) {
            next.clear();
            std::vector<bool> used(spec.experts_per_layer, false);
            for (int s = 0; s < spec.top_k; ++s) {
                const auto& k = kernels[l - 1];
                for (int j = 0; j < spec.experts_per_layer; ++j) {
                    row[j] = used[j] ? 0.0
                                     : k[static_cast<std::size_t>(current[s]) *
                                             spec.experts_per_layer +
                                         j];
                }
                double total = 0.0;
                for (double v : row) total += v;
                int pick;
                if (total <= 0.0) {
                    // Row mass exhausted by earlier slots; take the lowest
                    // unused index so the draw stays deterministic.
                    pick = 0;
                    while (used[pick]) ++pick;
                } else {
                    pick = static_cast<int>(rng.pick_weighted(row));
                }
                used[pick] = true;
                next.push_back(pick);
            }
            for (int s = 0; s < spec.top_k; ++s) trace.set_selection(t, l, s, next[s]);
            current = next;
        }
        trace.set_importance(t, rng.uniform01());
    }
    return trace;
}

CoActivationMatrix estimate_coactivation(const RoutingTrace& trace, const MoEModelSpec& spec) {
    if (trace.num_tokens() == 0) throw StructuralError("estimate_coactivation: empty trace");
    trace.check_conserved(spec);

    const int E = spec.experts_per_layer;
    CoActivationMatrix coact;
    coact.num_layers = spec.num_layers;
    coact.experts_per_layer = E;
    coact.transitions.assign(std::max(0, spec.num_layers - 1),
                             std::vector<double>(static_cast<std::size_t>(E) * E, 0.0));
    coact.layer_marginals.assign(spec.num_layers, std::vector<double>(E, 0.0));

    const double attribution = 1.0 / spec.top_k;
    for (int t = 0; t < trace.num_tokens(); ++t) {
        for (int l = 0; l < spec.num_layers; ++l) {
            for (int s = 0; s < spec.top_k; ++s)
                coact.layer_marginals[l][trace.selection(t, l, s)] += 1.0;
            if (l + 1 >= spec.num_layers) continue;
            auto& mat = coact.transitions[l];
            for (int si = 0; si < spec.top_k; ++si) {
                const int i = trace.selection(t, l, si);
                for (int sj = 0; sj < spec.top_k; ++sj) {
                    const int j = trace.selection(t, l + 1, sj);
                    mat[static_cast<std::size_t>(i) * E + j] += attribution;
                }
            }
        }
    }

    for (auto& mat : coact.transitions) {
        for (int i = 0; i < E; ++i) {
            double row = 0.0;
            for (int j = 0; j < E; ++j) row += mat[static_cast<std::size_t>(i) * E + j];
            if (row > 0.0) {
                for (int j = 0; j < E; ++j) mat[static_cast<std::size_t>(i) * E + j] /= row;
            }
        }
    }
    for (auto& marginal : coact.layer_marginals) {
        double total = 0.0;
        for (double v : marginal) total += v;
        if (total > 0.0)
            for (auto& v : marginal) v /= total;
    }
    return coact;
}

namespace {

std::vector<float> cluster_center(std::uint64_t embedding_seed, int layer, int expert,
                                  int hidden_dim) {
    Rng rng(mix_seed(embedding_seed, static_cast<std::uint64_t>(layer) | 0x63656e74ULL << 32,
                     static_cast<std::uint64_t>(expert)));
    std::vector<float> c(hidden_dim);
    for (auto& v : c) v = static_cast<float>(rng.gaussian());
    const float n2 = kernels::squared_norm(c);
    if (n2 > 0.0f) kernels::scale(c, 1.0f / std::sqrt(n2));
    return c;
}

}  // namespace

std::vector<float> activation_vector(const RoutingTrace& trace, const MoEModelSpec& spec,
                                     int token, int layer, double cluster_noise) {
    const int primary = trace.selection(token, layer, 0);
    std::vector<float> v = cluster_center(trace.token_embedding_seed(), layer, primary,
                                          spec.hidden_dim);
    if (cluster_noise > 0.0) {
        Rng rng(mix_seed(trace.token_embedding_seed(), static_cast<std::uint64_t>(token),
                         static_cast<std::uint64_t>(layer)));
        for (auto& x : v) x += static_cast<float>(cluster_noise * rng.gaussian() /
                                                  std::sqrt(static_cast<double>(spec.hidden_dim)));
    }
    const float n2 = kernels::squared_norm(v);
    if (n2 > 0.0f) kernels::scale(v, 1.0f / std::sqrt(n2));
    return v;
}

std::vector<std::vector<float>> synthesize_activations(const RoutingTrace& trace,
                                                       const MoEModelSpec& spec, int layer,
                                                       double cluster_noise) {
    std::vector<std::vector<float>> out;
    out.reserve(trace.num_tokens());
    for (int t = 0; t < trace.num_tokens(); ++t)
        out.push_back(activation_vector(trace, spec, t, layer, cluster_noise));
    return out;
}

}  // namespace moedge
