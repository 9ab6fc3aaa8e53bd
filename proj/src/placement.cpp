// SPDX-License-Identifier: Apache-2.0
#include "moedge/placement.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

namespace moedge {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kImprovementEps = 1e-12;

std::size_t slot_index(const MoEModelSpec& spec, ExpertRef e) {
    return static_cast<std::size_t>(e.layer) * spec.experts_per_layer + e.expert;
}

}  // namespace

const std::vector<int>& Placement::hosts(ExpertRef e) const {
    if (hosts_.empty()) throw StructuralError("placement: host index not built");
    const std::size_t idx =
        static_cast<std::size_t>(e.layer) * experts_per_layer_ + e.expert;
    if (idx >= hosts_.size()) throw StructuralError("placement: expert out of range");
    return hosts_[idx];
}

bool Placement::hosts_expert(int server, ExpertRef e) const {
    auto it = assignment.find(server);
    return it != assignment.end() && it->second.count(e) != 0;
}

int Placement::total_slots() const {
    int n = 0;
    for (const auto& [server, experts] : assignment) n += static_cast<int>(experts.size());
    return n;
}

void Placement::rebuild_index(const MoEModelSpec& spec) {
    experts_per_layer_ = spec.experts_per_layer;
    hosts_.assign(static_cast<std::size_t>(spec.num_layers) * spec.experts_per_layer, {});
    shared_hosts.clear();
    for (const auto& [server, experts] : assignment) {
        if (experts.empty()) continue;
        shared_hosts.insert(server);
        for (const ExpertRef& e : experts) {
            if (e.layer < 0 || e.layer >= spec.num_layers || e.expert < 0 ||
                e.expert >= spec.experts_per_layer)
                throw StructuralError("placement: expert reference out of range");
            hosts_[slot_index(spec, e)].push_back(server);
        }
    }
    // Map iteration is id-ascending, so each host list is already sorted.
}

void Placement::check_coverage(const MoEModelSpec& spec) const {
    for (int l = 0; l < spec.num_layers; ++l)
        for (int e = 0; e < spec.experts_per_layer; ++e)
            if (hosts(ExpertRef{l, e}).empty())
                throw StructuralError("placement: layer " + std::to_string(l) + " expert " +
                                      std::to_string(e) + " is unhosted");
}

void Placement::check_capacity(const MoEModelSpec& spec, const EdgeTopology& topology,
                               const QuantPolicy& quant) const {
    std::uint64_t worst_shortfall = 0;
    std::string worst_server;
    for (const auto& [server, experts] : assignment) {
        if (server < 0 || server >= static_cast<int>(topology.servers.size()))
            throw StructuralError("placement: unknown server id " + std::to_string(server));
        if (experts.empty()) continue;
        std::uint64_t need = quant.shared_resident_bytes(spec);
        for (const ExpertRef& e : experts) need += quant.expert_resident_bytes(e, spec);
        const ServerSpec& s = topology.servers[server];
        const std::uint64_t cap = s.gpu_mem_bytes + s.ssd_bytes;
        if (need > cap && need - cap > worst_shortfall) {
            worst_shortfall = need - cap;
            worst_server = s.name;
        }
    }
    if (worst_shortfall > 0)
        throw InfeasibleError("placement: server " + worst_server + " over capacity",
                              worst_shortfall);
}

std::string Placement::to_json(const EdgeTopology& topology) const {
    nlohmann::json j;
    j["format_version"] = 1;
    nlohmann::json assign = nlohmann::json::object();
    for (const auto& [server, experts] : assignment) {
        if (server < 0 || server >= static_cast<int>(topology.servers.size()))
            throw StructuralError("placement: unknown server id " + std::to_string(server));
        nlohmann::json arr = nlohmann::json::array();
        for (const ExpertRef& e : experts) arr.push_back({e.layer, e.expert});
        assign[std::to_string(server)] = std::move(arr);
    }
    j["assignment"] = std::move(assign);
    j["shared_hosts"] = shared_hosts;
    return j.dump(2);
}

Placement Placement::from_json(const std::string& text, const MoEModelSpec& spec,
                               const EdgeTopology& topology) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& ex) {
        throw ConfigError(std::string("placement: invalid JSON: ") + ex.what());
    }
    if (!j.is_object() || !j.contains("format_version") || !j.contains("assignment") ||
        !j.contains("shared_hosts"))
        throw ConfigError("placement: missing format_version/assignment/shared_hosts");
    if (j["format_version"].get<int>() != 1)
        throw ConfigError("placement: unsupported format_version");

    Placement p;
    for (const auto& [key, arr] : j["assignment"].items()) {
        int server = 0;
        try {
            server = std::stoi(key);
        } catch (const std::exception&) {
            throw ConfigError("placement: server key must be a numeric id: " + key);
        }
        if (server < 0 || server >= static_cast<int>(topology.servers.size()))
            throw ConfigError("placement: unknown server id " + key);
        std::set<ExpertRef> experts;
        for (const auto& pair : arr) {
            if (!pair.is_array() || pair.size() != 2)
                throw ConfigError("placement: expert entries must be [layer, expert] pairs");
            ExpertRef e{pair[0].get<int>(), pair[1].get<int>()};
            if (e.layer < 0 || e.layer >= spec.num_layers || e.expert < 0 ||
                e.expert >= spec.experts_per_layer)
                throw ConfigError("placement: expert out of range in server " + key);
            experts.insert(e);
        }
        p.assignment[server] = std::move(experts);
    }
    p.rebuild_index(spec);
    // shared_hosts is derivable; reject files that disagree with it.
    std::set<int> declared;
    for (const auto& v : j["shared_hosts"]) declared.insert(v.get<int>());
    if (declared != p.shared_hosts)
        throw ConfigError("placement: shared_hosts does not match the non-empty servers");
    return p;
}

double auto_beta(const MoEModelSpec& spec, const EdgeTopology& topology, const CostModel& cost) {
    if (topology.links.empty()) return 0.0;
    const double bytes = cost.activation_bytes(spec, 16);
    double total = 0.0;
    for (const LinkSpec& link : topology.links) total += transfer_time(bytes, link);
    return total / static_cast<double>(topology.links.size());
}

double submodel_internal_mass(const SubModel& submodel, const CoActivationMatrix& coact) {
    double mass = 0.0;
    for (int l = 0; l + 1 < static_cast<int>(submodel.layers.size()); ++l)
        for (int i : submodel.layers[l])
            for (int j : submodel.layers[l + 1])
                mass += coact.layer_marginals[l][i] * coact.at(l, i, j);
    return mass;
}

namespace {

// Transition mass connecting expert e at `layer` to the members of `sm` in
// the adjacent layers.
double attach_gain(const SubModel& sm, const CoActivationMatrix& coact, int layer, int e) {
    double gain = 0.0;
    if (layer > 0)
        for (int i : sm.layers[layer - 1])
            gain += coact.layer_marginals[layer - 1][i] * coact.at(layer - 1, i, e);
    if (layer + 1 < coact.num_layers)
        for (int j : sm.layers[layer + 1])
            gain += coact.layer_marginals[layer][e] * coact.at(layer, e, j);
    return gain;
}

}  // namespace

std::vector<SubModel> segment_submodels(const CoActivationMatrix& coact, const MoEModelSpec& spec,
                                        int num_submodels, int replication_budget) {
    const int L = spec.num_layers;
    const int E = spec.experts_per_layer;
    if (coact.num_layers != L || coact.experts_per_layer != E)
        throw StructuralError("segment: co-activation shape does not match the model");
    if (num_submodels < 1) throw ConfigError("segment: num_submodels must be >= 1");
    if (replication_budget < 0) throw ConfigError("segment: replication_budget must be >= 0");
    if (num_submodels > E)
        throw InfeasibleError("segment: more sub-models than experts per layer",
                              static_cast<std::uint64_t>(num_submodels - E));

    const int cap = (E + num_submodels - 1) / num_submodels + 1;
    std::vector<SubModel> subs(num_submodels);
    for (SubModel& sm : subs) sm.layers.assign(L, {});
    std::vector<std::vector<char>> taken(L, std::vector<char>(E, 0));

    // Seed each sub-model with a maximum-probability chain through the
    // layers, claiming one unclaimed expert per layer.
    for (int k = 0; k < num_submodels; ++k) {
        int prev = -1;
        for (int l = 0; l < L; ++l) {
            int best = -1;
            double best_w = -1.0;
            for (int e = 0; e < E; ++e) {
                if (taken[l][e]) continue;
                const double w =
                    l == 0 ? coact.layer_marginals[0][e] : coact.at(l - 1, prev, e);
                if (w > best_w) {
                    best_w = w;
                    best = e;
                }
            }
            subs[k].layers[l].insert(best);
            taken[l][best] = 1;
            prev = best;
        }
    }

    // Grow: repeatedly attach the unclaimed expert with the highest
    // transition mass toward some sub-model's adjacent members.
    int remaining = L * E - num_submodels * L;
    while (remaining > 0) {
        int best_m = -1, best_l = -1, best_e = -1;
        double best_gain = -1.0;
        for (int m = 0; m < num_submodels; ++m) {
            for (int l = 0; l < L; ++l) {
                if (static_cast<int>(subs[m].layers[l].size()) >= cap) continue;
                for (int e = 0; e < E; ++e) {
                    if (taken[l][e]) continue;
                    const double gain = attach_gain(subs[m], coact, l, e);
                    if (gain > best_gain) {
                        best_gain = gain;
                        best_m = m;
                        best_l = l;
                        best_e = e;
                    }
                }
            }
        }
        if (best_m < 0)
            throw StructuralError("segment: no room left under the per-layer balance cap");
        subs[best_m].layers[best_l].insert(best_e);
        taken[best_l][best_e] = 1;
        --remaining;
    }

    // Spend the replication budget on the highest-gain duplicate slots.
    for (int r = 0; r < replication_budget; ++r) {
        int best_m = -1, best_l = -1, best_e = -1;
        double best_gain = 0.0;  // only spend on strictly positive gain
        for (int m = 0; m < num_submodels; ++m) {
            for (int l = 0; l < L; ++l) {
                if (static_cast<int>(subs[m].layers[l].size()) >= cap) continue;
                for (int e = 0; e < E; ++e) {
                    if (subs[m].layers[l].count(e) != 0) continue;
                    const double gain = attach_gain(subs[m], coact, l, e);
                    if (gain > best_gain) {
                        best_gain = gain;
                        best_m = m;
                        best_l = l;
                        best_e = e;
                    }
                }
            }
        }
        if (best_m < 0) break;
        subs[best_m].layers[best_l].insert(best_e);
    }

    // Swap refinement: exchange a member for a non-member while it strictly
    // raises that sub-model's internal mass. Never drops the only copy of an
    // expert.
    std::vector<std::vector<int>> copies(L, std::vector<int>(E, 0));
    for (const SubModel& sm : subs)
        for (int l = 0; l < L; ++l)
            for (int e : sm.layers[l]) ++copies[l][e];

    const int swap_cap = 10 * num_submodels * L * E;
    int swaps = 0;
    bool improved = true;
    while (improved && swaps < swap_cap) {
        improved = false;
        for (int m = 0; m < num_submodels && !improved; ++m) {
            for (int l = 0; l < L && !improved; ++l) {
                for (int e : subs[m].layers[l]) {
                    if (copies[l][e] < 2) continue;
                    double out_gain = attach_gain(subs[m], coact, l, e);
                    int best_f = -1;
                    double best_delta = kImprovementEps;
                    for (int f = 0; f < E; ++f) {
                        if (subs[m].layers[l].count(f) != 0) continue;
                        const double delta = attach_gain(subs[m], coact, l, f) - out_gain;
                        if (delta > best_delta) {
                            best_delta = delta;
                            best_f = f;
                        }
                    }
                    if (best_f >= 0) {
                        subs[m].layers[l].erase(e);
                        subs[m].layers[l].insert(best_f);
                        --copies[l][e];
                        ++copies[l][best_f];
                        ++swaps;
                        improved = true;
                        break;
                    }
                }
            }
        }
    }

    for (int l = 0; l < L; ++l)
        for (int e = 0; e < E; ++e)
            if (copies[l][e] < 1) throw StructuralError("segment: coverage lost during refinement");
    return subs;
}

int route_replica(ExpertRef e, const Placement& placement, int current_server,
                  const NeighborView& view, const EdgeTopology& topology,
                  const MoEModelSpec& spec, const QuantPolicy& quant, const CostModel& cost,
                  const RouteConfig& route) {
    const std::vector<int>& hosts = placement.hosts(e);
    if (hosts.empty()) throw StructuralError("route: expert has no replica");
    const int bits = quant.bits_for(e);
    const double act = cost.activation_bytes(spec, bits);

    const bool local_copy = std::binary_search(hosts.begin(), hosts.end(), current_server);
    if (local_copy) {
        const int avail = view.status_or_default(current_server).avail_compute_pct;
        if (static_cast<double>(avail) >= route.low_water_pct) return current_server;
    }

    int best = -1;
    double best_cost = kInf;
    for (int h : hosts) {
        double xfer = 0.0;
        if (h != current_server) {
            const LinkSpec* link = topology.link_between(current_server, h);
            if (link == nullptr) continue;  // unreachable replica
            xfer = transfer_time(act, *link);
        }
        const double avail_pct = view.status_or_default(h).avail_compute_pct;
        const double avail = std::max(avail_pct, 100.0 / route.queue_clamp) / 100.0;
        const double service = cost.expert_compute_time(spec, topology.servers[h], bits) / avail;
        const double c = xfer + service;
        if (c < best_cost) {
            best_cost = c;
            best = h;
        }
    }
    if (best < 0) {
        if (local_copy) return current_server;
        throw StructuralError("route: no replica reachable from server " +
                              std::to_string(current_server));
    }
    return best;
}

namespace {

// Precomputed per-(layer, expert, current-server) routing decisions and the
// costs the chain model charges for them.
struct RouteTables {
    int S = 0, E = 0, L = 0;
    std::vector<int> host;          // [l][e][g]
    std::vector<double> move_time;  // transfer time from g to host
    std::vector<double> serve_time; // queue-inflated compute at host (one expert pass)

    int idx(int l, int e, int g) const { return (l * E + e) * S + g; }
};

RouteTables build_route_tables(const Placement& placement, const MoEModelSpec& spec,
                               const EdgeTopology& topology, const NeighborView& view,
                               const QuantPolicy& quant, const CostModel& cost,
                               const RouteConfig& route) {
    RouteTables t;
    t.S = static_cast<int>(topology.servers.size());
    t.E = spec.experts_per_layer;
    t.L = spec.num_layers;
    const std::size_t n = static_cast<std::size_t>(t.L) * t.E * t.S;
    t.host.resize(n);
    t.move_time.resize(n);
    t.serve_time.resize(n);
    for (int l = 0; l < t.L; ++l) {
        for (int e = 0; e < t.E; ++e) {
            const ExpertRef ref{l, e};
            const int bits = quant.bits_for(ref);
            const double act = cost.activation_bytes(spec, bits);
            for (int g = 0; g < t.S; ++g) {
                const int h =
                    route_replica(ref, placement, g, view, topology, spec, quant, cost, route);
                const int i = t.idx(l, e, g);
                t.host[i] = h;
                if (h == g) {
                    t.move_time[i] = 0.0;
                } else {
                    const LinkSpec* link = topology.link_between(g, h);
                    t.move_time[i] = link != nullptr ? transfer_time(act, *link) : 0.0;
                }
                const double avail_pct = view.status_or_default(h).avail_compute_pct;
                const double avail = std::max(avail_pct, 100.0 / route.queue_clamp) / 100.0;
                t.serve_time[i] =
                    cost.expert_compute_time(spec, topology.servers[h], bits) / avail;
            }
        }
    }
    return t;
}

}  // namespace

PlacementObjective expected_objective(const Placement& placement, const CoActivationMatrix& coact,
                                      const MoEModelSpec& spec, const EdgeTopology& topology,
                                      const NeighborView& view, const QuantPolicy& quant,
                                      const CostModel& cost, const PlanConfig& config) {
    const int S = static_cast<int>(topology.servers.size());
    const int E = spec.experts_per_layer;
    const int L = spec.num_layers;
    if (coact.num_layers != L || coact.experts_per_layer != E)
        throw StructuralError("objective: co-activation shape does not match the model");
    const RouteTables rt =
        build_route_tables(placement, spec, topology, view, quant, cost, config.route);
    const double k = static_cast<double>(spec.top_k);

    // Entry-host distribution: where a token starts (the previous token's
    // final position). Iterated to its fixpoint so the objective is the
    // steady-state per-token expectation.
    std::vector<double> sigma(S, 0.0);
    sigma[config.ingress_server] = 1.0;

    std::vector<double> rho(static_cast<std::size_t>(E) * S);
    std::vector<double> next(rho.size());
    double latency = 0.0, crossings = 0.0;
    for (int iter = 0; iter < 200; ++iter) {
        latency = 0.0;
        crossings = 0.0;
        std::fill(rho.begin(), rho.end(), 0.0);
        for (int g = 0; g < S; ++g) {
            if (sigma[g] == 0.0) continue;
            for (int j = 0; j < E; ++j) {
                const double mass = sigma[g] * coact.layer_marginals[0][j];
                if (mass == 0.0) continue;
                const int i = rt.idx(0, j, g);
                rho[static_cast<std::size_t>(j) * S + rt.host[i]] += mass;
                latency += mass * (rt.move_time[i] + k * rt.serve_time[i]);
            }
        }
        for (int l = 1; l < L; ++l) {
            std::fill(next.begin(), next.end(), 0.0);
            const std::vector<double>& P = coact.layer_pair(l - 1);
            for (int e = 0; e < E; ++e) {
                const double* row = P.data() + static_cast<std::size_t>(e) * E;
                for (int h = 0; h < S; ++h) {
                    const double m = rho[static_cast<std::size_t>(e) * S + h];
                    if (m == 0.0) continue;
                    for (int j = 0; j < E; ++j) {
                        const double p = row[j];
                        if (p == 0.0) continue;
                        const double mass = m * p;
                        const int i = rt.idx(l, j, h);
                        const int h2 = rt.host[i];
                        next[static_cast<std::size_t>(j) * S + h2] += mass;
                        latency += mass * (rt.move_time[i] + k * rt.serve_time[i]);
                        if (h2 != h) crossings += mass;
                    }
                }
            }
            rho.swap(next);
        }
        std::vector<double> sigma_new(S, 0.0);
        for (int j = 0; j < E; ++j)
            for (int h = 0; h < S; ++h)
                sigma_new[h] += rho[static_cast<std::size_t>(j) * S + h];
        double drift = 0.0;
        for (int h = 0; h < S; ++h) drift += std::abs(sigma_new[h] - sigma[h]);
        sigma = std::move(sigma_new);
        if (drift < 1e-12) break;
    }

    PlacementObjective obj;
    obj.expected_latency_s = latency;
    obj.expected_cross_transitions = crossings;
    obj.alpha = config.alpha;
    obj.beta = config.beta < 0.0 ? auto_beta(spec, topology, cost) : config.beta;
    return obj;
}

namespace {

struct CapacityState {
    std::vector<std::uint64_t> used;  // expert bytes per server (shared excluded)
    std::vector<std::uint64_t> cap;   // gpu + ssd - shared copy
};

CapacityState capacity_state(const EdgeTopology& topology, const MoEModelSpec& spec,
                             int shared_bits) {
    CapacityState cs;
    cs.used.assign(topology.servers.size(), 0);
    cs.cap.resize(topology.servers.size());
    const std::uint64_t shared =
        spec.shared_param_bytes * static_cast<std::uint64_t>(shared_bits) / 16;
    for (std::size_t s = 0; s < topology.servers.size(); ++s) {
        const std::uint64_t raw = topology.servers[s].gpu_mem_bytes + topology.servers[s].ssd_bytes;
        if (shared > raw)
            throw InfeasibleError("plan: shared weights alone exceed server " +
                                      topology.servers[s].name + " capacity",
                                  shared - raw);
        cs.cap[s] = raw - shared;
    }
    return cs;
}

std::uint64_t floor_expert_bytes(const MoEModelSpec& spec, int floor_bits) {
    return spec.expert_param_bytes * static_cast<std::uint64_t>(floor_bits) / 16;
}

// Cheap O(E) estimate of the objective change when one slot moves; used to
// preselect local-search candidates. The authoritative accept/reject signal
// is a full expected_objective evaluation.
double move_surrogate(const Placement& placement, const CoActivationMatrix& coact,
                      const MoEModelSpec& spec, const EdgeTopology& topology,
                      const NeighborView& view, const QuantPolicy& quant, const CostModel& cost,
                      const PlanConfig& config, double beta, ExpertRef e, int from, int to) {
    const int E = spec.experts_per_layer;
    const int l = e.layer;
    const double pi_e = coact.layer_marginals[l][e.expert];
    const auto rep_host = [&](int layer, int expert) { return placement.hosts({layer, expert})[0]; };
    const double act = cost.activation_bytes(spec, quant.bits_for(e));
    const auto xfer = [&](int a, int b) {
        if (a == b) return 0.0;
        const LinkSpec* link = topology.link_between(a, b);
        return link != nullptr ? transfer_time(act, *link) : 1.0;  // 1 s: strongly discouraged
    };
    double d_cross = 0.0, d_lat = 0.0;
    if (l + 1 < spec.num_layers) {
        for (int j = 0; j < E; ++j) {
            const double m = pi_e * coact.at(l, e.expert, j);
            if (m == 0.0) continue;
            const int hj = rep_host(l + 1, j);
            d_cross += m * ((to != hj ? 1.0 : 0.0) - (from != hj ? 1.0 : 0.0));
            d_lat += m * (xfer(to, hj) - xfer(from, hj));
        }
    }
    if (l > 0) {
        for (int i = 0; i < E; ++i) {
            const double m = coact.layer_marginals[l - 1][i] * coact.at(l - 1, i, e.expert);
            if (m == 0.0) continue;
            const int hi = rep_host(l - 1, i);
            d_cross += m * ((hi != to ? 1.0 : 0.0) - (hi != from ? 1.0 : 0.0));
            d_lat += m * (xfer(hi, to) - xfer(hi, from));
        }
    }
    const auto inflated = [&](int h) {
        const double avail_pct = view.status_or_default(h).avail_compute_pct;
        const double avail = std::max(avail_pct, 100.0 / config.route.queue_clamp) / 100.0;
        return cost.expert_compute_time(spec, topology.servers[h], quant.bits_for(e)) / avail;
    };
    d_lat += pi_e * spec.top_k * (inflated(to) - inflated(from));
    return config.alpha * d_lat + beta * d_cross;
}

}  // namespace

Placement place(const std::vector<SubModel>& submodels, const CoActivationMatrix& coact,
                const MoEModelSpec& spec, const EdgeTopology& topology, const NeighborView& view,
                const QuantPolicy& quant, const CostModel& cost, const PlanConfig& config) {
    const int S = static_cast<int>(topology.servers.size());
    if (S == 0) throw ConfigError("place: topology has no servers");
    if (submodels.empty()) throw ConfigError("place: no sub-models to place");

    CapacityState cs = capacity_state(topology, spec, quant.shared_bits);
    const std::uint64_t slot_bytes = floor_expert_bytes(spec, config.capacity_floor_bits);

    // Weighted remaining capacity: servers with more free bytes and more
    // available compute take more expert slots.
    const auto weight = [&](int s) {
        const double avail =
            std::max(1, view.status_or_default(s).avail_compute_pct) / 100.0;
        return static_cast<double>(cs.cap[s] - cs.used[s]) * avail;
    };

    Placement p;
    for (int s = 0; s < S; ++s) p.assignment[s];  // participants, possibly empty

    // Largest sub-model first so the big slices land on the roomiest servers.
    std::vector<int> order(submodels.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        int na = 0, nb = 0;
        for (const auto& layer : submodels[a].layers) na += static_cast<int>(layer.size());
        for (const auto& layer : submodels[b].layers) nb += static_cast<int>(layer.size());
        return na > nb;
    });

    for (int m : order) {
        // Preferred server for the whole sub-model; overflow slots spill to
        // the next-best candidates.
        for (int l = 0; l < static_cast<int>(submodels[m].layers.size()); ++l) {
            for (int e : submodels[m].layers[l]) {
                const ExpertRef ref{l, e};
                std::vector<int> ranked(S);
                std::iota(ranked.begin(), ranked.end(), 0);
                std::stable_sort(ranked.begin(), ranked.end(),
                                 [&](int a, int b) { return weight(a) > weight(b); });
                bool placed = false;
                bool everywhere = true;
                for (int s : ranked) {
                    if (p.assignment[s].count(ref) != 0) continue;  // replica collapse
                    everywhere = false;
                    if (cs.used[s] + slot_bytes > cs.cap[s]) continue;
                    p.assignment[s].insert(ref);
                    cs.used[s] += slot_bytes;
                    placed = true;
                    break;
                }
                if (!placed && !everywhere) {
                    std::uint64_t best_free = 0;
                    for (int s = 0; s < S; ++s) best_free = std::max(best_free, cs.cap[s] - cs.used[s]);
                    throw InfeasibleError("place: no server can take another expert slot",
                                          slot_bytes - best_free);
                }
            }
        }
    }
    p.rebuild_index(spec);
    p.check_coverage(spec);

    // First-improvement local search over single-slot moves and same-layer
    // swaps. Surrogate deltas preselect candidates; every acceptance is
    // confirmed (or reverted) with a full objective evaluation.
    const double beta = config.beta < 0.0 ? auto_beta(spec, topology, cost) : config.beta;
    PlanConfig eval_cfg = config;
    eval_cfg.beta = beta;
    const auto full_value = [&](const Placement& cand) {
        return expected_objective(cand, coact, spec, topology, view, quant, cost, eval_cfg).value();
    };
    const bool tiny =
        static_cast<long long>(p.total_slots()) * S <= 512;  // exact deltas are affordable

    double current = full_value(p);
    int accepted = 0;
    bool any = true;
    while (any && accepted < config.local_search_max_iters) {
        any = false;
        // Slot moves.
        std::vector<std::pair<int, ExpertRef>> slots;
        for (const auto& [s, experts] : p.assignment)
            for (const ExpertRef& e : experts) slots.emplace_back(s, e);
        std::sort(slots.begin(), slots.end(), [](const auto& a, const auto& b) {
            return std::tie(a.second, a.first) < std::tie(b.second, b.first);
        });
        for (const auto& [s, e] : slots) {
            if (accepted >= config.local_search_max_iters) break;
            for (int to = 0; to < S; ++to) {
                if (to == s || p.assignment[to].count(e) != 0) continue;
                if (cs.used[to] + slot_bytes > cs.cap[to]) continue;
                if (!tiny) {
                    const double d = move_surrogate(p, coact, spec, topology, view, quant, cost,
                                                    config, beta, e, s, to);
                    if (d >= -kImprovementEps) continue;
                }
                p.assignment[s].erase(e);
                p.assignment[to].insert(e);
                p.rebuild_index(spec);
                const double cand = full_value(p);
                if (cand < current - kImprovementEps) {
                    current = cand;
                    cs.used[s] -= slot_bytes;
                    cs.used[to] += slot_bytes;
                    ++accepted;
                    any = true;
                    break;
                }
                p.assignment[to].erase(e);
                p.assignment[s].insert(e);
                p.rebuild_index(spec);
            }
        }
        // Same-layer swaps between servers (capacity-neutral).
        for (std::size_t a = 0; a < slots.size() && accepted < config.local_search_max_iters;
             ++a) {
            const auto [sa, ea] = slots[a];
            if (p.assignment[sa].count(ea) == 0) continue;  // moved earlier this pass
            for (std::size_t b = a + 1; b < slots.size(); ++b) {
                const auto [sb, eb] = slots[b];
                if (ea.layer != eb.layer || sa == sb || ea == eb) continue;
                if (p.assignment[sb].count(eb) == 0) continue;
                if (p.assignment[sa].count(eb) != 0 || p.assignment[sb].count(ea) != 0) continue;
                if (!tiny) {
                    const double d =
                        move_surrogate(p, coact, spec, topology, view, quant, cost, config, beta,
                                       ea, sa, sb) +
                        move_surrogate(p, coact, spec, topology, view, quant, cost, config, beta,
                                       eb, sb, sa);
                    if (d >= -kImprovementEps) continue;
                }
                p.assignment[sa].erase(ea);
                p.assignment[sb].erase(eb);
                p.assignment[sa].insert(eb);
                p.assignment[sb].insert(ea);
                p.rebuild_index(spec);
                const double cand = full_value(p);
                if (cand < current - kImprovementEps) {
                    current = cand;
                    ++accepted;
                    any = true;
                    break;
                }
                p.assignment[sa].erase(eb);
                p.assignment[sb].erase(ea);
                p.assignment[sa].insert(ea);
                p.assignment[sb].insert(eb);
                p.rebuild_index(spec);
            }
        }
    }
    p.rebuild_index(spec);
    p.check_coverage(spec);
    return p;
}

Placement brute_force_place(const CoActivationMatrix& coact, const MoEModelSpec& spec,
                            const EdgeTopology& topology, const NeighborView& view,
                            const QuantPolicy& quant, const CostModel& cost,
                            const PlanConfig& config, double max_assignments) {
    const int S = static_cast<int>(topology.servers.size());
    const int L = spec.num_layers;
    const int E = spec.experts_per_layer;
    const int slots = L * E;
    const double space = std::pow(static_cast<double>(S), static_cast<double>(slots));
    if (!(space <= max_assignments))
        throw ConfigError("brute_force: assignment space exceeds the enumeration guard");

    PlanConfig eval_cfg = config;
    eval_cfg.beta = config.beta < 0.0 ? auto_beta(spec, topology, cost) : config.beta;

    const std::uint64_t shared = quant.shared_resident_bytes(spec);
    std::vector<std::uint64_t> expert_bytes(static_cast<std::size_t>(slots));
    for (int l = 0; l < L; ++l)
        for (int e = 0; e < E; ++e)
            expert_bytes[static_cast<std::size_t>(l) * E + e] =
                quant.expert_resident_bytes({l, e}, spec);

    std::vector<int> digits(static_cast<std::size_t>(slots), 0);
    std::vector<std::uint64_t> used(static_cast<std::size_t>(S));
    Placement best;
    double best_value = kInf;
    bool found = false;
    while (true) {
        // Capacity screen.
        std::fill(used.begin(), used.end(), 0);
        for (int i = 0; i < slots; ++i) used[digits[i]] += expert_bytes[i];
        bool feasible = true;
        for (int s = 0; s < S; ++s) {
            const std::uint64_t cap =
                topology.servers[s].gpu_mem_bytes + topology.servers[s].ssd_bytes;
            if (used[s] > 0 && used[s] + shared > cap) {
                feasible = false;
                break;
            }
        }
        if (feasible) {
            Placement cand;
            for (int i = 0; i < slots; ++i)
                cand.assignment[digits[i]].insert({i / E, i % E});
            cand.rebuild_index(spec);
            const double v =
                expected_objective(cand, coact, spec, topology, view, quant, cost, eval_cfg)
                    .value();
            if (v < best_value - kImprovementEps) {
                best_value = v;
                best = std::move(cand);
                found = true;
            }
        }
        // Odometer increment, last slot fastest; first minimum wins ties.
        int pos = slots - 1;
        while (pos >= 0 && digits[pos] == S - 1) digits[pos--] = 0;
        if (pos < 0) break;
        ++digits[pos];
    }
    if (!found) throw InfeasibleError("brute_force: no capacity-feasible assignment", 0);
    return best;
}

DeploymentPlan plan_deployment(const CoActivationMatrix& coact, const MoEModelSpec& spec,
                               const EdgeTopology& topology, const NeighborView& view,
                               const CostModel& cost, const PlanConfig& config,
                               bool quantize_enabled, int shared_bits) {
    const int S = static_cast<int>(topology.servers.size());
    const int K = config.num_submodels > 0 ? config.num_submodels : S;

    DeploymentPlan best;
    double best_value = kInf;
    bool found = false;
    std::string last_error;
    for (int r = 0; r <= config.replication_budget; ++r) {
        try {
            std::vector<SubModel> subs = segment_submodels(coact, spec, K, r);
            PlanConfig pc = config;
            pc.capacity_floor_bits = quantize_enabled ? 4 : 16;
            QuantPolicy route_quant = QuantPolicy::uniform(spec, 16);
            route_quant.shared_bits = shared_bits;
            Placement placement =
                place(subs, coact, spec, topology, view, route_quant, cost, pc);

            QuantPolicy quant;
            if (quantize_enabled) {
                std::map<int, std::uint64_t> budgets;
                const std::uint64_t shared =
                    spec.shared_param_bytes * static_cast<std::uint64_t>(shared_bits) / 16;
                for (const auto& [s, experts] : placement.assignment) {
                    if (experts.empty()) continue;
                    const ServerSpec& srv = topology.servers[s];
                    budgets[s] = srv.gpu_mem_bytes + srv.ssd_bytes - shared;
                }
                quant = assign_bitwidths(coact.layer_marginals, placement.assignment, spec,
                                         budgets, shared_bits);
            } else {
                quant = QuantPolicy::uniform(spec, 16);
                quant.shared_bits = shared_bits;
            }
            placement.check_capacity(spec, topology, quant);

            const PlacementObjective obj =
                expected_objective(placement, coact, spec, topology, view, quant, cost, config);
            if (obj.value() < best_value - kImprovementEps) {
                best_value = obj.value();
                best.submodels = std::move(subs);
                best.placement = std::move(placement);
                best.quant = std::move(quant);
                best.objective = obj;
                best.replication_used = best.placement.total_slots() - spec.total_experts();
                found = true;
            }
        } catch (const InfeasibleError& ex) {
            last_error = ex.what();
        }
    }
    if (!found)
        throw InfeasibleError("plan: no feasible deployment found" +
                                  (last_error.empty() ? std::string() : " (" + last_error + ")"),
                              0);
    return best;
}

}  // namespace moedge
