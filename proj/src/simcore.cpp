// SPDX-License-Identifier: Apache-2.0
#include "moedge/simcore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>

namespace moedge {

ReplanSignal check_replan(const std::vector<std::vector<double>>& baseline_popularity,
                          const std::vector<std::vector<double>>& current_popularity,
                          const std::map<int, ResourceStatus>& baseline_resources,
                          const std::map<int, ResourceStatus>& current_resources,
                          const ReplanTriggerConfig& config) {
    config.validate();
    if (baseline_popularity.size() != current_popularity.size())
        throw StructuralError("check_replan: popularity layer count mismatch");
    ReplanSignal sig;
    double tv_sum = 0.0;
    for (std::size_t l = 0; l < current_popularity.size(); ++l) {
        const auto& p = baseline_popularity[l];
        const auto& q = current_popularity[l];
        if (p.size() != q.size())
            throw StructuralError("check_replan: popularity width mismatch");
        double tv = 0.0;
        for (std::size_t e = 0; e < p.size(); ++e) tv += std::abs(p[e] - q[e]);
        tv_sum += 0.5 * tv;
    }
    sig.popularity_tv =
        current_popularity.empty() ? 0.0 : tv_sum / static_cast<double>(current_popularity.size());
    sig.popularity_shift = sig.popularity_tv > config.popularity_tv_threshold;

    for (const auto& [server, cur] : current_resources) {
        ResourceStatus base;
        if (auto it = baseline_resources.find(server); it != baseline_resources.end())
            base = it->second;
        const double dc = std::abs(cur.avail_compute_pct - base.avail_compute_pct);
        const double dm = std::abs(cur.avail_gpu_mem_pct - base.avail_gpu_mem_pct);
        sig.max_resource_delta_pct = std::max({sig.max_resource_delta_pct, dc, dm});
    }
    sig.resource_shift = sig.max_resource_delta_pct > config.resource_threshold_pct;
    return sig;
}

UpgradeSource precision_upgrade(ExpertRef /*e*/, int target_bits, int requester,
                                const std::map<int, int>& holder_bits,
                                const EdgeTopology& topology, const MoEModelSpec& spec) {
    if (target_bits != 8 && target_bits != 16)
        throw ConfigError("upgrade: target_bits must be 8 or 16");
    // Peers ship the target width; the cloud master only exists at full
    // precision, so a cloud download always moves 16-bit bytes.
    const std::uint64_t peer_bytes =
        spec.expert_param_bytes * static_cast<std::uint64_t>(target_bits) / 16;
    const std::uint64_t cloud_bytes = spec.expert_param_bytes;

    UpgradeSource best;
    double best_time = 0.0;
    bool have_peer = false;
    for (const auto& [server, bits] : holder_bits) {
        if (server == requester || bits < target_bits) continue;
        const LinkSpec* link = topology.link_between(requester, server);
        if (link == nullptr) continue;
        const double t = transfer_time(static_cast<double>(peer_bytes), *link);
        if (!have_peer || t < best_time) {
            have_peer = true;
            best_time = t;
            best.server = server;
        }
    }
    if (have_peer) {
        best.from_cloud = false;
        best.transfer_s = best_time;
        best.bytes = peer_bytes;
        // The cloud only wins when it is strictly faster than every peer.
        if (topology.cloud) {
            const double tc = transfer_time(static_cast<double>(cloud_bytes),
                                            topology.cloud->bandwidth,
                                            topology.cloud->propagation_latency_s);
            if (tc < best_time) {
                best.server = -1;
                best.from_cloud = true;
                best.transfer_s = tc;
                best.bytes = cloud_bytes;
            }
        }
        return best;
    }
    if (topology.cloud) {
        best.server = -1;
        best.from_cloud = true;
        best.transfer_s = transfer_time(static_cast<double>(cloud_bytes),
                                        topology.cloud->bandwidth,
                                        topology.cloud->propagation_latency_s);
        best.bytes = cloud_bytes;
        return best;
    }
    throw InfeasibleError("upgrade: no peer holds the expert wide enough and no cloud uplink",
                          cloud_bytes);
}

UpgradeSource precision_upgrade(ExpertRef e, int target_bits, int requester,
                                const Placement& placement, const QuantPolicy& quant,
                                const EdgeTopology& topology, const MoEModelSpec& spec) {
    std::map<int, int> holders;
    for (int h : placement.hosts(e)) holders[h] = quant.bits_for(e);
    return precision_upgrade(e, target_bits, requester, holders, topology, spec);
}

namespace {

// Deterministic event ordering: time, then kind priority, then insertion
// sequence. Enum order encodes the tie-break priority.
enum class EvKind : int {
    TransferComplete = 0,
    LoadComplete = 1,
    LayerComplete = 2,
    HelloTick = 3,
    ReplanCheck = 4,
    RequestArrival = 5,
};

struct Ev {
    double t = 0.0;
    EvKind kind = EvKind::RequestArrival;
    std::uint64_t seq = 0;
    int req = -1;
    int token = -1;  // -1 in a LayerComplete means a prefill barrier
    int layer = -1;
    int server = -1;
    ExpertRef expert{};
    int plan = -1;
    bool resource_change = false;
    int rc_compute = 100;
    int rc_mem = 100;
    bool plan_apply = false;
};

struct EvAfter {
    bool operator()(const Ev& a, const Ev& b) const {
        if (a.t != b.t) return a.t > b.t;
        if (a.kind != b.kind) return static_cast<int>(a.kind) > static_cast<int>(b.kind);
        return a.seq > b.seq;
    }
};

std::uint64_t hosting_servers(const Placement& placement) {
    std::uint64_t n = 0;
    for (const auto& [s, experts] : placement.assignment)
        if (!experts.empty()) ++n;
    return n;
}

struct PlanRt {
    Placement placement;
    QuantPolicy quant;
    std::vector<std::map<ExpertRef, int>> pool_of;  // per server
    std::vector<ExpertCacheState> caches;           // per server
    int outstanding = 0;                            // requests still using this plan
    bool ever_active = false;
};

struct ServerRt {
    std::vector<double> gpu_free;
    BusTimeline bus;
    // Background channel for prefetch I/O: demand loads have bus priority, so
    // speculative transfers never delay a miss that is blocking a token.
    BusTimeline prefetch_bus;
    ResourceStatus truth;
    ResourceStatus last_adv;
    std::uint32_t next_seq = 1;
    NeighborView view;
    std::vector<int> neighbors;
};

struct ReqRt {
    int id = 0;
    double arrival_s = 0.0;
    int input_len = 0;
    int output_len = 0;
    int plan = 0;
    enum class Phase { prefill, decode, done } phase = Phase::prefill;
    int pos_server = 0;
    int pos_pool = 0;
    int decode_token = 0;
    double token_start_s = 0.0;
    LatencyBreakdown tok;
    std::vector<std::pair<int, ExpertRef>> pinned;  // (server, expert) held this layer
    // Prefill batch state.
    std::vector<int> active_tokens;  // global trace token ids
    std::vector<int> tok_server;
    std::vector<int> tok_pool;
};

class Engine {
public:
    Engine(const SimInputs& in, int input_len, int output_len, std::uint64_t seed)
        : in_(in),
          sc_(in.scenario),
          spec_(in.scenario.model),
          input_len_(input_len),
          output_len_(output_len),
          seed_(seed) {}

    SimReport run();

private:
    // --- setup -----------------------------------------------------------
    void init_plan(PlanRt& plan) const;
    void init_servers();
    void seed_events();

    // --- event handlers --------------------------------------------------
    void on_arrival(const Ev& ev);
    void on_layer_complete(const Ev& ev);
    void on_load_complete(const Ev& ev);
    void on_hello(const Ev& ev);
    void on_replan_check(const Ev& ev);

    // --- token machinery ---------------------------------------------------
    void decode_layer(ReqRt& r, int token, int layer, double t_ready);
    void prefill_layer(ReqRt& r, int layer, double t_ready);
    void finish_request(ReqRt& r, double now);
    void record_token(ReqRt& r, double end);

    // --- plumbing ----------------------------------------------------------
    void push(Ev ev) {
        ev.seq = next_seq_++;
        queue_.push(ev);
    }
    double& link_slot(int a, int b) { return link_free_[a < b ? std::pair(a, b) : std::pair(b, a)]; }
    // One LAN hop src->dst. Reserves the link FIFO, counts the transfer, and
    // returns the arrival time.
    double lan_hop(int src, int dst, double bytes, double ready, LatencyBreakdown* comp,
                   bool handoff, int req, int token, int layer);
    // src->dst delivery, relaying through the smallest-id common neighbor
    // when no direct link exists.
    double lan_deliver(int src, int dst, double bytes, double ready, LatencyBreakdown* comp,
                       bool handoff, int req, int token, int layer);
    double bus_hop(int server, double bytes, double ready, LatencyBreakdown* comp);
    int route_from(int current, ExpertRef e, const PlanRt& plan) const;
    double expert_ct(ExpertRef e, int server, const PlanRt& plan) const {
        return sc_.cost.expert_compute_time(spec_, sc_.topology.servers[server],
                                            plan.quant.bits_for(e));
    }
    double act_bytes(ExpertRef e, const PlanRt& plan) const {
        return sc_.cost.activation_bytes(spec_, plan.quant.bits_for(e));
    }
    ExpertCacheState::AccessResult cache_access(PlanRt& plan, int server, ExpertRef e, double now);
    void issue_prefetch(ReqRt& r, std::span<const int> selections, int layer, double now);
    void observe_token_layer(int token, int layer);
    CoActivationMatrix live_estimate() const;
    void advertise(int server, double now);
    void sample_peaks();
    bool work_pending() const { return completed_ < sc_.workload.num_requests; }

    // --- inputs ------------------------------------------------------------
    const SimInputs& in_;
    const Scenario& sc_;
    const MoEModelSpec& spec_;
    int input_len_;
    int output_len_;
    std::uint64_t seed_;

    // --- state ---------------------------------------------------------------
    RoutingTrace trace_;
    PopularityModel popularity_;
    std::vector<std::vector<double>> baseline_pop_;
    std::map<int, ResourceStatus> baseline_res_;
    std::vector<PlanRt> plans_;
    int active_plan_ = 0;
    bool migration_pending_ = false;
    std::vector<ServerRt> servers_;
    std::map<std::pair<int, int>, double> link_free_;
    std::priority_queue<Ev, std::vector<Ev>, EvAfter> queue_;
    std::uint64_t next_seq_ = 0;
    std::vector<ReqRt> reqs_;
    int completed_ = 0;
    double last_completion_ = 0.0;

    // Streaming transition counts for the live co-activation estimate.
    std::vector<std::vector<double>> trans_counts_;  // [layer-1][i*E+j]
    std::vector<std::vector<double>> sel_counts_;    // [layer][e]

    // --- metrics ---------------------------------------------------------------
    SimReport rep_;
    std::vector<double> token_latencies_;
};

void Engine::init_plan(PlanRt& plan) const {
    const int S = static_cast<int>(sc_.topology.servers.size());
    plan.pool_of.assign(S, {});
    plan.caches.assign(S, {});
    const std::uint64_t shared = plan.quant.shared_resident_bytes(spec_);
    for (const auto& [s, experts] : plan.placement.assignment) {
        if (experts.empty()) continue;
        const ServerSpec& srv = sc_.topology.servers[s];
        if (shared > srv.gpu_mem_bytes)
            throw InfeasibleError("sim: shared weights exceed GPU memory on " + srv.name,
                                  shared - srv.gpu_mem_bytes);
        const std::uint64_t budget = srv.gpu_mem_bytes - shared;
        std::uint64_t largest = 0;
        for (const ExpertRef& e : experts)
            largest = std::max(largest, plan.quant.expert_resident_bytes(e, spec_));
        if (largest > budget)
            throw InfeasibleError("sim: GPU expert budget on " + srv.name +
                                      " cannot hold the largest placed expert",
                                  largest - budget);
        // Experts of one layer round-robin across the server's GPUs so a
        // prefill batch can use them in parallel.
        int layer = -1, rank = 0;
        for (const ExpertRef& e : experts) {
            if (e.layer != layer) {
                layer = e.layer;
                rank = 0;
            }
            plan.pool_of[s][e] = rank++ % srv.gpu_count;
        }
        plan.caches[s] =
            ExpertCacheState(budget, spec_, plan.quant, experts, sc_.cache_headroom());
        // Deployment ships weights before serving starts: warm the cache
        // with the most popular placed experts that fit.
        std::vector<ExpertRef> order(experts.begin(), experts.end());
        std::stable_sort(order.begin(), order.end(), [&](const ExpertRef& a, const ExpertRef& b) {
            return popularity_.score(a) > popularity_.score(b);
        });
        plan.caches[s].preload(order);
    }
}

void Engine::init_servers() {
    const int S = static_cast<int>(sc_.topology.servers.size());
    servers_.resize(S);
    for (int s = 0; s < S; ++s) {
        ServerRt& rt = servers_[s];
        rt.gpu_free.assign(sc_.topology.servers[s].gpu_count, 0.0);
        rt.truth = ResourceStatus{100, 100, 0.0};
        rt.last_adv = ResourceStatus{100, 100, -sc_.perception.hello_period_s};
        for (const LinkSpec& l : sc_.topology.links) {
            if (l.a == s) rt.neighbors.push_back(l.b);
            if (l.b == s) rt.neighbors.push_back(l.a);
        }
        std::sort(rt.neighbors.begin(), rt.neighbors.end());
        // A server always knows its own state without a wire message.
        rt.view.observe(HelloMessage{static_cast<std::uint32_t>(s), rt.next_seq++, rt.truth});
        baseline_res_[s] = rt.truth;
    }
}

void Engine::seed_events() {
    for (int i = 0; i < sc_.workload.num_requests; ++i) {
        Ev ev;
        ev.t = sc_.arrival_spacing_s * i;
        ev.kind = EvKind::RequestArrival;
        ev.req = i;
        push(ev);
    }
    for (int s = 0; s < static_cast<int>(servers_.size()); ++s) {
        Ev ev;
        ev.t = 0.0;
        ev.kind = EvKind::HelloTick;
        ev.server = s;
        push(ev);
    }
    if (sc_.replanning.enabled) {
        Ev ev;
        ev.t = sc_.replanning.check_period_s;
        ev.kind = EvKind::ReplanCheck;
        push(ev);
    }
    for (const ResourceEvent& re : sc_.resource_events) {
        Ev ev;
        ev.t = re.time_s;
        ev.kind = EvKind::HelloTick;
        ev.server = re.server;
        ev.resource_change = true;
        ev.rc_compute = re.avail_compute_pct;
        ev.rc_mem = re.avail_gpu_mem_pct;
        push(ev);
    }
}

double Engine::lan_hop(int src, int dst, double bytes, double ready, LatencyBreakdown* comp,
                       bool handoff, int req, int token, int layer) {
    const LinkSpec* link = sc_.topology.link_between(src, dst);
    if (link == nullptr)
        throw StructuralError("sim: no link between servers " + std::to_string(src) + " and " +
                              std::to_string(dst));
    double& free_at = link_slot(src, dst);
    const double start = std::max(ready, free_at);
    const double wire = bytes / link->bandwidth;
    free_at = start + wire;
    const double arrive = start + wire + link->propagation_latency_s;
    if (comp != nullptr) {
        comp->queue_s += start - ready;
        comp->transfer_s += wire + link->propagation_latency_s;
    }
    if (handoff) {
        ++rep_.token_handoff_transfers;
        rep_.token_handoff_bytes += bytes;
    } else {
        ++rep_.cross_server_transfers;
        rep_.cross_server_bytes += bytes;
    }
    Ev ev;
    ev.t = arrive;
    ev.kind = EvKind::TransferComplete;
    ev.req = req;
    ev.token = token;
    ev.layer = layer;
    ev.server = dst;
    push(ev);
    return arrive;
}

double Engine::lan_deliver(int src, int dst, double bytes, double ready, LatencyBreakdown* comp,
                           bool handoff, int req, int token, int layer) {
    if (src == dst) return ready;
    if (sc_.topology.link_between(src, dst) != nullptr)
        return lan_hop(src, dst, bytes, ready, comp, handoff, req, token, layer);
    for (int w = 0; w < static_cast<int>(servers_.size()); ++w) {
        if (w == src || w == dst) continue;
        if (sc_.topology.link_between(src, w) == nullptr ||
            sc_.topology.link_between(w, dst) == nullptr)
            continue;
        const double mid = lan_hop(src, w, bytes, ready, comp, handoff, req, token, layer);
        return lan_hop(w, dst, bytes, mid, comp, handoff, req, token, layer);
    }
    throw StructuralError("sim: no one-relay path between servers " + std::to_string(src) +
                          " and " + std::to_string(dst));
}

double Engine::bus_hop(int server, double bytes, double ready, LatencyBreakdown* comp) {
    const ServerSpec& srv = sc_.topology.servers[server];
    const double wire = bytes / srv.intra_bus_bandwidth;
    const double start = servers_[server].bus.reserve(ready, wire);
    if (comp != nullptr) {
        comp->queue_s += start - ready;
        comp->transfer_s += wire + srv.intra_bus_latency_s;
    }
    return start + wire + srv.intra_bus_latency_s;
}

int Engine::route_from(int current, ExpertRef e, const PlanRt& plan) const {
    return route_replica(e, plan.placement, current, servers_[current].view, sc_.topology, spec_,
                         plan.quant, sc_.cost, sc_.placement.route);
}

ExpertCacheState::AccessResult Engine::cache_access(PlanRt& plan, int server, ExpertRef e,
                                                    double now) {
    ExpertCacheState& cache = plan.caches[server];
    auto res = cache.access(e, now, servers_[server].bus,
                            sc_.topology.servers[server].intra_bus_bandwidth, popularity_);
    if (res.demand_load) {
        Ev ev;
        ev.t = res.demand_load->completion_s;
        ev.kind = EvKind::LoadComplete;
        ev.server = server;
        ev.expert = e;
        ev.plan = static_cast<int>(&plan - plans_.data());
        push(ev);
    }
    if (sc_.paging.verify_every_event) cache.check_budget();
    return res;
}

void Engine::issue_prefetch(ReqRt& r, std::span<const int> selections, int layer, double now) {
    if (sc_.paging.prefetch_depth == 0 || sc_.paging.prefetch_per_layer == 0) return;
    PlanRt& plan = plans_[r.plan];
    const auto predictions = predict_ahead(popularity_, selections, layer, in_.coact,
                                           sc_.paging.prefetch_depth, sc_.paging.blend_gamma);
    // Candidates per server, nearest predicted layer first.
    std::map<int, std::vector<ExpertRef>> per_server;
    for (const RankedLayer& rl : predictions) {
        const int take = std::min<int>(sc_.paging.prefetch_per_layer,
                                       static_cast<int>(rl.ranked.size()));
        for (int i = 0; i < take; ++i) {
            const ExpertRef e{rl.layer, rl.ranked[i]};
            const int target = route_from(r.pos_server, e, plan);
            per_server[target].push_back(e);
        }
    }
    for (auto& [server, candidates] : per_server) {
        auto cmds = plan.caches[server].schedule_prefetch(
            candidates, now, servers_[server].prefetch_bus,
            sc_.topology.servers[server].intra_bus_bandwidth, popularity_);
        for (const auto& cmd : cmds) {
            Ev ev;
            ev.t = cmd.completion_s;
            ev.kind = EvKind::LoadComplete;
            ev.server = server;
            ev.expert = cmd.expert;
            ev.plan = r.plan;
            push(ev);
        }
        if (sc_.paging.verify_every_event) plan.caches[server].check_budget();
    }
}

void Engine::observe_token_layer(int token, int layer) {
    const int k = spec_.top_k;
    std::vector<int> sels(k);
    for (int s = 0; s < k; ++s) sels[s] = trace_.selection(token, layer, s);
    popularity_.observe_layer(layer, sels);
    for (int s = 0; s < k; ++s) sel_counts_[layer][sels[s]] += 1.0;
    if (layer > 0) {
        const double w = 1.0 / static_cast<double>(k);
        for (int a = 0; a < k; ++a) {
            const int i = trace_.selection(token, layer - 1, a);
            for (int b = 0; b < k; ++b)
                trans_counts_[layer - 1][static_cast<std::size_t>(i) * spec_.experts_per_layer +
                                         sels[b]] += w;
        }
    }
}

CoActivationMatrix Engine::live_estimate() const {
    CoActivationMatrix m;
    m.num_layers = spec_.num_layers;
    m.experts_per_layer = spec_.experts_per_layer;
    m.transitions.resize(spec_.num_layers - 1);
    const int E = spec_.experts_per_layer;
    for (int l = 0; l + 1 < spec_.num_layers; ++l) {
        m.transitions[l] = trans_counts_[l];
        for (int i = 0; i < E; ++i) {
            double row = 0.0;
            for (int j = 0; j < E; ++j) row += m.transitions[l][i * E + j];
            if (row > 0.0)
                for (int j = 0; j < E; ++j) m.transitions[l][i * E + j] /= row;
        }
    }
    m.layer_marginals.resize(spec_.num_layers);
    for (int l = 0; l < spec_.num_layers; ++l) {
        m.layer_marginals[l] = sel_counts_[l];
        double total = 0.0;
        for (double v : m.layer_marginals[l]) total += v;
        if (total > 0.0)
            for (double& v : m.layer_marginals[l]) v /= total;
        else
            m.layer_marginals[l].assign(E, 1.0 / E);
    }
    return m;
}

void Engine::advertise(int server, double now) {
    ServerRt& rt = servers_[server];
    ResourceStatus current = rt.truth;
    current.timestamp_s = now;
    auto msg = maybe_advertise(current, rt.last_adv, sc_.perception.threshold_pct,
                               sc_.perception.hello_period_s, now,
                               static_cast<std::uint32_t>(server), rt.next_seq);
    if (!msg) return;
    ++rt.next_seq;
    rt.last_adv = current;
    rt.view.observe(*msg);  // keep self-knowledge at least as fresh as neighbors'
    const HelloWire wire = encode_hello(msg->status, msg->sender, msg->sequence);
    for (int n : rt.neighbors) {
        const HelloMessage decoded = decode_hello(wire);
        servers_[n].view.observe(decoded);
        ++rep_.hello_messages;
        rep_.hello_bytes += kHelloWireBytes;
    }
}

void Engine::sample_peaks() {
    for (int s = 0; s < static_cast<int>(servers_.size()); ++s) {
        std::uint64_t shared = 0;
        std::uint64_t experts = 0;
        for (const PlanRt& plan : plans_) {
            if (!plan.ever_active && plan.outstanding == 0) continue;
            const auto it = plan.placement.assignment.find(s);
            if (it == plan.placement.assignment.end() || it->second.empty()) continue;
            // One physical shared copy serves every coexisting plan version.
            shared = std::max(shared, plan.quant.shared_resident_bytes(spec_));
            experts += plan.caches[s].occupancy_bytes();
        }
        const std::uint64_t total = shared + experts;
        auto& peak = rep_.peak_resident_bytes[sc_.topology.servers[s].name];
        peak = std::max(peak, total);
    }
}

void Engine::decode_layer(ReqRt& r, int token, int layer, double t_ready) {
    PlanRt& plan = plans_[r.plan];
    const int k = spec_.top_k;
    std::vector<int> sels(k);
    for (int s = 0; s < k; ++s) sels[s] = trace_.selection(token, layer, s);

    // Route every slot from the token's current position.
    std::vector<int> hosts(k);
    for (int s = 0; s < k; ++s) hosts[s] = route_from(r.pos_server, ExpertRef{layer, sels[s]}, plan);
    const int h0 = hosts[0];
    const ExpertRef e0{layer, sels[0]};
    const int pool0 = plan.pool_of[h0].at(e0);

    // Pin the whole working set before prefetch can evict anything.
    for (int s = 0; s < k; ++s) {
        plan.caches[hosts[s]].pin(ExpertRef{layer, sels[s]});
        r.pinned.emplace_back(hosts[s], ExpertRef{layer, sels[s]});
    }
    issue_prefetch(r, sels, layer, t_ready);

    // Group slots by serving host; one outbound transfer per remote host.
    std::map<int, std::vector<ExpertRef>> by_host;
    for (int s = 0; s < k; ++s) by_host[hosts[s]].push_back(ExpertRef{layer, sels[s]});

    struct Branch {
        double end = 0.0;
        LatencyBreakdown comp;
    };
    std::vector<Branch> branches;
    for (auto& [d, experts] : by_host) {
        double a_d = t_ready;
        LatencyBreakdown arrive_comp;
        if (d != r.pos_server) {
            double bytes = 0.0;
            for (const ExpertRef& e : experts) bytes += act_bytes(e, plan);
            a_d = lan_deliver(r.pos_server, d, bytes, t_ready, &arrive_comp,
                              /*handoff=*/layer == 0, r.id, token, layer);
        }
        for (const ExpertRef& e : experts) {
            Branch br;
            br.comp = arrive_comp;
            double at = a_d;
            const int pool = plan.pool_of[d].at(e);
            if (d == r.pos_server && pool != r.pos_pool)
                at = bus_hop(d, act_bytes(e, plan), at, &br.comp);
            auto acc = cache_access(plan, d, e, at);
            br.comp.stall_s += acc.stall_s;
            at += acc.stall_s;
            const double ct = expert_ct(e, d, plan);
            rep_.total_expert_compute_s += ct;
            double& gpu = servers_[d].gpu_free[pool];
            const double start = std::max(at, gpu);
            br.comp.queue_s += start - at;
            br.comp.compute_s += ct;
            gpu = start + ct;
            double end = start + ct;
            rep_.penalties.quantization_penalty +=
                plan.quant.quality_penalty_table.at(plan.quant.bits_for(e));
            // Results converge on the primary expert's GPU.
            if (d != h0) {
                end = lan_deliver(d, h0, act_bytes(e, plan), end, &br.comp,
                                  /*handoff=*/false, r.id, token, layer);
            } else if (pool != pool0) {
                end = bus_hop(d, act_bytes(e, plan), end, &br.comp);
            }
            br.end = end;
            branches.push_back(br);
        }
    }

    // Critical path: the branch finishing last (first one on ties).
    const Branch* crit = &branches.front();
    for (const Branch& b : branches)
        if (b.end > crit->end) crit = &b;
    r.tok.compute_s += crit->comp.compute_s;
    r.tok.stall_s += crit->comp.stall_s;
    r.tok.transfer_s += crit->comp.transfer_s;
    r.tok.queue_s += crit->comp.queue_s;

    r.pos_server = h0;
    r.pos_pool = pool0;

    Ev ev;
    ev.t = crit->end;
    ev.kind = EvKind::LayerComplete;
    ev.req = r.id;
    ev.token = token;
    ev.layer = layer;
    push(ev);
}

void Engine::prefill_layer(ReqRt& r, int layer, double t_ready) {
    PlanRt& plan = plans_[r.plan];
    const int k = spec_.top_k;
    const int n = static_cast<int>(r.active_tokens.size());

    struct SlotUse {
        int token_idx = 0;  // index into active_tokens
        ExpertRef e;
        int src = 0;
        int dst = 0;
    };
    std::vector<SlotUse> uses;
    uses.reserve(static_cast<std::size_t>(n) * k);
    std::vector<int> primary_host(n), primary_pool(n);
    for (int i = 0; i < n; ++i) {
        const int token = r.active_tokens[i];
        for (int s = 0; s < k; ++s) {
            SlotUse u;
            u.token_idx = i;
            u.e = ExpertRef{layer, trace_.selection(token, layer, s)};
            u.src = r.tok_server[i];
            u.dst = route_from(u.src, u.e, plan);
            if (s == 0) {
                primary_host[i] = u.dst;
                primary_pool[i] = plan.pool_of[u.dst].at(u.e);
            }
            uses.push_back(u);
            rep_.penalties.quantization_penalty +=
                plan.quant.quality_penalty_table.at(plan.quant.bits_for(u.e));
        }
    }

    // Token fusion collapses same-destination activations before they cross
    // the network: group per (src, dst, expert) and ship one centroid per
    // cluster of near-parallel activation vectors.
    std::map<std::tuple<int, int, ExpertRef>, std::vector<int>> groups;  // -> token idxs
    for (const SlotUse& u : uses) groups[{u.src, u.dst, u.e}].push_back(u.token_idx);

    std::map<std::pair<int, int>, double> wire_bytes;              // (src,dst) -> bytes
    std::map<std::pair<int, ExpertRef>, int> passes;               // (dst,e) -> compute passes
    std::map<std::pair<int, ExpertRef>, std::set<int>> feed_srcs;  // (dst,e) -> sources
    for (auto& [key, token_idxs] : groups) {
        const auto& [src, dst, e] = key;
        int group_count = static_cast<int>(token_idxs.size());
        if (sc_.fusion.enabled && group_count > 1) {
            std::vector<std::vector<float>> batch;
            batch.reserve(token_idxs.size());
            for (int idx : token_idxs)
                batch.push_back(activation_vector(trace_, spec_, r.active_tokens[idx], layer,
                                                  sc_.workload.cluster_noise));
            const FusionResult fr = fuse_tokens(batch, sc_.fusion, spec_);
            group_count = static_cast<int>(fr.fused.size());
            rep_.merged_tokens += fr.merged_tokens;
            rep_.fusion_volume_saved_bytes += fr.volume_saved_bytes;
            rep_.penalties.fusion_penalty +=
                sc_.fusion.penalty_per_merged_token * fr.merged_tokens;
        }
        if (src != dst) wire_bytes[{src, dst}] += group_count * act_bytes(e, plan);
        passes[{dst, e}] += group_count;
        feed_srcs[{dst, e}].insert(src);
    }

    // One batched transfer per (src, dst) pair per layer.
    std::map<std::pair<int, int>, double> arrivals;
    for (const auto& [pair, bytes] : wire_bytes)
        arrivals[pair] = lan_deliver(pair.first, pair.second, bytes, t_ready, nullptr,
                                     /*handoff=*/layer == 0, r.id, -1, layer);

    double barrier = t_ready;
    std::map<std::pair<int, ExpertRef>, double> expert_end;
    for (auto& [key, pass_count] : passes) {
        const auto& [dst, e] = key;
        double ready = t_ready;
        for (int src : feed_srcs[key])
            if (src != dst) ready = std::max(ready, arrivals[{src, dst}]);
        plan.caches[dst].pin(e);
        r.pinned.emplace_back(dst, e);
        const auto acc = cache_access(plan, dst, e, ready);
        ready += acc.stall_s;
        const int pool = plan.pool_of[dst].at(e);
        double& gpu = servers_[dst].gpu_free[pool];
        const double start = std::max(ready, gpu);
        const double work = pass_count * expert_ct(e, dst, plan);
        rep_.total_expert_compute_s += work;
        const double end = start + work;
        gpu = end;
        expert_end[key] = end;
        barrier = std::max(barrier, end);
    }

    // Return legs: results of non-primary hosts converge on each token's
    // primary host, batched per (host, primary) pair.
    std::map<std::pair<int, int>, double> back_bytes;
    std::map<std::pair<int, int>, double> back_ready;
    for (const SlotUse& u : uses) {
        const int ph = primary_host[u.token_idx];
        if (u.dst == ph) continue;
        back_bytes[{u.dst, ph}] += act_bytes(u.e, plan);
        back_ready[{u.dst, ph}] =
            std::max(back_ready[{u.dst, ph}], expert_end[{u.dst, u.e}]);
    }
    for (const auto& [pair, bytes] : back_bytes) {
        const double arrive = lan_deliver(pair.first, pair.second, bytes, back_ready[pair],
                                          nullptr, /*handoff=*/false, r.id, -1, layer);
        barrier = std::max(barrier, arrive);
    }

    for (int i = 0; i < n; ++i) {
        r.tok_server[i] = primary_host[i];
        r.tok_pool[i] = primary_pool[i];
    }

    Ev ev;
    ev.t = barrier;
    ev.kind = EvKind::LayerComplete;
    ev.req = r.id;
    ev.token = -1;
    ev.layer = layer;
    push(ev);
}

void Engine::on_arrival(const Ev& ev) {
    ReqRt& r = reqs_[ev.req];
    r.id = ev.req;
    r.arrival_s = ev.t;
    r.input_len = input_len_;
    r.output_len = output_len_;
    r.plan = active_plan_;
    r.pos_server = sc_.ingress_id();
    r.pos_pool = 0;
    ++plans_[r.plan].outstanding;
    rep_.penalties.token_events += static_cast<std::uint64_t>(input_len_) + output_len_;

    const int begin = trace_.request_token_begin(ev.req);
    if (input_len_ > 0) {
        PruneResult pr;
        if (sc_.pruning.enabled) {
            std::vector<double> importance(input_len_);
            for (int i = 0; i < input_len_; ++i) importance[i] = trace_.importance(begin + i);
            pr = prune_tokens(importance, sc_.pruning, spec_);
        } else {
            pr.retained.resize(input_len_);
            std::iota(pr.retained.begin(), pr.retained.end(), 0);
        }
        rep_.pruned_tokens += pr.pruned_tokens;
        rep_.prune_volume_saved_bytes += pr.volume_saved_bytes;
        rep_.penalties.prune_penalty += sc_.pruning.penalty_per_token * pr.pruned_tokens;
        r.phase = ReqRt::Phase::prefill;
        r.active_tokens.clear();
        for (int idx : pr.retained) r.active_tokens.push_back(begin + idx);
        r.tok_server.assign(r.active_tokens.size(), r.pos_server);
        r.tok_pool.assign(r.active_tokens.size(), 0);
        if (!r.active_tokens.empty()) {
            prefill_layer(r, 0, ev.t);
            return;
        }
        // Everything pruned: fall through to decode immediately.
    }
    r.phase = ReqRt::Phase::decode;
    if (output_len_ == 0) {
        finish_request(r, ev.t);
        return;
    }
    r.token_start_s = ev.t;
    r.tok = LatencyBreakdown{};
    decode_layer(r, begin + input_len_, 0, ev.t);
}

void Engine::record_token(ReqRt& r, double end) {
    const double dt = end - r.token_start_s;
    const double err = std::abs(dt - r.tok.total());
    rep_.max_decomposition_error_s = std::max(rep_.max_decomposition_error_s, err);
    rep_.decode_breakdown.compute_s += r.tok.compute_s;
    rep_.decode_breakdown.stall_s += r.tok.stall_s;
    rep_.decode_breakdown.transfer_s += r.tok.transfer_s;
    rep_.decode_breakdown.queue_s += r.tok.queue_s;
    token_latencies_.push_back(dt);
    ++rep_.total_output_tokens;
    const std::size_t sec = static_cast<std::size_t>(std::max(0.0, std::floor(end)));
    if (rep_.tokens_per_second.size() <= sec) rep_.tokens_per_second.resize(sec + 1, 0);
    ++rep_.tokens_per_second[sec];
}

void Engine::finish_request(ReqRt& r, double now) {
    r.phase = ReqRt::Phase::done;
    --plans_[r.plan].outstanding;
    ++completed_;
    last_completion_ = std::max(last_completion_, now);
    RequestRecord rec;
    rec.request = r.id;
    rec.arrival_s = r.arrival_s;
    rec.completion_s = now;
    rec.latency_s = now - r.arrival_s;
    rec.input_len = r.input_len;
    rec.output_len = r.output_len;
    rep_.requests.push_back(rec);
}

void Engine::on_layer_complete(const Ev& ev) {
    ReqRt& r = reqs_[ev.req];
    PlanRt& plan = plans_[r.plan];
    for (const auto& [server, expert] : r.pinned) plan.caches[server].unpin(expert);
    r.pinned.clear();

    if (ev.token < 0) {
        // Prefill barrier.
        for (int token : r.active_tokens) observe_token_layer(token, ev.layer);
        if (ev.layer + 1 < spec_.num_layers) {
            prefill_layer(r, ev.layer + 1, ev.t);
            return;
        }
        // Decode picks up where the last retained token ended.
        if (!r.active_tokens.empty()) {
            r.pos_server = r.tok_server.back();
            r.pos_pool = r.tok_pool.back();
        }
        r.phase = ReqRt::Phase::decode;
        if (output_len_ == 0) {
            finish_request(r, ev.t);
            return;
        }
        r.token_start_s = ev.t;
        r.tok = LatencyBreakdown{};
        decode_layer(r, trace_.request_token_begin(r.id) + r.input_len, 0, ev.t);
        return;
    }

    observe_token_layer(ev.token, ev.layer);
    if (ev.layer + 1 < spec_.num_layers) {
        decode_layer(r, ev.token, ev.layer + 1, ev.t);
        return;
    }
    record_token(r, ev.t);
    ++r.decode_token;
    if (r.decode_token < output_len_) {
        r.token_start_s = ev.t;
        r.tok = LatencyBreakdown{};
        decode_layer(r, trace_.request_token_begin(r.id) + r.input_len + r.decode_token, 0, ev.t);
        return;
    }
    finish_request(r, ev.t);
}

void Engine::on_load_complete(const Ev& ev) {
    ExpertCacheState& cache = plans_[ev.plan].caches[ev.server];
    cache.complete_load(ev.expert);
    if (sc_.paging.verify_every_event) cache.check_budget();
}

void Engine::on_hello(const Ev& ev) {
    ServerRt& rt = servers_[ev.server];
    if (ev.resource_change) {
        rt.truth.avail_compute_pct = ev.rc_compute;
        rt.truth.avail_gpu_mem_pct = ev.rc_mem;
        rt.truth.timestamp_s = ev.t;
        ResourceStatus self = rt.truth;
        rt.view.observe(HelloMessage{static_cast<std::uint32_t>(ev.server), rt.next_seq++, self});
        advertise(ev.server, ev.t);
        return;
    }
    if (!work_pending()) return;  // quiesce: no emission, no reschedule
    advertise(ev.server, ev.t);
    Ev next;
    next.t = ev.t + sc_.perception.hello_period_s;
    next.kind = EvKind::HelloTick;
    next.server = ev.server;
    push(next);
}

void Engine::on_replan_check(const Ev& ev) {
    if (ev.plan_apply) {
        active_plan_ = ev.plan;
        plans_[active_plan_].ever_active = true;
        migration_pending_ = false;
        ++rep_.replan_count;
        return;
    }
    if (!work_pending()) return;
    Ev next;
    next.t = ev.t + sc_.replanning.check_period_s;
    next.kind = EvKind::ReplanCheck;
    push(next);
    if (migration_pending_) return;  // one migration at a time
    ++rep_.replan_checks;

    std::map<int, ResourceStatus> current;
    for (int s = 0; s < static_cast<int>(servers_.size()); ++s) current[s] = servers_[s].truth;
    const ReplanSignal sig = check_replan(baseline_pop_, popularity_.scores(), baseline_res_,
                                          current, sc_.replanning);
    if (!sig.triggered()) return;

    // Re-plan from live observations and current resource truth.
    NeighborView view;
    std::uint32_t seq = 1;
    for (const auto& [s, st] : current)
        view.observe(HelloMessage{static_cast<std::uint32_t>(s), seq++, st});
    DeploymentPlan next_plan;
    try {
        next_plan = plan_deployment(live_estimate(), spec_, sc_.topology, view, sc_.cost,
                                    sc_.placement, sc_.quantization.enabled,
                                    sc_.quantization.shared_bits);
    } catch (const InfeasibleError&) {
        ++rep_.replan_failures;
        return;
    }

    // Stage the migration: pull every newly placed copy from the cheapest
    // source that already holds it wide enough, or from the cloud master.
    const PlanRt& old_plan = plans_[active_plan_];
    double activate_at = ev.t;
    double moved_bytes = 0.0;
    bool feasible = true;
    for (const auto& [s, experts] : next_plan.placement.assignment) {
        for (const ExpertRef& e : experts) {
            if (old_plan.placement.hosts_expert(s, e) &&
                old_plan.quant.bits_for(e) >= next_plan.quant.bits_for(e))
                continue;  // already local at sufficient width
            const int bits = next_plan.quant.bits_for(e);
            const double bytes =
                static_cast<double>(spec_.expert_param_bytes) * bits / 16.0;
            // Cheapest eligible peer over a direct link. Narrow copies cannot
            // be widened, so peers only qualify when the old width suffices.
            int best_h = -1;
            double best_t = 0.0;
            if (old_plan.quant.bits_for(e) >= bits) {
                for (int h : old_plan.placement.hosts(e)) {
                    if (h == s) continue;
                    const LinkSpec* link = sc_.topology.link_between(s, h);
                    if (link == nullptr) continue;
                    const double t = transfer_time(bytes, *link);
                    if (best_h < 0 || t < best_t) {
                        best_h = h;
                        best_t = t;
                    }
                }
            }
            double arrive = -1.0;
            double shipped = bytes;
            if (best_h >= 0) {
                const LinkSpec* link = sc_.topology.link_between(s, best_h);
                double& free_at = link_slot(s, best_h);
                const double start = std::max(ev.t, free_at);
                free_at = start + bytes / link->bandwidth;
                arrive = free_at + link->propagation_latency_s;
            } else if (sc_.topology.cloud) {
                // The cloud master is full precision; a cloud pull always
                // moves 16-bit bytes regardless of the deployed width.
                shipped = static_cast<double>(spec_.expert_param_bytes);
                arrive = ev.t + transfer_time(shipped, sc_.topology.cloud->bandwidth,
                                              sc_.topology.cloud->propagation_latency_s);
            }
            if (arrive < 0.0) {
                feasible = false;
                break;
            }
            activate_at = std::max(activate_at, arrive);
            moved_bytes += shipped;
        }
        if (!feasible) break;
    }
    if (!feasible) {
        ++rep_.replan_failures;
        return;
    }

    PlanRt fresh;
    fresh.placement = std::move(next_plan.placement);
    fresh.quant = std::move(next_plan.quant);
    init_plan(fresh);
    rep_.deployment_advert_bytes += 64 * hosting_servers(fresh.placement);
    plans_.push_back(std::move(fresh));
    rep_.migration_bytes += moved_bytes;
    migration_pending_ = true;
    baseline_pop_ = popularity_.scores();
    baseline_res_ = current;

    Ev apply;
    apply.t = activate_at;
    apply.kind = EvKind::ReplanCheck;
    apply.plan_apply = true;
    apply.plan = static_cast<int>(plans_.size()) - 1;
    push(apply);
}

SimReport Engine::run() {
    WorkloadParams wl = sc_.workload;
    wl.input_len = input_len_;
    wl.output_len = output_len_;
    wl.validate();
    trace_ = generate_trace(spec_, wl, seed_);

    popularity_ = PopularityModel(spec_.num_layers, spec_.experts_per_layer,
                                  sc_.paging.ewma_lambda);
    popularity_.reset_to(in_.coact.layer_marginals);
    baseline_pop_ = popularity_.scores();
    trans_counts_.assign(spec_.num_layers - 1,
                         std::vector<double>(static_cast<std::size_t>(spec_.experts_per_layer) *
                                                 spec_.experts_per_layer,
                                             0.0));
    sel_counts_.assign(spec_.num_layers, std::vector<double>(spec_.experts_per_layer, 0.0));

    rep_ = SimReport{};
    rep_.seed = seed_;
    rep_.input_len = input_len_;
    rep_.output_len = output_len_;
    rep_.num_requests = sc_.workload.num_requests;
    rep_.expected_objective_value = in_.expected_objective_value;

    plans_.clear();
    PlanRt first;
    first.placement = in_.placement;
    first.quant = in_.quant;
    init_plan(first);
    rep_.deployment_advert_bytes += 64 * hosting_servers(first.placement);
    first.ever_active = true;
    plans_.push_back(std::move(first));
    active_plan_ = 0;

    init_servers();
    reqs_.assign(sc_.workload.num_requests, ReqRt{});
    seed_events();

    while (!queue_.empty()) {
        const Ev ev = queue_.top();
        queue_.pop();
        ++rep_.events_processed;
        switch (ev.kind) {
            case EvKind::RequestArrival: on_arrival(ev); break;
            case EvKind::LayerComplete: on_layer_complete(ev); break;
            case EvKind::LoadComplete: on_load_complete(ev); break;
            case EvKind::HelloTick: on_hello(ev); break;
            case EvKind::ReplanCheck: on_replan_check(ev); break;
            case EvKind::TransferComplete: break;  // bookkeeping marker
        }
        sample_peaks();
    }
    if (completed_ != sc_.workload.num_requests)
        throw StructuralError("sim: event queue drained with unfinished requests");

    rep_.makespan_s = last_completion_;
    rep_.avg_generation_throughput_tps =
        rep_.makespan_s > 0.0 ? static_cast<double>(rep_.total_output_tokens) / rep_.makespan_s
                              : 0.0;
    if (!rep_.requests.empty()) {
        std::vector<double> lat;
        lat.reserve(rep_.requests.size());
        double sum = 0.0;
        for (const RequestRecord& rec : rep_.requests) {
            lat.push_back(rec.latency_s);
            sum += rec.latency_s;
        }
        std::sort(lat.begin(), lat.end());
        rep_.avg_request_latency_s = sum / static_cast<double>(lat.size());
        const std::size_t idx =
            static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(lat.size()))) - 1;
        rep_.p95_request_latency_s = lat[std::min(idx, lat.size() - 1)];
    }
    if (!token_latencies_.empty()) {
        double sum = 0.0;
        for (double v : token_latencies_) sum += v;
        rep_.avg_token_latency_s = sum / static_cast<double>(token_latencies_.size());
    }

    std::vector<double> stalls;
    for (const PlanRt& plan : plans_) {
        for (const ExpertCacheState& cache : plan.caches) {
            const auto& st = cache.stats();
            rep_.cache_hits += st.hits;
            rep_.cache_misses += st.misses;
            rep_.cache_prefetch_hits += st.prefetch_hits;
            rep_.cache_bytes_loaded += st.bytes_loaded;
            stalls.insert(stalls.end(), st.stalls_s.begin(), st.stalls_s.end());
        }
    }
    const std::uint64_t accesses = rep_.cache_hits + rep_.cache_misses;
    rep_.cache_hit_rate =
        accesses > 0 ? static_cast<double>(rep_.cache_hits) / static_cast<double>(accesses) : 1.0;
    if (!stalls.empty()) {
        double sum = 0.0;
        for (double v : stalls) sum += v;
        rep_.mean_stall_s = sum / static_cast<double>(stalls.size());
        std::sort(stalls.begin(), stalls.end());
        const std::size_t idx =
            static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(stalls.size()))) - 1;
        rep_.p95_stall_s = stalls[std::min(idx, stalls.size() - 1)];
    }
    rep_.quality = quality_score(rep_.penalties);
    return rep_;
}

}  // namespace

SimReport simulate(const SimInputs& in, int input_len, int output_len, std::uint64_t seed) {
    in.scenario.validate();
    in.placement.check_coverage(in.scenario.model);
    in.placement.check_capacity(in.scenario.model, in.scenario.topology, in.quant);
    Engine engine(in, input_len, output_len, seed);
    return engine.run();
}

}  // namespace moedge
