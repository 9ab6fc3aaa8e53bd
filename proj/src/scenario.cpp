// SPDX-License-Identifier: Apache-2.0
#include "moedge/scenario.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace moedge {

namespace {

using nlohmann::json;

// Strict object reader: every key must be consumed, reads carry the JSON
// path so schema errors point at the exact field.
class Walk {
public:
    Walk(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    const json& require(const std::string& key) {
        if (!j_.contains(key)) throw ConfigError(path_ + "." + key + ": missing required field");
        seen_.insert(key);
        return j_.at(key);
    }

    const json* optional(const std::string& key) {
        if (!j_.contains(key)) return nullptr;
        seen_.insert(key);
        return &j_.at(key);
    }

    template <typename T>
    T need(const std::string& key) {
        return cast<T>(require(key), key);
    }

    template <typename T>
    T get(const std::string& key, T fallback) {
        const json* v = optional(key);
        return v == nullptr ? fallback : cast<T>(*v, key);
    }

    void finish() const {
        for (const auto& [key, value] : j_.items())
            if (seen_.count(key) == 0)
                throw ConfigError(path_ + "." + key + ": unknown field");
    }

    const std::string& path() const { return path_; }

private:
    template <typename T>
    T cast(const json& v, const std::string& key) const {
        try {
            return v.get<T>();
        } catch (const json::exception&) {
            throw ConfigError(path_ + "." + key + ": wrong type");
        }
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

MoEModelSpec parse_model(const json& j, const std::string& path) {
    Walk w(j, path);
    MoEModelSpec m;
    m.num_layers = w.need<int>("num_layers");
    m.experts_per_layer = w.need<int>("experts_per_layer");
    m.expert_param_bytes = w.need<std::uint64_t>("expert_param_bytes");
    m.shared_param_bytes = w.need<std::uint64_t>("shared_param_bytes");
    m.top_k = w.need<int>("top_k");
    m.hidden_dim = w.need<int>("hidden_dim");
    m.activation_bytes_per_element = w.get<int>("activation_bytes_per_element", 2);
    w.finish();
    return m;
}

WorkloadParams parse_workload(const json& j, const std::string& path, double* spacing) {
    Walk w(j, path);
    WorkloadParams p;
    p.num_requests = w.need<int>("num_requests");
    p.input_len = w.need<int>("input_len");
    p.output_len = w.need<int>("output_len");
    p.zipf_s = w.get<double>("zipf_s", 1.0);
    p.kappa = w.get<double>("kappa", 4.0);
    p.cluster_noise = w.get<double>("cluster_noise", 0.25);
    *spacing = w.get<double>("arrival_spacing_s", 0.0);
    w.finish();
    return p;
}

EdgeTopology parse_topology(const json& j, const std::string& path) {
    Walk w(j, path);
    EdgeTopology t;
    const json& servers = w.require("servers");
    if (!servers.is_array() || servers.empty())
        throw ConfigError(path + ".servers: expected a non-empty array");
    int id = 0;
    for (const json& sj : servers) {
        Walk sw(sj, path + ".servers[" + std::to_string(id) + "]");
        ServerSpec s;
        s.name = sw.need<std::string>("name");
        s.id = id++;
        s.gpu_mem_bytes = sw.need<std::uint64_t>("gpu_mem_bytes");
        s.host_mem_bytes = sw.get<std::uint64_t>("host_mem_bytes", 0);
        s.ssd_bytes = sw.need<std::uint64_t>("ssd_bytes");
        s.compute_rate_flops = sw.need<double>("compute_rate_flops");
        s.intra_bus_bandwidth = sw.need<double>("intra_bus_bandwidth");
        s.intra_bus_latency_s = sw.get<double>("intra_bus_latency_s", 2e-6);
        s.gpu_count = sw.get<int>("gpu_count", 1);
        sw.finish();
        t.servers.push_back(std::move(s));
    }
    if (const json* links = w.optional("links")) {
        int li = 0;
        for (const json& lj : *links) {
            Walk lw(lj, path + ".links[" + std::to_string(li++) + "]");
            LinkSpec l;
            l.a = t.server_id(lw.need<std::string>("a"));
            l.b = t.server_id(lw.need<std::string>("b"));
            l.bandwidth = lw.need<double>("bandwidth");
            l.propagation_latency_s = lw.get<double>("propagation_latency_s", 0.0);
            lw.finish();
            t.links.push_back(l);
        }
    }
    if (const json* cj = w.optional("cloud")) {
        Walk cw(*cj, path + ".cloud");
        CloudUplink c;
        c.bandwidth = cw.need<double>("bandwidth");
        c.propagation_latency_s = cw.get<double>("propagation_latency_s", 0.0);
        cw.finish();
        t.cloud = c;
    }
    w.finish();
    return t;
}

PlanConfig parse_placement(const json& j, const std::string& path) {
    Walk w(j, path);
    PlanConfig p;
    p.num_submodels = w.get<int>("num_submodels", 0);
    p.replication_budget = w.get<int>("replication_budget", 0);
    p.alpha = w.get<double>("alpha", 1.0);
    p.beta = w.get<double>("beta", -1.0);
    p.local_search_max_iters = w.get<int>("local_search_max_iters", 1000);
    p.route.low_water_pct = w.get<double>("low_water_pct", 10.0);
    p.route.queue_clamp = w.get<double>("queue_clamp", 100.0);
    w.finish();
    if (p.num_submodels < 0) throw ConfigError(path + ".num_submodels: must be >= 0");
    if (p.replication_budget < 0) throw ConfigError(path + ".replication_budget: must be >= 0");
    if (p.local_search_max_iters < 0)
        throw ConfigError(path + ".local_search_max_iters: must be >= 0");
    if (p.route.low_water_pct < 0.0 || p.route.low_water_pct > 100.0)
        throw ConfigError(path + ".low_water_pct: must be in [0, 100]");
    if (p.route.queue_clamp < 1.0) throw ConfigError(path + ".queue_clamp: must be >= 1");
    return p;
}

}  // namespace

std::vector<SweepPoint> Scenario::buckets() const {
    if (!sweep.empty()) return sweep;
    return {SweepPoint{workload.input_len, workload.output_len}};
}

void Scenario::validate() const {
    if (schema_version != 1) throw ConfigError("scenario: unsupported schema_version");
    model.validate();
    workload.validate();
    if (arrival_spacing_s < 0.0) throw ConfigError("workload: arrival_spacing_s must be >= 0");
    topology.validate();
    if (placement.ingress_server < 0 ||
        placement.ingress_server >= static_cast<int>(topology.servers.size()))
        throw ConfigError("scenario: origin_server is not a known server");
    std::vector<int> all_ids(topology.servers.size());
    for (std::size_t i = 0; i < all_ids.size(); ++i) all_ids[i] = static_cast<int>(i);
    if (!topology.connected(all_ids))
        throw ConfigError("topology: participating servers are not connected");
    quantization.validate();
    paging.validate();
    fusion.validate();
    pruning.validate();
    perception.validate();
    replanning.validate();
    cost.validate();
    for (const SweepPoint& b : sweep) {
        WorkloadParams wp = workload;
        wp.input_len = b.input_len;
        wp.output_len = b.output_len;
        wp.validate();
    }
    for (const ResourceEvent& ev : resource_events) {
        if (ev.time_s < 0.0) throw ConfigError("resource_events: time_s must be >= 0");
        if (ev.server < 0 || ev.server >= static_cast<int>(topology.servers.size()))
            throw ConfigError("resource_events: unknown server");
        if (ev.avail_compute_pct < 0 || ev.avail_compute_pct > 100 || ev.avail_gpu_mem_pct < 0 ||
            ev.avail_gpu_mem_pct > 100)
            throw ConfigError("resource_events: percentages must be in [0, 100]");
    }
}

Scenario Scenario::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("scenario: invalid JSON: ") + ex.what());
    }
    Walk w(j, "scenario");
    Scenario sc;
    sc.schema_version = w.need<int>("schema_version");
    if (sc.schema_version != 1) throw ConfigError("scenario.schema_version: unsupported version");
    sc.name = w.get<std::string>("name", "");
    sc.seed = w.need<std::uint64_t>("seed");
    sc.model = parse_model(w.require("model"), "scenario.model");
    sc.workload = parse_workload(w.require("workload"), "scenario.workload", &sc.arrival_spacing_s);
    sc.topology = parse_topology(w.require("topology"), "scenario.topology");
    const std::string origin = w.need<std::string>("origin_server");

    if (const json* sj = w.optional("sweep")) {
        int i = 0;
        for (const json& bj : *sj) {
            Walk bw(bj, "scenario.sweep[" + std::to_string(i++) + "]");
            SweepPoint b;
            b.input_len = bw.need<int>("input_len");
            b.output_len = bw.need<int>("output_len");
            bw.finish();
            sc.sweep.push_back(b);
        }
    }
    if (const json* pj = w.optional("placement"))
        sc.placement = parse_placement(*pj, "scenario.placement");
    sc.placement.ingress_server = sc.topology.server_id(origin);
    sc.placement_file = w.get<std::string>("placement_file", "");
    sc.quant_file = w.get<std::string>("quant_file", "");
    sc.output_dir = w.get<std::string>("output_dir", "out");
    if (!sc.quant_file.empty() && sc.placement_file.empty())
        throw ConfigError("scenario.quant_file: requires placement_file");

    if (const json* qj = w.optional("quantization")) {
        Walk q(*qj, "scenario.quantization");
        sc.quantization.enabled = q.get<bool>("enabled", false);
        sc.quantization.shared_bits = q.get<int>("shared_bits", 16);
        q.finish();
    }
    if (const json* pj = w.optional("paging")) {
        Walk p(*pj, "scenario.paging");
        sc.paging.prefetch_depth = p.get<int>("prefetch_depth", 2);
        sc.paging.ewma_lambda = p.get<double>("ewma_lambda", 0.98);
        sc.paging.blend_gamma = p.get<double>("blend_gamma", 0.5);
        sc.paging.prefetch_per_layer = p.get<int>("prefetch_per_layer", 8);
        sc.paging.headroom_experts = p.get<int>("headroom_experts", 0);
        sc.paging.verify_every_event = p.get<bool>("verify_every_event", false);
        p.finish();
    }
    if (const json* fj = w.optional("fusion")) {
        Walk f(*fj, "scenario.fusion");
        sc.fusion.enabled = f.get<bool>("enabled", false);
        sc.fusion.cosine_threshold = f.get<double>("cosine_threshold", 0.9);
        sc.fusion.penalty_per_merged_token = f.get<double>("penalty_per_merged_token", 0.002);
        f.finish();
    }
    if (const json* pj = w.optional("pruning")) {
        Walk p(*pj, "scenario.pruning");
        sc.pruning.enabled = p.get<bool>("enabled", false);
        const std::string mode = p.get<std::string>("mode", "threshold");
        if (mode == "threshold")
            sc.pruning.mode = PruneConfig::Mode::threshold;
        else if (mode == "fraction")
            sc.pruning.mode = PruneConfig::Mode::fraction;
        else
            throw ConfigError("scenario.pruning.mode: must be 'threshold' or 'fraction'");
        sc.pruning.threshold = p.get<double>("threshold", 0.0);
        sc.pruning.fraction = p.get<double>("fraction", 0.0);
        sc.pruning.penalty_per_token = p.get<double>("penalty_per_token", 0.01);
        p.finish();
    }
    if (const json* pj = w.optional("perception")) {
        Walk p(*pj, "scenario.perception");
        sc.perception.hello_period_s = p.get<double>("hello_period_s", 2.0);
        sc.perception.threshold_pct = p.get<double>("threshold_pct", 5.0);
        p.finish();
    }
    if (const json* rj = w.optional("replanning")) {
        Walk r(*rj, "scenario.replanning");
        sc.replanning.enabled = r.get<bool>("enabled", false);
        sc.replanning.check_period_s = r.get<double>("check_period_s", 5.0);
        sc.replanning.popularity_tv_threshold = r.get<double>("popularity_tv_threshold", 0.3);
        sc.replanning.resource_threshold_pct = r.get<double>("resource_threshold_pct", 20.0);
        r.finish();
    }
    if (const json* cj = w.optional("cost_model")) {
        Walk c(*cj, "scenario.cost_model");
        sc.cost.flops_per_param = c.get<double>("flops_per_param", 2.0);
        sc.cost.utilization = c.get<double>("utilization", 0.4);
        sc.cost.activation_quant = c.get<bool>("activation_quant", true);
        sc.cost.quant_compute_speedup = c.get<bool>("quant_compute_speedup", false);
        c.finish();
    }
    if (const json* ej = w.optional("resource_events")) {
        int i = 0;
        for (const json& evj : *ej) {
            Walk e(evj, "scenario.resource_events[" + std::to_string(i++) + "]");
            ResourceEvent ev;
            ev.time_s = e.need<double>("time_s");
            ev.server = sc.topology.server_id(e.need<std::string>("server"));
            ev.avail_compute_pct = e.need<int>("avail_compute_pct");
            ev.avail_gpu_mem_pct = e.need<int>("avail_gpu_mem_pct");
            e.finish();
            sc.resource_events.push_back(ev);
        }
    }
    w.finish();
    sc.validate();
    return sc;
}

std::string Scenario::to_json() const {
    json j;
    j["schema_version"] = schema_version;
    if (!name.empty()) j["name"] = name;
    j["seed"] = seed;
    j["model"] = {{"num_layers", model.num_layers},
                  {"experts_per_layer", model.experts_per_layer},
                  {"expert_param_bytes", model.expert_param_bytes},
                  {"shared_param_bytes", model.shared_param_bytes},
                  {"top_k", model.top_k},
                  {"hidden_dim", model.hidden_dim},
                  {"activation_bytes_per_element", model.activation_bytes_per_element}};
    j["workload"] = {{"num_requests", workload.num_requests},
                     {"input_len", workload.input_len},
                     {"output_len", workload.output_len},
                     {"zipf_s", workload.zipf_s},
                     {"kappa", workload.kappa},
                     {"cluster_noise", workload.cluster_noise},
                     {"arrival_spacing_s", arrival_spacing_s}};
    if (!sweep.empty()) {
        json arr = json::array();
        for (const SweepPoint& b : sweep)
            arr.push_back({{"input_len", b.input_len}, {"output_len", b.output_len}});
        j["sweep"] = std::move(arr);
    }
    j["origin_server"] = topology.servers[placement.ingress_server].name;
    json servers = json::array();
    for (const ServerSpec& s : topology.servers)
        servers.push_back({{"name", s.name},
                           {"gpu_mem_bytes", s.gpu_mem_bytes},
                           {"host_mem_bytes", s.host_mem_bytes},
                           {"ssd_bytes", s.ssd_bytes},
                           {"compute_rate_flops", s.compute_rate_flops},
                           {"intra_bus_bandwidth", s.intra_bus_bandwidth},
                           {"intra_bus_latency_s", s.intra_bus_latency_s},
                           {"gpu_count", s.gpu_count}});
    json topo;
    topo["servers"] = std::move(servers);
    if (!topology.links.empty()) {
        json links = json::array();
        for (const LinkSpec& l : topology.links)
            links.push_back({{"a", topology.servers[l.a].name},
                             {"b", topology.servers[l.b].name},
                             {"bandwidth", l.bandwidth},
                             {"propagation_latency_s", l.propagation_latency_s}});
        topo["links"] = std::move(links);
    }
    if (topology.cloud)
        topo["cloud"] = {{"bandwidth", topology.cloud->bandwidth},
                         {"propagation_latency_s", topology.cloud->propagation_latency_s}};
    j["topology"] = std::move(topo);
    j["placement"] = {{"num_submodels", placement.num_submodels},
                      {"replication_budget", placement.replication_budget},
                      {"alpha", placement.alpha},
                      {"beta", placement.beta},
                      {"local_search_max_iters", placement.local_search_max_iters},
                      {"low_water_pct", placement.route.low_water_pct},
                      {"queue_clamp", placement.route.queue_clamp}};
    if (!placement_file.empty()) j["placement_file"] = placement_file;
    if (!quant_file.empty()) j["quant_file"] = quant_file;
    j["output_dir"] = output_dir;
    j["quantization"] = {{"enabled", quantization.enabled},
                         {"shared_bits", quantization.shared_bits}};
    j["paging"] = {{"prefetch_depth", paging.prefetch_depth},
                   {"ewma_lambda", paging.ewma_lambda},
                   {"blend_gamma", paging.blend_gamma},
                   {"prefetch_per_layer", paging.prefetch_per_layer},
                   {"headroom_experts", paging.headroom_experts},
                   {"verify_every_event", paging.verify_every_event}};
    j["fusion"] = {{"enabled", fusion.enabled},
                   {"cosine_threshold", fusion.cosine_threshold},
                   {"penalty_per_merged_token", fusion.penalty_per_merged_token}};
    j["pruning"] = {{"enabled", pruning.enabled},
                    {"mode", pruning.mode == PruneConfig::Mode::threshold ? "threshold"
                                                                          : "fraction"},
                    {"threshold", pruning.threshold},
                    {"fraction", pruning.fraction},
                    {"penalty_per_token", pruning.penalty_per_token}};
    j["perception"] = {{"hello_period_s", perception.hello_period_s},
                       {"threshold_pct", perception.threshold_pct}};
    j["replanning"] = {{"enabled", replanning.enabled},
                       {"check_period_s", replanning.check_period_s},
                       {"popularity_tv_threshold", replanning.popularity_tv_threshold},
                       {"resource_threshold_pct", replanning.resource_threshold_pct}};
    j["cost_model"] = {{"flops_per_param", cost.flops_per_param},
                       {"utilization", cost.utilization},
                       {"activation_quant", cost.activation_quant},
                       {"quant_compute_speedup", cost.quant_compute_speedup}};
    if (!resource_events.empty()) {
        json arr = json::array();
        for (const ResourceEvent& ev : resource_events)
            arr.push_back({{"time_s", ev.time_s},
                           {"server", topology.servers[ev.server].name},
                           {"avail_compute_pct", ev.avail_compute_pct},
                           {"avail_gpu_mem_pct", ev.avail_gpu_mem_pct}});
        j["resource_events"] = std::move(arr);
    }
    return j.dump(2);
}

Scenario Scenario::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("scenario: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_json(buf.str());
}

}  // namespace moedge
