// SPDX-License-Identifier: Apache-2.0
#include "moedge/report.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace moedge {

namespace {

using nlohmann::json;

json breakdown_to_json(const LatencyBreakdown& b) {
    return {{"compute_s", b.compute_s},
            {"stall_s", b.stall_s},
            {"transfer_s", b.transfer_s},
            {"queue_s", b.queue_s}};
}

LatencyBreakdown breakdown_from_json(const json& j) {
    LatencyBreakdown b;
    b.compute_s = j.at("compute_s").get<double>();
    b.stall_s = j.at("stall_s").get<double>();
    b.transfer_s = j.at("transfer_s").get<double>();
    b.queue_s = j.at("queue_s").get<double>();
    return b;
}

json bucket_to_json(const SimReport& r) {
    json j;
    j["seed"] = r.seed;
    j["input_len"] = r.input_len;
    j["output_len"] = r.output_len;
    j["num_requests"] = r.num_requests;
    j["makespan_s"] = r.makespan_s;
    j["total_output_tokens"] = r.total_output_tokens;
    j["avg_generation_throughput_tps"] = r.avg_generation_throughput_tps;
    j["avg_request_latency_s"] = r.avg_request_latency_s;
    j["p95_request_latency_s"] = r.p95_request_latency_s;
    j["avg_token_latency_s"] = r.avg_token_latency_s;
    j["cross_server_transfers"] = r.cross_server_transfers;
    j["cross_server_bytes"] = r.cross_server_bytes;
    j["token_handoff_transfers"] = r.token_handoff_transfers;
    j["token_handoff_bytes"] = r.token_handoff_bytes;
    j["hello_messages"] = r.hello_messages;
    j["hello_bytes"] = r.hello_bytes;
    j["deployment_advert_bytes"] = r.deployment_advert_bytes;
    j["events_processed"] = r.events_processed;
    j["decode_breakdown"] = breakdown_to_json(r.decode_breakdown);
    j["max_decomposition_error_s"] = r.max_decomposition_error_s;
    j["total_expert_compute_s"] = r.total_expert_compute_s;
    j["cache_hits"] = r.cache_hits;
    j["cache_misses"] = r.cache_misses;
    j["cache_prefetch_hits"] = r.cache_prefetch_hits;
    j["cache_hit_rate"] = r.cache_hit_rate;
    j["mean_stall_s"] = r.mean_stall_s;
    j["p95_stall_s"] = r.p95_stall_s;
    j["cache_bytes_loaded"] = r.cache_bytes_loaded;
    j["penalties"] = {{"quantization_penalty", r.penalties.quantization_penalty},
                      {"fusion_penalty", r.penalties.fusion_penalty},
                      {"prune_penalty", r.penalties.prune_penalty},
                      {"token_events", r.penalties.token_events}};
    j["quality"] = r.quality;
    j["fusion_volume_saved_bytes"] = r.fusion_volume_saved_bytes;
    j["prune_volume_saved_bytes"] = r.prune_volume_saved_bytes;
    j["merged_tokens"] = r.merged_tokens;
    j["pruned_tokens"] = r.pruned_tokens;
    j["replan_checks"] = r.replan_checks;
    j["replan_count"] = r.replan_count;
    j["replan_failures"] = r.replan_failures;
    j["migration_bytes"] = r.migration_bytes;
    j["peak_resident_bytes"] = r.peak_resident_bytes;
    j["expected_objective_value"] = r.expected_objective_value;
    json reqs = json::array();
    for (const RequestRecord& rec : r.requests)
        reqs.push_back({{"request", rec.request},
                        {"arrival_s", rec.arrival_s},
                        {"completion_s", rec.completion_s},
                        {"latency_s", rec.latency_s},
                        {"input_len", rec.input_len},
                        {"output_len", rec.output_len}});
    j["requests"] = std::move(reqs);
    j["tokens_per_second"] = r.tokens_per_second;
    return j;
}

SimReport bucket_from_json(const json& j) {
    SimReport r;
    r.seed = j.at("seed").get<std::uint64_t>();
    r.input_len = j.at("input_len").get<int>();
    r.output_len = j.at("output_len").get<int>();
    r.num_requests = j.at("num_requests").get<int>();
    r.makespan_s = j.at("makespan_s").get<double>();
    r.total_output_tokens = j.at("total_output_tokens").get<std::uint64_t>();
    r.avg_generation_throughput_tps = j.at("avg_generation_throughput_tps").get<double>();
    r.avg_request_latency_s = j.at("avg_request_latency_s").get<double>();
    r.p95_request_latency_s = j.at("p95_request_latency_s").get<double>();
    r.avg_token_latency_s = j.at("avg_token_latency_s").get<double>();
    r.cross_server_transfers = j.at("cross_server_transfers").get<std::uint64_t>();
    r.cross_server_bytes = j.at("cross_server_bytes").get<double>();
    r.token_handoff_transfers = j.at("token_handoff_transfers").get<std::uint64_t>();
    r.token_handoff_bytes = j.at("token_handoff_bytes").get<double>();
    r.hello_messages = j.at("hello_messages").get<std::uint64_t>();
    r.hello_bytes = j.at("hello_bytes").get<std::uint64_t>();
    r.deployment_advert_bytes = j.at("deployment_advert_bytes").get<std::uint64_t>();
    r.events_processed = j.at("events_processed").get<std::uint64_t>();
    r.decode_breakdown = breakdown_from_json(j.at("decode_breakdown"));
    r.max_decomposition_error_s = j.at("max_decomposition_error_s").get<double>();
    r.total_expert_compute_s = j.at("total_expert_compute_s").get<double>();
    r.cache_hits = j.at("cache_hits").get<std::uint64_t>();
    r.cache_misses = j.at("cache_misses").get<std::uint64_t>();
    r.cache_prefetch_hits = j.at("cache_prefetch_hits").get<std::uint64_t>();
    r.cache_hit_rate = j.at("cache_hit_rate").get<double>();
    r.mean_stall_s = j.at("mean_stall_s").get<double>();
    r.p95_stall_s = j.at("p95_stall_s").get<double>();
    r.cache_bytes_loaded = j.at("cache_bytes_loaded").get<std::uint64_t>();
    const json& pj = j.at("penalties");
    r.penalties.quantization_penalty = pj.at("quantization_penalty").get<double>();
    r.penalties.fusion_penalty = pj.at("fusion_penalty").get<double>();
    r.penalties.prune_penalty = pj.at("prune_penalty").get<double>();
    r.penalties.token_events = pj.at("token_events").get<std::uint64_t>();
    r.quality = j.at("quality").get<double>();
    r.fusion_volume_saved_bytes = j.at("fusion_volume_saved_bytes").get<std::uint64_t>();
    r.prune_volume_saved_bytes = j.at("prune_volume_saved_bytes").get<std::uint64_t>();
    r.merged_tokens = j.at("merged_tokens").get<int>();
    r.pruned_tokens = j.at("pruned_tokens").get<int>();
    r.replan_checks = j.at("replan_checks").get<int>();
    r.replan_count = j.at("replan_count").get<int>();
    r.replan_failures = j.at("replan_failures").get<int>();
    r.migration_bytes = j.at("migration_bytes").get<double>();
    r.peak_resident_bytes =
        j.at("peak_resident_bytes").get<std::map<std::string, std::uint64_t>>();
    r.expected_objective_value = j.at("expected_objective_value").get<double>();
    for (const json& rj : j.at("requests")) {
        RequestRecord rec;
        rec.request = rj.at("request").get<int>();
        rec.arrival_s = rj.at("arrival_s").get<double>();
        rec.completion_s = rj.at("completion_s").get<double>();
        rec.latency_s = rj.at("latency_s").get<double>();
        rec.input_len = rj.at("input_len").get<int>();
        rec.output_len = rj.at("output_len").get<int>();
        r.requests.push_back(rec);
    }
    r.tokens_per_second = j.at("tokens_per_second").get<std::vector<std::uint64_t>>();
    return r;
}

}  // namespace

std::string RunReport::to_json() const {
    json j;
    j["format_version"] = 1;
    j["scenario_name"] = scenario_name;
    j["seed"] = seed;
    json arr = json::array();
    for (const SimReport& b : buckets) arr.push_back(bucket_to_json(b));
    j["buckets"] = std::move(arr);
    return j.dump(2);
}

RunReport RunReport::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("report: invalid JSON: ") + ex.what());
    }
    try {
        if (j.at("format_version").get<int>() != 1)
            throw ConfigError("report: unsupported format_version");
        RunReport r;
        r.scenario_name = j.at("scenario_name").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        for (const json& bj : j.at("buckets")) r.buckets.push_back(bucket_from_json(bj));
        return r;
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("report: malformed field: ") + ex.what());
    }
}

RunReport RunReport::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("report: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_json(buf.str());
}

std::string RunReport::requests_csv() const {
    std::ostringstream out;
    out << "input_len,output_len,request,arrival_s,completion_s,latency_s\n";
    for (const SimReport& b : buckets)
        for (const RequestRecord& rec : b.requests)
            out << b.input_len << ',' << b.output_len << ',' << rec.request << ','
                << rec.arrival_s << ',' << rec.completion_s << ',' << rec.latency_s << '\n';
    return out.str();
}

std::string RunReport::throughput_csv() const {
    std::ostringstream out;
    out << "input_len,output_len,second,output_tokens\n";
    for (const SimReport& b : buckets)
        for (std::size_t s = 0; s < b.tokens_per_second.size(); ++s)
            out << b.input_len << ',' << b.output_len << ',' << s << ','
                << b.tokens_per_second[s] << '\n';
    return out.str();
}

std::string quant_to_json(const QuantPolicy& quant) {
    json j;
    j["format_version"] = 1;
    j["shared_bits"] = quant.shared_bits;
    json experts = json::array();
    for (const auto& [e, bits] : quant.bits)
        experts.push_back({e.layer, e.expert, bits});
    j["experts"] = std::move(experts);
    return j.dump(2);
}

QuantPolicy quant_from_json(const std::string& text, const MoEModelSpec& spec) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("quant: invalid JSON: ") + ex.what());
    }
    QuantPolicy q;
    try {
        if (j.at("format_version").get<int>() != 1)
            throw ConfigError("quant: unsupported format_version");
        q.shared_bits = j.at("shared_bits").get<int>();
        for (const json& ej : j.at("experts")) {
            if (!ej.is_array() || ej.size() != 3)
                throw ConfigError("quant.experts: expected [layer, expert, bits] triples");
            const ExpertRef e{ej.at(0).get<int>(), ej.at(1).get<int>()};
            const int bits = ej.at(2).get<int>();
            if (e.layer < 0 || e.layer >= spec.num_layers || e.expert < 0 ||
                e.expert >= spec.experts_per_layer)
                throw ConfigError("quant.experts: expert out of range");
            if (bits != 4 && bits != 8 && bits != 16)
                throw ConfigError("quant.experts: bits must be 4, 8, or 16");
            q.bits[e] = bits;
        }
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("quant: malformed field: ") + ex.what());
    }
    if (q.shared_bits != 4 && q.shared_bits != 8 && q.shared_bits != 16)
        throw ConfigError("quant: shared_bits must be 4, 8, or 16");
    return q;
}

std::vector<CompareRow> compare_reports(const RunReport& a, const RunReport& b) {
    if (a.buckets.size() != b.buckets.size())
        throw ConfigError("compare: reports have different bucket counts");
    std::vector<CompareRow> rows;
    for (std::size_t i = 0; i < a.buckets.size(); ++i) {
        const SimReport& ra = a.buckets[i];
        const SimReport& rb = b.buckets[i];
        if (ra.input_len != rb.input_len || ra.output_len != rb.output_len)
            throw ConfigError("compare: bucket " + std::to_string(i) +
                              " token lengths do not match");
        if (rb.avg_request_latency_s <= 0.0 || rb.avg_generation_throughput_tps <= 0.0)
            throw ConfigError("compare: bucket " + std::to_string(i) +
                              " denominator report has zero latency or throughput");
        CompareRow row;
        row.input_len = ra.input_len;
        row.output_len = ra.output_len;
        row.latency_ratio = ra.avg_request_latency_s / rb.avg_request_latency_s;
        row.throughput_ratio =
            ra.avg_generation_throughput_tps / rb.avg_generation_throughput_tps;
        rows.push_back(row);
    }
    return rows;
}

std::string compare_csv(const std::vector<CompareRow>& rows) {
    std::ostringstream out;
    out << "input_len,output_len,latency_ratio,throughput_ratio\n";
    for (const CompareRow& r : rows)
        out << r.input_len << ',' << r.output_len << ',' << r.latency_ratio << ','
            << r.throughput_ratio << '\n';
    return out.str();
}

}  // namespace moedge
