// SPDX-License-Identifier: Apache-2.0
//
// Command surface: trace | plan | run | compare | report.
// Exit codes: 0 success, 2 validation error, 3 infeasibility,
// 4 acceptance-band failure.
#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "moedge/pipeline.hpp"

namespace fs = std::filesystem;
using namespace moedge;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitInfeasible = 3;
constexpr int kExitBand = 4;

struct CommonOpts {
    std::optional<std::uint64_t> seed;
    std::string out_dir;  // empty = scenario's output_dir
    bool force = false;
};

// Creates (or reuses, with --force) the run's output directory.
fs::path claim_out_dir(const std::string& requested, const Scenario& sc, bool force) {
    const fs::path dir = requested.empty() ? fs::path(sc.output_dir) : fs::path(requested);
    if (fs::exists(dir) && !force)
        throw ConfigError("output directory " + dir.string() +
                          " already exists (pass --force to overwrite)");
    fs::create_directories(dir);
    return dir;
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << content;
}

std::uint64_t effective_seed(const CommonOpts& opts, const Scenario& sc) {
    return opts.seed ? *opts.seed : sc.seed;
}

int cmd_trace(const std::string& scenario_path, const CommonOpts& opts) {
    const Scenario sc = Scenario::load_file(scenario_path);
    const std::uint64_t seed = effective_seed(opts, sc);
    const fs::path dir = claim_out_dir(opts.out_dir, sc, opts.force);
    const RoutingTrace trace = generate_trace(sc.model, sc.workload, seed);
    write_file(dir / "trace.json", trace.to_json(sc.model, seed));
    std::cout << "trace: " << trace.num_tokens() << " tokens across "
              << trace.requests().size() << " requests -> " << (dir / "trace.json").string()
              << "\n";
    return kExitOk;
}

int cmd_plan(const std::string& scenario_path, const CommonOpts& opts) {
    const Scenario sc = Scenario::load_file(scenario_path);
    const std::uint64_t seed = effective_seed(opts, sc);
    const fs::path dir = claim_out_dir(opts.out_dir, sc, opts.force);
    const PreparedScenario prepared = prepare_scenario(sc, seed);
    write_file(dir / "placement.json", prepared.plan.placement.to_json(sc.topology));
    write_file(dir / "quant.json", quant_to_json(prepared.plan.quant));
    const PlacementObjective& obj = prepared.plan.objective;
    std::cout << "plan: expected_latency_s=" << obj.expected_latency_s
              << " expected_cross_transitions=" << obj.expected_cross_transitions
              << " objective=" << obj.value()
              << " replication_used=" << prepared.plan.replication_used << "\n";
    return kExitOk;
}

void write_run_outputs(const fs::path& dir, const RunReport& report) {
    write_file(dir / "report.json", report.to_json());
    write_file(dir / "requests.csv", report.requests_csv());
    write_file(dir / "throughput.csv", report.throughput_csv());
}

void print_run_summary(const RunReport& report) {
    for (const SimReport& b : report.buckets)
        std::cout << "bucket input=" << b.input_len << " output=" << b.output_len
                  << ": throughput_tps=" << b.avg_generation_throughput_tps
                  << " avg_latency_s=" << b.avg_request_latency_s
                  << " p95_latency_s=" << b.p95_request_latency_s
                  << " hit_rate=" << b.cache_hit_rate << " quality=" << b.quality << "\n";
}

int run_one(const std::string& scenario_path, const CommonOpts& opts, bool dry_run,
            const std::string& sub_dir) {
    const Scenario sc = Scenario::load_file(scenario_path);
    const std::uint64_t seed = effective_seed(opts, sc);
    std::string out = opts.out_dir.empty() ? sc.output_dir : opts.out_dir;
    if (!sub_dir.empty()) out = (fs::path(out) / sub_dir).string();
    CommonOpts local = opts;
    local.out_dir = out;
    const fs::path dir = claim_out_dir(local.out_dir, sc, opts.force);

    const PreparedScenario prepared = prepare_scenario(sc, seed);
    write_file(dir / "placement.json", prepared.plan.placement.to_json(sc.topology));
    write_file(dir / "quant.json", quant_to_json(prepared.plan.quant));
    if (dry_run) {
        std::cout << "dry-run: scenario valid, plan objective="
                  << prepared.plan.objective.value() << "\n";
        return kExitOk;
    }

    RunReport report;
    report.scenario_name = sc.name;
    report.seed = seed;
    SimInputs inputs{sc, prepared.plan.placement, prepared.plan.quant, prepared.coact,
                     prepared.plan.objective.value()};
    for (const SweepPoint& bucket : sc.buckets())
        report.buckets.push_back(simulate(inputs, bucket.input_len, bucket.output_len, seed));
    write_run_outputs(dir, report);
    print_run_summary(report);
    std::cout << "run: wrote " << (dir / "report.json").string() << "\n";
    return kExitOk;
}

int classify_exception() {
    try {
        throw;
    } catch (const InfeasibleError& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return kExitInfeasible;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return kExitValidation;
    }
}

int cmd_run(const std::vector<std::string>& scenario_paths, const CommonOpts& opts, bool dry_run,
            int jobs) {
    if (scenario_paths.size() == 1) return run_one(scenario_paths[0], opts, dry_run, "");

    // Several scenarios: each gets a sub-directory named after its file stem;
    // --jobs > 1 runs them on independent threads (no shared state).
    std::vector<int> codes(scenario_paths.size(), kExitOk);
    const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(scenario_paths.size())));
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next.fetch_add(1); i < scenario_paths.size();
             i = next.fetch_add(1)) {
            try {
                codes[i] = run_one(scenario_paths[i], opts, dry_run,
                                   fs::path(scenario_paths[i]).stem().string());
            } catch (...) {
                codes[i] = classify_exception();
            }
        }
    };
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
    int worst = kExitOk;
    for (int c : codes) worst = std::max(worst, c);
    return worst;
}

// "lo:hi" -> pair of doubles.
std::pair<double, double> parse_band(const std::string& text, const char* flag) {
    const auto colon = text.find(':');
    if (colon == std::string::npos)
        throw ConfigError(std::string(flag) + ": expected lo:hi");
    try {
        const double lo = std::stod(text.substr(0, colon));
        const double hi = std::stod(text.substr(colon + 1));
        if (lo > hi) throw ConfigError(std::string(flag) + ": lo must be <= hi");
        return {lo, hi};
    } catch (const std::invalid_argument&) {
        throw ConfigError(std::string(flag) + ": expected lo:hi");
    } catch (const std::out_of_range&) {
        throw ConfigError(std::string(flag) + ": value out of range");
    }
}

int cmd_compare(const std::string& path_a, const std::string& path_b, const CommonOpts& opts,
                const std::string& latency_band, const std::string& throughput_band) {
    const RunReport a = RunReport::load_file(path_a);
    const RunReport b = RunReport::load_file(path_b);
    const std::vector<CompareRow> rows = compare_reports(a, b);
    const std::string csv = compare_csv(rows);
    std::cout << csv;
    if (!opts.out_dir.empty()) {
        fs::create_directories(opts.out_dir);
        write_file(fs::path(opts.out_dir) / "compare.csv", csv);
    }
    bool ok = true;
    if (!latency_band.empty()) {
        const auto [lo, hi] = parse_band(latency_band, "--latency-band");
        for (const CompareRow& r : rows)
            if (r.latency_ratio < lo || r.latency_ratio > hi) {
                std::cerr << "band failure: latency ratio " << r.latency_ratio << " at input="
                          << r.input_len << " output=" << r.output_len << " outside [" << lo
                          << ", " << hi << "]\n";
                ok = false;
            }
    }
    if (!throughput_band.empty()) {
        const auto [lo, hi] = parse_band(throughput_band, "--throughput-band");
        for (const CompareRow& r : rows)
            if (r.throughput_ratio < lo || r.throughput_ratio > hi) {
                std::cerr << "band failure: throughput ratio " << r.throughput_ratio
                          << " at input=" << r.input_len << " output=" << r.output_len
                          << " outside [" << lo << ", " << hi << "]\n";
                ok = false;
            }
    }
    return ok ? kExitOk : kExitBand;
}

int cmd_report(const std::string& report_path, const CommonOpts& opts) {
    const RunReport report = RunReport::load_file(report_path);
    print_run_summary(report);
    if (!opts.out_dir.empty()) {
        fs::create_directories(opts.out_dir);
        write_file(fs::path(opts.out_dir) / "requests.csv", report.requests_csv());
        write_file(fs::path(opts.out_dir) / "throughput.csv", report.throughput_csv());
        std::cout << "report: CSVs written to " << opts.out_dir << "\n";
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deterministic MoE edge-deployment simulator"};
    app.require_subcommand(1);
    // Let --seed/--out/--force appear after the subcommand name as well.
    app.fallthrough();

    CommonOpts opts;
    std::uint64_t seed_value = 0;
    bool seed_given = false;
    app.add_option("--seed", seed_value, "Override the scenario seed")
        ->each([&](const std::string&) { seed_given = true; });
    app.add_option("--out", opts.out_dir, "Output directory (default: scenario output_dir)");
    app.add_flag("--force", opts.force, "Overwrite an existing output directory");

    std::string scenario_path;
    std::vector<std::string> scenario_paths;
    std::string path_a, path_b, report_path;
    std::string latency_band, throughput_band;
    bool dry_run = false;
    int jobs = 1;

    CLI::App* trace = app.add_subcommand("trace", "Generate and save the routing trace");
    trace->add_option("scenario", scenario_path, "Scenario JSON")->required();

    CLI::App* plan = app.add_subcommand("plan", "Plan a deployment and save placement + quant");
    plan->add_option("scenario", scenario_path, "Scenario JSON")->required();

    CLI::App* run = app.add_subcommand("run", "Plan (or load) a deployment and simulate");
    run->add_option("scenarios", scenario_paths, "Scenario JSON file(s)")->required();
    run->add_flag("--dry-run", dry_run, "Validate and plan without simulating");
    run->add_option("--jobs", jobs, "Parallel scenario workers")->check(CLI::PositiveNumber);

    CLI::App* compare = app.add_subcommand("compare", "Ratio table of two run reports (A / B)");
    compare->add_option("report_a", path_a, "Numerator report JSON")->required();
    compare->add_option("report_b", path_b, "Denominator report JSON")->required();
    compare->add_option("--latency-band", latency_band, "Acceptance band lo:hi");
    compare->add_option("--throughput-band", throughput_band, "Acceptance band lo:hi");

    CLI::App* report = app.add_subcommand("report", "Re-render a report JSON to CSV + summary");
    report->add_option("report_json", report_path, "Report JSON")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitValidation;
    }
    if (seed_given) opts.seed = seed_value;

    try {
        if (trace->parsed()) return cmd_trace(scenario_path, opts);
        if (plan->parsed()) return cmd_plan(scenario_path, opts);
        if (run->parsed()) return cmd_run(scenario_paths, opts, dry_run, jobs);
        if (compare->parsed())
            return cmd_compare(path_a, path_b, opts, latency_band, throughput_band);
        if (report->parsed()) return cmd_report(report_path, opts);
    } catch (...) {
        return classify_exception();
    }
    return kExitValidation;  // unreachable: require_subcommand(1)
}
