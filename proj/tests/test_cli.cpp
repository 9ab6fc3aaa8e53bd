// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "moedge/report.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace moedge;

namespace {

struct CliResult {
    int code = -1;
    std::string output;  // stdout and stderr interleaved
};

// Runs the installed binary with the given argument string and captures
// everything it prints. The exit code is the process exit status.
CliResult run_cli(const std::string& args) {
    const std::string cmd = "\"" MOEDGE_CLI_PATH "\" " + args + " 2>&1";
    CliResult res;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    char buf[4096];
    std::size_t n = 0;
    while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) res.output.append(buf, n);
    const int status = pclose(pipe);
    REQUIRE(WIFEXITED(status));
    res.code = WEXITSTATUS(status);
    return res;
}

// Fresh scratch root, wiped once per test binary invocation.
const fs::path& sandbox() {
    static const fs::path root = [] {
        fs::path p = fs::temp_directory_path() / "moedge-cli-test";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return root;
}

std::string quoted(const fs::path& p) { return "\"" + p.string() + "\""; }

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE_MESSAGE(in.good(), "cannot open " << path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool contains(const std::string& hay, const std::string& needle) {
    return hay.find(needle) != std::string::npos;
}

json mini_server(const std::string& name, double gpu_bytes, double ssd_bytes) {
    return json{{"name", name},
                {"gpu_mem_bytes", gpu_bytes},
                {"ssd_bytes", ssd_bytes},
                {"compute_rate_flops", 1e12},
                {"intra_bus_bandwidth", 1e10},
                {"intra_bus_latency_s", 1e-6},
                {"gpu_count", 1}};
}

// Two small servers, a tiny mixture model, two requests. Runs in well under
// a second so every subcommand can afford a live subprocess.
json mini_scenario(const std::string& name) {
    return json{
        {"schema_version", 1},
        {"name", name},
        {"seed", 7},
        {"model",
         {{"num_layers", 2},
          {"experts_per_layer", 4},
          {"expert_param_bytes", 200000},
          {"shared_param_bytes", 100000},
          {"top_k", 2},
          {"hidden_dim", 32}}},
        {"workload",
         {{"num_requests", 2},
          {"input_len", 3},
          {"output_len", 2},
          {"zipf_s", 1.0},
          {"kappa", 4.0},
          {"arrival_spacing_s", 0.01}}},
        {"origin_server", "east"},
        {"topology",
         {{"servers", json::array({mini_server("east", 4e6, 1e9), mini_server("west", 4e6, 1e9)})},
          {"links", json::array({{{"a", "east"},
                                  {"b", "west"},
                                  {"bandwidth", 1e9},
                                  {"propagation_latency_s", 1e-5}}})}}},
        {"output_dir", (sandbox() / (name + "-default-out")).string()}};
}

fs::path write_scenario(const std::string& stem, const json& sc) {
    const fs::path path = sandbox() / (stem + ".json");
    std::ofstream out(path, std::ios::binary);
    out << sc.dump(2) << "\n";
    REQUIRE(out.good());
    return path;
}

}  // namespace

TEST_CASE("run writes the full artifact set and refuses to clobber it") {
    const fs::path sc = write_scenario("basic", mini_scenario("cli-basic"));
    const fs::path out = sandbox() / "run-basic";

    const CliResult first = run_cli("run " + quoted(sc) + " --out " + quoted(out));
    CAPTURE(first.output);
    CHECK(first.code == 0);
    CHECK(contains(first.output, "bucket input=3 output=2"));
    CHECK(contains(first.output, "run: wrote"));
    for (const char* name :
         {"report.json", "requests.csv", "throughput.csv", "placement.json", "quant.json"})
        CHECK_MESSAGE(fs::exists(out / name), name);

    const CliResult clobber = run_cli("run " + quoted(sc) + " --out " + quoted(out));
    CAPTURE(clobber.output);
    CHECK(clobber.code == 2);
    CHECK(contains(clobber.output, "already exists"));

    const CliResult forced = run_cli("run " + quoted(sc) + " --out " + quoted(out) + " --force");
    CAPTURE(forced.output);
    CHECK(forced.code == 0);
}

TEST_CASE("equal seeds give byte-identical reports across processes") {
    const fs::path sc = write_scenario("repeat", mini_scenario("cli-repeat"));
    const fs::path out_a = sandbox() / "repeat-a";
    const fs::path out_b = sandbox() / "repeat-b";

    REQUIRE(run_cli("run " + quoted(sc) + " --out " + quoted(out_a)).code == 0);
    REQUIRE(run_cli("run " + quoted(sc) + " --out " + quoted(out_b)).code == 0);

    CHECK(slurp(out_a / "report.json") == slurp(out_b / "report.json"));
    CHECK(slurp(out_a / "requests.csv") == slurp(out_b / "requests.csv"));
    CHECK(slurp(out_a / "throughput.csv") == slurp(out_b / "throughput.csv"));
}

TEST_CASE("--seed overrides the seed stored in the scenario") {
    const fs::path sc = write_scenario("seeded", mini_scenario("cli-seeded"));
    const fs::path base = sandbox() / "seed-base";
    const fs::path other = sandbox() / "seed-123";

    REQUIRE(run_cli("run " + quoted(sc) + " --out " + quoted(base)).code == 0);
    REQUIRE(run_cli("--seed 123 run " + quoted(sc) + " --out " + quoted(other)).code == 0);

    const RunReport overridden = RunReport::load_file((other / "report.json").string());
    CHECK(overridden.seed == 123);
    REQUIRE(!overridden.buckets.empty());
    CHECK(overridden.buckets[0].seed == 123);
    CHECK(slurp(base / "report.json") != slurp(other / "report.json"));
}

TEST_CASE("--dry-run plans and validates without simulating") {
    const fs::path sc = write_scenario("dry", mini_scenario("cli-dry"));
    const fs::path out = sandbox() / "dry-run";

    const CliResult res = run_cli("run " + quoted(sc) + " --dry-run --out " + quoted(out));
    CAPTURE(res.output);
    CHECK(res.code == 0);
    CHECK(contains(res.output, "dry-run: scenario valid, plan objective="));
    CHECK(fs::exists(out / "placement.json"));
    CHECK(fs::exists(out / "quant.json"));
    CHECK(!fs::exists(out / "report.json"));

    // The artifacts are valid JSON, not fragments.
    CHECK_NOTHROW((void)json::parse(slurp(out / "placement.json")));
    CHECK_NOTHROW((void)json::parse(slurp(out / "quant.json")));
}

TEST_CASE("trace reports its shape and is deterministic across processes") {
    const fs::path sc = write_scenario("traced", mini_scenario("cli-traced"));
    const fs::path out_a = sandbox() / "trace-a";
    const fs::path out_b = sandbox() / "trace-b";

    const CliResult first = run_cli("trace " + quoted(sc) + " --out " + quoted(out_a));
    CAPTURE(first.output);
    CHECK(first.code == 0);
    // Two requests of 3 prompt + 2 generated tokens each.
    CHECK(contains(first.output, "trace: 10 tokens across 2 requests"));
    REQUIRE(fs::exists(out_a / "trace.json"));

    REQUIRE(run_cli("trace " + quoted(sc) + " --out " + quoted(out_b)).code == 0);
    CHECK(slurp(out_a / "trace.json") == slurp(out_b / "trace.json"));
}

TEST_CASE("trace accepts the shipped calibration scenarios") {
    const fs::path shipped = fs::path(MOEDGE_SCENARIO_DIR) / "output_sweep_single.json";
    REQUIRE(fs::exists(shipped));
    const fs::path out = sandbox() / "trace-shipped";
    const CliResult res = run_cli("trace " + quoted(shipped) + " --out " + quoted(out));
    CAPTURE(res.output);
    CHECK(res.code == 0);
    CHECK(fs::exists(out / "trace.json"));
}

TEST_CASE("plan prints the objective and writes the deployment artifacts") {
    const fs::path sc = write_scenario("planned", mini_scenario("cli-planned"));
    const fs::path out = sandbox() / "plan-out";

    const CliResult res = run_cli("plan " + quoted(sc) + " --out " + quoted(out));
    CAPTURE(res.output);
    CHECK(res.code == 0);
    CHECK(contains(res.output, "plan: expected_latency_s="));
    CHECK(contains(res.output, "objective="));
    CHECK(contains(res.output, "replication_used="));
    CHECK(fs::exists(out / "placement.json"));
    CHECK(fs::exists(out / "quant.json"));
}

TEST_CASE("compare of a run against itself yields unit ratios") {
    const fs::path sc = write_scenario("cmp", mini_scenario("cli-cmp"));
    const fs::path out = sandbox() / "cmp-run";
    REQUIRE(run_cli("run " + quoted(sc) + " --out " + quoted(out)).code == 0);
    const std::string report = quoted(out / "report.json");

    const CliResult self = run_cli("compare " + report + " " + report);
    CAPTURE(self.output);
    CHECK(self.code == 0);
    CHECK(contains(self.output, "input_len,output_len,latency_ratio,throughput_ratio"));
    CHECK(contains(self.output, "3,2,1,1"));

    SUBCASE("a band that brackets 1.0 passes") {
        const CliResult ok = run_cli("compare " + report + " " + report +
                                     " --latency-band 0.9:1.1 --throughput-band 0.9:1.1");
        CAPTURE(ok.output);
        CHECK(ok.code == 0);
    }
    SUBCASE("a band that excludes 1.0 fails with the dedicated exit code") {
        const CliResult bad =
            run_cli("compare " + report + " " + report + " --latency-band 1.5:2.0");
        CAPTURE(bad.output);
        CHECK(bad.code == 4);
        CHECK(contains(bad.output, "band failure"));
    }
    SUBCASE("a malformed band is a validation error") {
        const CliResult malformed =
            run_cli("compare " + report + " " + report + " --latency-band 0.9");
        CAPTURE(malformed.output);
        CHECK(malformed.code == 2);
        CHECK(contains(malformed.output, "expected lo:hi"));
    }
    SUBCASE("--out writes the same table to compare.csv") {
        const fs::path cmp_out = sandbox() / "cmp-csv";
        const CliResult res =
            run_cli("compare " + report + " " + report + " --out " + quoted(cmp_out));
        CAPTURE(res.output);
        CHECK(res.code == 0);
        const std::string csv = slurp(cmp_out / "compare.csv");
        CHECK(contains(csv, "input_len,output_len,latency_ratio,throughput_ratio"));
        CHECK(contains(csv, "3,2,1,1"));
    }
}

TEST_CASE("report re-renders CSVs from a stored report") {
    const fs::path sc = write_scenario("rerender", mini_scenario("cli-rerender"));
    const fs::path out = sandbox() / "rerender-run";
    REQUIRE(run_cli("run " + quoted(sc) + " --out " + quoted(out)).code == 0);

    const fs::path csv_out = sandbox() / "rerender-csv";
    const CliResult res =
        run_cli("report " + quoted(out / "report.json") + " --out " + quoted(csv_out));
    CAPTURE(res.output);
    CHECK(res.code == 0);
    CHECK(contains(res.output, "bucket input=3 output=2"));
    CHECK(contains(res.output, "report: CSVs written to"));
    CHECK(slurp(csv_out / "requests.csv") == slurp(out / "requests.csv"));
    CHECK(slurp(csv_out / "throughput.csv") == slurp(out / "throughput.csv"));
}

TEST_CASE("missing and malformed scenario files are validation errors") {
    const CliResult missing = run_cli("run " + quoted(sandbox() / "no-such.json"));
    CAPTURE(missing.output);
    CHECK(missing.code == 2);
    CHECK(contains(missing.output, "error:"));

    const fs::path broken = sandbox() / "broken.json";
    {
        std::ofstream out(broken);
        out << "{ this is not json\n";
    }
    const CliResult malformed = run_cli("run " + quoted(broken));
    CAPTURE(malformed.output);
    CHECK(malformed.code == 2);
    CHECK(contains(malformed.output, "error:"));
}

TEST_CASE("an undeployable model exits with the infeasibility code") {
    json sc = mini_scenario("cli-infeasible");
    // Shared weights larger than every GPU: no plan can exist.
    sc["topology"]["servers"] = json::array(
        {mini_server("east", 50000, 1e9), mini_server("west", 50000, 1e9)});
    const fs::path path = write_scenario("infeasible", sc);

    const CliResult res =
        run_cli("run " + quoted(path) + " --out " + quoted(sandbox() / "infeasible-out"));
    CAPTURE(res.output);
    CHECK(res.code == 3);
    CHECK(contains(res.output, "error:"));
}

TEST_CASE("several scenarios fan out into per-file sub-directories") {
    json a = mini_scenario("cli-multi-a");
    json b = mini_scenario("cli-multi-b");
    b["seed"] = 11;
    const fs::path path_a = write_scenario("multi-a", a);
    const fs::path path_b = write_scenario("multi-b", b);
    const fs::path out = sandbox() / "multi-out";

    const CliResult res = run_cli("run " + quoted(path_a) + " " + quoted(path_b) +
                                  " --jobs 2 --out " + quoted(out));
    CAPTURE(res.output);
    CHECK(res.code == 0);
    CHECK(fs::exists(out / "multi-a" / "report.json"));
    CHECK(fs::exists(out / "multi-b" / "report.json"));

    const RunReport ra = RunReport::load_file((out / "multi-a" / "report.json").string());
    const RunReport rb = RunReport::load_file((out / "multi-b" / "report.json").string());
    CHECK(ra.scenario_name == "cli-multi-a");
    CHECK(rb.scenario_name == "cli-multi-b");
    CHECK(ra.seed == 7);
    CHECK(rb.seed == 11);
}

TEST_CASE("the worst exit code wins when one of several scenarios fails") {
    json good = mini_scenario("cli-mixed-good");
    json bad = mini_scenario("cli-mixed-bad");
    bad["topology"]["servers"] = json::array(
        {mini_server("east", 50000, 1e9), mini_server("west", 50000, 1e9)});
    const fs::path path_good = write_scenario("mixed-good", good);
    const fs::path path_bad = write_scenario("mixed-bad", bad);
    const fs::path out = sandbox() / "mixed-out";

    const CliResult res =
        run_cli("run " + quoted(path_good) + " " + quoted(path_bad) + " --out " + quoted(out));
    CAPTURE(res.output);
    CHECK(res.code == 3);
    CHECK(fs::exists(out / "mixed-good" / "report.json"));
    CHECK(!fs::exists(out / "mixed-bad" / "report.json"));
}

TEST_CASE("an unknown subcommand is rejected") {
    const CliResult res = run_cli("frobnicate");
    CAPTURE(res.output);
    CHECK(res.code == 2);
}
