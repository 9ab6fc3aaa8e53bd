// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "moedge/compression.hpp"
#include "moedge/simcore.hpp"

namespace moedge {

// One simulated scenario: a report per (input_len, output_len) bucket, in
// sweep order.
struct RunReport {
    std::string scenario_name;
    std::uint64_t seed = 0;
    std::vector<SimReport> buckets;

    std::string to_json() const;
    static RunReport from_json(const std::string& text);
    static RunReport load_file(const std::string& path);

    // CSV time series: one row per request, and one row per simulated
    // second of decode output.
    std::string requests_csv() const;
    std::string throughput_csv() const;
};

// Bit-width policy file: {"format_version": 1, "shared_bits": b,
// "experts": [[layer, expert, bits], ...]}.
std::string quant_to_json(const QuantPolicy& quant);
QuantPolicy quant_from_json(const std::string& text, const MoEModelSpec& spec);

// Per-bucket A/B ratios. Buckets must match pairwise in (input, output).
struct CompareRow {
    int input_len = 0;
    int output_len = 0;
    double latency_ratio = 0.0;    // avg request latency, A / B
    double throughput_ratio = 0.0; // avg generation throughput, A / B
};

std::vector<CompareRow> compare_reports(const RunReport& a, const RunReport& b);
std::string compare_csv(const std::vector<CompareRow>& rows);

}  // namespace moedge
