// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "moedge/errors.hpp"

namespace moedge {

struct ServerSpec {
    std::string name;
    int id = 0;  // index into EdgeTopology::servers
    std::uint64_t gpu_mem_bytes = 0;
    std::uint64_t host_mem_bytes = 0;
    std::uint64_t ssd_bytes = 0;
    double compute_rate_flops = 0.0;  // per GPU
    double intra_bus_bandwidth = 0.0;  // bytes/s, PCIe class
    double intra_bus_latency_s = 2e-6;
    int gpu_count = 1;

    void validate() const {
        if (gpu_mem_bytes == 0 || ssd_bytes == 0)
            throw ConfigError("server " + name + ": capacities must be > 0");
        if (compute_rate_flops <= 0.0)
            throw ConfigError("server " + name + ": compute_rate must be > 0");
        if (intra_bus_bandwidth <= 0.0)
            throw ConfigError("server " + name + ": intra_bus_bandwidth must be > 0");
        if (gpu_count < 1) throw ConfigError("server " + name + ": gpu_count must be >= 1");
    }
};

struct LinkSpec {
    int a = 0;
    int b = 0;  // server ids; undirected, unique per pair
    double bandwidth = 0.0;  // bytes/s
    double propagation_latency_s = 0.0;

    void validate() const {
        if (bandwidth <= 0.0) throw ConfigError("link: bandwidth must be > 0");
        if (propagation_latency_s < 0.0) throw ConfigError("link: latency must be >= 0");
        if (a == b) throw ConfigError("link: endpoints must differ");
    }
};

struct CloudUplink {
    double bandwidth = 0.0;
    double propagation_latency_s = 0.0;
};

struct EdgeTopology {
    std::vector<ServerSpec> servers;
    std::vector<LinkSpec> links;
    std::optional<CloudUplink> cloud;

    int server_id(const std::string& name) const;
    // nullptr when the pair has no direct link.
    const LinkSpec* link_between(int a, int b) const;
    bool connected(const std::vector<int>& participant_ids) const;
    void validate() const;
};

struct ResourceStatus {
    int avail_compute_pct = 100;
    int avail_gpu_mem_pct = 100;
    double timestamp_s = 0.0;
};

// 96 bits on the wire, big-endian:
//   [0:31] sender id, [32:63] sequence, [64:71] type (0x01 = hello),
//   [72:79] avail_compute_pct, [80:87] avail_gpu_mem_pct,
//   [88:95] checksum = XOR of the previous 11 bytes.
inline constexpr std::size_t kHelloWireBytes = 12;
inline constexpr std::uint8_t kHelloMessageType = 0x01;

struct HelloMessage {
    std::uint32_t sender = 0;
    std::uint32_t sequence = 0;
    ResourceStatus status;
};

using HelloWire = std::array<std::uint8_t, kHelloWireBytes>;

// Percentages above 100 are reserved and refuse to encode.
HelloWire encode_hello(const ResourceStatus& status, std::uint32_t sender, std::uint32_t seq);

// Inverse of encode_hello on its image. Wrong length or checksum -> FrameError;
// reserved percentage byte (> 100) -> ValueError.
HelloMessage decode_hello(const std::uint8_t* data, std::size_t len);
HelloMessage decode_hello(const HelloWire& wire);

// Threshold-gated periodic advertisement: emit iff either percentage moved by
// more than threshold_pct since the last advertisement, or period_s elapsed.
std::optional<HelloMessage> maybe_advertise(const ResourceStatus& current,
                                            const ResourceStatus& last_advertised,
                                            double threshold_pct, double period_s, double now,
                                            std::uint32_t sender, std::uint32_t next_seq);

// Latest-wins view of neighbor resource state, keyed by sender; stale
// (lower-sequence) arrivals are dropped.
class NeighborView {
public:
    void observe(const HelloMessage& hello);
    const std::map<std::uint32_t, ResourceStatus>& statuses() const { return statuses_; }
    ResourceStatus status_or_default(std::uint32_t server) const;
    bool empty() const { return statuses_.empty(); }

private:
    std::map<std::uint32_t, ResourceStatus> statuses_;
    std::map<std::uint32_t, std::uint32_t> sequences_;
};

// propagation latency + bytes / bandwidth
double transfer_time(double bytes, const LinkSpec& link);
double transfer_time(double bytes, double bandwidth, double latency_s);

}  // namespace moedge
