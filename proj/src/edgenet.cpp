// SPDX-License-Identifier: Apache-2.0
#include "moedge/edgenet.hpp"

#include <algorithm>
#include <cmath>

namespace moedge {

int EdgeTopology::server_id(const std::string& name) const {
    for (const auto& s : servers)
        if (s.name == name) return s.id;
    throw ConfigError("topology: unknown server '" + name + "'");
}

const LinkSpec* EdgeTopology::link_between(int a, int b) const {
    for (const auto& l : links)
        if ((l.a == a && l.b == b) || (l.a == b && l.b == a)) return &l;
    return nullptr;
}

bool EdgeTopology::connected(const std::vector<int>& participant_ids) const {
    if (participant_ids.size() <= 1) return true;
    std::vector<int> stack{participant_ids.front()};
    std::vector<bool> seen(servers.size(), false);
    seen[participant_ids.front()] = true;
    while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        for (const auto& l : links) {
            const int other = l.a == cur ? l.b : (l.b == cur ? l.a : -1);
            if (other >= 0 && !seen[other]) {
                seen[other] = true;
                stack.push_back(other);
            }
        }
    }
    return std::all_of(participant_ids.begin(), participant_ids.end(),
                       [&](int id) { return seen[id]; });
}

void EdgeTopology::validate() const {
    if (servers.empty()) throw ConfigError("topology: at least one server required");
    for (std::size_t i = 0; i < servers.size(); ++i) {
        if (servers[i].id != static_cast<int>(i))
            throw ConfigError("topology: server ids must be dense indices");
        servers[i].validate();
        for (std::size_t j = i + 1; j < servers.size(); ++j)
            if (servers[i].name == servers[j].name)
                throw ConfigError("topology: duplicate server name '" + servers[i].name + "'");
    }
    for (std::size_t i = 0; i < links.size(); ++i) {
        links[i].validate();
        if (links[i].a < 0 || links[i].a >= static_cast<int>(servers.size()) || links[i].b < 0 ||
            links[i].b >= static_cast<int>(servers.size()))
            throw ConfigError("topology: link endpoint out of range");
        for (std::size_t j = i + 1; j < links.size(); ++j) {
            const bool same = (links[i].a == links[j].a && links[i].b == links[j].b) ||
                              (links[i].a == links[j].b && links[i].b == links[j].a);
            if (same) throw ConfigError("topology: duplicate link between a server pair");
        }
    }
    if (cloud && cloud->bandwidth <= 0.0)
        throw ConfigError("topology: cloud uplink bandwidth must be > 0");
}

namespace {

void put_u32(std::uint8_t* p, std::uint32_t v) {
    p[0] = static_cast<std::uint8_t>(v >> 24);
    p[1] = static_cast<std::uint8_t>(v >> 16);
    p[2] = static_cast<std::uint8_t>(v >> 8);
    p[3] = static_cast<std::uint8_t>(v);
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

std::uint8_t xor_checksum(const std::uint8_t* p, std::size_t n) {
    std::uint8_t c = 0;
    for (std::size_t i = 0; i < n; ++i) c ^= p[i];
    return c;
}

}  // namespace

HelloWire encode_hello(const ResourceStatus& status, std::uint32_t sender, std::uint32_t seq) {
    if (status.avail_compute_pct < 0 || status.avail_compute_pct > 100 ||
        status.avail_gpu_mem_pct < 0 || status.avail_gpu_mem_pct > 100)
        throw ValueError("hello: percentage out of range (101-255 reserved)");
    HelloWire wire{};
    put_u32(wire.data(), sender);
    put_u32(wire.data() + 4, seq);
    wire[8] = kHelloMessageType;
    wire[9] = static_cast<std::uint8_t>(status.avail_compute_pct);
    wire[10] = static_cast<std::uint8_t>(status.avail_gpu_mem_pct);
    wire[11] = xor_checksum(wire.data(), 11);
    return wire;
}

HelloMessage decode_hello(const std::uint8_t* data, std::size_t len) {
    if (len != kHelloWireBytes) throw FrameError("hello: frame must be exactly 12 bytes");
    if (xor_checksum(data, 11) != data[11]) throw FrameError("hello: checksum mismatch");
    if (data[8] != kHelloMessageType) throw FrameError("hello: unknown message type");
    if (data[9] > 100 || data[10] > 100) throw ValueError("hello: reserved percentage value");
    HelloMessage msg;
    msg.sender = get_u32(data);
    msg.sequence = get_u32(data + 4);
    msg.status.avail_compute_pct = data[9];
    msg.status.avail_gpu_mem_pct = data[10];
    return msg;
}

HelloMessage decode_hello(const HelloWire& wire) { return decode_hello(wire.data(), wire.size()); }

std::optional<HelloMessage> maybe_advertise(const ResourceStatus& current,
                                            const ResourceStatus& last_advertised,
                                            double threshold_pct, double period_s, double now,
                                            std::uint32_t sender, std::uint32_t next_seq) {
    const double dc = std::abs(current.avail_compute_pct - last_advertised.avail_compute_pct);
    const double dm = std::abs(current.avail_gpu_mem_pct - last_advertised.avail_gpu_mem_pct);
    const bool due = (now - last_advertised.timestamp_s) >= period_s;
    if (dc <= threshold_pct && dm <= threshold_pct && !due) return std::nullopt;
    HelloMessage msg;
    msg.sender = sender;
    msg.sequence = next_seq;
    msg.status = current;
    msg.status.timestamp_s = now;
    return msg;
}

void NeighborView::observe(const HelloMessage& hello) {
    auto it = sequences_.find(hello.sender);
    if (it != sequences_.end() && it->second >= hello.sequence) return;
    sequences_[hello.sender] = hello.sequence;
    statuses_[hello.sender] = hello.status;
}

ResourceStatus NeighborView::status_or_default(std::uint32_t server) const {
    auto it = statuses_.find(server);
    return it == statuses_.end() ? ResourceStatus{} : it->second;
}

double transfer_time(double bytes, double bandwidth, double latency_s) {
    return latency_s + bytes / bandwidth;
}

double transfer_time(double bytes, const LinkSpec& link) {
    return transfer_time(bytes, link.bandwidth, link.propagation_latency_s);
}

}  // namespace moedge
