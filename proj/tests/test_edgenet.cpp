// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "moedge/edgenet.hpp"
#include "moedge/errors.hpp"

using namespace moedge;

TEST_CASE("hello codec round-trips every legal percentage pair") {
    for (int c = 0; c <= 100; ++c)
        for (int m = 0; m <= 100; ++m) {
            ResourceStatus st{c, m, 1.5};
            const HelloWire w = encode_hello(st, 42, 7);
            static_assert(sizeof(w) == kHelloWireBytes);
            const HelloMessage h = decode_hello(w);
            CHECK(h.sender == 42);
            CHECK(h.sequence == 7);
            CHECK(h.status.avail_compute_pct == c);
            CHECK(h.status.avail_gpu_mem_pct == m);
        }
}

TEST_CASE("wire layout puts the percentages in the reserved region") {
    const HelloWire zero = encode_hello(ResourceStatus{0, 0, 0.0}, 1, 1);
    CHECK(zero[9] == 0x00);
    CHECK(zero[10] == 0x00);
    const HelloWire w = encode_hello(ResourceStatus{100, 50, 0.0}, 1, 1);
    CHECK(w[9] == 0x64);
    CHECK(w[10] == 0x32);
    CHECK(w[8] == kHelloMessageType);
}

TEST_CASE("codec rejects reserved values and bad frames") {
    CHECK_THROWS_AS(encode_hello(ResourceStatus{101, 0, 0.0}, 0, 0), ValueError);
    CHECK_THROWS_AS(encode_hello(ResourceStatus{0, 120, 0.0}, 0, 0), ValueError);

    HelloWire w = encode_hello(ResourceStatus{50, 50, 0.0}, 3, 4);
    CHECK_THROWS_AS(decode_hello(w.data(), 11), FrameError);
    CHECK_THROWS_AS(decode_hello(w.data(), 13), FrameError);

    // A reserved percentage byte with a fixed-up checksum is a value error.
    HelloWire bad = w;
    bad[9] = 0xFF;
    bad[11] = 0;
    std::uint8_t x = 0;
    for (int i = 0; i < 11; ++i) x ^= bad[i];
    bad[11] = x;
    CHECK_THROWS_AS(decode_hello(bad), ValueError);
}

TEST_CASE("checksum detects every single-byte corruption") {
    std::mt19937 rng(99);
    std::uniform_int_distribution<int> pct(0, 100);
    std::uniform_int_distribution<int> pos(0, static_cast<int>(kHelloWireBytes) - 1);
    std::uniform_int_distribution<int> byte(0, 255);
    for (int trial = 0; trial < 2000; ++trial) {
        ResourceStatus st{pct(rng), pct(rng), 0.0};
        HelloWire w = encode_hello(st, rng(), rng());
        const int p = pos(rng);
        std::uint8_t nv = static_cast<std::uint8_t>(byte(rng));
        if (nv == w[p]) nv ^= 0x01;
        w[p] = nv;
        CHECK_THROWS(decode_hello(w));  // XOR checksum catches any 1-byte change
    }
}

TEST_CASE("maybe_advertise gates on threshold and period") {
    const ResourceStatus last{80, 80, 10.0};

    // Below threshold, within period: suppressed.
    CHECK(!maybe_advertise(ResourceStatus{82, 78, 0.0}, last, 5.0, 2.0, 11.0, 1, 9));
    // Delta strictly above threshold on one axis: emitted.
    auto m = maybe_advertise(ResourceStatus{80, 74, 0.0}, last, 5.0, 2.0, 11.0, 1, 9);
    REQUIRE(m.has_value());
    CHECK(m->sender == 1);
    CHECK(m->sequence == 9);
    CHECK(m->status.avail_gpu_mem_pct == 74);
    // Delta exactly equal to the threshold: still suppressed ("more than").
    CHECK(!maybe_advertise(ResourceStatus{85, 80, 0.0}, last, 5.0, 2.0, 11.0, 1, 9));
    // No delta but the period elapsed: emitted.
    CHECK(maybe_advertise(ResourceStatus{80, 80, 0.0}, last, 5.0, 2.0, 12.0, 1, 9).has_value());
    // Period boundary is inclusive.
    CHECK(maybe_advertise(ResourceStatus{80, 80, 0.0}, last, 5.0, 2.0, 11.9999, 1, 9) ==
          std::nullopt);
}

TEST_CASE("neighbor view keeps the highest sequence per sender") {
    NeighborView v;
    CHECK(v.empty());
    v.observe(HelloMessage{4, 1, ResourceStatus{50, 50, 1.0}});
    v.observe(HelloMessage{4, 2, ResourceStatus{60, 60, 2.0}});
    CHECK(v.status_or_default(4).avail_compute_pct == 60);

    // Stale arrival is dropped.
    v.observe(HelloMessage{4, 1, ResourceStatus{10, 10, 3.0}});
    CHECK(v.status_or_default(4).avail_compute_pct == 60);

    // Unknown servers read as fully available.
    CHECK(v.status_or_default(9).avail_compute_pct == 100);
    CHECK(v.status_or_default(9).avail_gpu_mem_pct == 100);
}

TEST_CASE("transfer_time is latency plus bytes over bandwidth") {
    LinkSpec l{0, 1, 1e9, 1e-3};
    CHECK(transfer_time(0.0, l) == doctest::Approx(1e-3));
    l.propagation_latency_s = 0.0;
    CHECK(transfer_time(1e9, l) == doctest::Approx(1.0));
    CHECK(transfer_time(64e9, 64e9, 0.0) == doctest::Approx(1.0));
    CHECK(transfer_time(4096.0, 1e9, 1e-5) == doctest::Approx(1e-5 + 4096.0 / 1e9));
}

TEST_CASE("topology lookups and validation") {
    EdgeTopology t;
    t.servers = {ServerSpec{"a", 0, 1000, 0, 1000, 1e12, 64e9, 2e-6, 1},
                 ServerSpec{"b", 1, 1000, 0, 1000, 1e12, 64e9, 2e-6, 1},
                 ServerSpec{"c", 2, 1000, 0, 1000, 1e12, 64e9, 2e-6, 1}};
    t.links = {LinkSpec{0, 1, 1e9, 1e-5}, LinkSpec{1, 2, 1e9, 1e-5}};
    t.validate();

    CHECK(t.server_id("b") == 1);
    CHECK_THROWS_AS(t.server_id("zz"), ConfigError);
    CHECK(t.link_between(0, 1) != nullptr);
    CHECK(t.link_between(1, 0) != nullptr);  // undirected
    CHECK(t.link_between(0, 2) == nullptr);

    CHECK(t.connected({0, 1, 2}));  // chain through b
    EdgeTopology disconnected = t;
    disconnected.links = {LinkSpec{0, 1, 1e9, 1e-5}};
    CHECK(!disconnected.connected({0, 1, 2}));
    CHECK(disconnected.connected({0, 1}));

    EdgeTopology dup = t;
    dup.links.push_back(LinkSpec{1, 0, 2e9, 1e-5});
    CHECK_THROWS_AS(dup.validate(), ConfigError);

    CHECK_THROWS_AS((LinkSpec{2, 2, 1e9, 0.0}.validate()), ConfigError);
    CHECK_THROWS_AS((LinkSpec{0, 1, 0.0, 0.0}.validate()), ConfigError);
}
