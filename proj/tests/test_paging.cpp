// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <array>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "moedge/errors.hpp"
#include "moedge/paging.hpp"

using namespace moedge;

namespace {

MoEModelSpec tiny_spec(int layers, int experts) {
    MoEModelSpec s;
    s.num_layers = layers;
    s.experts_per_layer = experts;
    s.expert_param_bytes = 1000;
    s.shared_param_bytes = 4000;
    s.top_k = 1;
    s.hidden_dim = 16;
    return s;
}

std::set<ExpertRef> layer0_experts(int n) {
    std::set<ExpertRef> placed;
    for (int e = 0; e < n; ++e) placed.insert(ExpertRef{0, e});
    return placed;
}

PopularityModel flat_popularity(int layers, int experts) {
    return PopularityModel(layers, experts, 0.98);
}

CoActivationMatrix kernel_matrix(int layers, int experts, std::vector<std::vector<double>> k) {
    CoActivationMatrix m;
    m.num_layers = layers;
    m.experts_per_layer = experts;
    m.transitions = std::move(k);
    m.layer_marginals.assign(layers, std::vector<double>(experts, 1.0 / experts));
    return m;
}

}  // namespace

TEST_CASE("popularity EWMA update law and fixed point") {
    PopularityModel pm(1, 4, 0.9);
    for (double v : pm.scores()[0]) CHECK(v == doctest::Approx(0.25));

    // One selection: decay everything, bump the chosen expert. k = 1 keeps
    // the row a pmf without renormalization, so values are exact.
    pm.observe_layer(0, std::array<int, 1>{2});
    CHECK(pm.scores()[0][2] == doctest::Approx(0.9 * 0.25 + 0.1));
    CHECK(pm.scores()[0][0] == doctest::Approx(0.9 * 0.25));

    // Two selections add 2*(1-lambda); the renormalizer divides by 1.1.
    PopularityModel pm2(1, 4, 0.9);
    pm2.observe_layer(0, std::array<int, 2>{0, 1});
    CHECK(pm2.scores()[0][0] == doctest::Approx((0.9 * 0.25 + 0.1) / 1.1));
    CHECK(pm2.scores()[0][3] == doctest::Approx(0.9 * 0.25 / 1.1));

    // Repeated observation of one expert converges to the fixed point 1.
    for (int i = 0; i < 1000; ++i) pm.observe_layer(0, std::array<int, 1>{2});
    CHECK(pm.score(ExpertRef{0, 2}) > 0.99);
    const double sum =
        std::accumulate(pm.scores()[0].begin(), pm.scores()[0].end(), 0.0);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));

    CHECK_THROWS_AS(PopularityModel(1, 4, 1.0), ConfigError);
    CHECK_THROWS_AS(PopularityModel(0, 4, 0.9), ConfigError);
}

TEST_CASE("popularity reset_to normalizes and keeps uniform on empty rows") {
    PopularityModel pm(2, 2, 0.9);
    pm.reset_to({{3.0, 1.0}, {0.0, 0.0}});
    CHECK(pm.scores()[0][0] == doctest::Approx(0.75));
    CHECK(pm.scores()[0][1] == doctest::Approx(0.25));
    CHECK(pm.scores()[1][0] == doctest::Approx(0.5));  // zero row stays uniform
    CHECK_THROWS_AS(pm.reset_to({{1.0, 1.0}}), StructuralError);
}

TEST_CASE("predict_ahead follows an identity kernel exactly") {
    CoActivationMatrix m = kernel_matrix(
        3, 3,
        {{1, 0, 0, 0, 1, 0, 0, 0, 1}, {1, 0, 0, 0, 1, 0, 0, 0, 1}});
    PopularityModel pm = flat_popularity(3, 3);
    auto ranked = predict_ahead(pm, std::array<int, 1>{1}, 0, m, 2, 1.0);
    REQUIRE(ranked.size() == 2);
    CHECK(ranked[0].layer == 1);
    CHECK(ranked[0].ranked[0] == 1);
    CHECK(ranked[1].layer == 2);
    CHECK(ranked[1].ranked[0] == 1);

    // Depth clips at the last layer; depth 0 predicts nothing.
    CHECK(predict_ahead(pm, std::array<int, 1>{1}, 2, m, 2, 1.0).empty());
    CHECK(predict_ahead(pm, std::array<int, 1>{1}, 0, m, 0, 1.0).empty());
    CHECK_THROWS_AS(predict_ahead(pm, std::array<int, 1>{1}, 0, m, -1, 1.0), ConfigError);
    CHECK_THROWS_AS(predict_ahead(pm, std::array<int, 1>{1}, 0, m, 1, 1.5), ConfigError);
}

TEST_CASE("uniform kernel defers to popularity; full blend ties break low") {
    CoActivationMatrix m = kernel_matrix(2, 3,
                                         {{1. / 3, 1. / 3, 1. / 3, 1. / 3, 1. / 3, 1. / 3,
                                           1. / 3, 1. / 3, 1. / 3}});
    PopularityModel pm(2, 3, 0.9);
    pm.reset_to({{1. / 3, 1. / 3, 1. / 3}, {0.2, 0.5, 0.3}});

    // gamma < 1: propagated mass is flat, so popularity decides the order.
    auto ranked = predict_ahead(pm, std::array<int, 1>{0}, 0, m, 1, 0.5);
    REQUIRE(ranked.size() == 1);
    CHECK(ranked[0].ranked == std::vector<int>{1, 2, 0});

    // gamma = 1 with a flat kernel: all tied, smallest index first.
    auto tied = predict_ahead(pm, std::array<int, 1>{0}, 0, m, 1, 1.0);
    CHECK(tied[0].ranked == std::vector<int>{0, 1, 2});
}

TEST_CASE("predict_ahead matches naive propagation and Monte Carlo") {
    const int E = 6;
    std::mt19937 rng(31);
    std::uniform_real_distribution<double> d(0.05, 1.0);
    std::vector<std::vector<double>> kernels(3);
    for (auto& k : kernels) {
        k.resize(E * E);
        for (int i = 0; i < E; ++i) {
            double sum = 0.0;
            for (int j = 0; j < E; ++j) sum += (k[i * E + j] = d(rng));
            for (int j = 0; j < E; ++j) k[i * E + j] /= sum;
        }
    }
    CoActivationMatrix m = kernel_matrix(4, E, kernels);
    PopularityModel pm = flat_popularity(4, E);

    const int start = 2;
    auto ranked = predict_ahead(pm, std::array<int, 1>{start}, 0, m, 3, 1.0);
    REQUIRE(ranked.size() == 3);

    // Naive long-double propagation reproduces every ranking.
    std::vector<long double> mass(E, 0.0L);
    mass[start] = 1.0L;
    for (int step = 1; step <= 3; ++step) {
        std::vector<long double> next(E, 0.0L);
        for (int i = 0; i < E; ++i)
            for (int j = 0; j < E; ++j) next[j] += mass[i] * m.at(step - 1, i, j);
        mass = next;
        std::vector<int> order(E);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return mass[a] > mass[b]; });
        CHECK(ranked[step - 1].ranked == order);
    }

    // Monte Carlo rollouts agree with the depth-3 distribution within 1%.
    std::mt19937 mc(77);
    std::vector<double> freq(E, 0.0);
    const int trials = 200000;
    for (int t = 0; t < trials; ++t) {
        int cur = start;
        for (int step = 0; step < 3; ++step) {
            std::uniform_real_distribution<double> u(0.0, 1.0);
            double r = u(mc), acc = 0.0;
            int nxt = E - 1;
            for (int j = 0; j < E; ++j) {
                acc += m.at(step, cur, j);
                if (r < acc) {
                    nxt = j;
                    break;
                }
            }
            cur = nxt;
        }
        freq[cur] += 1.0 / trials;
    }
    for (int e = 0; e < E; ++e) CHECK(std::abs(freq[e] - static_cast<double>(mass[e])) < 0.01);
}

TEST_CASE("bus reservations are FIFO in call order") {
    BusTimeline bus;
    CHECK(bus.reserve(0.0, 5.0) == doctest::Approx(0.0));
    CHECK(bus.free_at_s == doctest::Approx(5.0));
    CHECK(bus.reserve(2.0, 3.0) == doctest::Approx(5.0));  // queued behind the first
    CHECK(bus.free_at_s == doctest::Approx(8.0));
    CHECK(bus.reserve(10.0, 1.0) == doctest::Approx(10.0));  // idle gap
    CHECK(bus.free_at_s == doctest::Approx(11.0));
}

TEST_CASE("cache access: miss, in-flight wait, and hit") {
    MoEModelSpec spec = tiny_spec(1, 8);
    QuantPolicy q = QuantPolicy::uniform(spec, 16);
    PopularityModel pm = flat_popularity(1, 8);
    ExpertCacheState cache(4000, spec, q, layer0_experts(8), 0);
    BusTimeline bus;
    const double bw = 1e6;  // 1000 bytes -> 1 ms
    const ExpertRef e0{0, 0};

    auto r = cache.access(e0, 0.0, bus, bw, pm);
    CHECK(!r.hit);
    REQUIRE(r.demand_load.has_value());
    CHECK(r.demand_load->bytes == 1000);
    CHECK(r.stall_s == doctest::Approx(0.001));
    CHECK(cache.in_flight(e0));
    CHECK(cache.stats().misses == 1);

    // A second access mid-flight waits the remaining time, no new load.
    auto r2 = cache.access(e0, 0.0005, bus, bw, pm);
    CHECK(!r2.hit);
    CHECK(!r2.demand_load.has_value());
    CHECK(r2.stall_s == doctest::Approx(0.0005));
    CHECK(!r2.prefetch_hit);  // demand flight, not a prefetch

    cache.complete_load(e0);
    CHECK(cache.resident(e0));
    CHECK(cache.resident_bytes() == 1000);
    auto r3 = cache.access(e0, 0.002, bus, bw, pm);
    CHECK(r3.hit);
    CHECK(r3.stall_s == doctest::Approx(0.0));
    CHECK(cache.stats().hits == 1);
    CHECK(cache.stats().stall_total_s == doctest::Approx(0.0015));
    cache.check_budget();
}

TEST_CASE("eviction picks the least popular, then least recently used") {
    MoEModelSpec spec = tiny_spec(1, 4);
    QuantPolicy q = QuantPolicy::uniform(spec, 16);
    PopularityModel pm(1, 4, 0.9);
    pm.reset_to({{0.1, 0.4, 0.3, 0.2}});
    ExpertCacheState cache(2000, spec, q, layer0_experts(4), 0);  // room for 2
    BusTimeline bus;
    const double bw = 1e9;

    for (int e : {0, 1}) {
        cache.access(ExpertRef{0, e}, 0.0, bus, bw, pm);
        cache.complete_load(ExpertRef{0, e});
    }
    // Expert 2 arrives: expert 0 (score 0.1) is the victim.
    auto r = cache.access(ExpertRef{0, 2}, 1.0, bus, bw, pm);
    REQUIRE(r.evicted.size() == 1);
    CHECK(r.evicted[0] == ExpertRef{0, 0});
    cache.complete_load(ExpertRef{0, 2});

    // Equal popularity: the least recently touched copy goes first.
    PopularityModel flat = flat_popularity(1, 4);
    ExpertCacheState c2(2000, spec, q, layer0_experts(4), 0);
    for (int e : {0, 1}) {
        c2.access(ExpertRef{0, e}, 0.0, bus, bw, flat);
        c2.complete_load(ExpertRef{0, e});
    }
    c2.access(ExpertRef{0, 0}, 1.0, bus, bw, flat);  // refresh 0; 1 is now LRU
    auto r2 = c2.access(ExpertRef{0, 3}, 2.0, bus, bw, flat);
    REQUIRE(r2.evicted.size() == 1);
    CHECK(r2.evicted[0] == ExpertRef{0, 1});
}

TEST_CASE("pins block eviction and the working-set guard throws") {
    MoEModelSpec spec = tiny_spec(1, 3);
    QuantPolicy q = QuantPolicy::uniform(spec, 16);
    PopularityModel pm = flat_popularity(1, 3);
    ExpertCacheState cache(2000, spec, q, layer0_experts(3), 0);
    BusTimeline bus;
    for (int e : {0, 1}) {
        cache.access(ExpertRef{0, e}, 0.0, bus, 1e9, pm);
        cache.complete_load(ExpertRef{0, e});
        cache.pin(ExpertRef{0, e});
    }
    CHECK_THROWS_AS(cache.access(ExpertRef{0, 2}, 1.0, bus, 1e9, pm), ConfigError);
    cache.unpin(ExpertRef{0, 0});
    auto r = cache.access(ExpertRef{0, 2}, 2.0, bus, 1e9, pm);
    REQUIRE(r.evicted.size() == 1);
    CHECK(r.evicted[0] == ExpertRef{0, 0});
    CHECK_THROWS_AS(cache.unpin(ExpertRef{0, 2}), StructuralError);
}

TEST_CASE("preload fills in order up to the prefetch share, without stats") {
    MoEModelSpec spec = tiny_spec(1, 6);
    QuantPolicy q = QuantPolicy::uniform(spec, 16);
    ExpertCacheState cache(4000, spec, q, layer0_experts(6), 1);  // 1000 reserved
    std::vector<ExpertRef> order;
    for (int e = 0; e < 6; ++e) order.push_back(ExpertRef{0, e});
    cache.preload(order);
    CHECK(cache.resident_bytes() == 3000);  // budget 4000 minus headroom
    CHECK(cache.resident(ExpertRef{0, 0}));
    CHECK(cache.resident(ExpertRef{0, 2}));
    CHECK(!cache.resident(ExpertRef{0, 3}));
    CHECK(cache.stats().hits == 0);
    CHECK(cache.stats().misses == 0);
    CHECK(cache.stats().bytes_loaded == 0);
    cache.check_budget();
}

TEST_CASE("prefetch skips resident and in-flight, guards victims, keeps headroom") {
    MoEModelSpec spec = tiny_spec(1, 6);
    QuantPolicy q = QuantPolicy::uniform(spec, 16);
    PopularityModel pm(1, 6, 0.9);
    pm.reset_to({{0.30, 0.25, 0.20, 0.15, 0.06, 0.04}});
    ExpertCacheState cache(3000, spec, q, layer0_experts(6), 1);
    BusTimeline bus;
    const double bw = 1e6;

    std::vector<ExpertRef> first = {ExpertRef{0, 4}, ExpertRef{0, 5}};
    auto issued = cache.schedule_prefetch(first, 0.0, bus, bw, pm);
    REQUIRE(issued.size() == 2);
    CHECK(issued[0].prefetch);
    CHECK(issued[0].completion_s == doctest::Approx(0.001));
    CHECK(issued[1].completion_s == doctest::Approx(0.002));  // FIFO behind the first

    // Same candidates again: both are in flight, nothing new is issued.
    CHECK(cache.schedule_prefetch(first, 0.0, bus, bw, pm).empty());
    cache.complete_load(ExpertRef{0, 4});
    cache.complete_load(ExpertRef{0, 5});
    CHECK(cache.schedule_prefetch(first, 0.1, bus, bw, pm).empty());

    // Prefetch share is full (2000 of 3000; 1000 headroom). A less popular
    // incoming expert may not displace a more popular resident.
    auto blocked = cache.schedule_prefetch(std::vector<ExpertRef>{ExpertRef{0, 3}}, 0.1,
                                           bus, bw, pm);
    // 0.15 > residents' 0.06/0.04: eviction is allowed.
    REQUIRE(blocked.size() == 1);
    cache.complete_load(ExpertRef{0, 3});
    CHECK(!cache.resident(ExpertRef{0, 5}));  // weakest resident went first

    // Now residents are {4: 0.06, 3: 0.15}; expert 5 (0.04) cannot evict.
    CHECK(cache.schedule_prefetch(std::vector<ExpertRef>{ExpertRef{0, 5}}, 0.2, bus, bw, pm)
              .empty());

    // Headroom stays free for demand loads throughout.
    CHECK(cache.occupancy_bytes() <= cache.budget_bytes() - 1000);
    cache.check_budget();
}

TEST_CASE("prefetch transfer time is bytes over bus bandwidth") {
    MoEModelSpec spec = tiny_spec(1, 2);
    spec.expert_param_bytes = 1'000'000'000;
    QuantPolicy q = QuantPolicy::uniform(spec, 16);
    PopularityModel pm = flat_popularity(1, 2);
    ExpertCacheState cache(2'000'000'000, spec, q, layer0_experts(2), 0);
    BusTimeline bus;
    auto issued = cache.schedule_prefetch(std::vector<ExpertRef>{ExpertRef{0, 0}}, 0.0, bus,
                                          64e9, pm);
    REQUIRE(issued.size() == 1);
    CHECK(issued[0].completion_s == 0.015625);  // 1 GB over 64 GB/s, exact
}

TEST_CASE("prefetched weights count as prefetch hits exactly once") {
    MoEModelSpec spec = tiny_spec(1, 2);
    QuantPolicy q = QuantPolicy::uniform(spec, 16);
    PopularityModel pm = flat_popularity(1, 2);
    ExpertCacheState cache(2000, spec, q, layer0_experts(2), 0);
    BusTimeline bus;
    cache.schedule_prefetch(std::vector<ExpertRef>{ExpertRef{0, 0}}, 0.0, bus, 1e6, pm);
    cache.complete_load(ExpertRef{0, 0});

    auto r1 = cache.access(ExpertRef{0, 0}, 1.0, bus, 1e6, pm);
    CHECK(r1.hit);
    CHECK(r1.prefetch_hit);
    auto r2 = cache.access(ExpertRef{0, 0}, 2.0, bus, 1e6, pm);
    CHECK(r2.hit);
    CHECK(!r2.prefetch_hit);
    CHECK(cache.stats().prefetch_hits == 1);
    CHECK(cache.stats().hits == 2);
}

TEST_CASE("randomized operation stream preserves the budget invariant") {
    MoEModelSpec spec = tiny_spec(2, 8);
    QuantPolicy q = QuantPolicy::uniform(spec, 8);  // 500-byte residents
    PopularityModel pm(2, 8, 0.95);
    std::set<ExpertRef> placed;
    for (int l = 0; l < 2; ++l)
        for (int e = 0; e < 8; ++e) placed.insert(ExpertRef{l, e});
    ExpertCacheState cache(2600, spec, q, placed, 1);
    BusTimeline bus;
    std::mt19937 rng(99);
    std::uniform_int_distribution<int> pick_l(0, 1), pick_e(0, 7), pick_op(0, 9);
    std::vector<ExpertRef> outstanding;
    double now = 0.0;

    for (int step = 0; step < 5000; ++step) {
        now += 0.001;
        const ExpertRef e{pick_l(rng), pick_e(rng)};
        const int op = pick_op(rng);
        if (outstanding.size() >= 3) {  // cap concurrent transfers, like the engine
            cache.complete_load(outstanding.front());
            outstanding.erase(outstanding.begin());
        }
        if (op < 6) {
            auto r = cache.access(e, now, bus, 1e6, pm);
            pm.observe_layer(e.layer, std::array<int, 1>{e.expert});
            if (r.demand_load) outstanding.push_back(e);
            CHECK(r.stall_s >= 0.0);
        } else if (op < 8) {
            auto issued = cache.schedule_prefetch(std::vector<ExpertRef>{e}, now, bus, 1e6, pm);
            for (const auto& cmd : issued) outstanding.push_back(cmd.expert);
        } else if (!outstanding.empty()) {
            cache.complete_load(outstanding.back());
            outstanding.pop_back();
        }
        cache.check_budget();
        CHECK(cache.occupancy_bytes() <= cache.budget_bytes());
    }
    const auto& st = cache.stats();
    CHECK(st.hits + st.misses == st.stalls_s.size());
    CHECK(st.prefetch_hits <= st.hits + st.misses);
}

TEST_CASE("hit counts never drop when the budget grows") {
    // Popularity evolves from the access stream alone, so eviction priority
    // is cache-independent and larger caches keep supersets of smaller ones.
    MoEModelSpec spec = tiny_spec(1, 12);
    QuantPolicy q = QuantPolicy::uniform(spec, 16);
    std::mt19937 rng(123);
    std::discrete_distribution<int> zipfish(
        {24, 12, 8, 6, 5, 4, 3, 3, 2, 2, 1, 1});
    std::vector<int> stream;
    for (int i = 0; i < 4000; ++i) stream.push_back(zipfish(rng));

    std::uint64_t prev_hits = 0;
    for (int budget_experts = 2; budget_experts <= 12; ++budget_experts) {
        PopularityModel pm(1, 12, 0.98);
        ExpertCacheState cache(static_cast<std::uint64_t>(budget_experts) * 1000, spec, q,
                               layer0_experts(12), 0);
        BusTimeline bus;
        double now = 0.0;
        for (int e : stream) {
            now += 1.0;
            auto r = cache.access(ExpertRef{0, e}, now, bus, 1e9, pm);
            if (r.demand_load) cache.complete_load(ExpertRef{0, e});
            pm.observe_layer(0, std::array<int, 1>{e});
        }
        CHECK(cache.stats().hits >= prev_hits);
        prev_hits = cache.stats().hits;
    }
    CHECK(prev_hits == 4000 - 12);  // full-size cache misses only cold starts
}

TEST_CASE("cache constructor validates geometry") {
    MoEModelSpec spec = tiny_spec(1, 2);
    QuantPolicy q = QuantPolicy::uniform(spec, 16);
    CHECK_THROWS_AS(ExpertCacheState(500, spec, q, layer0_experts(2), 0), ConfigError);
    CHECK_THROWS_AS(ExpertCacheState(2000, spec, q, layer0_experts(2), -1), ConfigError);

    // Accessing an expert that was never placed here is structural.
    ExpertCacheState cache(2000, spec, q, layer0_experts(1), 0);
    BusTimeline bus;
    PopularityModel pm = flat_popularity(1, 2);
    CHECK_THROWS_AS(cache.access(ExpertRef{0, 1}, 0.0, bus, 1e9, pm), StructuralError);
}
