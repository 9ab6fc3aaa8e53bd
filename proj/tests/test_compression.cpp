// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>
#include <vector>

#include "moedge/compression.hpp"
#include "moedge/errors.hpp"

using namespace moedge;

namespace {

MoEModelSpec tiny_spec(int layers, int experts, std::uint64_t expert_bytes = 16) {
    MoEModelSpec s;
    s.num_layers = layers;
    s.experts_per_layer = experts;
    s.expert_param_bytes = expert_bytes;
    s.shared_param_bytes = 64;
    s.top_k = 1;
    s.hidden_dim = 8;
    return s;
}

std::vector<std::vector<double>> uniform_popularity(int layers, int experts) {
    return std::vector<std::vector<double>>(
        layers, std::vector<double>(experts, 1.0 / experts));
}

}  // namespace

TEST_CASE("resident bytes scale exactly as bits over 16") {
    MoEModelSpec s = tiny_spec(2, 3, 1'000'000);
    for (int bits : {4, 8, 16}) {
        QuantPolicy q = QuantPolicy::uniform(s, bits);
        for (int l = 0; l < 2; ++l)
            for (int e = 0; e < 3; ++e)
                CHECK(q.expert_resident_bytes({l, e}, s) ==
                      s.expert_param_bytes * static_cast<std::uint64_t>(bits) / 16);
        CHECK(q.shared_resident_bytes(s) ==
              s.shared_param_bytes * static_cast<std::uint64_t>(bits) / 16);
    }
    // Unassigned experts default to full precision.
    QuantPolicy empty;
    CHECK(empty.bits_for({0, 0}) == 16);
    CHECK(empty.expert_resident_bytes({0, 0}, s) == s.expert_param_bytes);
}

TEST_CASE("width assignment spends the budget widest-first by popularity") {
    // Four equally popular experts, budget for two full plus two half copies.
    MoEModelSpec s = tiny_spec(1, 4);
    std::map<int, std::set<ExpertRef>> assign;
    assign[0] = {ExpertRef{0, 0}, ExpertRef{0, 1}, ExpertRef{0, 2}, ExpertRef{0, 3}};
    std::map<int, std::uint64_t> budget{{0, 2 * 16 + 2 * 8}};
    QuantPolicy q = assign_bitwidths(uniform_popularity(1, 4), assign, s, budget);
    CHECK(q.bits.at({0, 0}) == 16);
    CHECK(q.bits.at({0, 1}) == 16);
    CHECK(q.bits.at({0, 2}) == 8);
    CHECK(q.bits.at({0, 3}) == 8);

    // The spent bytes never exceed the budget.
    std::uint64_t spent = 0;
    for (const auto& e : assign[0]) spent += q.expert_resident_bytes(e, s);
    CHECK(spent <= budget[0]);
}

TEST_CASE("popularity order and width order never invert within a server") {
    std::mt19937 rng(17);
    std::uniform_real_distribution<double> d(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        const int E = 6;
        MoEModelSpec s = tiny_spec(2, E);
        std::vector<std::vector<double>> pop(2, std::vector<double>(E));
        for (auto& row : pop) {
            double sum = 0.0;
            for (double& v : row) sum += (v = d(rng) + 0.01);
            for (double& v : row) v /= sum;
        }
        std::map<int, std::set<ExpertRef>> assign;
        for (int l = 0; l < 2; ++l)
            for (int e = 0; e < E; ++e) assign[(l * E + e) % 2].insert(ExpertRef{l, e});
        // Budgets between the 4-bit floor and the full-precision total.
        std::map<int, std::uint64_t> budget;
        for (const auto& [srv, experts] : assign) {
            const std::uint64_t full = 16 * experts.size();
            const std::uint64_t floor4 = 4 * experts.size();
            budget[srv] = floor4 + rng() % (full - floor4 + 1);
        }
        QuantPolicy q = assign_bitwidths(pop, assign, s, budget);
        for (const auto& [srv, experts] : assign) {
            for (const ExpertRef& a : experts) {
                for (const ExpertRef& b : experts) {
                    if (pop[a.layer][a.expert] > pop[b.layer][b.expert])
                        CHECK(q.bits.at(a) >= q.bits.at(b));
                }
            }
            std::uint64_t spent = 0;
            for (const auto& e : experts) spent += q.expert_resident_bytes(e, s);
            CHECK(spent <= budget[srv]);
        }
        for (const auto& [e, bits] : q.bits) CHECK((bits == 4 || bits == 8 || bits == 16));
    }
}

TEST_CASE("width assignment failure reports the exact byte shortfall") {
    MoEModelSpec s = tiny_spec(1, 4);
    std::map<int, std::set<ExpertRef>> assign;
    assign[0] = {ExpertRef{0, 0}, ExpertRef{0, 1}, ExpertRef{0, 2}, ExpertRef{0, 3}};
    std::map<int, std::uint64_t> budget{{0, 10}};  // floor is 4 * 4 = 16
    try {
        assign_bitwidths(uniform_popularity(1, 4), assign, s, budget);
        FAIL("expected an infeasible-budget error");
    } catch (const InfeasibleError& e) {
        CHECK(e.shortfall_bytes == 6);
    }
    CHECK_THROWS_AS(assign_bitwidths(uniform_popularity(1, 4), assign, s, budget, 12),
                    ConfigError);
    std::map<int, std::uint64_t> empty_budget;
    CHECK_THROWS_AS(assign_bitwidths(uniform_popularity(1, 4), assign, s, empty_budget),
                    ConfigError);
}

TEST_CASE("a replicated expert keeps the narrowest width any host chose") {
    MoEModelSpec s = tiny_spec(1, 2);
    std::map<int, std::set<ExpertRef>> assign;
    assign[0] = {ExpertRef{0, 0}, ExpertRef{0, 1}};
    assign[1] = {ExpertRef{0, 0}};                       // replica of expert 0
    std::map<int, std::uint64_t> budget{{0, 32}, {1, 4}};  // host 1 forces 4-bit
    QuantPolicy q = assign_bitwidths(uniform_popularity(1, 2), assign, s, budget);
    CHECK(q.bits.at({0, 0}) == 4);
    CHECK(q.bits.at({0, 1}) == 16);
}

TEST_CASE("fusion at tau = 1 leaves distinct directions alone") {
    MoEModelSpec s = tiny_spec(1, 1);
    FusionConfig cfg;
    cfg.cosine_threshold = 1.0;
    std::vector<std::vector<float>> batch = {
        {1, 0, 0, 0, 0, 0, 0, 0}, {0, 1, 0, 0, 0, 0, 0, 0}, {0, 0, 1, 0, 0, 0, 0, 0}};
    FusionResult r = fuse_tokens(batch, cfg, s);
    CHECK(r.fused.size() == 3);
    CHECK(r.merged_tokens == 0);
    CHECK(r.volume_saved_bytes == 0);
    CHECK(r.group_of == std::vector<int>{0, 1, 2});
}

TEST_CASE("identical tokens fuse into one group with the exact byte saving") {
    MoEModelSpec s = tiny_spec(1, 1);
    FusionConfig cfg;
    cfg.cosine_threshold = 0.9;
    std::vector<std::vector<float>> batch = {{1, 2, 3, 4, 0, 0, 0, 0},
                                             {1, 2, 3, 4, 0, 0, 0, 0}};
    FusionResult r = fuse_tokens(batch, cfg, s);
    REQUIRE(r.fused.size() == 1);
    CHECK(r.merged_tokens == 1);
    CHECK(r.group_of == std::vector<int>{0, 0});
    CHECK(r.volume_saved_bytes ==
          static_cast<std::uint64_t>(s.hidden_dim) * s.activation_bytes_per_element);
    for (int i = 0; i < 8; ++i) CHECK(r.fused[0][i] == doctest::Approx(batch[0][i]));
}

TEST_CASE("fusion conserves tokens and bytes and averages centroids") {
    MoEModelSpec s = tiny_spec(1, 1);
    FusionConfig cfg;
    cfg.cosine_threshold = 0.95;
    std::mt19937 rng(5);
    std::normal_distribution<float> g(0.0f, 1.0f);
    std::vector<std::vector<float>> batch;
    for (int t = 0; t < 40; ++t) {
        std::vector<float> v(8);
        for (float& x : v) x = g(rng);
        batch.push_back(v);
    }
    FusionResult r = fuse_tokens(batch, cfg, s);

    // Every token lands in exactly one group; group sizes sum to the batch.
    std::vector<int> counts(r.fused.size(), 0);
    for (int g_of : r.group_of) {
        REQUIRE(g_of >= 0);
        REQUIRE(g_of < static_cast<int>(r.fused.size()));
        ++counts[g_of];
    }
    int total = 0;
    for (int c : counts) {
        CHECK(c >= 1);
        total += c;
    }
    CHECK(total == static_cast<int>(batch.size()));

    // saved + transmitted == original volume.
    const std::uint64_t act =
        static_cast<std::uint64_t>(s.hidden_dim) * s.activation_bytes_per_element;
    CHECK(r.volume_saved_bytes + r.fused.size() * act == batch.size() * act);
    CHECK(r.merged_tokens == static_cast<int>(batch.size() - r.fused.size()));

    // Centroids are the member means.
    for (std::size_t grp = 0; grp < r.fused.size(); ++grp) {
        std::vector<double> mean(8, 0.0);
        for (std::size_t t = 0; t < batch.size(); ++t)
            if (r.group_of[t] == static_cast<int>(grp))
                for (int i = 0; i < 8; ++i) mean[i] += batch[t][i];
        for (int i = 0; i < 8; ++i)
            CHECK(r.fused[grp][i] == doctest::Approx(mean[i] / counts[grp]).epsilon(1e-4));
    }
}

TEST_CASE("zero-noise clusters fuse to exactly one group per cluster") {
    MoEModelSpec s = tiny_spec(1, 1);
    s.hidden_dim = 32;
    FusionConfig cfg;
    cfg.cosine_threshold = 0.99;
    std::mt19937 rng(9);
    std::normal_distribution<float> g(0.0f, 1.0f);
    const int clusters = 6, members = 5;
    std::vector<std::vector<float>> centers;
    for (int c = 0; c < clusters; ++c) {
        std::vector<float> v(32);
        for (float& x : v) x = g(rng);
        centers.push_back(v);
    }
    std::vector<std::vector<float>> batch;
    std::vector<int> truth;
    for (int t = 0; t < clusters * members; ++t) {
        batch.push_back(centers[t % clusters]);
        truth.push_back(t % clusters);
    }
    FusionResult r = fuse_tokens(batch, cfg, s);
    CHECK(r.fused.size() == clusters);
    // Same-cluster tokens share a group; the map is a relabeling of `truth`.
    for (int a = 0; a < clusters * members; ++a)
        for (int b = 0; b < clusters * members; ++b)
            CHECK((r.group_of[a] == r.group_of[b]) == (truth[a] == truth[b]));
}

TEST_CASE("fusion validates the threshold and handles empty batches") {
    MoEModelSpec s = tiny_spec(1, 1);
    FusionConfig bad;
    bad.cosine_threshold = 1.5;
    CHECK_THROWS_AS(fuse_tokens({}, bad, s), ConfigError);
    FusionConfig ok;
    FusionResult r = fuse_tokens({}, ok, s);
    CHECK(r.fused.empty());
    CHECK(r.merged_tokens == 0);
}

TEST_CASE("threshold pruning keeps everything at zero and drops below the bar") {
    MoEModelSpec s = tiny_spec(1, 1);
    PruneConfig cfg;
    cfg.mode = PruneConfig::Mode::threshold;
    cfg.threshold = 0.0;
    PruneResult keep_all = prune_tokens({0.0, 0.3, 1.0}, cfg, s);
    CHECK(keep_all.retained == std::vector<int>{0, 1, 2});
    CHECK(keep_all.pruned_tokens == 0);
    CHECK(keep_all.volume_saved_bytes == 0);

    cfg.threshold = 0.3;
    PruneResult r = prune_tokens({0.1, 0.5, 0.9}, cfg, s);
    CHECK(r.retained == std::vector<int>{1, 2});
    CHECK(r.pruned_tokens == 1);
    CHECK(r.volume_saved_bytes ==
          static_cast<std::uint64_t>(s.hidden_dim) * s.activation_bytes_per_element);
}

TEST_CASE("fraction pruning drops the floor(p*n) least important, ties by id") {
    MoEModelSpec s = tiny_spec(1, 1);
    PruneConfig cfg;
    cfg.mode = PruneConfig::Mode::fraction;
    cfg.fraction = 1.0;
    CHECK(prune_tokens({0.5, 0.5}, cfg, s).retained.empty());

    cfg.fraction = 0.5;
    PruneResult r = prune_tokens({0.5, 0.2, 0.2, 0.9, 0.1}, cfg, s);
    // floor(0.5 * 5) = 2 drops: index 4 (0.1), then index 1 (tie at 0.2).
    CHECK(r.retained == std::vector<int>{0, 2, 3});
    CHECK(r.pruned_tokens == 2);

    cfg.fraction = 0.39;  // floor(0.39 * 5) = 1
    CHECK(prune_tokens({0.5, 0.2, 0.2, 0.9, 0.1}, cfg, s).retained ==
          std::vector<int>{0, 1, 2, 3});

    PruneConfig bad;
    bad.mode = PruneConfig::Mode::fraction;
    bad.fraction = 1.5;
    CHECK_THROWS_AS(prune_tokens({0.5}, bad, s), ConfigError);
    PruneConfig bad2;
    bad2.threshold = -0.1;
    CHECK_THROWS_AS(prune_tokens({0.5}, bad2, s), ConfigError);
}

TEST_CASE("quality score is 1 untouched, follows the exact penalty formula") {
    PenaltyLedger clean;
    CHECK(quality_score(clean) == 1.0);

    // 1000 tokens, 100 pruned at 0.01 each: 1 - 1/1000.
    PenaltyLedger led;
    led.token_events = 1000;
    led.prune_penalty = 100 * 0.01;
    CHECK(quality_score(led) == doctest::Approx(0.999));

    // Monotone non-increasing in every component.
    double prev = quality_score(led);
    for (int i = 0; i < 5; ++i) {
        led.quantization_penalty += 0.3;
        const double cur = quality_score(led);
        CHECK(cur <= prev);
        prev = cur;
    }
    led.fusion_penalty += 1e6;
    CHECK(quality_score(led) == 0.0);  // clamped
}
