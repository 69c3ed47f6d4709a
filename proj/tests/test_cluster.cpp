// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "pipesim/cluster.hpp"
#include "pipesim/errors.hpp"
#include "pipesim/modelgraph.hpp"
#include "pipesim/rng.hpp"

using namespace pipesim;

namespace {

Hrg small_cluster(int racks, int servers_per_rack, int gpus_per_server,
                  double mem = 40.0e9) {
    SyntheticClusterSpec spec;
    spec.racks = racks;
    spec.servers_per_rack = servers_per_rack;
    spec.gpus_per_server = gpus_per_server;
    spec.gpu_memory_bytes = mem;
    return make_synthetic_cluster(spec);
}

// Exhaustive oracle over all M^N assignments, lexicographic, strict improvement.
struct BruteAlloc {
    double objective = -std::numeric_limits<double>::infinity();
    std::vector<int> assignment;
};

void brute_rec(const AllocationProblem& p, const Hrg& hrg, std::vector<int>& cur, std::size_t i,
               BruteAlloc& best) {
    if (i == p.stages.size()) {
        if (!allocation_feasible(p, hrg, cur, nullptr)) return;
        const double obj = allocation_objective(p, hrg, cur);
        if (obj > best.objective) {
            best.objective = obj;
            best.assignment = cur;
        }
        return;
    }
    for (int gid : p.candidate_gpus) {
        cur[i] = gid;
        brute_rec(p, hrg, cur, i + 1, best);
    }
    cur[i] = -1;
}

BruteAlloc brute_force_alloc(const AllocationProblem& p, const Hrg& hrg) {
    BruteAlloc best;
    std::vector<int> cur(p.stages.size(), -1);
    brute_rec(p, hrg, cur, 0, best);
    return best;
}

}  // namespace

TEST_CASE("multiplexing_penalty: gamma(CV) oracle") {
    CHECK(multiplexing_penalty(0.1, 1.0, 2.0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(multiplexing_penalty(0.1, 1.0, 0.0) == doctest::Approx(0.1));
    // Monotone non-decreasing in CV.
    double prev = -1.0;
    for (double cv : {0.0, 0.5, 1.0, 2.0, 4.0}) {
        const double g = multiplexing_penalty(0.2, 0.7, cv);
        CHECK(g >= prev);
        prev = g;
    }
}

TEST_CASE("select_server: singleton candidate") {
    Hrg hrg = small_cluster(1, 1, 2);
    AffinityHistory aff;
    aff.init(hrg);
    SelectServerParams params;
    auto s = select_server("m0", 1000.0, params, hrg, aff);
    REQUIRE(s.has_value());
    CHECK(*s == 0);
}

TEST_CASE("select_server: recent host beats stale host") {
    Hrg hrg = small_cluster(1, 2, 2);
    AffinityHistory aff;
    aff.init(hrg);
    aff.record_hosting("m0", 0, 999'000.0);  // 1 s ago
    aff.record_hosting("m0", 1, 0.0);        // 1000 s ago
    SelectServerParams params;
    params.weight_temporal = 1.0;
    params.weight_gpu = 0.0;
    params.decay_per_ms = 0.001;
    auto s = select_server("m0", 1'000'000.0, params, hrg, aff);
    REQUIRE(s.has_value());
    CHECK(*s == 0);
}

TEST_CASE("select_server: worked example, availability beats decayed affinity") {
    // score_A = 1*e^{-0.01*100} + 0.5*2 ≈ 1.368; score_B = 0.5*4 = 2.0 → B
    Hrg hrg = small_cluster(1, 2, 4);
    // Server 0: 2 free GPUs (occupy two), hosted 100 ms ago. Server 1: 4 free.
    hrg.bind_stage(0, {"other", 1, 0, 40.0e9});
    hrg.bind_stage(1, {"other", 1, 1, 40.0e9});
    AffinityHistory aff;
    aff.init(hrg);
    aff.record_hosting("m0", 0, 900.0);
    SelectServerParams params;
    params.weight_temporal = 1.0;
    params.weight_gpu = 0.5;
    params.decay_per_ms = 0.01;
    auto s = select_server("m0", 1000.0, params, hrg, aff);
    REQUIRE(s.has_value());
    CHECK(*s == 1);
}

TEST_CASE("select_server: argmax invariant under positive scaling of weights") {
    Hrg hrg = small_cluster(2, 3, 4);
    hrg.bind_stage(2, {"x", 9, 0, 40.0e9});
    AffinityHistory aff;
    aff.init(hrg);
    aff.record_hosting("m0", 1, 500.0);
    aff.record_hosting("m0", 4, 900.0);
    SelectServerParams params;
    params.weight_temporal = 0.8;
    params.weight_gpu = 0.25;
    params.decay_per_ms = 0.002;
    auto a = select_server("m0", 1000.0, params, hrg, aff);
    params.weight_temporal *= 7.5;
    params.weight_gpu *= 7.5;
    auto b = select_server("m0", 1000.0, params, hrg, aff);
    REQUIRE(a.has_value());
    REQUIRE(b.has_value());
    CHECK(*a == *b);
}

TEST_CASE("select_server: no available GPU yields the unavailable signal") {
    Hrg hrg = small_cluster(1, 1, 1);
    hrg.bind_stage(0, {"x", 3, 0, 40.0e9});
    AffinityHistory aff;
    aff.init(hrg);
    SelectServerParams params;
    CHECK_FALSE(select_server("m0", 0.0, params, hrg, aff).has_value());
}

TEST_CASE("scaling markers: record, query, prune, unknown path") {
    Hrg hrg = small_cluster(2, 2, 1);
    hrg.record_scaling_event({0, 1}, 1000.0, 60'000.0);
    auto penalized = hrg.penalized_paths(2000.0, 10'000.0);
    REQUIRE(penalized.size() == 1);
    CHECK(penalized[0].server_id == 1);
    CHECK(hrg.penalized_paths(20'000.0, 10'000.0).empty());  // beyond horizon
    CHECK(hrg.path_penalized(1, 2000.0, 10'000.0));
    CHECK(hrg.path_penalized(0, 2000.0, 10'000.0));   // same rack inherits
    CHECK_FALSE(hrg.path_penalized(2, 2000.0, 10'000.0));  // other rack
    CHECK_THROWS_AS(hrg.record_scaling_event({9, -1}, 0.0, 1.0), InvalidSpecError);
}

TEST_CASE("allocate: anti-colocation of same-model stages") {
    Hrg hrg = small_cluster(1, 1, 2);
    AllocationProblem p;
    p.candidate_gpus = {0, 1};
    for (int k = 0; k < 2; ++k) {
        StageRequest s;
        s.model_id = "m0";
        s.instance_id = 1;
        s.stage_index = k;
        s.mem_bytes = 1.0e9;
        s.base_throughput = 10.0;
        p.stages.push_back(s);
    }
    Allocation a = allocate(p, hrg);
    REQUIRE(a.gpu_for_stage.size() == 2);
    CHECK(a.gpu_for_stage[0] != a.gpu_for_stage[1]);
}

TEST_CASE("allocate: exact solver equals exhaustive enumeration") {
    Rng rng(555);
    for (int trial = 0; trial < 50; ++trial) {
        Hrg hrg = small_cluster(1, 1, 3, 10.0e9);
        // Random resident stage fragments the cluster.
        if (rng.uniform() < 0.5)
            hrg.bind_stage(static_cast<int>(rng.next_u64() % 3), {"resident", 99, 0, 4.0e9});

        AllocationProblem p;
        p.candidate_gpus = {0, 1, 2};
        const int n_stages = 3;
        for (int i = 0; i < n_stages; ++i) {
            StageRequest s;
            s.model_id = (i < 2) ? "mA" : "mB";
            s.instance_id = i < 2 ? 1 : 2;
            s.stage_index = i;
            s.mem_bytes = (1.0 + 3.0 * rng.uniform()) * 1.0e9;
            s.workload_cv = 4.0 * rng.uniform();
            s.balance_group = -1;
            s.base_throughput = 5.0 + 10.0 * rng.uniform();
            p.stages.push_back(s);
        }
        p.gamma0 = 0.1;
        p.penalty_alpha = 1.0;
        if (rng.uniform() < 0.3) p.gpu_score_factor = {1.0, 0.5, 1.0};

        BruteAlloc brute = brute_force_alloc(p, hrg);
        if (brute.assignment.empty()) {
            CHECK_THROWS_AS((void)allocate(p, hrg), InfeasibleError);
            continue;
        }
        Allocation a = allocate(p, hrg);
        REQUIRE(a.objective == brute.objective);  // exact, no tolerance
        REQUIRE(a.gpu_for_stage == brute.assignment);
        // Anti-colocation in every returned assignment.
        for (std::size_t i = 0; i < a.gpu_for_stage.size(); ++i)
            for (std::size_t j = i + 1; j < a.gpu_for_stage.size(); ++j)
                if (p.stages[i].model_id == p.stages[j].model_id)
                    CHECK(a.gpu_for_stage[i] != a.gpu_for_stage[j]);
    }
}

TEST_CASE("allocate: greedy path respects constraints on larger instances") {
    Rng rng(99);
    Hrg hrg = small_cluster(2, 4, 4, 20.0e9);
    AllocationProblem p;
    for (int g = 0; g < 32; ++g) p.candidate_gpus.push_back(g);
    for (int i = 0; i < 8; ++i) {
        StageRequest s;
        s.model_id = "mA";
        s.instance_id = 1;
        s.stage_index = i;
        s.mem_bytes = 4.0e9;
        s.balance_group = 0;
        s.base_throughput = 10.0;
        p.stages.push_back(s);
    }
    Allocation a = allocate(p, hrg);  // 8*32 = 256 vars → greedy
    REQUIRE(a.gpu_for_stage.size() == 8);
    std::string why;
    CHECK(allocation_feasible(p, hrg, a.gpu_for_stage, &why));
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = i + 1; j < 8; ++j) CHECK(a.gpu_for_stage[i] != a.gpu_for_stage[j]);
}

TEST_CASE("allocate: infeasibility reports the binding constraint") {
    Hrg hrg = small_cluster(1, 1, 1, 10.0e9);
    AllocationProblem p;
    p.candidate_gpus = {0};
    for (int i = 0; i < 2; ++i) {
        StageRequest s;
        s.model_id = "m0";
        s.instance_id = 1;
        s.stage_index = i;
        s.mem_bytes = 1.0e9;
        s.base_throughput = 1.0;
        p.stages.push_back(s);
    }
    CHECK_THROWS_AS((void)allocate(p, hrg), InfeasibleError);
}

TEST_CASE("memory conservation through bind/release cycles") {
    Hrg hrg = small_cluster(1, 2, 2, 10.0e9);
    Rng rng(4);
    for (int round = 0; round < 200; ++round) {
        const int gpu = static_cast<int>(rng.next_u64() % 4);
        if (rng.uniform() < 0.6) {
            const double bytes = 1.0e8 * (1.0 + rng.uniform() * 5.0);
            if (hrg.gpu(gpu).free_memory_bytes >= bytes)
                hrg.bind_stage(gpu, {"m" + std::to_string(round % 3), round, 0, bytes});
        } else if (!hrg.gpu(gpu).assigned.empty()) {
            const auto& b = hrg.gpu(gpu).assigned.front();
            hrg.release_stage(gpu, b.model_id, b.instance_id, b.stage_index);
        }
        REQUIRE(hrg.memory_conserved());
    }
}

TEST_CASE("warm_start_latency: tiers and zero-byte stages") {
    Hrg hrg = small_cluster(1, 1, 1);
    hrg.storage_bw_bytes_per_ms = 1.0e6;
    hrg.servers[0].host_bw_bytes_per_ms = 1.0e7;
    AffinityHistory aff;
    aff.init(hrg);

    // Cold: storage tier.
    std::vector<StageLoad> loads{{0, 8, 2.0e9}};
    CHECK(warm_start_latency_ms(hrg, aff, 0, "m0", loads) == doctest::Approx(2000.0));
    // Cached: host tier (10x faster here).
    aff.cache_insert(0, "m0", 0, 8, 2.0e9);
    CHECK(warm_start_latency_ms(hrg, aff, 0, "m0", loads) == doctest::Approx(200.0));
    // Partial coverage falls back to storage.
    std::vector<StageLoad> wider{{0, 16, 4.0e9}};
    CHECK(warm_start_latency_ms(hrg, aff, 0, "m0", wider) == doctest::Approx(4000.0));
    // Zero bytes load instantly.
    std::vector<StageLoad> empty{{0, 4, 0.0}};
    CHECK(warm_start_latency_ms(hrg, aff, 0, "m0", empty) == doctest::Approx(0.0));
}

TEST_CASE("warm_start_latency: table2 preset load times and ratio") {
    GraphPreset preset = make_preset("opt66b-table2");
    auto set = enumerate_granularities(preset.graph, {4, 32}, preset.partition_defaults,
                                       static_cast<int>(preset.exec.max_batch_factor));
    REQUIRE(set.plans.size() == 2);
    Hrg hrg = small_cluster(1, 1, 1);
    hrg.storage_bw_bytes_per_ms = preset.storage_bw_bytes_per_ms;
    AffinityHistory aff;
    aff.init(hrg);

    // Per-instance uncached load = slowest stage, stages fetched in parallel
    // from distinct servers.
    auto instance_load_s = [&](const PartitionPlan& plan) {
        double worst = 0.0;
        int begin = 0;
        for (int k = 0; k < plan.num_stages; ++k) {
            const int end = k + 1 < plan.num_stages ? plan.boundaries[static_cast<std::size_t>(k)]
                                                    : static_cast<int>(preset.graph.ops.size());
            std::vector<StageLoad> ld{
                {begin, end, plan.stage_param_bytes[static_cast<std::size_t>(k)]}};
            worst = std::max(worst, warm_start_latency_ms(hrg, aff, 0, "opt66b", ld));
            begin = end;
        }
        return worst / 1000.0;
    };
    const double load4 = instance_load_s(set.plans[0].plan);
    const double load32 = instance_load_s(set.plans[1].plan);
    CHECK(load4 == doctest::Approx(47.14).epsilon(0.01));
    const double ratio = load4 / load32;
    CHECK(ratio >= 8.0 - 1e-9);
    CHECK(ratio <= 9.5);
}

TEST_CASE("affinity cache: LRU eviction under budget") {
    Hrg hrg = small_cluster(1, 1, 1);
    hrg.servers[0].host_cache_budget_bytes = 10.0e9;
    AffinityHistory aff;
    aff.init(hrg);
    aff.cache_insert(0, "a", 0, 4, 4.0e9);
    aff.cache_insert(0, "b", 0, 4, 4.0e9);
    CHECK(aff.cache_covers(0, "a", 0, 4));
    CHECK(aff.cache_covers(0, "b", 0, 4));
    aff.cache_insert(0, "c", 0, 4, 4.0e9);  // evicts "a" (oldest)
    CHECK_FALSE(aff.cache_covers(0, "a", 0, 4));
    CHECK(aff.cache_covers(0, "b", 0, 4));
    CHECK(aff.cache_covers(0, "c", 0, 4));
    CHECK(aff.cache_used_bytes(0) <= 10.0e9);
    // Range union coverage.
    aff.cache_insert(0, "d", 0, 2, 1.0e9);
    aff.cache_insert(0, "d", 2, 6, 1.0e9);
    CHECK(aff.cache_covers(0, "d", 0, 6));
    CHECK(aff.cache_covers(0, "d", 1, 5));
    CHECK_FALSE(aff.cache_covers(0, "d", 0, 7));
}

TEST_CASE("recently scaled rack is deprioritized when scores tie") {
    // Two racks, one server each, identical availability. A scaling event on
    // rack 0 pushes the second placement to rack 1.
    Hrg hrg = small_cluster(2, 1, 4);
    AffinityHistory aff;
    aff.init(hrg);
    SelectServerParams params;
    params.weight_temporal = 1.0;
    params.weight_gpu = 0.5;
    auto first = select_server("m0", 1000.0, params, hrg, aff);
    REQUIRE(first.has_value());
    CHECK(*first == 0);  // tie broken by id
    hrg.record_scaling_event({0, 0}, 1000.0, 60'000.0);
    auto second = select_server("m1", 1500.0, params, hrg, aff);
    REQUIRE(second.has_value());
    CHECK(*second == 1);
}

TEST_CASE("topology json round trip") {
    Hrg hrg = small_cluster(2, 2, 3, 24.0e9);
    hrg.bind_stage(5, {"m0", 7, 2, 2.0e9});
    const std::string path =
        (std::filesystem::temp_directory_path() / "pipesim_topo.json").string();
    {
        std::ofstream out(path);
        out << to_topology_json(hrg);
    }
    Hrg loaded = load_topology(path);
    REQUIRE(loaded.gpus.size() == hrg.gpus.size());
    REQUIRE(loaded.servers.size() == hrg.servers.size());
    CHECK(loaded.gpu(5).free_memory_bytes == doctest::Approx(hrg.gpu(5).free_memory_bytes));
    CHECK(loaded.server(3).rack_id == hrg.server(3).rack_id);
}
