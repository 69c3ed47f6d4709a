// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "pipesim/errors.hpp"
#include "pipesim/modelgraph.hpp"
#include "pipesim/rng.hpp"

using namespace pipesim;

namespace {

// Brute-force oracle: enumerate every contiguous K-partition in lexicographic
// boundary order and keep the first strict minimum of the canonical objective.
struct BruteResult {
    double objective;
    std::vector<int> boundaries;
};

void enumerate_rec(const CompGraph& g, const PartitionParams& params, std::vector<int>& bounds,
                   int next_min, int remaining, BruteResult& best) {
    const int n = static_cast<int>(g.ops.size());
    if (remaining == 0) {
        bool feasible = true;
        int begin = 0;
        for (std::size_t k = 0; k <= bounds.size(); ++k) {
            const int end = k < bounds.size() ? bounds[k] : n;
            double param = 0.0;
            for (int i = begin; i < end; ++i) param += g.ops[static_cast<std::size_t>(i)].param_bytes;
            if (param > params.gpu_memory_bytes) feasible = false;
            begin = end;
        }
        if (!feasible) return;
        const double obj = partition_objective(g, bounds, params);
        if (obj < best.objective) {
            best.objective = obj;
            best.boundaries = bounds;
        }
        return;
    }
    for (int b = next_min; b <= n - remaining; ++b) {
        bounds.push_back(b);
        enumerate_rec(g, params, bounds, b + 1, remaining - 1, best);
        bounds.pop_back();
    }
}

BruteResult brute_force_partition(const CompGraph& g, const PartitionParams& params) {
    BruteResult best{std::numeric_limits<double>::infinity(), {}};
    std::vector<int> bounds;
    enumerate_rec(g, params, bounds, 1, params.num_stages - 1, best);
    return best;
}

CompGraph random_chain(Rng& rng, int n) {
    CompGraph g;
    int group = 0;
    for (int i = 0; i < n; ++i) {
        OpProfile op;
        op.op_id = i;
        op.compute_ms = 0.5 + 10.0 * rng.uniform();
        op.param_bytes = 1.0e8 * (0.2 + rng.uniform());
        op.activation_bytes = 1.0e6 * (0.5 + rng.uniform());
        if (i > 0 && rng.uniform() < 0.4) ++group;
        op.group_id = group;
        g.ops.push_back(op);
        if (i > 0) g.edges.emplace_back(i - 1, i);
    }
    return g;
}

}  // namespace

TEST_CASE("partition: symmetric split of four identical ops is exact") {
    CompGraph g = make_uniform_chain(4, 2.0, 1.0e9, 1.0e6, 1);
    PartitionParams params;
    params.num_stages = 2;
    params.bandwidth_bytes_per_ms = 1.0e7;
    params.gpu_memory_bytes = 1.0e10;
    params.refactor_weight = 0.0;
    params.overlap_target_ms = 2.0 * 2.0 + 2.0 * 1.0e9 / 1.0e7;  // 2 tc + 2 sp/B
    PartitionPlan plan = partition(g, params);
    REQUIRE(plan.boundaries.size() == 1);
    CHECK(plan.boundaries[0] == 2);
    CHECK(plan.objective == doctest::Approx(0.0));
}

TEST_CASE("partition: DP objective equals brute force exactly on random chains") {
    Rng rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        CompGraph g = random_chain(rng, 10);
        for (int k : {2, 3, 4}) {
            PartitionParams params;
            params.num_stages = k;
            params.bandwidth_bytes_per_ms = 1.0e7;
            params.gpu_memory_bytes = 1.0e12;
            params.refactor_weight = 0.3;
            params.overlap_target_ms = 0.0;  // auto: balanced load target
            PartitionPlan plan = partition(g, params);
            BruteResult brute = brute_force_partition(g, params);
            REQUIRE(plan.objective == brute.objective);  // exact, no tolerance
            // The returned boundaries realize the optimal objective.
            REQUIRE(partition_objective(g, plan.boundaries, params) == brute.objective);
        }
    }
}

TEST_CASE("partition: deterministic and lexicographic under exact ties") {
    // Uniform chain with C far above any stage load: every contiguous split
    // ties exactly, so the lexicographically smallest boundary vector wins.
    CompGraph g = make_uniform_chain(6, 1.0, 0.0, 1.0e6, 1);
    PartitionParams params;
    params.num_stages = 3;
    params.bandwidth_bytes_per_ms = 1.0e7;
    params.gpu_memory_bytes = 1.0e10;
    params.refactor_weight = 0.0;
    params.overlap_target_ms = 100.0;  // all stage loads sit below C
    PartitionPlan a = partition(g, params);
    PartitionPlan b = partition(g, params);
    REQUIRE(a.boundaries == b.boundaries);  // deterministic replay
    // Sum of |x_k - C| is constant (= 3C - total) on this plateau; the
    // tie-break must land on the smallest boundary vector.
    REQUIRE(a.boundaries == std::vector<int>{1, 2});
}

TEST_CASE("partition: memory-constrained instances agree with brute force") {
    Rng rng(77);
    for (int trial = 0; trial < 30; ++trial) {
        CompGraph g = random_chain(rng, 8);
        PartitionParams params;
        params.num_stages = 3;
        params.bandwidth_bytes_per_ms = 1.0e7;
        // Tight budget: roughly half the chain per stage.
        params.gpu_memory_bytes = g.total_param_bytes() / 2.0;
        params.refactor_weight = 0.1;
        params.overlap_target_ms = g.total_compute_ms() / 3.0;
        bool dp_failed = false;
        PartitionPlan plan;
        try {
            plan = partition(g, params);
        } catch (const InfeasibleError&) {
            dp_failed = true;
        }
        BruteResult brute = brute_force_partition(g, params);
        const bool brute_failed = !std::isfinite(brute.objective);
        REQUIRE(dp_failed == brute_failed);
        if (!dp_failed) {
            REQUIRE(plan.objective == brute.objective);
            for (double bytes : plan.stage_param_bytes) CHECK(bytes <= params.gpu_memory_bytes);
        }
    }
}

TEST_CASE("partition: infeasibility names the offending op") {
    CompGraph g = make_uniform_chain(2, 1.0, 5.0e9, 1.0e6, 1);
    PartitionParams params;
    params.num_stages = 1;
    params.bandwidth_bytes_per_ms = 1.0e7;
    params.gpu_memory_bytes = 4.0e9;  // each op alone is too big
    try {
        (void)partition(g, params);
        FAIL("expected InfeasibleError");
    } catch (const InfeasibleError& e) {
        CHECK(std::string(e.what()).find("op 0") != std::string::npos);
    }
}

TEST_CASE("partition: K out of range") {
    CompGraph g = make_uniform_chain(4, 1.0, 1.0e8, 1.0e6, 1);
    PartitionParams params;
    params.num_stages = 5;
    params.bandwidth_bytes_per_ms = 1.0e7;
    params.gpu_memory_bytes = 1.0e10;
    CHECK_THROWS_AS((void)partition(g, params), InvalidSpecError);
}

TEST_CASE("partition: conservation and group-aligned cuts") {
    Rng rng(9);
    CompGraph g = random_chain(rng, 12);
    PartitionParams params;
    params.num_stages = 4;
    params.bandwidth_bytes_per_ms = 1.0e7;
    params.gpu_memory_bytes = 1.0e12;
    params.refactor_weight = 1000.0;  // force group-aligned cuts when possible
    params.overlap_target_ms = g.total_compute_ms() / 4.0;
    PartitionPlan plan = partition(g, params);

    double sum_c = 0.0, sum_p = 0.0;
    for (int k = 0; k < plan.num_stages; ++k) {
        sum_c += plan.stage_compute_ms[static_cast<std::size_t>(k)];
        sum_p += plan.stage_param_bytes[static_cast<std::size_t>(k)];
    }
    CHECK(sum_c == doctest::Approx(g.total_compute_ms()).epsilon(1e-12));
    CHECK(sum_p == doctest::Approx(g.total_param_bytes()).epsilon(1e-12));

    // With group-aligned cuts available and a huge penalty, R must be zero.
    int groups = g.ops.back().group_id + 1;
    if (groups >= params.num_stages) CHECK(plan.refactor_penalty == doctest::Approx(0.0));
}

TEST_CASE("partition: monotone feasibility in K") {
    Rng rng(31);
    CompGraph g = random_chain(rng, 10);
    PartitionParams params;
    params.bandwidth_bytes_per_ms = 1.0e7;
    params.gpu_memory_bytes = g.total_param_bytes() / 3.0;
    params.overlap_target_ms = 1.0;
    bool was_feasible = false;
    for (int k = 1; k <= 10; ++k) {
        params.num_stages = k;
        bool feasible = true;
        try {
            (void)partition(g, params);
        } catch (const InfeasibleError&) {
            feasible = false;
        }
        if (was_feasible) CHECK(feasible);
        was_feasible = was_feasible || feasible;
    }
    CHECK(was_feasible);
}

TEST_CASE("scale_activation: oracle values") {
    CompGraph g = make_uniform_chain(4, 1.0, 1.0e8, 1000.0, 1);
    PartitionParams params;
    params.num_stages = 2;
    params.bandwidth_bytes_per_ms = 1.0e7;
    params.gpu_memory_bytes = 1.0e10;
    params.overlap_target_ms = 1.0;
    PartitionPlan plan = partition(g, params);

    BatchScaling scaling{0.1, 1};
    CHECK(scale_activation(plan, 0, 1, scaling) == doctest::Approx(1000.0));  // b = b_base
    BatchScaling off{0.0, 1};
    CHECK(scale_activation(plan, 0, 64, off) == doctest::Approx(1000.0));  // alpha = 0
    // 1000 * (1 + 0.1 ln 4) ≈ 1138.629
    CHECK(scale_activation(plan, 0, 4, scaling) ==
          doctest::Approx(1000.0 * (1.0 + 0.1 * std::log(4.0))).epsilon(1e-12));
    CHECK_THROWS_AS((void)scale_activation(plan, 0, 0, scaling), InvalidSpecError);

    // Monotone increasing in b for positive alpha.
    double prev = 0.0;
    for (int b = 1; b <= 256; b *= 2) {
        const double v = scale_activation(plan, 0, b, scaling);
        CHECK(v > prev);
        prev = v;
    }
}

TEST_CASE("enumerate_granularities: uniform chain splits evenly, oversized K skipped") {
    CompGraph g = make_uniform_chain(32, 1.0, 1.0e8, 1.0e6, 2);
    PartitionParams params;
    params.bandwidth_bytes_per_ms = 1.0e7;
    params.gpu_memory_bytes = 1.0e10;
    params.overlap_target_ms = 0.0;  // auto per K
    auto set = enumerate_granularities(g, {4, 8, 16, 32, 64}, params);
    REQUIRE(set.plans.size() == 4);
    REQUIRE(set.skipped.size() == 1);
    CHECK(set.skipped[0].stages == 64);
    const int expect_ops[4] = {8, 4, 2, 1};
    for (std::size_t i = 0; i < set.plans.size(); ++i) {
        for (int c : set.plans[i].plan.stage_op_count)
            CHECK(c == expect_ops[i]);
    }
    CHECK(set.plans[0].config.max_batch == 128);
    CHECK(set.plans[3].config.max_batch == 1024);
}

TEST_CASE("table2 preset: per-stage effective compute within 2% of published values") {
    GraphPreset preset = make_preset("opt66b-table2");
    auto set = enumerate_granularities(preset.graph, {4, 8, 16, 32}, preset.partition_defaults,
                                       static_cast<int>(preset.exec.max_batch_factor));
    REQUIRE(set.plans.size() == 4);
    const double expected[4] = {69.94, 36.63, 18.67, 9.67};
    const double q = preset.exec.stage_efficiency_exponent;
    for (std::size_t i = 0; i < 4; ++i) {
        const auto& plan = set.plans[i].plan;
        for (int k = 0; k < plan.num_stages; ++k) {
            const double eff = plan.stage_compute_ms[static_cast<std::size_t>(k)] *
                               std::pow(plan.stage_op_count[static_cast<std::size_t>(k)], q - 1.0);
            CHECK(std::abs(eff - expected[i]) / expected[i] <= 0.02);
        }
    }
    // Comm totals: (K-1) hops of 2.1 ms at batch 1.
    const double expected_comm[4] = {6.3, 14.7, 31.5, 65.1};
    for (std::size_t i = 0; i < 4; ++i) {
        const auto& plan = set.plans[i].plan;
        double total = 0.0;
        for (int k = 0; k + 1 < plan.num_stages; ++k)
            total += scale_activation(plan, k, 1, preset.exec.batch_scaling) /
                     preset.partition_defaults.bandwidth_bytes_per_ms;
        CHECK(std::abs(total - expected_comm[i]) / expected_comm[i] <= 0.10);
    }
}

TEST_CASE("iteration budget caps per-plan batches by pipeline pass time") {
    CompGraph g = make_uniform_chain(32, 1.0, 1.0e8, 1.0e6, 2);
    PartitionParams params;
    params.bandwidth_bytes_per_ms = 1.0e7;
    params.gpu_memory_bytes = 1.0e10;
    auto set = enumerate_granularities(g, {4, 8, 16}, params, 32);
    ExecModelParams exec;
    exec.batch_exponent = 0.8;
    exec.stage_efficiency_exponent = 1.0;
    exec.iteration_budget_ms = 0.0;
    auto uncapped = set;
    apply_iteration_budget(uncapped, exec);
    for (std::size_t i = 0; i < set.plans.size(); ++i)
        CHECK(uncapped.plans[i].config.max_batch == set.plans[i].config.max_batch);

    exec.iteration_budget_ms = 200.0;
    apply_iteration_budget(set, exec);
    for (const auto& gp : set.plans) {
        // Slowest stage time at the cap stays within the per-stage share.
        double worst = 0.0;
        for (int k = 0; k < gp.plan.num_stages; ++k)
            worst = std::max(worst, gp.plan.stage_compute_ms[static_cast<std::size_t>(k)]);
        const double pass_ms = gp.plan.num_stages * worst *
                               std::pow(gp.config.max_batch, exec.batch_exponent);
        CHECK(pass_ms <= exec.iteration_budget_ms * 1.6);  // integer floor slack
        CHECK(gp.config.max_batch >= 1);
    }
    // Finer plans retain larger batch caps under the same pass budget.
    CHECK(set.plans[2].config.max_batch >= set.plans[0].config.max_batch);
}

TEST_CASE("graph csv: round trip and validation") {
    CompGraph g = make_uniform_chain(6, 1.5, 2.0e8, 3.0e6, 2);
    const std::string path =
        (std::filesystem::temp_directory_path() / "pipesim_graph.csv").string();
    {
        std::ofstream out(path);
        out << to_graph_csv(g);
    }
    CompGraph loaded = load_graph_csv(path);
    REQUIRE(loaded.ops.size() == g.ops.size());
    for (std::size_t i = 0; i < g.ops.size(); ++i) {
        CHECK(loaded.ops[i].compute_ms == doctest::Approx(g.ops[i].compute_ms));
        CHECK(loaded.ops[i].group_id == g.ops[i].group_id);
    }
    CHECK_THROWS_AS((void)load_graph_csv("/nonexistent/graph.csv"), ParseError);
}

TEST_CASE("graph validation rejects non-contiguous groups") {
    CompGraph g;
    for (int i = 0; i < 3; ++i) {
        OpProfile op;
        op.op_id = i;
        op.compute_ms = 1.0;
        op.group_id = (i == 1) ? 1 : 0;  // 0, 1, 0: group 0 split
        g.ops.push_back(op);
    }
    CHECK_THROWS_AS(g.validate(), InvalidSpecError);
}
