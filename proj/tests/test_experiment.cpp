// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "pipesim/config.hpp"
#include "pipesim/errors.hpp"
#include "pipesim/experiment.hpp"

using namespace pipesim;

namespace {

nlohmann::json minimal_config_json() {
    nlohmann::json j;
    j["version"] = 1;
    j["seed"] = 7;
    j["output_dir"] = (std::filesystem::temp_directory_path() / "pipesim_out").string();
    j["workload"] = {{"kind", "synthetic"}, {"mean_rate", 20.0}, {"target_cv", 1.0},
                     {"duration_s", 20.0}, {"prompt_tokens", 64}, {"output_tokens", 3}};
    j["model"] = {{"preset", "uniform-small"}, {"stage_counts", {4, 8}}};
    j["policy"] = {{"name", "static-4"}};
    j["cluster"] = {{"racks", 2}, {"servers_per_rack", 4}, {"gpus_per_server", 4}};
    return j;
}

std::string strip_wall_column(const std::string& row) {
    const auto pos = row.rfind(',');
    return row.substr(0, pos);
}

}  // namespace

TEST_CASE("config: policy names parse or fail with the field name") {
    CHECK(parse_policy("flexpipe").adaptive);
    CHECK(parse_policy("static-4").static_stages == 4);
    CHECK(parse_policy("static-32").static_stages == 32);
    try {
        (void)parse_policy("roundrobin");
        FAIL("expected InvalidSpecError");
    } catch (const InvalidSpecError& e) {
        CHECK(std::string(e.what()).find("policy.name") != std::string::npos);
    }
    CHECK_THROWS_AS((void)parse_policy("static-x"), InvalidSpecError);
    CHECK_THROWS_AS((void)parse_policy("static-0"), InvalidSpecError);
}

TEST_CASE("config: validation errors name the offending field") {
    auto expect_field = [](nlohmann::json j, const std::string& field) {
        try {
            (void)parse_config(j);
            FAIL_CHECK("expected failure for ", field);
        } catch (const InvalidSpecError& e) {
            CHECK(std::string(e.what()).find(field) != std::string::npos);
        }
    };
    nlohmann::json j = minimal_config_json();
    j.erase("version");
    expect_field(j, "version");

    j = minimal_config_json();
    j["workload"]["mean_rate"] = -5;
    expect_field(j, "workload.mean_rate");

    j = minimal_config_json();
    j["workload"]["kind"] = "mystery";
    expect_field(j, "workload.kind");

    j = minimal_config_json();
    j["policy"]["name"] = "bogus";
    expect_field(j, "policy.name");

    j = minimal_config_json();
    j["model"]["stage_counts"] = nlohmann::json::array();
    expect_field(j, "model.stage_counts");

    j = minimal_config_json();
    j["controller"] = {{"tradeoff_alpha", 2.0}};
    expect_field(j, "controller.tradeoff_alpha");

    j = minimal_config_json();
    j["workload"].erase("mean_rate");
    expect_field(j, "workload.mean_rate");
}

TEST_CASE("config: exactly one workload source") {
    nlohmann::json j = minimal_config_json();
    j["workload"]["path"] = "trace.csv";
    CHECK_THROWS_AS((void)parse_config(j), InvalidSpecError);
}

TEST_CASE("config: controller and execution overrides parse") {
    nlohmann::json j = minimal_config_json();
    j["controller"] = {{"refactor_cooldown_ms", 30000.0}, {"demand_headroom", 2.1},
                       {"granularity_max", 6},           {"total_capacity", 0.0}};
    j["iteration_budget_ms"] = 150.0;
    ExperimentConfig cfg = parse_config(j);
    CHECK(cfg.ctrl.refactor_cooldown_ms == doctest::Approx(30000.0));
    CHECK(cfg.ctrl.demand_headroom == doctest::Approx(2.1));
    CHECK(cfg.ctrl.granularity_max == 6);
    CHECK(cfg.iteration_budget_ms == doctest::Approx(150.0));
    ExperimentSetup setup = build_setup(cfg);
    // Budget flows into the plans' batch caps.
    for (const auto& gp : setup.granularities.plans)
        CHECK(gp.config.max_batch < 8 * gp.config.stages);
}

TEST_CASE("config: hash is stable and sensitive") {
    ExperimentConfig a = parse_config(minimal_config_json());
    ExperimentConfig b = parse_config(minimal_config_json());
    CHECK(config_hash(a) == config_hash(b));
    b.seed = 8;
    CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("experiment: minimal static run produces a summary row") {
    ExperimentConfig cfg = parse_config(minimal_config_json());
    RunArtifacts art = run_experiment(cfg);
    CHECK(art.summary.completed > 100);
    CHECK(art.summary.goodput_rps > 0.0);
    CHECK(art.engine.mean_allocated_gpus > 0.0);
    const std::string row = summary_csv_row(art);
    // Same column count as the header.
    const auto count = [](const std::string& s) {
        std::size_t n = 1;
        for (char c : s)
            if (c == ',') ++n;
        return n;
    };
    CHECK(count(row) == count(summary_csv_header()));
}

TEST_CASE("experiment: deterministic summary rows modulo wall clock") {
    ExperimentConfig cfg = parse_config(minimal_config_json());
    RunArtifacts a = run_experiment(cfg);
    RunArtifacts b = run_experiment(cfg);
    CHECK(strip_wall_column(summary_csv_row(a)) == strip_wall_column(summary_csv_row(b)));
}

TEST_CASE("experiment: static provisioning scales with the peak factor") {
    ExperimentConfig cfg = parse_config(minimal_config_json());
    cfg.policy.peak_factor = 1.0;
    ExperimentSetup s1 = build_setup(cfg);
    cfg.policy.peak_factor = 8.0;
    ExperimentSetup s8 = build_setup(cfg);
    CHECK(s8.engine.policy.initial_instances >= s1.engine.policy.initial_instances);
}

TEST_CASE("experiment: synthetic deadlines follow the coarsest-plan latency") {
    ExperimentConfig cfg = parse_config(minimal_config_json());
    ExperimentSetup setup = build_setup(cfg);
    const auto& coarse = setup.granularities.plans[static_cast<std::size_t>(setup.coarsest_plan)];
    const double expected =
        cfg.workload.slo_multiple *
        no_load_request_latency_ms(coarse, setup.preset.exec,
                                   setup.preset.partition_defaults.bandwidth_bytes_per_ms,
                                   1 + cfg.workload.spec.output_tokens);
    CHECK(setup.slo_ms == doctest::Approx(expected));
    REQUIRE(!setup.requests.empty());
    CHECK(setup.requests[0].slo_deadline_ms == doctest::Approx(expected));
}

TEST_CASE("sweep: cartesian product with stable per-cell seeds") {
    ExperimentConfig cfg = parse_config(minimal_config_json());
    cfg.workload.spec.duration_s = 8.0;
    auto cells = run_sweep(cfg, {0.5, 2.0}, {"static-4", "static-8"}, 2);
    REQUIRE(cells.size() == 4);
    for (const auto& c : cells) CHECK(c.ok);
    // Sorted by (policy, cv).
    CHECK(cells[0].policy == "static-4");
    CHECK(cells[0].cv == doctest::Approx(0.5));
    CHECK(cells[3].policy == "static-8");
    CHECK(cells[3].cv == doctest::Approx(2.0));

    auto cells2 = run_sweep(cfg, {0.5, 2.0}, {"static-4", "static-8"}, 1);
    REQUIRE(cells2.size() == 4);
    for (std::size_t i = 0; i < cells.size(); ++i)
        CHECK(strip_wall_column(cells[i].row) == strip_wall_column(cells2[i].row));

    const std::string csv = sweep_csv(cells);
    std::size_t lines = 0;
    for (char c : csv)
        if (c == '\n') ++lines;
    CHECK(lines == 5);  // header + 4 cells
}

TEST_CASE("sweep: a failing cell is recorded, the sweep continues") {
    ExperimentConfig cfg = parse_config(minimal_config_json());
    cfg.workload.spec.duration_s = 5.0;
    // static-6 is not in stage_counts {4, 8}: that cell fails.
    auto cells = run_sweep(cfg, {1.0}, {"static-4", "static-6"}, 1);
    REQUIRE(cells.size() == 2);
    CHECK(cells[0].ok);
    CHECK_FALSE(cells[1].ok);
    CHECK(!cells[1].error.empty());
    const std::string csv = sweep_csv(cells);
    std::size_t lines = 0;
    for (char c : csv)
        if (c == '\n') ++lines;
    CHECK(lines == 3);
}

TEST_CASE("experiment: files are written for a run") {
    ExperimentConfig cfg = parse_config(minimal_config_json());
    cfg.workload.spec.duration_s = 5.0;
    cfg.output_dir =
        (std::filesystem::temp_directory_path() / "pipesim_files_test").string();
    std::filesystem::remove_all(cfg.output_dir);
    cfg.output.per_request_log = true;
    (void)run_experiment_files(cfg);
    CHECK(std::filesystem::exists(cfg.output_dir + "/summary.csv"));
    CHECK(std::filesystem::exists(cfg.output_dir + "/requests.jsonl"));
    std::ifstream in(cfg.output_dir + "/summary.csv");
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    CHECK(header == summary_csv_header());
    CHECK(!row.empty());
}

TEST_CASE("profiles: json cache round trip honors the fingerprint") {
    std::vector<GranularityProfile> profiles(2);
    profiles[0] = {4, 128, 30.0, 120.0, 0.5};
    profiles[1] = {8, 256, 55.0, 150.0, 2.0};
    const std::string text = profiles_to_json(profiles, "abc123");
    auto loaded = profiles_from_json(text, "abc123");
    REQUIRE(loaded.has_value());
    REQUIRE(loaded->size() == 2);
    CHECK((*loaded)[1].throughput == doctest::Approx(55.0));
    CHECK_FALSE(profiles_from_json(text, "otherfp").has_value());
    CHECK_FALSE(profiles_from_json("not json", "abc123").has_value());
}
