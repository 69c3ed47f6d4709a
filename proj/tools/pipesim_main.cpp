// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pipesim/config.hpp"
#include "pipesim/errors.hpp"
#include "pipesim/experiment.hpp"

namespace {

int cmd_run(const std::string& config_path, bool event_trace, bool per_request) {
    pipesim::ExperimentConfig cfg = pipesim::load_config(config_path);
    if (event_trace) cfg.output.event_trace = true;
    if (per_request) cfg.output.per_request_log = true;

    if (cfg.output.event_trace) {
        // Trace export needs its own engine wiring; reuse the file writer for
        // everything else and dump events alongside.
        std::filesystem::create_directories(cfg.output_dir);
        pipesim::ExperimentSetup setup = pipesim::build_setup(cfg);
        std::ofstream trace(cfg.output_dir + "/events.jsonl");
        pipesim::Engine engine(setup.engine, setup.cluster, setup.requests);
        engine.set_trace_sink([&trace](const pipesim::SimEvent& ev) {
            trace << "{\"t\":" << ev.time_ms << ",\"seq\":" << ev.seq << ",\"kind\":\""
                  << pipesim::to_string(ev.kind) << "\",\"inst\":" << ev.instance_id
                  << ",\"stage\":" << ev.stage << ",\"batch\":" << ev.batch_id << "}\n";
        });
        if (cfg.policy.adaptive) engine.set_profiles(pipesim::calibrate_profiles(cfg));
        auto result = engine.run();
        auto summary = pipesim::summarize(result.records, result.duration_ms);
        std::printf("completed=%zu goodput=%.3f req/s mean_latency=%.1f ms p99=%.1f ms\n",
                    summary.completed, summary.goodput_rps, summary.mean_latency_ms,
                    summary.p99_ms);
        return 0;
    }

    pipesim::RunArtifacts art = pipesim::run_experiment_files(cfg);
    std::printf("policy=%s cv=%.3g goodput=%.3f req/s mean_latency=%.1f ms p99=%.1f ms gpus=%.2f\n",
                art.policy_label.c_str(), art.cv_label, art.summary.goodput_rps,
                art.summary.mean_latency_ms, art.summary.p99_ms, art.engine.mean_allocated_gpus);
    return 0;
}

int cmd_sweep(const std::string& config_path, std::vector<double> cvs,
              std::vector<std::string> policies, int workers) {
    pipesim::ExperimentConfig cfg = pipesim::load_config(config_path);
    auto cells = pipesim::run_sweep(cfg, cvs, policies, workers);
    std::filesystem::create_directories(cfg.output_dir);
    const std::string csv = pipesim::sweep_csv(cells);
    std::ofstream out(cfg.output_dir + "/sweep.csv");
    out << csv;
    std::size_t failed = 0;
    for (const auto& c : cells)
        if (!c.ok) ++failed;
    std::printf("sweep: %zu cells, %zu failed, wrote %s/sweep.csv\n", cells.size(), failed,
                cfg.output_dir.c_str());
    return failed == cells.size() ? 1 : 0;
}

int cmd_calibrate(const std::string& config_path) {
    pipesim::ExperimentConfig cfg = pipesim::load_config(config_path);
    auto profiles = pipesim::calibrate_profiles(cfg);
    std::filesystem::create_directories(cfg.output_dir);
    const std::string path = cfg.calibration.cache_path.empty()
                                 ? cfg.output_dir + "/profiles.json"
                                 : cfg.calibration.cache_path;
    std::ofstream out(path);
    out << pipesim::profiles_to_json(profiles, pipesim::setup_fingerprint(cfg));
    for (const auto& p : profiles)
        std::printf("stages=%d batch=%d T=%.2f req/s L=%.1f ms nu*=%.2f\n", p.stages, p.batch,
                    p.throughput, p.latency_ms, p.nu_anchor);
    std::printf("wrote %s\n", path.c_str());
    return 0;
}

int cmd_validate(const std::string& config_path) {
    pipesim::load_config(config_path);
    std::printf("ok: %s\n", config_path.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pipesim: serverless LLM pipeline serving simulator"};
    app.require_subcommand(1);

    std::string config_path;
    bool event_trace = false;
    bool per_request = false;
    auto* run = app.add_subcommand("run", "run one experiment from a config file");
    run->add_option("config", config_path, "config JSON")->required();
    run->add_flag("--events", event_trace, "export the event trace (events.jsonl)");
    run->add_flag("--requests", per_request, "export per-request records (requests.jsonl)");

    std::vector<double> cvs;
    std::vector<std::string> policies;
    int workers = 0;
    auto* sweep = app.add_subcommand("sweep", "run a CV x policy sweep");
    sweep->add_option("config", config_path, "config JSON")->required();
    sweep->add_option("--cv", cvs, "CV values")->required()->expected(-1);
    sweep->add_option("--policy", policies, "policies (flexpipe, static-<K>)")
        ->required()
        ->expected(-1);
    sweep->add_option("--workers", workers, "worker threads (default: PIPESIM_WORKERS or 1)");

    auto* calibrate = app.add_subcommand("calibrate", "build granularity profiles");
    calibrate->add_option("config", config_path, "config JSON")->required();

    auto* validate = app.add_subcommand("validate", "validate a config file");
    validate->add_option("config", config_path, "config JSON")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(config_path, event_trace, per_request);
        if (sweep->parsed()) return cmd_sweep(config_path, cvs, policies, workers);
        if (calibrate->parsed()) return cmd_calibrate(config_path);
        if (validate->parsed()) return cmd_validate(config_path);
    } catch (const pipesim::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "unexpected error: %s\n", e.what());
        return 3;
    }
    return 1;
}
