// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pipesim/config.hpp"
#include "pipesim/engine.hpp"
#include "pipesim/metrics.hpp"

namespace pipesim {

/// Everything built from a config before the engine runs.
struct ExperimentSetup {
    GraphPreset preset;           // graph + exec + bandwidth tiers
    GranularitySet granularities;
    Hrg cluster;
    std::vector<Request> requests;
    double slo_ms = 0.0;          // resolved default deadline
    double peak_rps = 0.0;
    int static_instances = 0;     // replicas for this policy
    int coarsest_plan = 0;
    EngineConfig engine;
};

/// Sustainable request rate of one replica at its max batch.
double instance_capacity_rps(const GranularityPlan& gp, const ExecModelParams& exec,
                             int passes_per_request);

/// No-contention latency of a single request on a plan (batch 1).
double no_load_request_latency_ms(const GranularityPlan& gp, const ExecModelParams& exec,
                                  double bandwidth_bytes_per_ms, int passes_per_request);

ExperimentSetup build_setup(const ExperimentConfig& cfg);

/// Calibration: T_k/L_k measured at moderate load per granularity, nu anchors
/// from a CV sweep (or sqrt-law spacing when configured). Deterministic given
/// the config seed. Results are cached as JSON keyed by a setup fingerprint.
std::vector<GranularityProfile> calibrate_profiles(const ExperimentConfig& cfg);
std::string profiles_to_json(const std::vector<GranularityProfile>& profiles,
                             const std::string& fingerprint);
std::optional<std::vector<GranularityProfile>> profiles_from_json(const std::string& text,
                                                                  const std::string& fingerprint);
std::string setup_fingerprint(const ExperimentConfig& cfg);

struct RunArtifacts {
    RunSummary summary;
    EngineResult engine;
    std::vector<GranularityProfile> profiles;  // adaptive runs only
    std::string hash;
    double cv_label = 0.0;
    std::string policy_label;
    double wall_ms = 0.0;
};

RunArtifacts run_experiment(const ExperimentConfig& cfg);

/// One row of the summary CSV; wall-clock is the final column so deterministic
/// comparisons can strip it.
std::string summary_csv_header();
std::string summary_csv_row(const RunArtifacts& artifacts);

/// Writes summary.csv, decisions.jsonl and the optional per-request/event logs
/// under cfg.output_dir. Returns the artifacts.
RunArtifacts run_experiment_files(const ExperimentConfig& cfg);

struct SweepCell {
    double cv = 0.0;
    std::string policy;
    bool ok = false;
    std::string error;
    std::string row;  // summary CSV row when ok
};

/// Cartesian product of CVs and policies, run on `workers` threads (0 = from
/// PIPESIM_WORKERS, default 1). Per-cell seeds derive from the base seed and
/// cell labels; failures are recorded and the sweep continues.
std::vector<SweepCell> run_sweep(const ExperimentConfig& base, const std::vector<double>& cvs,
                                 const std::vector<std::string>& policies, int workers = 0);

std::string sweep_csv(const std::vector<SweepCell>& cells);

}  // namespace pipesim
