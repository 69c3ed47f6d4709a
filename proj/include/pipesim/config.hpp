// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "pipesim/cluster.hpp"
#include "pipesim/controller.hpp"
#include "pipesim/modelgraph.hpp"
#include "pipesim/workload.hpp"

namespace pipesim {

struct WorkloadConfig {
    enum class Kind { Synthetic, Trace };
    Kind kind = Kind::Synthetic;
    ArrivalSpec spec;          // synthetic source
    std::string trace_path;    // trace source
    double slo_multiple = 5.0; // deadline = multiple x no-contention request latency (coarsest plan)
};

struct ModelConfig {
    std::string preset = "uniform-small";  // empty when profile_path is used
    std::string profile_path;
    std::vector<int> stage_counts{4, 8, 16, 32};
    double refactor_weight = -1.0;  // <0: 0.1 x mean per-op objective contribution
};

struct ClusterConfig {
    std::string topology_path;  // empty: use the generator
    SyntheticClusterSpec gen;
    bool bw_from_model = true;  // generator bandwidth tiers follow the model preset
};

struct PolicySpec {
    std::string name = "static-4";
    bool adaptive = false;
    int static_stages = 4;
    double peak_factor = 2.5;           // peak-rate estimate = mean_rate * peak_factor
    double always_ready_fraction = 0.3; // adaptive always-on share of peak capacity
};

struct OutputConfig {
    bool per_request_log = false;
    bool event_trace = false;
    bool decision_log = true;
};

struct CalibrationConfig {
    double duration_s = 20.0;
    double load_fraction = 0.6;  // rho of the calibration runs
    std::vector<double> cv_grid{0.5, 1.0, 2.0, 4.0, 8.0};
    std::string cache_path;  // empty: <output_dir>/profiles.json
    bool sqrt_law_anchors = false;  // override calibrated nu anchors with sqrt-law spacing
};

struct ExperimentConfig {
    int version = 1;
    std::uint64_t seed = 0;
    std::string output_dir = "out";
    WorkloadConfig workload;
    ModelConfig model;
    ClusterConfig cluster;
    PolicySpec policy;
    ControllerParams ctrl;
    CalibrationConfig calibration;
    OutputConfig output;
    double batch_max_wait_ms = -1.0;       // <0: preset default
    double iteration_budget_ms = -1.0;     // <0: preset default; 0 disables the cap
    double reclamation_window_ms = 300'000.0;
    double cv_window_s = 15.0;

    /// Canonical JSON of the resolved config (hash input, reproducibility).
    nlohmann::json to_json() const;
};

/// Parses "flexpipe" or "static-<K>"; throws InvalidSpecError otherwise.
PolicySpec parse_policy(const std::string& name);

/// Parses and validates; error messages name the offending field.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);

std::string config_hash(const ExperimentConfig& cfg);

}  // namespace pipesim
