// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace pipesim {

enum class RequestOutcome { Completed, Rejected, Expired };

/// Per-request ledger written by the engine.
struct RequestRecord {
    std::int64_t request_id = 0;
    std::string model_id;
    double arrival_ms = 0.0;
    double start_ms = 0.0;   // first service start
    double finish_ms = 0.0;
    double queue_ms = 0.0;   // waiting in queues / batching holds
    double compute_ms = 0.0; // stage service intervals
    double comm_ms = 0.0;    // inter-stage transfers
    double slo_deadline_ms = 0.0;
    bool met_slo = false;
    int stages_at_service = 0;  // granularity of the serving instance at finish
    int tokens_generated = 0;
    RequestOutcome outcome = RequestOutcome::Completed;

    double latency_ms() const { return finish_ms - arrival_ms; }
};

struct StallEpisode {
    double onset_ms = 0.0;
    double recovery_ms = 0.0;
    double baseline_ms = 0.0;
    double duration_ms() const { return recovery_ms - onset_ms; }
};

struct StallParams {
    double onset_factor = 1.5;     // latency above onset_factor*baseline starts an episode
    double recovery_factor = 1.2;  // back within recovery_factor*baseline ends it
    int smoothing_window = 5;      // moving-median width
    double baseline_fraction = 0.1;  // leading fraction of the run that defines "normal"
    int min_baseline_samples = 20;
};

/// Stall episodes over a latency series sampled at completion times.
/// Baseline = P25 of the leading baseline_fraction of samples, restricted to
/// samples under their own P75. Throws InvalidSpecError when the baseline
/// window has too few samples.
std::vector<StallEpisode> detect_stalls(std::span<const double> times_ms,
                                        std::span<const double> latencies_ms,
                                        const StallParams& params = {});

/// Whole-run summary; percentiles are nearest-rank.
struct RunSummary {
    std::size_t completed = 0;
    std::size_t expired = 0;
    std::size_t rejected = 0;
    double duration_ms = 0.0;
    double goodput_rps = 0.0;       // SLO-met completions per second
    double throughput_rps = 0.0;    // completions per second
    double offered_rps = 0.0;
    double mean_latency_ms = 0.0;
    double p50_ms = 0.0;
    double p90_ms = 0.0;
    double p99_ms = 0.0;
    double mean_queue_ms = 0.0;
    double mean_compute_ms = 0.0;
    double mean_comm_ms = 0.0;
    double queue_share = 0.0;   // of mean latency; shares sum to 1
    double compute_share = 0.0;
    double comm_share = 0.0;
    double median_recovery_ms = 0.0;  // over stall episodes; 0 when none
    std::size_t stall_episodes = 0;
};

double nearest_rank_percentile(std::vector<double> values, double pct);

/// Summarizes completed records over [0, duration_ms]. Throws on empty input.
RunSummary summarize(std::span<const RequestRecord> records, double duration_ms,
                     const StallParams& stall_params = {});

/// Aggregated stage busy/bubble time, accumulated by the engine.
struct StageTimeline {
    double busy_ms = 0.0;
    double bubble_ms = 0.0;  // idle while work exists upstream in the pipeline
};

/// Bubble time over busy time across stages. Returns -1 when total busy time
/// is zero (undefined).
double stall_cycle_ratio(std::span<const StageTimeline> stages);

}  // namespace pipesim
