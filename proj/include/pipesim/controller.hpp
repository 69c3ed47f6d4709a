// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

namespace pipesim {

/// Cached performance profile of one pipeline granularity.
struct GranularityProfile {
    int stages = 0;            // eta_k
    int batch = 1;             // b_k
    double throughput = 0.0;   // T_k, requests/s
    double latency_ms = 0.0;   // L_k
    double nu_anchor = 0.0;    // CV value this granularity serves best
};

struct ControllerParams {
    double tradeoff_alpha = 0.5;     // throughput vs latency weight in [0,1]
    double sensitivity_sigma = 1.0;  // CV-match sensitivity
    double coord_beta1 = 1.0;        // per-instance coordination overhead
    double coord_beta2 = 0.0;        // per-stage coordination overhead
    double total_capacity = 0.0;     // mu_total, requests/s; <=0 tracks demand
    double demand_headroom = 1.2;    // mu_total = headroom * measured rate when tracking
    double scaling_beta = 3.0;       // sigmoid shape for scaling granularity
    double scaling_gamma = 1.0;
    int granularity_max = 0;         // G_max; <=0 = finest configured plan
    double queue_max = 100.0;        // Q_max normalizer
    double control_interval_ms = 200.0;
    double hysteresis_margin = 0.05; // refactor only if score beats current by this fraction
    double refactor_cooldown_ms = 0.0;  // minimum spacing between granularity switches
    double multiplex_gamma0 = 0.1;   // multiplexing-penalty fold-in
    double multiplex_alpha = 1.0;
    bool keep_alive = true;          // at least one instance stays up
    double scale_up_queue_threshold = 0.5;  // q_hat that triggers elastic scale-up
};

/// What the controller sees at a tick, for one model.
struct MonitorSnapshot {
    double now_ms = 0.0;
    std::optional<double> nu_t;     // windowed CV; nullopt = insufficient data
    double measured_rate_rps = 0.0; // arrivals over the monitoring window
    double queue_length = 0.0;      // total queued units across instances
    int current_stages = 0;
    int active_instances = 0;
    int pending_instances = 0;      // loading / scheduled
    double free_gpus = 0.0;
    double busy_gpus = 0.0;
    /// True per profile when adopting it would need more GPUs than are free
    /// without multiplexing (drives the multiplexing-penalty fold).
    std::vector<bool> profile_needs_sharing;
};

enum class RefactorDirective { Hold, Refine, Consolidate };

struct ScaleDirective {
    int delta_instances = 0;    // >0 scale up, <0 allow reclaim
    int stages = 0;             // granularity of new replicas, mapped to a plan
};

struct ControlDecision {
    double now_ms = 0.0;
    double nu_used = 0.0;
    bool held_insufficient_data = false;
    int chosen_stages = 0;                // g*
    int target_instances = 0;             // M(g*)
    RefactorDirective refactor = RefactorDirective::Hold;
    ScaleDirective scale;
    double decision_us = 0.0;             // wall-clock compute time of the tick
    std::vector<double> scores;           // per profile, after the penalty fold
    std::vector<bool> sharing_flags;      // as used in the fold (echoed for audit)
};

/// Granularity score: bracket * exp(-|nu_t - nu_k| / sigma), where
/// bracket = alpha*T_k/T_max + (1-alpha)*L_min/L_k. T_max/L_min are over the
/// whole profile set.
double score_granularity(const GranularityProfile& profile, double nu_t, double t_max,
                         double l_min, const ControllerParams& params);

/// Replica count: floor(mu_total / mu_k), mu_k = T_k/(b1 + b2*eta_k).
/// keep_alive lifts a zero to one. Throws InvalidSpecError on a non-positive
/// denominator.
int plan_instances(const GranularityProfile& profile, const ControllerParams& params);

/// Scaling granularity: floor(G_max / (1 + beta*exp(-gamma*cv*q_hat)))
/// with q_hat = min(q/Q_max, 1), clamped to [1, G_max].
int decide_scaling_granularity(double cv, double queue_length, const ControllerParams& params);

/// SLO admission: (T_j - S_j) * sum(mu_jk) / Q_j >= r_j. Vacuously true at
/// Q_j = 0.
bool check_slo(double deadline_ms, double init_ms, const std::vector<double>& stage_rates,
               double queue_length, double required_rate);

/// One pass of the control loop over the profile set. Pure function of the
/// snapshot; the caller applies directives and measures decision_us.
ControlDecision control_tick(const MonitorSnapshot& snapshot,
                             const std::vector<GranularityProfile>& profiles,
                             const ControllerParams& params);

}  // namespace pipesim
