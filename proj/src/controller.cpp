// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#include "pipesim/controller.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "pipesim/cluster.hpp"
#include "pipesim/errors.hpp"

namespace pipesim {

double score_granularity(const GranularityProfile& profile, double nu_t, double t_max,
                         double l_min, const ControllerParams& params) {
    if (t_max <= 0.0 || l_min <= 0.0 || profile.latency_ms <= 0.0)
        throw InvalidSpecError("score_granularity: non-positive normalizers");
    const double bracket = params.tradeoff_alpha * profile.throughput / t_max +
                           (1.0 - params.tradeoff_alpha) * l_min / profile.latency_ms;
    const double match = std::exp(-std::abs(nu_t - profile.nu_anchor) / params.sensitivity_sigma);
    return bracket * match;
}

int plan_instances(const GranularityProfile& profile, const ControllerParams& params) {
    const double denom = params.coord_beta1 + params.coord_beta2 * static_cast<double>(profile.stages);
    if (denom <= 0.0) throw InvalidSpecError("plan_instances: non-positive coordination denominator");
    const double mu_k = profile.throughput / denom;
    if (mu_k <= 0.0) throw InvalidSpecError("plan_instances: non-positive per-instance capacity");
    int count = static_cast<int>(std::floor(params.total_capacity / mu_k));
    if (count < 1 && params.keep_alive) count = 1;
    return count;
}

int decide_scaling_granularity(double cv, double queue_length, const ControllerParams& params) {
    if (params.queue_max <= 0.0) throw InvalidSpecError("decide_scaling_granularity: queue_max <= 0");
    if (params.granularity_max < 1)
        throw InvalidSpecError("decide_scaling_granularity: granularity_max must be >= 1");
    const double q_hat = std::min(std::max(queue_length, 0.0) / params.queue_max, 1.0);
    const double cv_clamped = std::max(cv, 0.0);
    const double denom = 1.0 + params.scaling_beta * std::exp(-params.scaling_gamma * cv_clamped * q_hat);
    int m = static_cast<int>(std::floor(static_cast<double>(params.granularity_max) / denom));
    return std::clamp(m, 1, params.granularity_max);
}

bool check_slo(double deadline_ms, double init_ms, const std::vector<double>& stage_rates,
               double queue_length, double required_rate) {
    if (queue_length <= 0.0) return true;
    double sum_mu = 0.0;
    for (double r : stage_rates) sum_mu += r;
    return (deadline_ms - init_ms) * sum_mu / queue_length >= required_rate;
}

ControlDecision control_tick(const MonitorSnapshot& snapshot,
                             const std::vector<GranularityProfile>& profiles,
                             const ControllerParams& params) {
    if (profiles.empty()) throw InvalidSpecError("control_tick: empty profile set");

    ControlDecision d;
    d.now_ms = snapshot.now_ms;
    d.chosen_stages = snapshot.current_stages;

    if (!snapshot.nu_t.has_value()) {
        d.held_insufficient_data = true;
        return d;
    }
    const double nu_t = *snapshot.nu_t;
    d.nu_used = nu_t;

    double t_max = 0.0;
    double l_min = std::numeric_limits<double>::infinity();
    for (const auto& p : profiles) {
        t_max = std::max(t_max, p.throughput);
        l_min = std::min(l_min, p.latency_ms);
    }

    d.scores.resize(profiles.size());
    d.sharing_flags.assign(profiles.size(), false);
    int best = -1;
    int current = -1;
    for (std::size_t k = 0; k < profiles.size(); ++k) {
        double s = score_granularity(profiles[k], nu_t, t_max, l_min, params);
        const bool sharing = k < snapshot.profile_needs_sharing.size() &&
                             snapshot.profile_needs_sharing[k];
        if (sharing)
            s -= multiplexing_penalty(params.multiplex_gamma0, params.multiplex_alpha, nu_t);
        d.scores[k] = s;
        d.sharing_flags[k] = sharing;
        if (best < 0 || s > d.scores[static_cast<std::size_t>(best)]) best = static_cast<int>(k);
        if (profiles[k].stages == snapshot.current_stages) current = static_cast<int>(k);
    }

    const auto& chosen = profiles[static_cast<std::size_t>(best)];
    bool refactor = false;
    if (current < 0) {
        refactor = chosen.stages != snapshot.current_stages;
    } else if (best != current) {
        const double cur_score = d.scores[static_cast<std::size_t>(current)];
        refactor = d.scores[static_cast<std::size_t>(best)] >
                   cur_score + params.hysteresis_margin * std::abs(cur_score);
    }
    // Transitions are deferred while the backlog is deep: scaling out serves a
    // congested model faster than a topology change whose syncs and loads eat
    // into the very capacity that is missing.
    const double q_hat_defer = std::min(snapshot.queue_length / params.queue_max, 1.0);
    if (refactor && q_hat_defer > 0.5) refactor = false;

    // mu_total: fixed capacity budget, or demand-tracking when unset.
    ControllerParams sizing = params;
    if (sizing.total_capacity <= 0.0)
        sizing.total_capacity = snapshot.measured_rate_rps * params.demand_headroom;

    if (refactor) {
        d.chosen_stages = chosen.stages;
        d.target_instances = plan_instances(chosen, sizing);
        d.refactor = chosen.stages > snapshot.current_stages ? RefactorDirective::Refine
                                                             : RefactorDirective::Consolidate;
    } else {
        d.chosen_stages = snapshot.current_stages;
        if (current >= 0)
            d.target_instances = plan_instances(profiles[static_cast<std::size_t>(current)], sizing);
        else
            d.target_instances = snapshot.active_instances;
    }

    // Burst path: queue pressure adds replicas at the urgency granularity even
    // without a granularity switch. A couple of loads may be in flight at
    // once so a sharp onset is not serialized behind one cold start.
    const double q_hat = std::min(snapshot.queue_length / params.queue_max, 1.0);
    if (q_hat >= params.scale_up_queue_threshold && snapshot.pending_instances < 2) {
        d.scale.delta_instances = 1;
        d.scale.stages = decide_scaling_granularity(nu_t, snapshot.queue_length, params);
    }
    return d;
}

}  // namespace pipesim
