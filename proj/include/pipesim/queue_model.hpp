// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

namespace pipesim {

/// Inputs for the extended G/G/S pipeline latency approximation. Rates are in
/// requests per unit time; the prediction comes out in units of 1/service_rate
/// (the heavy-traffic queue term is dimensionless, so the caller picks the
/// time base by choosing the rate units).
struct QueueModelParams {
    double arrival_rate = 0.0;   // lambda
    double service_rate = 1.0;   // mu
    int stage_count = 1;         // S
    double cv_arrival = 1.0;     // CV_a
    double cv_service = 1.0;     // CV_s
    std::vector<double> stage_arrival_rates;  // lambda_i
    std::vector<double> stage_service_rates;  // mu_i

    double utilization() const { return arrival_rate / service_rate; }
};

/// Heavy-traffic pipeline latency:
///   rho^S / (S! (1-rho)) * (CV_a^2 + CV_s^2)/2  +  sum_i lambda_i/(mu_i - lambda_i)
/// Throws DivergenceError when rho >= 1 or any stage has lambda_i >= mu_i.
/// Used for controller-side prediction and property checks; the event engine
/// is the ground truth for measured latency.
double analytic_latency(const QueueModelParams& p);

/// No-contention pipeline delay S*tau + (S-1)*delta.
double pipeline_delay_ms(int stages, double stage_ms, double hop_ms);

}  // namespace pipesim
