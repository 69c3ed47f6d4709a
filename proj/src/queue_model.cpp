// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#include "pipesim/queue_model.hpp"

#include <cmath>
#include <string>

#include "pipesim/errors.hpp"

namespace pipesim {

double analytic_latency(const QueueModelParams& p) {
    if (p.service_rate <= 0.0) throw InvalidSpecError("analytic_latency: service_rate must be > 0");
    if (p.stage_count < 1) throw InvalidSpecError("analytic_latency: stage_count must be >= 1");
    const double rho = p.utilization();
    if (rho >= 1.0)
        throw DivergenceError("analytic_latency: utilization " + std::to_string(rho) + " >= 1");
    if (p.stage_arrival_rates.size() != p.stage_service_rates.size())
        throw InvalidSpecError("analytic_latency: per-stage rate vectors differ in length");

    double factorial = 1.0;
    for (int i = 2; i <= p.stage_count; ++i) factorial *= static_cast<double>(i);

    const double queue_term = std::pow(rho, p.stage_count) / (factorial * (1.0 - rho)) *
                              (p.cv_arrival * p.cv_arrival + p.cv_service * p.cv_service) / 2.0;

    double congestion = 0.0;
    for (std::size_t i = 0; i < p.stage_arrival_rates.size(); ++i) {
        const double li = p.stage_arrival_rates[i];
        const double mi = p.stage_service_rates[i];
        if (li >= mi)
            throw DivergenceError("analytic_latency: stage " + std::to_string(i) +
                                  " arrival rate >= service rate");
        congestion += li / (mi - li);
    }
    return queue_term + congestion;
}

double pipeline_delay_ms(int stages, double stage_ms, double hop_ms) {
    return static_cast<double>(stages) * stage_ms + static_cast<double>(stages - 1) * hop_ms;
}

}  // namespace pipesim
