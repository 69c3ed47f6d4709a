// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#include "pipesim/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "pipesim/errors.hpp"

namespace pipesim {

namespace {

double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> moving_median(std::span<const double> xs, int window) {
    if (window <= 1) return {xs.begin(), xs.end()};
    std::vector<double> out(xs.size());
    const int half = window / 2;
    std::vector<double> buf;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        buf.clear();
        const std::size_t lo = i >= static_cast<std::size_t>(half) ? i - static_cast<std::size_t>(half) : 0;
        const std::size_t hi = std::min(xs.size(), i + static_cast<std::size_t>(half) + 1);
        for (std::size_t j = lo; j < hi; ++j) buf.push_back(xs[j]);
        std::sort(buf.begin(), buf.end());
        out[i] = buf[buf.size() / 2];
    }
    return out;
}

}  // namespace

double nearest_rank_percentile(std::vector<double> values, double pct) {
    if (values.empty()) throw InvalidSpecError("percentile of empty set");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    std::size_t rank = static_cast<std::size_t>(std::ceil(pct / 100.0 * static_cast<double>(n)));
    if (rank < 1) rank = 1;
    if (rank > n) rank = n;
    return values[rank - 1];
}

std::vector<StallEpisode> detect_stalls(std::span<const double> times_ms,
                                        std::span<const double> latencies_ms,
                                        const StallParams& params) {
    if (times_ms.size() != latencies_ms.size())
        throw InvalidSpecError("detect_stalls: time/latency length mismatch");
    const std::size_t n = latencies_ms.size();
    std::size_t baseline_n = static_cast<std::size_t>(
        std::ceil(params.baseline_fraction * static_cast<double>(n)));
    baseline_n = std::max<std::size_t>(baseline_n, static_cast<std::size_t>(params.min_baseline_samples));
    if (n < baseline_n || baseline_n < static_cast<std::size_t>(params.min_baseline_samples))
        throw InvalidSpecError("detect_stalls: insufficient baseline data (" + std::to_string(n) +
                               " samples)");

    // Normal operation: leading window, excluding its own upper quartile.
    std::vector<double> lead(latencies_ms.begin(),
                             latencies_ms.begin() + static_cast<std::ptrdiff_t>(baseline_n));
    const double p75 = nearest_rank_percentile(lead, 75.0);
    std::vector<double> normal;
    for (double v : lead)
        if (v <= p75) normal.push_back(v);
    if (normal.empty()) normal = lead;
    const double baseline = nearest_rank_percentile(normal, 25.0);

    const std::vector<double> smooth = moving_median(latencies_ms, params.smoothing_window);
    const double onset_thr = params.onset_factor * baseline;
    const double recovery_thr = params.recovery_factor * baseline;

    std::vector<StallEpisode> episodes;
    bool in_episode = false;
    StallEpisode cur;
    for (std::size_t i = 0; i < n; ++i) {
        if (!in_episode && smooth[i] > onset_thr) {
            in_episode = true;
            cur.onset_ms = times_ms[i];
            cur.baseline_ms = baseline;
        } else if (in_episode && smooth[i] <= recovery_thr) {
            cur.recovery_ms = times_ms[i];
            episodes.push_back(cur);
            in_episode = false;
        }
    }
    if (in_episode) {  // unrecovered at end of series
        cur.recovery_ms = times_ms[n - 1];
        episodes.push_back(cur);
    }
    return episodes;
}

RunSummary summarize(std::span<const RequestRecord> records, double duration_ms,
                     const StallParams& stall_params) {
    if (records.empty()) throw InvalidSpecError("summarize: no records");
    RunSummary s;
    s.duration_ms = duration_ms;

    std::vector<double> latencies;
    std::vector<double> finish_times;
    std::size_t slo_met = 0;
    for (const RequestRecord& r : records) {
        switch (r.outcome) {
            case RequestOutcome::Rejected: ++s.rejected; continue;
            case RequestOutcome::Expired: ++s.expired; continue;
            case RequestOutcome::Completed: break;
        }
        ++s.completed;
        const double lat = r.latency_ms();
        latencies.push_back(lat);
        finish_times.push_back(r.finish_ms);
        s.mean_latency_ms += lat;
        s.mean_queue_ms += r.queue_ms;
        s.mean_compute_ms += r.compute_ms;
        s.mean_comm_ms += r.comm_ms;
        if (r.met_slo) ++slo_met;
    }
    if (s.completed == 0) throw InvalidSpecError("summarize: no completed records");
    const double nc = static_cast<double>(s.completed);
    s.mean_latency_ms /= nc;
    s.mean_queue_ms /= nc;
    s.mean_compute_ms /= nc;
    s.mean_comm_ms /= nc;
    const double total = s.mean_queue_ms + s.mean_compute_ms + s.mean_comm_ms;
    if (total > 0.0) {
        s.queue_share = s.mean_queue_ms / total;
        s.compute_share = s.mean_compute_ms / total;
        s.comm_share = s.mean_comm_ms / total;
    }
    const double dur_s = duration_ms / 1000.0;
    s.goodput_rps = static_cast<double>(slo_met) / dur_s;
    s.throughput_rps = nc / dur_s;
    s.offered_rps = static_cast<double>(records.size()) / dur_s;
    s.p50_ms = nearest_rank_percentile(latencies, 50.0);
    s.p90_ms = nearest_rank_percentile(latencies, 90.0);
    s.p99_ms = nearest_rank_percentile(latencies, 99.0);

    // Stall episodes over the completion-ordered latency series.
    std::vector<std::size_t> order(latencies.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return finish_times[a] < finish_times[b]; });
    std::vector<double> t_sorted(order.size()), l_sorted(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        t_sorted[i] = finish_times[order[i]];
        l_sorted[i] = latencies[order[i]];
    }
    try {
        const auto episodes = detect_stalls(t_sorted, l_sorted, stall_params);
        s.stall_episodes = episodes.size();
        std::vector<double> durations;
        durations.reserve(episodes.size());
        for (const auto& e : episodes) durations.push_back(e.duration_ms());
        s.median_recovery_ms = median_of(std::move(durations));
    } catch (const InvalidSpecError&) {
        s.stall_episodes = 0;  // short runs: baseline undefined
        s.median_recovery_ms = 0.0;
    }
    return s;
}

double stall_cycle_ratio(std::span<const StageTimeline> stages) {
    double busy = 0.0;
    double bubble = 0.0;
    for (const StageTimeline& st : stages) {
        busy += st.busy_ms;
        bubble += st.bubble_ms;
    }
    if (busy <= 0.0) return -1.0;
    return bubble / busy;
}

}  // namespace pipesim
