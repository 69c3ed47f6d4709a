// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pipesim {

/// One inference request.
struct Request {
    std::int64_t id = 0;
    double arrival_ms = 0.0;
    int prompt_tokens = 1;
    int output_tokens = 1;
    std::string model_id;
    double slo_deadline_ms = 0.0;  // end-to-end budget, relative to arrival
};

/// Parameters for a synthetic arrival stream. Inter-arrival times are gamma
/// distributed with shape 1/target_cv^2 and mean 1/mean_rate, which hits the
/// requested coefficient of variation and degenerates to exponential at CV=1.
struct ArrivalSpec {
    double mean_rate = 1.0;  // requests per second
    double target_cv = 1.0;
    double duration_s = 1.0;
    std::uint64_t seed = 0;
    // Attributes stamped onto every generated request.
    std::string model_id = "m0";
    int prompt_tokens = 512;
    int output_tokens = 8;
    double slo_deadline_ms = 0.0;  // 0 = assigned later by the experiment setup
};

/// Windowed burstiness estimate: nu = sample std / sample mean of the
/// inter-arrival gaps inside the window.
struct CvEstimate {
    double window_s = 0.0;
    double nu = 0.0;
    int sample_count = 0;  // number of gaps used
};

/// Generates the arrival stream for `spec`. Throws InvalidSpecError on
/// non-positive rate/cv/duration.
std::vector<Request> generate_arrivals(const ArrivalSpec& spec);

/// Loads requests from a trace CSV with header
/// `arrival_ms,model_id,prompt_tokens,output_tokens,deadline_ms`.
/// Rows are sorted by arrival time; malformed rows and duplicate ids throw
/// ParseError naming the 1-based line.
std::vector<Request> ingest_trace(const std::string& path);

/// CV over the trailing `window_s` seconds of `arrival_times_ms` (the span is
/// assumed sorted; the window ends at the last timestamp). Returns nullopt
/// when fewer than two gaps fall inside the window — callers treat that as
/// "hold the current configuration".
std::optional<CvEstimate> estimate_cv(std::span<const double> arrival_times_ms, double window_s);

/// Serializes a stream to the trace CSV format (used by tests and tools).
std::string to_trace_csv(std::span<const Request> requests);

}  // namespace pipesim
