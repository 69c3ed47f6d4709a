// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#include "pipesim/workload.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "pipesim/errors.hpp"
#include "pipesim/rng.hpp"

namespace pipesim {

std::vector<Request> generate_arrivals(const ArrivalSpec& spec) {
    if (spec.mean_rate <= 0.0) throw InvalidSpecError("generate_arrivals: mean_rate must be > 0");
    if (spec.target_cv <= 0.0) throw InvalidSpecError("generate_arrivals: target_cv must be > 0");
    if (spec.duration_s <= 0.0) throw InvalidSpecError("generate_arrivals: duration_s must be > 0");

    const double shape = 1.0 / (spec.target_cv * spec.target_cv);
    const double mean_gap_ms = 1000.0 / spec.mean_rate;
    const double scale = mean_gap_ms / shape;  // gamma mean = shape * scale

    Rng rng(spec.seed);
    std::vector<Request> out;
    out.reserve(static_cast<std::size_t>(spec.mean_rate * spec.duration_s * 1.1) + 16);

    const double horizon_ms = spec.duration_s * 1000.0;
    double t = 0.0;
    std::int64_t id = 0;
    for (;;) {
        t += rng.gamma(shape) * scale;
        if (t > horizon_ms) break;
        Request r;
        r.id = id++;
        r.arrival_ms = t;
        r.prompt_tokens = spec.prompt_tokens;
        r.output_tokens = spec.output_tokens;
        r.model_id = spec.model_id;
        r.slo_deadline_ms = spec.slo_deadline_ms;
        out.push_back(std::move(r));
    }
    return out;
}

namespace {

double parse_double_field(const std::string& field, int line, const char* name) {
    double v = 0.0;
    const char* b = field.data();
    const char* e = b + field.size();
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e)
        throw ParseError("trace line " + std::to_string(line) + ": bad " + name + " '" + field + "'");
    return v;
}

std::int64_t parse_int_field(const std::string& field, int line, const char* name) {
    std::int64_t v = 0;
    const char* b = field.data();
    const char* e = b + field.size();
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e)
        throw ParseError("trace line " + std::to_string(line) + ": bad " + name + " '" + field + "'");
    return v;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    std::stringstream ss(line);
    while (std::getline(ss, cur, ',')) fields.push_back(cur);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
}

}  // namespace

std::vector<Request> ingest_trace(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("trace file not found: " + path);

    std::string line;
    if (!std::getline(in, line)) return {};  // empty file → empty stream
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "arrival_ms,model_id,prompt_tokens,output_tokens,deadline_ms")
        throw ParseError("trace line 1: unexpected header '" + line + "'");

    std::vector<Request> out;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto f = split_csv(line);
        if (f.size() != 5)
            throw ParseError("trace line " + std::to_string(lineno) + ": expected 5 fields, got " +
                             std::to_string(f.size()));
        Request r;
        r.arrival_ms = parse_double_field(f[0], lineno, "arrival_ms");
        r.model_id = f[1];
        r.prompt_tokens = static_cast<int>(parse_int_field(f[2], lineno, "prompt_tokens"));
        r.output_tokens = static_cast<int>(parse_int_field(f[3], lineno, "output_tokens"));
        r.slo_deadline_ms = parse_double_field(f[4], lineno, "deadline_ms");
        if (r.arrival_ms < 0.0)
            throw ParseError("trace line " + std::to_string(lineno) + ": negative arrival_ms");
        if (r.prompt_tokens < 1)
            throw ParseError("trace line " + std::to_string(lineno) + ": prompt_tokens must be >= 1");
        if (r.output_tokens < 1)
            throw ParseError("trace line " + std::to_string(lineno) + ": output_tokens must be >= 1");
        if (r.slo_deadline_ms <= 0.0)
            throw ParseError("trace line " + std::to_string(lineno) + ": deadline_ms must be > 0");
        if (r.model_id.empty())
            throw ParseError("trace line " + std::to_string(lineno) + ": empty model_id");
        out.push_back(std::move(r));
    }

    std::stable_sort(out.begin(), out.end(),
                     [](const Request& a, const Request& b) { return a.arrival_ms < b.arrival_ms; });
    for (std::size_t i = 0; i < out.size(); ++i) out[i].id = static_cast<std::int64_t>(i);
    return out;
}

std::optional<CvEstimate> estimate_cv(std::span<const double> arrival_times_ms, double window_s) {
    if (window_s <= 0.0 || arrival_times_ms.size() < 2) return std::nullopt;
    const double t_end = arrival_times_ms.back();
    const double t_begin = t_end - window_s * 1000.0;

    // First index inside the window.
    std::size_t lo = std::lower_bound(arrival_times_ms.begin(), arrival_times_ms.end(), t_begin) -
                     arrival_times_ms.begin();
    const std::size_t n = arrival_times_ms.size() - lo;
    if (n < 3) return std::nullopt;  // need >= 2 gaps for a Bessel-corrected std

    const std::size_t gaps = n - 1;
    double mean = 0.0;
    for (std::size_t i = lo + 1; i < arrival_times_ms.size(); ++i)
        mean += arrival_times_ms[i] - arrival_times_ms[i - 1];
    mean /= static_cast<double>(gaps);
    if (mean <= 0.0) return std::nullopt;

    double ss = 0.0;
    for (std::size_t i = lo + 1; i < arrival_times_ms.size(); ++i) {
        const double d = (arrival_times_ms[i] - arrival_times_ms[i - 1]) - mean;
        ss += d * d;
    }
    const double stddev = std::sqrt(ss / static_cast<double>(gaps - 1));

    CvEstimate est;
    est.window_s = window_s;
    est.nu = stddev / mean;
    est.sample_count = static_cast<int>(gaps);
    return est;
}

std::string to_trace_csv(std::span<const Request> requests) {
    std::string out = "arrival_ms,model_id,prompt_tokens,output_tokens,deadline_ms\n";
    char buf[256];
    for (const Request& r : requests) {
        std::snprintf(buf, sizeof(buf), "%.6f,%s,%d,%d,%.6f\n", r.arrival_ms, r.model_id.c_str(),
                      r.prompt_tokens, r.output_tokens, r.slo_deadline_ms);
        out += buf;
    }
    return out;
}

}  // namespace pipesim
