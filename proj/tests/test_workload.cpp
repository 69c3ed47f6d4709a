// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pipesim/errors.hpp"
#include "pipesim/workload.hpp"

using namespace pipesim;

namespace {

// Independent sample-CV oracle (Bessel-corrected), over inter-arrival gaps.
double sample_cv(const std::vector<Request>& reqs) {
    REQUIRE(reqs.size() >= 3);
    std::vector<double> gaps;
    for (std::size_t i = 1; i < reqs.size(); ++i)
        gaps.push_back(reqs[i].arrival_ms - reqs[i - 1].arrival_ms);
    double mean = 0.0;
    for (double g : gaps) mean += g;
    mean /= static_cast<double>(gaps.size());
    double ss = 0.0;
    for (double g : gaps) ss += (g - mean) * (g - mean);
    const double sd = std::sqrt(ss / static_cast<double>(gaps.size() - 1));
    return sd / mean;
}

std::string write_temp(const std::string& name, const std::string& content) {
    const std::string path = (std::filesystem::temp_directory_path() / name).string();
    std::ofstream out(path);
    out << content;
    return path;
}

}  // namespace

TEST_CASE("generate_arrivals: exponential at cv=1") {
    ArrivalSpec spec;
    spec.mean_rate = 100.0;
    spec.target_cv = 1.0;
    spec.duration_s = 1000.0;
    spec.seed = 11;
    auto reqs = generate_arrivals(spec);
    REQUIRE(reqs.size() > 50'000);
    CHECK(sample_cv(reqs) == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("generate_arrivals: cv=4 stream hits its target") {
    ArrivalSpec spec;
    spec.mean_rate = 20.0;
    spec.target_cv = 4.0;
    spec.duration_s = 5000.0;
    spec.seed = 7;
    auto reqs = generate_arrivals(spec);
    const double cv = sample_cv(reqs);
    CHECK(cv >= 3.8);
    CHECK(cv <= 4.2);
}

TEST_CASE("generate_arrivals: rate fidelity and monotone arrivals") {
    ArrivalSpec spec;
    spec.mean_rate = 50.0;
    spec.target_cv = 2.0;
    spec.duration_s = 2000.0;  // 1e5 expected samples
    spec.seed = 3;
    auto reqs = generate_arrivals(spec);
    const double measured_rate =
        1000.0 * static_cast<double>(reqs.size() - 1) /
        (reqs.back().arrival_ms - reqs.front().arrival_ms);
    CHECK(std::abs(measured_rate - spec.mean_rate) / spec.mean_rate <= 0.02);
    for (std::size_t i = 1; i < reqs.size(); ++i)
        REQUIRE(reqs[i].arrival_ms >= reqs[i - 1].arrival_ms);
}

TEST_CASE("generate_arrivals: invalid specs") {
    ArrivalSpec spec;
    spec.mean_rate = 0.0;
    CHECK_THROWS_AS((void)generate_arrivals(spec), InvalidSpecError);
    spec.mean_rate = 10.0;
    spec.target_cv = -1.0;
    CHECK_THROWS_AS((void)generate_arrivals(spec), InvalidSpecError);
}

TEST_CASE("generate_arrivals: determinism, byte-for-byte") {
    ArrivalSpec spec;
    spec.mean_rate = 30.0;
    spec.target_cv = 3.0;
    spec.duration_s = 50.0;
    spec.seed = 42;
    const std::string a = to_trace_csv(generate_arrivals(spec));
    const std::string b = to_trace_csv(generate_arrivals(spec));
    CHECK(a == b);
    spec.seed = 43;
    CHECK(a != to_trace_csv(generate_arrivals(spec)));
}

TEST_CASE("estimate_cv: hand-computed oracle on gaps {1,1,4}") {
    // mean=2, Bessel std=sqrt(((1-2)^2+(1-2)^2+(4-2)^2)/2)=sqrt(3)
    const std::vector<double> arrivals{0.0, 1.0, 2.0, 6.0};
    auto est = estimate_cv(arrivals, 1.0);  // 1 s window covers everything here
    REQUIRE(est.has_value());
    CHECK(est->sample_count == 3);
    CHECK(est->nu == doctest::Approx(std::sqrt(3.0) / 2.0).epsilon(1e-12));
}

TEST_CASE("estimate_cv: periodic arrivals have zero cv") {
    std::vector<double> arrivals;
    for (int i = 0; i < 100; ++i) arrivals.push_back(10.0 * i);
    auto est = estimate_cv(arrivals, 10.0);
    REQUIRE(est.has_value());
    CHECK(est->nu == doctest::Approx(0.0));
}

TEST_CASE("estimate_cv: insufficient data") {
    CHECK_FALSE(estimate_cv(std::vector<double>{5.0}, 10.0).has_value());
    CHECK_FALSE(estimate_cv(std::vector<double>{5.0, 6.0}, 10.0).has_value());  // one gap
    CHECK_FALSE(estimate_cv(std::vector<double>{}, 10.0).has_value());
}

TEST_CASE("estimate_cv: window restricts samples and is translation invariant") {
    // Old erratic gaps followed by a perfectly periodic tail.
    std::vector<double> arrivals{0.0, 1.0, 50.0, 51.0, 300.0};
    for (int i = 1; i <= 50; ++i) arrivals.push_back(300.0 + 10.0 * i);
    auto est = estimate_cv(arrivals, 0.4);  // 400 ms window: periodic tail only
    REQUIRE(est.has_value());
    CHECK(est->nu == doctest::Approx(0.0));

    std::vector<double> shifted;
    for (double t : arrivals) shifted.push_back(t + 123456.0);
    auto est2 = estimate_cv(shifted, 0.4);
    REQUIRE(est2.has_value());
    CHECK(est2->nu == doctest::Approx(est->nu));
    CHECK(est2->sample_count == est->sample_count);
}

TEST_CASE("estimate_cv matches the generator target statistically") {
    ArrivalSpec spec;
    spec.mean_rate = 200.0;
    spec.target_cv = 2.0;
    spec.duration_s = 30.0;  // ~6000 samples
    spec.seed = 5;
    auto reqs = generate_arrivals(spec);
    std::vector<double> times;
    for (const auto& r : reqs) times.push_back(r.arrival_ms);
    auto est = estimate_cv(times, spec.duration_s + 1.0);
    REQUIRE(est.has_value());
    REQUIRE(est->sample_count >= 1000);
    CHECK(std::abs(est->nu - spec.target_cv) / spec.target_cv <= 0.15);
}

TEST_CASE("ingest_trace: well-formed file round trip") {
    const std::string path = write_temp("pipesim_trace_ok.csv",
                                        "arrival_ms,model_id,prompt_tokens,output_tokens,deadline_ms\n"
                                        "20.5,m0,128,8,1000\n"
                                        "10.int_replaced\n");
    // Overwrite with fully valid content (three rows, out of order).
    std::ofstream out(path);
    out << "arrival_ms,model_id,prompt_tokens,output_tokens,deadline_ms\n"
           "20.5,m0,128,8,1000\n"
           "10.0,m1,64,4,500\n"
           "15.25,m0,32,2,800\n";
    out.close();
    auto reqs = ingest_trace(path);
    REQUIRE(reqs.size() == 3);
    CHECK(reqs[0].arrival_ms == doctest::Approx(10.0));
    CHECK(reqs[0].model_id == "m1");
    CHECK(reqs[1].arrival_ms == doctest::Approx(15.25));
    CHECK(reqs[2].arrival_ms == doctest::Approx(20.5));
    CHECK(reqs[2].prompt_tokens == 128);
}

TEST_CASE("ingest_trace: malformed rows name the line") {
    const std::string path = write_temp("pipesim_trace_bad.csv",
                                        "arrival_ms,model_id,prompt_tokens,output_tokens,deadline_ms\n"
                                        "10.0,m0,128,8,1000\n"
                                        "11.0,m0,-5,8,1000\n");
    try {
        (void)ingest_trace(path);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
}

TEST_CASE("ingest_trace: empty file and missing file") {
    const std::string path = write_temp("pipesim_trace_empty.csv", "");
    CHECK(ingest_trace(path).empty());
    CHECK_THROWS_AS((void)ingest_trace("/nonexistent/trace.csv"), ParseError);
}
