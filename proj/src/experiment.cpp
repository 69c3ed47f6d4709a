// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#include "pipesim/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "pipesim/errors.hpp"
#include "pipesim/queue_model.hpp"
#include "pipesim/rng.hpp"

namespace pipesim {

namespace {

double effective_stage_ms(const GranularityPlan& gp, const ExecModelParams& exec, int stage) {
    const double base = gp.plan.stage_compute_ms[static_cast<std::size_t>(stage)];
    const double m = static_cast<double>(gp.plan.stage_op_count[static_cast<std::size_t>(stage)]);
    return base * std::pow(m, exec.stage_efficiency_exponent - 1.0);
}

}  // namespace

double instance_capacity_rps(const GranularityPlan& gp, const ExecModelParams& exec,
                             int passes_per_request) {
    double worst = 0.0;
    for (int k = 0; k < gp.plan.num_stages; ++k)
        worst = std::max(worst, effective_stage_ms(gp, exec, k));
    const double b = static_cast<double>(gp.config.max_batch);
    const double per_batch_ms = worst * std::pow(b, exec.batch_exponent);
    const double units_per_s = 1000.0 * b / per_batch_ms;
    return units_per_s / static_cast<double>(passes_per_request);
}

double no_load_request_latency_ms(const GranularityPlan& gp, const ExecModelParams& exec,
                                  double bandwidth_bytes_per_ms, int passes_per_request) {
    double pass_ms = 0.0;
    for (int k = 0; k < gp.plan.num_stages; ++k) {
        pass_ms += effective_stage_ms(gp, exec, k);
        if (k + 1 < gp.plan.num_stages)
            pass_ms += scale_activation(gp.plan, k, 1, exec.batch_scaling) / bandwidth_bytes_per_ms;
    }
    return pass_ms * static_cast<double>(passes_per_request);
}

ExperimentSetup build_setup(const ExperimentConfig& cfg) {
    ExperimentSetup s;
    if (!cfg.model.preset.empty()) {
        s.preset = make_preset(cfg.model.preset);
    } else {
        s.preset.name = cfg.model.profile_path;
        s.preset.graph = load_graph_csv(cfg.model.profile_path);
        s.preset.partition_defaults.bandwidth_bytes_per_ms = 10.0e6;
        s.preset.partition_defaults.gpu_memory_bytes = 40.0e9;
        s.preset.storage_bw_bytes_per_ms = 1.0e6;
        s.preset.host_bw_bytes_per_ms = 10.0e6;
    }
    if (cfg.batch_max_wait_ms >= 0.0) s.preset.exec.batch_max_wait_ms = cfg.batch_max_wait_ms;
    if (cfg.iteration_budget_ms >= 0.0) s.preset.exec.iteration_budget_ms = cfg.iteration_budget_ms;

    PartitionParams pp = s.preset.partition_defaults;
    if (cfg.model.refactor_weight >= 0.0) {
        pp.refactor_weight = cfg.model.refactor_weight;
    } else {
        // 0.1 x mean per-op contribution to the balance objective.
        const double n = static_cast<double>(s.preset.graph.ops.size());
        pp.refactor_weight = 0.1 * (s.preset.graph.total_compute_ms() +
                                    s.preset.graph.total_param_bytes() / pp.bandwidth_bytes_per_ms) /
                             n;
    }
    s.granularities =
        enumerate_granularities(s.preset.graph, cfg.model.stage_counts, pp,
                                static_cast<int>(s.preset.exec.max_batch_factor));
    apply_iteration_budget(s.granularities, s.preset.exec);
    if (s.granularities.plans.empty())
        throw InfeasibleError("experiment: no feasible granularity in stage_counts");

    // Cluster: explicit topology wins; otherwise generate with the model's tiers.
    if (!cfg.cluster.topology_path.empty()) {
        s.cluster = load_topology(cfg.cluster.topology_path);
    } else {
        SyntheticClusterSpec gen = cfg.cluster.gen;
        if (cfg.cluster.bw_from_model) {
            gen.storage_bw_bytes_per_ms = s.preset.storage_bw_bytes_per_ms;
            gen.host_bw_bytes_per_ms = s.preset.host_bw_bytes_per_ms;
            gen.rack_bw_bytes_per_ms = s.preset.partition_defaults.bandwidth_bytes_per_ms;
            gen.pcie_bw_bytes_per_ms = 1.6 * s.preset.partition_defaults.bandwidth_bytes_per_ms;
        }
        if (gen.gpu_memory_bytes <= 0.0)
            gen.gpu_memory_bytes = s.preset.partition_defaults.gpu_memory_bytes;
        // Host cache: twice the model's parameter bytes per server.
        gen.host_cache_budget_bytes = 2.0 * s.preset.graph.total_param_bytes();
        s.cluster = make_synthetic_cluster(gen);
    }

    // Coarsest configured plan anchors the deadline and the start granularity.
    s.coarsest_plan = 0;
    for (std::size_t i = 1; i < s.granularities.plans.size(); ++i)
        if (s.granularities.plans[i].config.stages <
            s.granularities.plans[static_cast<std::size_t>(s.coarsest_plan)].config.stages)
            s.coarsest_plan = static_cast<int>(i);

    // Workload, with deadlines resolved for synthetic streams.
    int passes = 1;
    if (cfg.workload.kind == WorkloadConfig::Kind::Synthetic) {
        passes = 1 + cfg.workload.spec.output_tokens;
        const auto& coarse = s.granularities.plans[static_cast<std::size_t>(s.coarsest_plan)];
        s.slo_ms = cfg.workload.slo_multiple *
                   no_load_request_latency_ms(coarse, s.preset.exec,
                                              s.preset.partition_defaults.bandwidth_bytes_per_ms,
                                              passes);
        ArrivalSpec spec = cfg.workload.spec;
        spec.seed = cfg.seed;
        spec.slo_deadline_ms = s.slo_ms;
        s.requests = generate_arrivals(spec);
    } else {
        s.requests = ingest_trace(cfg.workload.trace_path);
        double total_out = 0.0;
        for (const Request& r : s.requests) total_out += r.output_tokens;
        passes = s.requests.empty() ? 1
                                    : 1 + static_cast<int>(std::ceil(total_out /
                                                                     static_cast<double>(
                                                                         s.requests.size())));
        double sum_slo = 0.0;
        for (const Request& r : s.requests) sum_slo += r.slo_deadline_ms;
        s.slo_ms = s.requests.empty() ? 0.0 : sum_slo / static_cast<double>(s.requests.size());
    }

    // Peak-rate provisioning. Static policies pre-provision for the peak; the
    // adaptive policy keeps a fraction of that capacity always ready.
    double mean_rate = 0.0;
    if (cfg.workload.kind == WorkloadConfig::Kind::Synthetic) {
        mean_rate = cfg.workload.spec.mean_rate;
    } else if (s.requests.size() >= 2) {
        mean_rate = 1000.0 * static_cast<double>(s.requests.size() - 1) /
                    (s.requests.back().arrival_ms - s.requests.front().arrival_ms);
    }
    s.peak_rps = mean_rate * cfg.policy.peak_factor;

    EngineConfig ec;
    ec.graph = s.preset.graph;
    ec.granularities = s.granularities;
    ec.exec = s.preset.exec;
    ec.inter_stage_bw_bytes_per_ms = s.preset.partition_defaults.bandwidth_bytes_per_ms;
    ec.storage_bw_bytes_per_ms = s.cluster.storage_bw_bytes_per_ms;
    ec.ctrl = cfg.ctrl;
    ec.reclamation_window_ms = cfg.reclamation_window_ms;
    ec.cv_window_s = cfg.cv_window_s;
    ec.default_slo_ms = s.slo_ms;
    ec.seed = cfg.seed;
    ec.collect_decision_log = cfg.output.decision_log;

    if (cfg.policy.adaptive) {
        const auto& start = s.granularities.plans[static_cast<std::size_t>(s.coarsest_plan)];
        const double cap = instance_capacity_rps(start, s.preset.exec, passes);
        ec.policy.adaptive = true;
        ec.policy.start_stages = start.config.stages;
        ec.policy.initial_instances = std::max(
            1, static_cast<int>(std::ceil(cfg.policy.always_ready_fraction * s.peak_rps / cap)));
        if (ec.ctrl.granularity_max <= 0) {
            int finest = 1;
            for (const auto& gp : s.granularities.plans) finest = std::max(finest, gp.config.stages);
            ec.ctrl.granularity_max = finest;
        }
        s.static_instances = ec.policy.initial_instances;
    } else {
        const int plan = [&] {
            for (std::size_t i = 0; i < s.granularities.plans.size(); ++i)
                if (s.granularities.plans[i].config.stages == cfg.policy.static_stages)
                    return static_cast<int>(i);
            throw InvalidSpecError("config field 'policy.name': static stage count " +
                                   std::to_string(cfg.policy.static_stages) +
                                   " is not in model.stage_counts");
        }();
        const double cap =
            instance_capacity_rps(s.granularities.plans[static_cast<std::size_t>(plan)],
                                  s.preset.exec, passes);
        ec.policy.adaptive = false;
        ec.policy.static_stages = cfg.policy.static_stages;
        ec.policy.initial_instances =
            std::max(1, static_cast<int>(std::ceil(s.peak_rps / cap)));
        s.static_instances = ec.policy.initial_instances;
    }
    s.engine = std::move(ec);
    return s;
}

std::string setup_fingerprint(const ExperimentConfig& cfg) {
    // Profiles are an offline asset: the fingerprint deliberately excludes the
    // run seed so sweep cells share one calibration.
    nlohmann::json j;
    j["model"] = cfg.model.preset.empty() ? cfg.model.profile_path : cfg.model.preset;
    j["stage_counts"] = cfg.model.stage_counts;
    j["load_fraction"] = cfg.calibration.load_fraction;
    j["duration_s"] = cfg.calibration.duration_s;
    j["cv_grid"] = cfg.calibration.cv_grid;
    j["sqrt_law"] = cfg.calibration.sqrt_law_anchors;
    j["output_tokens"] =
        cfg.workload.kind == WorkloadConfig::Kind::Synthetic ? cfg.workload.spec.output_tokens : -1;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a(j.dump())));
    return buf;
}

namespace {

/// One short calibration run of a fixed-K deployment; returns (T, L).
std::pair<double, double> calibration_run(const ExperimentConfig& base, int stages, double cv,
                                          double rate, double duration_s) {
    ExperimentConfig cfg = base;
    cfg.policy = parse_policy("static-" + std::to_string(stages));
    cfg.workload.kind = WorkloadConfig::Kind::Synthetic;
    cfg.workload.spec.mean_rate = rate;
    cfg.workload.spec.target_cv = cv;
    cfg.workload.spec.duration_s = duration_s;
    cfg.output.decision_log = false;
    cfg.output.event_trace = false;
    cfg.seed = fnv1a("calib|" + std::to_string(stages) + "|" + std::to_string(cv));

    ExperimentSetup setup = build_setup(cfg);
    // Calibration measures one replica.
    setup.engine.policy.initial_instances = 1;
    Engine engine(setup.engine, setup.cluster, setup.requests);
    EngineResult res = engine.run();
    const RunSummary sum = summarize(res.records, res.duration_ms);
    return {sum.throughput_rps, sum.mean_latency_ms};
}

}  // namespace

std::vector<GranularityProfile> calibrate_profiles(const ExperimentConfig& cfg) {
    ExperimentSetup setup = build_setup(cfg);
    const int passes = cfg.workload.kind == WorkloadConfig::Kind::Synthetic
                           ? 1 + cfg.workload.spec.output_tokens
                           : 9;
    std::vector<GranularityProfile> profiles;
    int coarsest = std::numeric_limits<int>::max();
    for (const auto& gp : setup.granularities.plans)
        coarsest = std::min(coarsest, gp.config.stages);

    // T_k / L_k at moderate load per granularity.
    std::vector<std::vector<double>> grid_latency(setup.granularities.plans.size());
    for (std::size_t i = 0; i < setup.granularities.plans.size(); ++i) {
        const auto& gp = setup.granularities.plans[i];
        GranularityProfile p;
        p.stages = gp.config.stages;
        p.batch = gp.config.max_batch;
        const double cap = instance_capacity_rps(gp, setup.preset.exec, passes);
        const double rate = cfg.calibration.load_fraction * cap;
        auto [t, l] = calibration_run(cfg, p.stages, 1.0, rate, cfg.calibration.duration_s);
        p.throughput = t;
        p.latency_ms = l;
        profiles.push_back(p);

        if (!cfg.calibration.sqrt_law_anchors) {
            for (double cv : cfg.calibration.cv_grid) {
                auto [t2, l2] = calibration_run(cfg, p.stages, cv, rate, cfg.calibration.duration_s);
                (void)t2;
                grid_latency[i].push_back(l2);
            }
        }
    }

    // nu anchors. Latency is monotone in CV for every grain, so the anchor is
    // the CV where the grain is best *relative to the others* (the argmin of
    // its latency normalized by the per-CV minimum), not its own argmin.
    for (std::size_t i = 0; i < profiles.size(); ++i) {
        if (cfg.calibration.sqrt_law_anchors) {
            const double ratio =
                static_cast<double>(profiles[i].stages) / static_cast<double>(coarsest);
            profiles[i].nu_anchor = 0.5 * ratio * ratio;
            continue;
        }
        double best_cv = cfg.calibration.cv_grid.front();
        double best_rel = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cfg.calibration.cv_grid.size(); ++c) {
            double floor = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < profiles.size(); ++k)
                floor = std::min(floor, grid_latency[k][c]);
            const double rel = grid_latency[i][c] / floor;
            if (rel < best_rel) {
                best_rel = rel;
                best_cv = cfg.calibration.cv_grid[c];
            }
        }
        profiles[i].nu_anchor = best_cv;
    }
    return profiles;
}

std::string profiles_to_json(const std::vector<GranularityProfile>& profiles,
                             const std::string& fingerprint) {
    nlohmann::json j;
    j["fingerprint"] = fingerprint;
    j["profiles"] = nlohmann::json::array();
    for (const auto& p : profiles) {
        nlohmann::json e;
        e["stages"] = p.stages;
        e["batch"] = p.batch;
        e["throughput"] = p.throughput;
        e["latency_ms"] = p.latency_ms;
        e["nu_anchor"] = p.nu_anchor;
        j["profiles"].push_back(e);
    }
    return j.dump(2);
}

std::optional<std::vector<GranularityProfile>> profiles_from_json(const std::string& text,
                                                                  const std::string& fingerprint) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
        return std::nullopt;
    }
    if (!j.contains("fingerprint") || j["fingerprint"].get<std::string>() != fingerprint)
        return std::nullopt;
    std::vector<GranularityProfile> out;
    for (const auto& e : j["profiles"]) {
        GranularityProfile p;
        p.stages = e.at("stages").get<int>();
        p.batch = e.at("batch").get<int>();
        p.throughput = e.at("throughput").get<double>();
        p.latency_ms = e.at("latency_ms").get<double>();
        p.nu_anchor = e.at("nu_anchor").get<double>();
        out.push_back(p);
    }
    return out;
}

namespace {

/// Process-wide profile cache: sweep cells share calibrations, and a file
/// cache under output_dir survives across invocations.
std::vector<GranularityProfile> cached_profiles(const ExperimentConfig& cfg) {
    static std::mutex mu;
    static std::map<std::string, std::vector<GranularityProfile>> memory;
    const std::string fp = setup_fingerprint(cfg);
    {
        std::lock_guard<std::mutex> lock(mu);
        auto it = memory.find(fp);
        if (it != memory.end()) return it->second;
    }
    const std::string cache_path = cfg.calibration.cache_path.empty()
                                       ? cfg.output_dir + "/profiles.json"
                                       : cfg.calibration.cache_path;
    {
        std::ifstream in(cache_path);
        if (in) {
            std::stringstream ss;
            ss << in.rdbuf();
            if (auto cached = profiles_from_json(ss.str(), fp)) {
                std::lock_guard<std::mutex> lock(mu);
                memory[fp] = *cached;
                return *cached;
            }
        }
    }
    auto profiles = calibrate_profiles(cfg);
    std::lock_guard<std::mutex> lock(mu);
    auto [it, inserted] = memory.try_emplace(fp, std::move(profiles));
    return it->second;
}

}  // namespace

RunArtifacts run_experiment(const ExperimentConfig& cfg) {
    const auto wall0 = std::chrono::steady_clock::now();
    ExperimentSetup setup = build_setup(cfg);

    RunArtifacts art;
    art.hash = config_hash(cfg);
    art.policy_label = cfg.policy.name;
    if (cfg.workload.kind == WorkloadConfig::Kind::Synthetic) {
        art.cv_label = cfg.workload.spec.target_cv;
    } else if (setup.requests.size() >= 3) {
        std::vector<double> times;
        times.reserve(setup.requests.size());
        for (const Request& r : setup.requests) times.push_back(r.arrival_ms);
        const double span_s = (times.back() - times.front()) / 1000.0 + 1.0;
        if (auto est = estimate_cv(times, span_s)) art.cv_label = est->nu;
    }

    Engine engine(setup.engine, setup.cluster, setup.requests);
    if (cfg.policy.adaptive) {
        art.profiles = cached_profiles(cfg);
        engine.set_profiles(art.profiles);
    }
    art.engine = engine.run();
    art.summary = summarize(art.engine.records, art.engine.duration_ms);
    const auto wall1 = std::chrono::steady_clock::now();
    art.wall_ms = std::chrono::duration<double, std::milli>(wall1 - wall0).count();
    return art;
}

std::string summary_csv_header() {
    return "config_hash,cv,policy,goodput_rps,throughput_rps,offered_rps,mean_latency_ms,p50_ms,"
           "p90_ms,p99_ms,mean_queue_ms,mean_compute_ms,mean_comm_ms,queue_share,compute_share,"
           "comm_share,stall_cycle_ratio,median_recovery_ms,gpu_utilization,mean_allocated_gpus,"
           "mean_queue_len,completed,expired,rejected,refactor_commits,scale_ups,scale_downs,"
           "duration_ms,error,wall_ms";
}

std::string summary_csv_row(const RunArtifacts& a) {
    char buf[1024];
    std::snprintf(
        buf, sizeof(buf),
        "%s,%.9g,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,"
        "%.9g,%.9g,%.9g,%zu,%zu,%zu,%lld,%lld,%lld,%.9g,,%.3f",
        a.hash.c_str(), a.cv_label, a.policy_label.c_str(), a.summary.goodput_rps,
        a.summary.throughput_rps, a.summary.offered_rps, a.summary.mean_latency_ms, a.summary.p50_ms,
        a.summary.p90_ms, a.summary.p99_ms, a.summary.mean_queue_ms, a.summary.mean_compute_ms,
        a.summary.mean_comm_ms, a.summary.queue_share, a.summary.compute_share, a.summary.comm_share,
        a.engine.stall_ratio, a.summary.median_recovery_ms, a.engine.gpu_utilization,
        a.engine.mean_allocated_gpus, a.engine.mean_queue_len, a.summary.completed, a.summary.expired,
        a.summary.rejected, static_cast<long long>(a.engine.refactor_commits),
        static_cast<long long>(a.engine.scale_up_count),
        static_cast<long long>(a.engine.scale_down_count), a.engine.duration_ms, a.wall_ms);
    return buf;
}

RunArtifacts run_experiment_files(const ExperimentConfig& cfg) {
    std::filesystem::create_directories(cfg.output_dir);
    RunArtifacts art = run_experiment(cfg);

    {
        std::ofstream out(cfg.output_dir + "/summary.csv");
        out << summary_csv_header() << "\n" << summary_csv_row(art) << "\n";
    }
    if (cfg.policy.adaptive) {
        std::ofstream cache(cfg.output_dir + "/profiles.json");
        cache << profiles_to_json(art.profiles, setup_fingerprint(cfg));
        if (cfg.output.decision_log) {
            std::ofstream out(cfg.output_dir + "/decisions.jsonl");
            for (const auto& entry : art.engine.decision_log) out << entry.dump() << "\n";
        }
    }
    if (cfg.output.per_request_log) {
        std::ofstream out(cfg.output_dir + "/requests.jsonl");
        for (const RequestRecord& r : art.engine.records) {
            nlohmann::json j;
            j["id"] = r.request_id;
            j["model"] = r.model_id;
            j["arrival_ms"] = r.arrival_ms;
            j["start_ms"] = r.start_ms;
            j["finish_ms"] = r.finish_ms;
            j["queue_ms"] = r.queue_ms;
            j["compute_ms"] = r.compute_ms;
            j["comm_ms"] = r.comm_ms;
            j["met_slo"] = r.met_slo;
            j["stages"] = r.stages_at_service;
            j["tokens"] = r.tokens_generated;
            j["outcome"] = r.outcome == RequestOutcome::Completed
                               ? "completed"
                               : (r.outcome == RequestOutcome::Expired ? "expired" : "rejected");
            out << j.dump() << "\n";
        }
    }
    return art;
}

std::vector<SweepCell> run_sweep(const ExperimentConfig& base, const std::vector<double>& cvs,
                                 const std::vector<std::string>& policies, int workers) {
    if (cvs.empty()) throw InvalidSpecError("sweep: cv list is empty");
    if (policies.empty()) throw InvalidSpecError("sweep: policy list is empty");
    if (base.workload.kind != WorkloadConfig::Kind::Synthetic)
        throw InvalidSpecError("sweep: requires a synthetic workload (cv is swept)");

    struct Cell {
        double cv;
        std::string policy;
    };
    std::vector<Cell> cells;
    std::vector<std::string> sorted_policies = policies;
    std::sort(sorted_policies.begin(), sorted_policies.end());
    std::vector<double> sorted_cvs = cvs;
    std::sort(sorted_cvs.begin(), sorted_cvs.end());
    for (const std::string& p : sorted_policies)
        for (double cv : sorted_cvs) cells.push_back({cv, p});

    if (workers <= 0) {
        if (const char* env = std::getenv("PIPESIM_WORKERS")) workers = std::atoi(env);
        if (workers <= 0) workers = 1;
    }

    std::vector<SweepCell> results(cells.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            SweepCell out;
            out.cv = cells[i].cv;
            out.policy = cells[i].policy;
            try {
                ExperimentConfig cfg = base;
                cfg.policy = parse_policy(cells[i].policy);
                cfg.workload.spec.target_cv = cells[i].cv;
                cfg.seed = derive_seed(base.seed, cells[i].cv, cells[i].policy);
                cfg.output.decision_log = cfg.policy.adaptive;
                RunArtifacts art = run_experiment(cfg);
                out.ok = true;
                out.row = summary_csv_row(art);
            } catch (const std::exception& e) {
                out.ok = false;
                out.error = e.what();
            }
            results[i] = std::move(out);
        }
    };
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    return results;
}

std::string sweep_csv(const std::vector<SweepCell>& cells) {
    std::string out = summary_csv_header();
    out += "\n";
    for (const SweepCell& c : cells) {
        if (c.ok) {
            out += c.row;
        } else {
            std::string msg = c.error;
            for (char& ch : msg)
                if (ch == ',' || ch == '\n') ch = ';';
            char head[64];
            std::snprintf(head, sizeof(head), ",%.9g,", c.cv);
            out += head;
            out += c.policy;
            out += std::string(25, ',');  // the numeric columns, empty
            out += ',' + msg + ',';       // error column, empty wall_ms
        }
        out += "\n";
    }
    return out;
}

}  // namespace pipesim
