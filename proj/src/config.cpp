// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#include "pipesim/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>

#include "pipesim/errors.hpp"
#include "pipesim/rng.hpp"

namespace pipesim {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& field, const std::string& what) {
    throw InvalidSpecError("config field '" + field + "': " + what);
}

double num(const json& j, const std::string& field, double fallback, bool required = false) {
    const auto pos = field.rfind('.');
    const std::string key = pos == std::string::npos ? field : field.substr(pos + 1);
    if (!j.contains(key)) {
        if (required) fail(field, "missing");
        return fallback;
    }
    if (!j.at(key).is_number()) fail(field, "expected a number");
    return j.at(key).get<double>();
}

std::string str(const json& j, const std::string& field, const std::string& fallback,
                bool required = false) {
    const auto pos = field.rfind('.');
    const std::string key = pos == std::string::npos ? field : field.substr(pos + 1);
    if (!j.contains(key)) {
        if (required) fail(field, "missing");
        return fallback;
    }
    if (!j.at(key).is_string()) fail(field, "expected a string");
    return j.at(key).get<std::string>();
}

bool flag(const json& j, const std::string& field, bool fallback) {
    const auto pos = field.rfind('.');
    const std::string key = pos == std::string::npos ? field : field.substr(pos + 1);
    if (!j.contains(key)) return fallback;
    if (!j.at(key).is_boolean()) fail(field, "expected a boolean");
    return j.at(key).get<bool>();
}

}  // namespace

PolicySpec parse_policy(const std::string& name) {
    PolicySpec p;
    p.name = name;
    if (name == "flexpipe") {
        p.adaptive = true;
        return p;
    }
    if (name.rfind("static-", 0) == 0) {
        const std::string suffix = name.substr(7);
        int k = 0;
        auto [ptr, ec] = std::from_chars(suffix.data(), suffix.data() + suffix.size(), k);
        if (ec == std::errc() && ptr == suffix.data() + suffix.size() && k >= 1) {
            p.adaptive = false;
            p.static_stages = k;
            return p;
        }
    }
    throw InvalidSpecError("config field 'policy.name': unknown policy '" + name +
                           "' (expected 'flexpipe' or 'static-<K>')");
}

ExperimentConfig parse_config(const nlohmann::json& j) {
    if (!j.is_object()) throw InvalidSpecError("config: top level must be an object");
    ExperimentConfig cfg;
    cfg.version = static_cast<int>(num(j, "version", 0, true));
    if (cfg.version != 1) fail("version", "unsupported version " + std::to_string(cfg.version));
    cfg.seed = static_cast<std::uint64_t>(num(j, "seed", 0));
    cfg.output_dir = str(j, "output_dir", "out");

    if (!j.contains("workload")) fail("workload", "missing");
    {
        const json& w = j.at("workload");
        const std::string kind = str(w, "workload.kind", "synthetic");
        if (kind == "synthetic") {
            cfg.workload.kind = WorkloadConfig::Kind::Synthetic;
            cfg.workload.spec.mean_rate = num(w, "workload.mean_rate", 0, true);
            cfg.workload.spec.target_cv = num(w, "workload.target_cv", 1.0);
            cfg.workload.spec.duration_s = num(w, "workload.duration_s", 0, true);
            cfg.workload.spec.prompt_tokens = static_cast<int>(num(w, "workload.prompt_tokens", 512));
            cfg.workload.spec.output_tokens = static_cast<int>(num(w, "workload.output_tokens", 8));
            cfg.workload.spec.model_id = str(w, "workload.model_id", "m0");
            if (cfg.workload.spec.mean_rate <= 0) fail("workload.mean_rate", "must be > 0");
            if (cfg.workload.spec.target_cv <= 0) fail("workload.target_cv", "must be > 0");
            if (cfg.workload.spec.duration_s <= 0) fail("workload.duration_s", "must be > 0");
            if (cfg.workload.spec.prompt_tokens < 1) fail("workload.prompt_tokens", "must be >= 1");
            if (cfg.workload.spec.output_tokens < 1) fail("workload.output_tokens", "must be >= 1");
            if (w.contains("path")) fail("workload.path", "not allowed with kind 'synthetic'");
        } else if (kind == "trace") {
            cfg.workload.kind = WorkloadConfig::Kind::Trace;
            cfg.workload.trace_path = str(w, "workload.path", "", true);
            if (w.contains("mean_rate")) fail("workload.mean_rate", "not allowed with kind 'trace'");
        } else {
            fail("workload.kind", "expected 'synthetic' or 'trace', got '" + kind + "'");
        }
        cfg.workload.slo_multiple = num(w, "workload.slo_multiple", 5.0);
        if (cfg.workload.slo_multiple <= 0) fail("workload.slo_multiple", "must be > 0");
    }

    if (j.contains("model")) {
        const json& m = j.at("model");
        cfg.model.preset = str(m, "model.preset", "");
        cfg.model.profile_path = str(m, "model.profile_path", "");
        if (cfg.model.preset.empty() && cfg.model.profile_path.empty())
            cfg.model.preset = "uniform-small";
        if (!cfg.model.preset.empty() && !cfg.model.profile_path.empty())
            fail("model.profile_path", "give either a preset or a profile_path, not both");
        if (m.contains("stage_counts")) {
            if (!m.at("stage_counts").is_array() || m.at("stage_counts").empty())
                fail("model.stage_counts", "expected a non-empty array");
            cfg.model.stage_counts.clear();
            for (const auto& v : m.at("stage_counts")) {
                if (!v.is_number_integer() || v.get<int>() < 1)
                    fail("model.stage_counts", "entries must be positive integers");
                cfg.model.stage_counts.push_back(v.get<int>());
            }
        }
        cfg.model.refactor_weight = num(m, "model.refactor_weight", -1.0);
    }

    if (j.contains("cluster")) {
        const json& c = j.at("cluster");
        cfg.cluster.topology_path = str(c, "cluster.topology_path", "");
        cfg.cluster.gen.racks = static_cast<int>(num(c, "cluster.racks", cfg.cluster.gen.racks));
        cfg.cluster.gen.servers_per_rack =
            static_cast<int>(num(c, "cluster.servers_per_rack", cfg.cluster.gen.servers_per_rack));
        cfg.cluster.gen.gpus_per_server =
            static_cast<int>(num(c, "cluster.gpus_per_server", cfg.cluster.gen.gpus_per_server));
        cfg.cluster.gen.gpu_memory_bytes =
            num(c, "cluster.gpu_memory_bytes", cfg.cluster.gen.gpu_memory_bytes);
        cfg.cluster.gen.fragmented_fraction =
            num(c, "cluster.fragmented_fraction", cfg.cluster.gen.fragmented_fraction);
        cfg.cluster.gen.fragment_occupancy =
            num(c, "cluster.fragment_occupancy", cfg.cluster.gen.fragment_occupancy);
        cfg.cluster.gen.seed = static_cast<std::uint64_t>(num(c, "cluster.seed", 0));
        if (cfg.cluster.gen.racks < 1) fail("cluster.racks", "must be >= 1");
        if (cfg.cluster.gen.servers_per_rack < 1) fail("cluster.servers_per_rack", "must be >= 1");
        if (cfg.cluster.gen.gpus_per_server < 1) fail("cluster.gpus_per_server", "must be >= 1");
        if (cfg.cluster.gen.fragmented_fraction < 0 || cfg.cluster.gen.fragmented_fraction > 1)
            fail("cluster.fragmented_fraction", "must be in [0, 1]");
    }

    if (!j.contains("policy")) fail("policy", "missing");
    {
        const json& p = j.at("policy");
        cfg.policy = parse_policy(str(p, "policy.name", "", true));
        cfg.policy.peak_factor = num(p, "policy.peak_factor", 2.5);
        cfg.policy.always_ready_fraction = num(p, "policy.always_ready_fraction", 0.3);
        if (cfg.policy.peak_factor < 1.0) fail("policy.peak_factor", "must be >= 1");
        if (cfg.policy.always_ready_fraction <= 0 || cfg.policy.always_ready_fraction > 1)
            fail("policy.always_ready_fraction", "must be in (0, 1]");
    }

    if (j.contains("controller")) {
        const json& c = j.at("controller");
        cfg.ctrl.tradeoff_alpha = num(c, "controller.tradeoff_alpha", cfg.ctrl.tradeoff_alpha);
        cfg.ctrl.sensitivity_sigma = num(c, "controller.sensitivity_sigma", cfg.ctrl.sensitivity_sigma);
        cfg.ctrl.coord_beta1 = num(c, "controller.coord_beta1", cfg.ctrl.coord_beta1);
        cfg.ctrl.coord_beta2 = num(c, "controller.coord_beta2", cfg.ctrl.coord_beta2);
        cfg.ctrl.total_capacity = num(c, "controller.total_capacity", cfg.ctrl.total_capacity);
        cfg.ctrl.scaling_beta = num(c, "controller.scaling_beta", cfg.ctrl.scaling_beta);
        cfg.ctrl.scaling_gamma = num(c, "controller.scaling_gamma", cfg.ctrl.scaling_gamma);
        cfg.ctrl.granularity_max =
            static_cast<int>(num(c, "controller.granularity_max", cfg.ctrl.granularity_max));
        cfg.ctrl.queue_max = num(c, "controller.queue_max", cfg.ctrl.queue_max);
        cfg.ctrl.control_interval_ms =
            num(c, "controller.control_interval_ms", cfg.ctrl.control_interval_ms);
        cfg.ctrl.hysteresis_margin = num(c, "controller.hysteresis_margin", cfg.ctrl.hysteresis_margin);
        cfg.ctrl.refactor_cooldown_ms =
            num(c, "controller.refactor_cooldown_ms", cfg.ctrl.refactor_cooldown_ms);
        cfg.ctrl.demand_headroom = num(c, "controller.demand_headroom", cfg.ctrl.demand_headroom);
        cfg.ctrl.multiplex_gamma0 = num(c, "controller.multiplex_gamma0", cfg.ctrl.multiplex_gamma0);
        cfg.ctrl.multiplex_alpha = num(c, "controller.multiplex_alpha", cfg.ctrl.multiplex_alpha);
        cfg.ctrl.scale_up_queue_threshold =
            num(c, "controller.scale_up_queue_threshold", cfg.ctrl.scale_up_queue_threshold);
        if (cfg.ctrl.tradeoff_alpha < 0 || cfg.ctrl.tradeoff_alpha > 1)
            fail("controller.tradeoff_alpha", "must be in [0, 1]");
        if (cfg.ctrl.sensitivity_sigma <= 0) fail("controller.sensitivity_sigma", "must be > 0");

        if (cfg.ctrl.queue_max <= 0) fail("controller.queue_max", "must be > 0");
        if (cfg.ctrl.control_interval_ms <= 0) fail("controller.control_interval_ms", "must be > 0");
    }

    if (j.contains("calibration")) {
        const json& c = j.at("calibration");
        cfg.calibration.duration_s = num(c, "calibration.duration_s", cfg.calibration.duration_s);
        cfg.calibration.load_fraction =
            num(c, "calibration.load_fraction", cfg.calibration.load_fraction);
        cfg.calibration.cache_path = str(c, "calibration.cache_path", "");
        cfg.calibration.sqrt_law_anchors =
            flag(c, "calibration.sqrt_law_anchors", cfg.calibration.sqrt_law_anchors);
        if (c.contains("cv_grid")) {
            if (!c.at("cv_grid").is_array() || c.at("cv_grid").empty())
                fail("calibration.cv_grid", "expected a non-empty array");
            cfg.calibration.cv_grid.clear();
            for (const auto& v : c.at("cv_grid")) cfg.calibration.cv_grid.push_back(v.get<double>());
        }
        if (cfg.calibration.duration_s <= 0) fail("calibration.duration_s", "must be > 0");
        if (cfg.calibration.load_fraction <= 0 || cfg.calibration.load_fraction >= 1)
            fail("calibration.load_fraction", "must be in (0, 1)");
    }

    if (j.contains("output")) {
        const json& o = j.at("output");
        cfg.output.per_request_log = flag(o, "output.per_request_log", false);
        cfg.output.event_trace = flag(o, "output.event_trace", false);
        cfg.output.decision_log = flag(o, "output.decision_log", true);
    }

    cfg.batch_max_wait_ms = num(j, "batch_max_wait_ms", -1.0);
    cfg.iteration_budget_ms = num(j, "iteration_budget_ms", -1.0);
    cfg.reclamation_window_ms = num(j, "reclamation_window_ms", cfg.reclamation_window_ms);
    cfg.cv_window_s = num(j, "cv_window_s", cfg.cv_window_s);
    if (cfg.reclamation_window_ms < 0) fail("reclamation_window_ms", "must be >= 0");
    if (cfg.cv_window_s <= 0) fail("cv_window_s", "must be > 0");
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("config file not found: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("config: " + std::string(e.what()));
    }
    ExperimentConfig cfg = parse_config(j);
    // Referenced paths must exist at validation time.
    if (cfg.workload.kind == WorkloadConfig::Kind::Trace) {
        std::ifstream t(cfg.workload.trace_path);
        if (!t) throw InvalidSpecError("config field 'workload.path': file not found: " +
                                       cfg.workload.trace_path);
    }
    if (!cfg.model.profile_path.empty()) {
        std::ifstream p(cfg.model.profile_path);
        if (!p) throw InvalidSpecError("config field 'model.profile_path': file not found: " +
                                       cfg.model.profile_path);
    }
    if (!cfg.cluster.topology_path.empty()) {
        std::ifstream c(cfg.cluster.topology_path);
        if (!c) throw InvalidSpecError("config field 'cluster.topology_path': file not found: " +
                                       cfg.cluster.topology_path);
    }
    return cfg;
}

nlohmann::json ExperimentConfig::to_json() const {
    nlohmann::json j;
    j["version"] = version;
    j["seed"] = seed;
    j["output_dir"] = output_dir;
    nlohmann::json w;
    w["kind"] = workload.kind == WorkloadConfig::Kind::Synthetic ? "synthetic" : "trace";
    if (workload.kind == WorkloadConfig::Kind::Synthetic) {
        w["mean_rate"] = workload.spec.mean_rate;
        w["target_cv"] = workload.spec.target_cv;
        w["duration_s"] = workload.spec.duration_s;
        w["prompt_tokens"] = workload.spec.prompt_tokens;
        w["output_tokens"] = workload.spec.output_tokens;
        w["model_id"] = workload.spec.model_id;
    } else {
        w["path"] = workload.trace_path;
    }
    w["slo_multiple"] = workload.slo_multiple;
    j["workload"] = w;
    nlohmann::json m;
    if (!model.preset.empty()) m["preset"] = model.preset;
    if (!model.profile_path.empty()) m["profile_path"] = model.profile_path;
    m["stage_counts"] = model.stage_counts;
    m["refactor_weight"] = model.refactor_weight;
    j["model"] = m;
    nlohmann::json c;
    if (!cluster.topology_path.empty()) {
        c["topology_path"] = cluster.topology_path;
    } else {
        c["racks"] = cluster.gen.racks;
        c["servers_per_rack"] = cluster.gen.servers_per_rack;
        c["gpus_per_server"] = cluster.gen.gpus_per_server;
        c["gpu_memory_bytes"] = cluster.gen.gpu_memory_bytes;
        c["fragmented_fraction"] = cluster.gen.fragmented_fraction;
        c["fragment_occupancy"] = cluster.gen.fragment_occupancy;
        c["seed"] = cluster.gen.seed;
    }
    j["cluster"] = c;
    nlohmann::json p;
    p["name"] = policy.name;
    p["peak_factor"] = policy.peak_factor;
    p["always_ready_fraction"] = policy.always_ready_fraction;
    j["policy"] = p;
    nlohmann::json ct;
    ct["tradeoff_alpha"] = ctrl.tradeoff_alpha;
    ct["sensitivity_sigma"] = ctrl.sensitivity_sigma;
    ct["coord_beta1"] = ctrl.coord_beta1;
    ct["coord_beta2"] = ctrl.coord_beta2;
    ct["total_capacity"] = ctrl.total_capacity;
    ct["scaling_beta"] = ctrl.scaling_beta;
    ct["scaling_gamma"] = ctrl.scaling_gamma;
    ct["granularity_max"] = ctrl.granularity_max;
    ct["queue_max"] = ctrl.queue_max;
    ct["control_interval_ms"] = ctrl.control_interval_ms;
    ct["hysteresis_margin"] = ctrl.hysteresis_margin;
    ct["refactor_cooldown_ms"] = ctrl.refactor_cooldown_ms;
    ct["demand_headroom"] = ctrl.demand_headroom;
    ct["multiplex_gamma0"] = ctrl.multiplex_gamma0;
    ct["multiplex_alpha"] = ctrl.multiplex_alpha;
    ct["scale_up_queue_threshold"] = ctrl.scale_up_queue_threshold;
    j["controller"] = ct;
    j["batch_max_wait_ms"] = batch_max_wait_ms;
    j["iteration_budget_ms"] = iteration_budget_ms;
    j["reclamation_window_ms"] = reclamation_window_ms;
    j["cv_window_s"] = cv_window_s;
    return j;
}

std::string config_hash(const ExperimentConfig& cfg) {
    const std::uint64_t h = fnv1a(cfg.to_json().dump());
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace pipesim
