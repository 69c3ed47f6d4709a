// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#include "pipesim/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include <json.hpp>

#include "pipesim/errors.hpp"
#include "pipesim/rng.hpp"

namespace pipesim {

void Hrg::validate() const {
    for (std::size_t i = 0; i < servers.size(); ++i) {
        const auto& s = servers[i];
        if (s.server_id != static_cast<int>(i))
            throw InvalidSpecError("hrg: server ids must be dense, got " + std::to_string(s.server_id));
        if (s.rack_id < 0 || s.rack_id >= static_cast<int>(racks.size()))
            throw InvalidSpecError("hrg: server " + std::to_string(s.server_id) + " has unknown rack");
    }
    for (std::size_t i = 0; i < gpus.size(); ++i) {
        const auto& g = gpus[i];
        if (g.gpu_id != static_cast<int>(i))
            throw InvalidSpecError("hrg: gpu ids must be dense, got " + std::to_string(g.gpu_id));
        if (g.server_id < 0 || g.server_id >= static_cast<int>(servers.size()))
            throw InvalidSpecError("hrg: gpu " + std::to_string(g.gpu_id) + " has unknown server");
        if (g.free_memory_bytes > g.memory_capacity_bytes)
            throw InvalidSpecError("hrg: gpu " + std::to_string(g.gpu_id) + " free > capacity");
    }
}

void Hrg::record_scaling_event(const ResourcePath& path, double now_ms, double prune_horizon_ms) {
    if (path.rack_id < 0 || path.rack_id >= static_cast<int>(racks.size()))
        throw InvalidSpecError("record_scaling_event: unknown rack " + std::to_string(path.rack_id));
    if (path.server_id >= 0) {
        if (path.server_id >= static_cast<int>(servers.size()))
            throw InvalidSpecError("record_scaling_event: unknown server " +
                                   std::to_string(path.server_id));
        if (servers[static_cast<std::size_t>(path.server_id)].rack_id != path.rack_id)
            throw InvalidSpecError("record_scaling_event: server " + std::to_string(path.server_id) +
                                   " is not in rack " + std::to_string(path.rack_id));
    }
    markers_.push_back({path, now_ms});
    std::erase_if(markers_, [&](const ScalingMarker& m) {
        return now_ms - m.time_ms > prune_horizon_ms;
    });
}

std::vector<ResourcePath> Hrg::penalized_paths(double now_ms, double horizon_ms) const {
    std::vector<ResourcePath> out;
    for (const auto& m : markers_) {
        if (now_ms - m.time_ms > horizon_ms) continue;
        if (std::find(out.begin(), out.end(), m.path) == out.end()) out.push_back(m.path);
    }
    return out;
}

bool Hrg::path_penalized(int server_id, double now_ms, double horizon_ms) const {
    const int rack_id = server(server_id).rack_id;
    for (const auto& m : markers_) {
        if (now_ms - m.time_ms > horizon_ms) continue;
        if (m.path.server_id == server_id) return true;
        if (m.path.server_id < 0 && m.path.rack_id == rack_id) return true;
        if (m.path.rack_id == rack_id) return true;  // server marker penalizes its rack too
    }
    return false;
}

void Hrg::bind_stage(int gpu_id, const StageBinding& binding) {
    GpuDevice& g = gpu(gpu_id);
    if (binding.mem_bytes > g.free_memory_bytes + 0.5)
        throw InfeasibleError("bind_stage: gpu " + std::to_string(gpu_id) + " lacks " +
                              std::to_string(binding.mem_bytes) + " free bytes");
    g.free_memory_bytes -= binding.mem_bytes;
    g.assigned.push_back(binding);
}

void Hrg::release_stage(int gpu_id, const std::string& model_id, std::int64_t instance_id,
                        int stage_index) {
    GpuDevice& g = gpu(gpu_id);
    for (auto it = g.assigned.begin(); it != g.assigned.end(); ++it) {
        if (it->model_id == model_id && it->instance_id == instance_id &&
            it->stage_index == stage_index) {
            g.free_memory_bytes += it->mem_bytes;
            g.assigned.erase(it);
            return;
        }
    }
    throw InvalidSpecError("release_stage: binding not found on gpu " + std::to_string(gpu_id));
}

void Hrg::release_instance(const std::string& model_id, std::int64_t instance_id) {
    for (GpuDevice& g : gpus) {
        for (auto it = g.assigned.begin(); it != g.assigned.end();) {
            if (it->model_id == model_id && it->instance_id == instance_id) {
                g.free_memory_bytes += it->mem_bytes;
                it = g.assigned.erase(it);
            } else {
                ++it;
            }
        }
    }
}

bool Hrg::memory_conserved() const {
    for (const GpuDevice& g : gpus) {
        double assigned = 0.0;
        for (const auto& b : g.assigned) assigned += b.mem_bytes;
        if (std::abs(g.free_memory_bytes + assigned - g.memory_capacity_bytes) > 1.0) return false;
    }
    return true;
}

bool Hrg::anti_colocation_violated() const {
    for (const GpuDevice& g : gpus) {
        for (std::size_t a = 0; a < g.assigned.size(); ++a)
            for (std::size_t b = a + 1; b < g.assigned.size(); ++b)
                if (g.assigned[a].model_id == g.assigned[b].model_id) return true;
    }
    return false;
}

void AffinityHistory::init(const Hrg& hrg) {
    last_hosted_.clear();
    caches_.assign(hrg.servers.size(), {});
    for (std::size_t i = 0; i < hrg.servers.size(); ++i)
        caches_[i].budget = hrg.servers[i].host_cache_budget_bytes;
    stamp_ = 0;
}

void AffinityHistory::record_hosting(const std::string& model_id, int server_id, double now_ms) {
    last_hosted_[model_id][server_id] = now_ms;
}

std::optional<double> AffinityHistory::last_hosted_ms(const std::string& model_id,
                                                      int server_id) const {
    auto mit = last_hosted_.find(model_id);
    if (mit == last_hosted_.end()) return std::nullopt;
    auto sit = mit->second.find(server_id);
    if (sit == mit->second.end()) return std::nullopt;
    return sit->second;
}

std::vector<int> AffinityHistory::known_servers(const std::string& model_id) const {
    std::vector<int> out;
    auto mit = last_hosted_.find(model_id);
    if (mit == last_hosted_.end()) return out;
    for (const auto& [sid, _] : mit->second) out.push_back(sid);
    return out;
}

void AffinityHistory::cache_insert(int server_id, const std::string& model_id, int begin_op,
                                   int end_op, double bytes) {
    ServerCache& c = caches_.at(static_cast<std::size_t>(server_id));
    if (bytes > c.budget) return;
    // Refresh an identical range instead of duplicating it.
    for (auto& e : c.entries) {
        if (e.model_id == model_id && e.begin_op == begin_op && e.end_op == end_op) {
            e.lru_stamp = ++stamp_;
            return;
        }
    }
    while (c.used + bytes > c.budget && !c.entries.empty()) {
        auto victim = std::min_element(c.entries.begin(), c.entries.end(),
                                       [](const HostCacheEntry& a, const HostCacheEntry& b) {
                                           return a.lru_stamp < b.lru_stamp;
                                       });
        c.used -= victim->bytes;
        c.entries.erase(victim);
    }
    c.entries.push_back({model_id, begin_op, end_op, bytes, ++stamp_});
    c.used += bytes;
}

bool AffinityHistory::cache_covers(int server_id, const std::string& model_id, int begin_op,
                                   int end_op) const {
    if (server_id < 0 || server_id >= static_cast<int>(caches_.size())) return false;
    const ServerCache& c = caches_[static_cast<std::size_t>(server_id)];
    // Sweep [begin_op, end_op) through cached ranges of this model.
    int covered_to = begin_op;
    bool advanced = true;
    while (covered_to < end_op && advanced) {
        advanced = false;
        for (const auto& e : c.entries) {
            if (e.model_id != model_id) continue;
            if (e.begin_op <= covered_to && e.end_op > covered_to) {
                covered_to = e.end_op;
                advanced = true;
            }
        }
    }
    return covered_to >= end_op;
}

double AffinityHistory::cache_used_bytes(int server_id) const {
    return caches_.at(static_cast<std::size_t>(server_id)).used;
}

std::optional<int> select_server(const std::string& model_id, double now_ms,
                                 const SelectServerParams& params, const Hrg& hrg,
                                 const AffinityHistory& affinity) {
    int best_server = -1;
    double best_score = -std::numeric_limits<double>::infinity();
    for (const ServerNode& s : hrg.servers) {
        int avail = 0;
        for (int gid : s.gpu_ids) {
            const GpuDevice& g = hrg.gpu(gid);
            if (g.free_memory_bytes > params.required_free_bytes ||
                (params.required_free_bytes == 0.0 && g.free_memory_bytes > 0.0))
                ++avail;
        }
        if (avail == 0) continue;
        double temporal = 0.0;
        if (auto ts = affinity.last_hosted_ms(model_id, s.server_id))
            temporal = std::exp(-params.decay_per_ms * (now_ms - *ts));
        double score = params.weight_temporal * temporal +
                       params.weight_gpu * static_cast<double>(avail);
        if (hrg.path_penalized(s.server_id, now_ms, params.marker_horizon_ms))
            score *= params.marker_penalty;
        if (score > best_score) {
            best_score = score;
            best_server = s.server_id;
        }
    }
    if (best_server < 0) return std::nullopt;
    return best_server;
}

double multiplexing_penalty(double gamma0, double alpha, double cv) {
    return gamma0 * (1.0 + alpha * cv * cv);
}

namespace {

// Distinct models on a GPU after the (partial) assignment, counting residents.
bool gpu_shared(const AllocationProblem& problem, const Hrg& hrg, int gpu_id,
                const std::vector<int>& gpu_for_stage) {
    std::set<std::string> models;
    for (const auto& b : hrg.gpu(gpu_id).assigned) models.insert(b.model_id);
    for (std::size_t i = 0; i < gpu_for_stage.size(); ++i)
        if (gpu_for_stage[i] == gpu_id) models.insert(problem.stages[i].model_id);
    return models.size() > 1;
}

double score_factor(const AllocationProblem& problem, std::size_t candidate_index) {
    if (candidate_index < problem.gpu_score_factor.size())
        return problem.gpu_score_factor[candidate_index];
    return 1.0;
}

std::size_t candidate_index_of(const AllocationProblem& problem, int gpu_id) {
    for (std::size_t c = 0; c < problem.candidate_gpus.size(); ++c)
        if (problem.candidate_gpus[c] == gpu_id) return c;
    return problem.candidate_gpus.size();
}

}  // namespace

double allocation_objective(const AllocationProblem& problem, const Hrg& hrg,
                            const std::vector<int>& gpu_for_stage) {
    double obj = 0.0;
    for (std::size_t i = 0; i < problem.stages.size(); ++i) {
        const StageRequest& st = problem.stages[i];
        const int gid = gpu_for_stage[i];
        const double t_ij = st.base_throughput * hrg.gpu(gid).throughput_multiplier;
        const double mem_gb = std::max(st.mem_bytes / 1.0e9, 1.0e-9);
        const double factor = score_factor(problem, candidate_index_of(problem, gid));
        double term = factor * t_ij / mem_gb;
        if (gpu_shared(problem, hrg, gid, gpu_for_stage))
            term -= multiplexing_penalty(problem.gamma0, problem.penalty_alpha, st.workload_cv);
        obj += term;
    }
    return obj;
}

bool allocation_feasible(const AllocationProblem& problem, const Hrg& hrg,
                         const std::vector<int>& gpu_for_stage, std::string* why) {
    // Memory: residents plus every new stage on the GPU must fit.
    std::map<int, double> extra;
    for (std::size_t i = 0; i < gpu_for_stage.size(); ++i)
        extra[gpu_for_stage[i]] += problem.stages[i].mem_bytes;
    for (const auto& [gid, bytes] : extra) {
        if (bytes > hrg.gpu(gid).free_memory_bytes + 0.5) {
            if (why) *why = "memory constraint on gpu " + std::to_string(gid);
            return false;
        }
    }
    // Anti-colocation: same model never twice on one GPU (residents included).
    for (std::size_t i = 0; i < gpu_for_stage.size(); ++i) {
        const int gid = gpu_for_stage[i];
        for (std::size_t j = i + 1; j < gpu_for_stage.size(); ++j) {
            if (gpu_for_stage[j] == gid &&
                problem.stages[j].model_id == problem.stages[i].model_id) {
                if (why) *why = "anti-colocation of model " + problem.stages[i].model_id;
                return false;
            }
        }
        for (const auto& b : hrg.gpu(gid).assigned) {
            if (b.model_id == problem.stages[i].model_id) {
                if (why)
                    *why = "anti-colocation of model " + problem.stages[i].model_id +
                           " with resident stage on gpu " + std::to_string(gid);
                return false;
            }
        }
    }
    // Intra-group throughput balance.
    for (std::size_t i = 0; i < gpu_for_stage.size(); ++i) {
        if (problem.stages[i].balance_group < 0) continue;
        const double ti = problem.stages[i].base_throughput *
                          hrg.gpu(gpu_for_stage[i]).throughput_multiplier;
        for (std::size_t j = i + 1; j < gpu_for_stage.size(); ++j) {
            if (problem.stages[j].balance_group != problem.stages[i].balance_group) continue;
            const double tj = problem.stages[j].base_throughput *
                              hrg.gpu(gpu_for_stage[j]).throughput_multiplier;
            if (tj <= 0.0 || std::abs(ti / tj - 1.0) > problem.balance_epsilon) {
                if (why)
                    *why = "balance constraint in group " +
                           std::to_string(problem.stages[i].balance_group);
                return false;
            }
        }
    }
    if (why) why->clear();
    return true;
}

namespace {

// Incremental feasibility of placing stage i on gpu gid given stages [0, i).
bool placement_ok(const AllocationProblem& problem, const Hrg& hrg,
                  const std::vector<int>& partial, std::size_t i, int gid) {
    const StageRequest& st = problem.stages[i];
    double used = st.mem_bytes;
    for (std::size_t k = 0; k < i; ++k)
        if (partial[k] == gid) used += problem.stages[k].mem_bytes;
    if (used > hrg.gpu(gid).free_memory_bytes + 0.5) return false;
    for (const auto& b : hrg.gpu(gid).assigned)
        if (b.model_id == st.model_id) return false;
    for (std::size_t k = 0; k < i; ++k)
        if (partial[k] == gid && problem.stages[k].model_id == st.model_id) return false;
    if (st.balance_group >= 0) {
        const double ti = st.base_throughput * hrg.gpu(gid).throughput_multiplier;
        for (std::size_t k = 0; k < i; ++k) {
            if (problem.stages[k].balance_group != st.balance_group) continue;
            const double tk = problem.stages[k].base_throughput *
                              hrg.gpu(partial[k]).throughput_multiplier;
            if (tk <= 0.0 || std::abs(ti / tk - 1.0) > problem.balance_epsilon) return false;
        }
    }
    return true;
}

void exact_search(const AllocationProblem& problem, const Hrg& hrg, std::vector<int>& partial,
                  std::size_t i, std::vector<int>& best, double& best_obj) {
    if (i == problem.stages.size()) {
        const double obj = allocation_objective(problem, hrg, partial);
        if (obj > best_obj) {  // first-found wins ties → lexicographically smallest
            best_obj = obj;
            best = partial;
        }
        return;
    }
    for (int gid : problem.candidate_gpus) {
        if (!placement_ok(problem, hrg, partial, i, gid)) continue;
        partial[i] = gid;
        exact_search(problem, hrg, partial, i + 1, best, best_obj);
    }
    partial[i] = -1;
}

Allocation greedy_allocate(const AllocationProblem& problem, const Hrg& hrg) {
    const std::size_t n = problem.stages.size();
    std::vector<int> assign(n, -1);

    // Largest memory first; index breaks ties for determinism.
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return problem.stages[a].mem_bytes > problem.stages[b].mem_bytes;
    });

    for (std::size_t oi = 0; oi < n; ++oi) {
        const std::size_t i = order[oi];
        double best_delta = -std::numeric_limits<double>::infinity();
        int best_gid = -1;
        for (int gid : problem.candidate_gpus) {
            // Feasibility against everything placed so far.
            std::vector<int> placed;
            std::vector<StageRequest> placed_stages;
            AllocationProblem sub;
            sub = problem;
            // Cheap incremental check: reuse placement_ok over a compacted view.
            bool ok = true;
            double used = problem.stages[i].mem_bytes;
            for (std::size_t k = 0; k < n; ++k) {
                if (assign[k] != gid) continue;
                used += problem.stages[k].mem_bytes;
                if (problem.stages[k].model_id == problem.stages[i].model_id) ok = false;
            }
            if (used > hrg.gpu(gid).free_memory_bytes + 0.5) ok = false;
            for (const auto& b : hrg.gpu(gid).assigned)
                if (b.model_id == problem.stages[i].model_id) ok = false;
            if (ok && problem.stages[i].balance_group >= 0) {
                const double ti = problem.stages[i].base_throughput *
                                  hrg.gpu(gid).throughput_multiplier;
                for (std::size_t k = 0; k < n; ++k) {
                    if (assign[k] < 0 ||
                        problem.stages[k].balance_group != problem.stages[i].balance_group)
                        continue;
                    const double tk = problem.stages[k].base_throughput *
                                      hrg.gpu(assign[k]).throughput_multiplier;
                    if (tk <= 0.0 || std::abs(ti / tk - 1.0) > problem.balance_epsilon) ok = false;
                }
            }
            if (!ok) continue;
            const std::size_t c = candidate_index_of(problem, gid);
            const double t_ij = problem.stages[i].base_throughput *
                                hrg.gpu(gid).throughput_multiplier;
            const double mem_gb = std::max(problem.stages[i].mem_bytes / 1.0e9, 1.0e-9);
            double delta = score_factor(problem, c) * t_ij / mem_gb;
            // Penalize models that would newly share this GPU.
            std::set<std::string> models;
            for (const auto& b : hrg.gpu(gid).assigned) models.insert(b.model_id);
            for (std::size_t k = 0; k < n; ++k)
                if (assign[k] == gid) models.insert(problem.stages[k].model_id);
            models.insert(problem.stages[i].model_id);
            if (models.size() > 1)
                delta -= multiplexing_penalty(problem.gamma0, problem.penalty_alpha,
                                              problem.stages[i].workload_cv);
            if (delta > best_delta) {
                best_delta = delta;
                best_gid = gid;
            }
        }
        if (best_gid < 0)
            throw InfeasibleError("allocate: no feasible GPU for stage " +
                                  std::to_string(problem.stages[i].stage_index) + " of model " +
                                  problem.stages[i].model_id);
        assign[i] = best_gid;
    }

    // 2-swap / single-move local search, first-improvement, bounded passes.
    double cur = allocation_objective(problem, hrg, assign);
    for (int pass = 0; pass < 64; ++pass) {
        bool improved = false;
        for (std::size_t i = 0; i < n && !improved; ++i) {
            for (int gid : problem.candidate_gpus) {
                if (gid == assign[i]) continue;
                std::vector<int> trial = assign;
                trial[i] = gid;
                if (!allocation_feasible(problem, hrg, trial, nullptr)) continue;
                const double obj = allocation_objective(problem, hrg, trial);
                if (obj > cur + 1e-12) {
                    assign = std::move(trial);
                    cur = obj;
                    improved = true;
                    break;
                }
            }
        }
        for (std::size_t i = 0; i < n && !improved; ++i) {
            for (std::size_t j = i + 1; j < n && !improved; ++j) {
                if (assign[i] == assign[j]) continue;
                std::vector<int> trial = assign;
                std::swap(trial[i], trial[j]);
                if (!allocation_feasible(problem, hrg, trial, nullptr)) continue;
                const double obj = allocation_objective(problem, hrg, trial);
                if (obj > cur + 1e-12) {
                    assign = std::move(trial);
                    cur = obj;
                    improved = true;
                }
            }
        }
        if (!improved) break;
    }
    return {assign, cur};
}

}  // namespace

Allocation allocate(const AllocationProblem& problem, const Hrg& hrg) {
    if (problem.stages.empty()) return {{}, 0.0};
    if (problem.candidate_gpus.empty())
        throw InfeasibleError("allocate: no candidate GPUs");
    for (std::size_t c = 1; c < problem.candidate_gpus.size(); ++c)
        if (problem.candidate_gpus[c] <= problem.candidate_gpus[c - 1])
            throw InvalidSpecError("allocate: candidate_gpus must be sorted ascending and unique");

    const std::size_t vars = problem.stages.size() * problem.candidate_gpus.size();
    if (vars <= 24) {
        std::vector<int> partial(problem.stages.size(), -1);
        std::vector<int> best;
        double best_obj = -std::numeric_limits<double>::infinity();
        exact_search(problem, hrg, partial, 0, best, best_obj);
        if (best.empty()) {
            // Diagnose the binding constraint on the most constrained stage.
            std::string why = "no feasible assignment";
            for (std::size_t i = 0; i < problem.stages.size(); ++i) {
                bool any = false;
                for (int gid : problem.candidate_gpus) {
                    std::vector<int> lone(problem.stages.size(), -1);
                    if (placement_ok(problem, hrg, lone, i, gid)) any = true;
                }
                if (!any) {
                    why = "stage " + std::to_string(problem.stages[i].stage_index) + " of model " +
                          problem.stages[i].model_id + " fits no candidate GPU (memory or anti-colocation)";
                    break;
                }
            }
            throw InfeasibleError("allocate: " + why);
        }
        return {best, best_obj};
    }
    return greedy_allocate(problem, hrg);
}

double warm_start_latency_ms(const Hrg& hrg, const AffinityHistory& affinity, int server_id,
                             const std::string& model_id, const std::vector<StageLoad>& stages) {
    const ServerNode& s = hrg.server(server_id);
    double total = 0.0;
    for (const StageLoad& st : stages) {
        if (st.bytes <= 0.0) continue;
        const bool warm = affinity.cache_covers(server_id, model_id, st.begin_op, st.end_op);
        const double bw = warm ? s.host_bw_bytes_per_ms : hrg.storage_bw_bytes_per_ms;
        total += st.bytes / bw;
    }
    return total;
}

Hrg load_topology(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("topology file not found: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("topology: " + std::string(e.what()));
    }
    Hrg hrg;
    try {
        hrg.storage_bw_bytes_per_ms = j.at("storage_bw_bytes_per_ms").get<double>();
        for (const auto& jr : j.at("racks")) {
            RackNode rack;
            rack.rack_id = static_cast<int>(hrg.racks.size());
            rack.net_bw_bytes_per_ms = jr.at("net_bw_bytes_per_ms").get<double>();
            for (const auto& js : jr.at("servers")) {
                ServerNode server;
                server.server_id = static_cast<int>(hrg.servers.size());
                server.rack_id = rack.rack_id;
                server.host_bw_bytes_per_ms = js.at("host_bw_bytes_per_ms").get<double>();
                server.pcie_bw_bytes_per_ms = js.at("pcie_bw_bytes_per_ms").get<double>();
                server.host_cache_budget_bytes = js.at("host_cache_budget_bytes").get<double>();
                for (const auto& jg : js.at("gpus")) {
                    GpuDevice gpu;
                    gpu.gpu_id = static_cast<int>(hrg.gpus.size());
                    gpu.server_id = server.server_id;
                    gpu.memory_capacity_bytes = jg.at("memory_capacity_bytes").get<double>();
                    gpu.free_memory_bytes =
                        jg.value("free_memory_bytes", gpu.memory_capacity_bytes);
                    gpu.throughput_multiplier = jg.value("throughput_multiplier", 1.0);
                    server.gpu_ids.push_back(gpu.gpu_id);
                    hrg.gpus.push_back(gpu);
                }
                rack.server_ids.push_back(server.server_id);
                hrg.servers.push_back(std::move(server));
            }
            hrg.racks.push_back(std::move(rack));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("topology: " + std::string(e.what()));
    }
    hrg.validate();
    return hrg;
}

std::string to_topology_json(const Hrg& hrg) {
    nlohmann::json j;
    j["storage_bw_bytes_per_ms"] = hrg.storage_bw_bytes_per_ms;
    j["racks"] = nlohmann::json::array();
    for (const RackNode& rack : hrg.racks) {
        nlohmann::json jr;
        jr["net_bw_bytes_per_ms"] = rack.net_bw_bytes_per_ms;
        jr["servers"] = nlohmann::json::array();
        for (int sid : rack.server_ids) {
            const ServerNode& s = hrg.server(sid);
            nlohmann::json js;
            js["host_bw_bytes_per_ms"] = s.host_bw_bytes_per_ms;
            js["pcie_bw_bytes_per_ms"] = s.pcie_bw_bytes_per_ms;
            js["host_cache_budget_bytes"] = s.host_cache_budget_bytes;
            js["gpus"] = nlohmann::json::array();
            for (int gid : s.gpu_ids) {
                const GpuDevice& g = hrg.gpu(gid);
                nlohmann::json jg;
                jg["memory_capacity_bytes"] = g.memory_capacity_bytes;
                jg["free_memory_bytes"] = g.free_memory_bytes;
                jg["throughput_multiplier"] = g.throughput_multiplier;
                js["gpus"].push_back(jg);
            }
            jr["servers"].push_back(js);
        }
        j["racks"].push_back(jr);
    }
    return j.dump(2);
}

Hrg make_synthetic_cluster(const SyntheticClusterSpec& spec) {
    Hrg hrg;
    hrg.storage_bw_bytes_per_ms = spec.storage_bw_bytes_per_ms;
    Rng rng(spec.seed);
    for (int r = 0; r < spec.racks; ++r) {
        RackNode rack;
        rack.rack_id = r;
        rack.net_bw_bytes_per_ms = spec.rack_bw_bytes_per_ms;
        for (int s = 0; s < spec.servers_per_rack; ++s) {
            ServerNode server;
            server.server_id = static_cast<int>(hrg.servers.size());
            server.rack_id = r;
            server.host_bw_bytes_per_ms = spec.host_bw_bytes_per_ms;
            server.pcie_bw_bytes_per_ms = spec.pcie_bw_bytes_per_ms;
            server.host_cache_budget_bytes = spec.host_cache_budget_bytes;
            for (int g = 0; g < spec.gpus_per_server; ++g) {
                GpuDevice gpu;
                gpu.gpu_id = static_cast<int>(hrg.gpus.size());
                gpu.server_id = server.server_id;
                gpu.memory_capacity_bytes = spec.gpu_memory_bytes;
                gpu.free_memory_bytes = spec.gpu_memory_bytes;
                if (rng.uniform() < spec.fragmented_fraction) {
                    // Background occupancy: memory held by unrelated tenants.
                    const double held = spec.gpu_memory_bytes * spec.fragment_occupancy;
                    gpu.free_memory_bytes -= held;
                    gpu.assigned.push_back({"__background__", -1, 0, held});
                }
                server.gpu_ids.push_back(gpu.gpu_id);
                hrg.gpus.push_back(gpu);
            }
            rack.server_ids.push_back(server.server_id);
            hrg.servers.push_back(std::move(server));
        }
        hrg.racks.push_back(std::move(rack));
    }
    return hrg;
}

}  // namespace pipesim
