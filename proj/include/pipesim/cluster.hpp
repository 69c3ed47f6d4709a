// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace pipesim {

/// A stage resident on a GPU.
struct StageBinding {
    std::string model_id;
    std::int64_t instance_id = -1;
    int stage_index = 0;
    double mem_bytes = 0.0;
};

struct GpuDevice {
    int gpu_id = 0;
    int server_id = 0;
    double memory_capacity_bytes = 0.0;
    double free_memory_bytes = 0.0;
    double throughput_multiplier = 1.0;  // uniform fleets keep this at 1
    std::vector<StageBinding> assigned;
};

struct ServerNode {
    int server_id = 0;
    int rack_id = 0;
    std::vector<int> gpu_ids;
    double host_bw_bytes_per_ms = 1.0;
    double pcie_bw_bytes_per_ms = 1.0;
    double host_cache_budget_bytes = 0.0;
};

struct RackNode {
    int rack_id = 0;
    std::vector<int> server_ids;
    double net_bw_bytes_per_ms = 1.0;
};

/// A node in the server→rack→cluster hierarchy; server_id = -1 addresses the
/// rack itself.
struct ResourcePath {
    int rack_id = -1;
    int server_id = -1;
    bool operator==(const ResourcePath&) const = default;
};

struct ScalingMarker {
    ResourcePath path;
    double time_ms = 0.0;
};

/// Hierarchical resource graph: topology, bandwidth tiers, scaling markers.
class Hrg {
public:
    std::vector<RackNode> racks;
    std::vector<ServerNode> servers;  // indexed by server_id
    std::vector<GpuDevice> gpus;      // indexed by gpu_id
    double storage_bw_bytes_per_ms = 1.0;

    void validate() const;

    const ServerNode& server(int id) const { return servers.at(static_cast<std::size_t>(id)); }
    ServerNode& server(int id) { return servers.at(static_cast<std::size_t>(id)); }
    const GpuDevice& gpu(int id) const { return gpus.at(static_cast<std::size_t>(id)); }
    GpuDevice& gpu(int id) { return gpus.at(static_cast<std::size_t>(id)); }

    /// Records a scaling event on `path` (which must exist). Markers older
    /// than `prune_horizon_ms` relative to now are dropped.
    void record_scaling_event(const ResourcePath& path, double now_ms, double prune_horizon_ms);

    /// Paths with a marker within `horizon_ms` of now.
    std::vector<ResourcePath> penalized_paths(double now_ms, double horizon_ms) const;

    /// True if the server or its rack carries a marker within the horizon.
    bool path_penalized(int server_id, double now_ms, double horizon_ms) const;

    /// Reserve/release stage memory with conservation bookkeeping.
    void bind_stage(int gpu_id, const StageBinding& binding);
    void release_stage(int gpu_id, const std::string& model_id, std::int64_t instance_id,
                       int stage_index);
    /// Releases every binding of an instance.
    void release_instance(const std::string& model_id, std::int64_t instance_id);

    /// free + assigned == capacity on every GPU (within 1 byte).
    bool memory_conserved() const;

    /// True if any model has two stages on one GPU anywhere in the cluster.
    bool anti_colocation_violated() const;

private:
    std::vector<ScalingMarker> markers_;
};

/// A cached parameter range in a server's host memory.
struct HostCacheEntry {
    std::string model_id;
    int begin_op = 0;  // [begin_op, end_op)
    int end_op = 0;
    double bytes = 0.0;
    std::uint64_t lru_stamp = 0;
};

/// Per-model placement history plus per-server host-memory parameter caches.
class AffinityHistory {
public:
    void init(const Hrg& hrg);

    void record_hosting(const std::string& model_id, int server_id, double now_ms);
    std::optional<double> last_hosted_ms(const std::string& model_id, int server_id) const;
    std::vector<int> known_servers(const std::string& model_id) const;

    /// Inserts a parameter range into a server's host cache, evicting LRU
    /// entries to stay within the budget. Ranges wider than the budget are
    /// simply not cached.
    void cache_insert(int server_id, const std::string& model_id, int begin_op, int end_op,
                      double bytes);
    /// True if [begin_op, end_op) is covered by cached ranges for the model.
    bool cache_covers(int server_id, const std::string& model_id, int begin_op, int end_op) const;
    double cache_used_bytes(int server_id) const;

private:
    struct ServerCache {
        double budget = 0.0;
        double used = 0.0;
        std::vector<HostCacheEntry> entries;
    };
    std::map<std::string, std::map<int, double>> last_hosted_;
    std::vector<ServerCache> caches_;
    std::uint64_t stamp_ = 0;
};

struct SelectServerParams {
    double weight_temporal = 1.0;   // w_t
    double weight_gpu = 0.5;        // w_g
    double decay_per_ms = 0.01;     // temporal decay rate
    double marker_horizon_ms = 10'000.0;
    double marker_penalty = 0.5;    // multiplier on a penalized path's score
    double required_free_bytes = 0.0;
};

/// Affinity-based server choice:
///   argmax  w_t * exp(-decay*(now - t_s)) + w_g * |available GPUs on s|
/// over servers with at least one available GPU; the temporal term is zero
/// for servers that never hosted the model. Scores on recently scaled paths
/// are multiplied by marker_penalty. Ties break to the smallest server_id.
/// Returns nullopt when no server has an available GPU.
std::optional<int> select_server(const std::string& model_id, double now_ms,
                                 const SelectServerParams& params, const Hrg& hrg,
                                 const AffinityHistory& affinity);

/// One stage awaiting GPU placement.
struct StageRequest {
    std::string model_id;
    std::int64_t instance_id = -1;
    int stage_index = 0;
    double mem_bytes = 0.0;
    double workload_cv = 0.0;       // CV_i for the multiplexing penalty
    int balance_group = -1;          // granularity group; -1 = unconstrained
    double base_throughput = 1.0;    // T_ij = base * gpu multiplier
};

struct AllocationProblem {
    std::vector<StageRequest> stages;
    std::vector<int> candidate_gpus;      // sorted ascending for determinism
    double balance_epsilon = 0.2;
    double gamma0 = 0.1;
    double penalty_alpha = 1.0;
    std::vector<double> gpu_score_factor; // optional per-candidate deprioritization (1.0 default)
};

struct Allocation {
    std::vector<int> gpu_for_stage;  // candidate-list values (global gpu ids)
    double objective = 0.0;
};

/// Multiplexing penalty gamma(CV) = gamma0 * (1 + alpha * CV^2).
double multiplexing_penalty(double gamma0, double alpha, double cv);

/// Canonical objective of a complete assignment (shared by the solver and the
/// brute-force oracle): sum_i [factor_j * T_ij / mem_gb_i - gamma(CV_i) * shared(j)],
/// where shared(j) is true when GPU j hosts stages of more than one model,
/// counting residents already on the GPU.
double allocation_objective(const AllocationProblem& problem, const Hrg& hrg,
                            const std::vector<int>& gpu_for_stage);

/// Feasibility of a complete assignment under memory, anti-colocation and
/// intra-group balance constraints.
bool allocation_feasible(const AllocationProblem& problem, const Hrg& hrg,
                         const std::vector<int>& gpu_for_stage, std::string* why = nullptr);

/// Stage→GPU assignment maximizing the canonical objective. Exact search when
/// stages*candidates <= 24 decision variables; greedy best-ratio insertion
/// plus 2-swap local search above that. Same-model stages never share a GPU.
/// Throws InfeasibleError naming the binding constraint.
Allocation allocate(const AllocationProblem& problem, const Hrg& hrg);

/// Load latency of a set of stages on one server, host tier when every range
/// is host-cached, storage tier otherwise; stages on one server serialize.
struct StageLoad {
    int begin_op = 0;
    int end_op = 0;
    double bytes = 0.0;
};
double warm_start_latency_ms(const Hrg& hrg, const AffinityHistory& affinity, int server_id,
                             const std::string& model_id, const std::vector<StageLoad>& stages);

/// Cluster topology JSON ({racks:[{servers:[{gpus:[...]}]}], storage_bw...}).
Hrg load_topology(const std::string& path);
std::string to_topology_json(const Hrg& hrg);

struct SyntheticClusterSpec {
    int racks = 2;
    int servers_per_rack = 8;
    int gpus_per_server = 4;
    double gpu_memory_bytes = 40.0e9;
    double host_bw_bytes_per_ms = 10.0e6;
    double pcie_bw_bytes_per_ms = 16.0e6;
    double rack_bw_bytes_per_ms = 12.0e6;
    double storage_bw_bytes_per_ms = 0.64e6;
    double host_cache_budget_bytes = 256.0e9;
    /// Fraction of GPUs carrying background occupancy, and the occupied
    /// fraction of their memory (static free-memory noise, not live tenants).
    double fragmented_fraction = 0.0;
    double fragment_occupancy = 0.5;
    std::uint64_t seed = 0;
};

Hrg make_synthetic_cluster(const SyntheticClusterSpec& spec);

}  // namespace pipesim
