// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pipesim {

/// One operator of the model computation graph, in topological order.
struct OpProfile {
    int op_id = 0;
    double compute_ms = 0.0;        // forward time at the profiling batch
    double param_bytes = 0.0;
    double activation_bytes = 0.0;  // output activation size at the profiling batch
    int group_id = 0;               // logical block (attention block, MLP, ...)
};

/// Linearized computation graph. Ops must be a chain after topological
/// collapse; edges are kept for validation only.
struct CompGraph {
    std::vector<OpProfile> ops;
    std::vector<std::pair<int, int>> edges;  // (from, to) op_id pairs

    double total_compute_ms() const;
    double total_param_bytes() const;
    /// Throws InvalidSpecError if ops are empty, non-positive compute, ids out
    /// of order, groups non-contiguous, or edges violate the linear order.
    void validate() const;
};

struct PartitionParams {
    int num_stages = 1;
    double bandwidth_bytes_per_ms = 1.0;  // inter-stage link B
    double overlap_target_ms = 0.0;       // C; <= 0 means "auto": total compute / K
    double refactor_weight = 0.0;         // weight on cuts that split a logical group
    double gpu_memory_bytes = 0.0;        // per-stage parameter budget
};

/// Result of a K-way contiguous partition.
struct PartitionPlan {
    int num_stages = 0;
    std::vector<int> boundaries;            // K-1 cut indices; stage k covers [b[k-1], b[k])
    std::vector<double> stage_compute_ms;   // raw sums over member ops
    std::vector<double> stage_param_bytes;
    std::vector<double> stage_activation_bytes;  // activation of the stage's last op
    std::vector<int> stage_op_count;
    double objective = 0.0;
    double refactor_penalty = 0.0;  // total group-split contribution
    double overlap_target_ms = 0.0; // the C actually used

    int stage_of_op(int op_index) const;
};

/// Batch-aware activation scaling parameters.
struct BatchScaling {
    double alpha_compress = 0.0;
    int base_batch = 1;
};

/// Objective of a given boundary vector, accumulated back-to-front. Both the
/// DP and the brute-force oracle use this exact function, so optima compare
/// bit-for-bit.
double partition_objective(const CompGraph& graph, const std::vector<int>& boundaries,
                           const PartitionParams& params);

/// Optimal contiguous K-partition minimizing
///   sum_k |t_c(S_k) + s_p(S_k)/B - C| + refactor_weight * R(S_k)
/// subject to per-stage param_bytes <= gpu_memory_bytes, where R counts a
/// stage's trailing cut landing inside a logical group. Exact dynamic program;
/// ties resolve to the lexicographically smallest boundary vector.
PartitionPlan partition(const CompGraph& graph, const PartitionParams& params);

/// Activation bytes of stage `stage` when transmitting a batch of size b:
///   s_a_base * (1 + alpha * ln(b / base_batch)).
/// Throws InvalidSpecError on b < 1 and on a non-positive scaled result.
double scale_activation(const PartitionPlan& plan, int stage, int batch, const BatchScaling& scaling);

struct GranularityConfig {
    int stages = 0;
    int max_batch = 1;
};

struct GranularityPlan {
    GranularityConfig config;
    PartitionPlan plan;
};

struct GranularityWarning {
    int stages = 0;
    std::string reason;
};

struct GranularitySet {
    std::vector<GranularityPlan> plans;       // one per feasible K, input order
    std::vector<GranularityWarning> skipped;  // infeasible Ks with reasons
};

/// One optimal plan per requested stage count. Infeasible counts are skipped
/// with a warning record. If params.overlap_target_ms <= 0, C is recomputed
/// per K as total compute / K. max_batch = max_batch_factor * K.
GranularitySet enumerate_granularities(const CompGraph& graph, const std::vector<int>& stage_counts,
                                       PartitionParams params, int max_batch_factor = 32);

/// Uniform chain builder for synthetic experiments.
CompGraph make_uniform_chain(int num_ops, double compute_ms, double param_bytes,
                             double activation_bytes, int ops_per_group);

/// Execution-model constants shipped with a graph preset (see engine docs).
struct ExecModelParams {
    double batch_exponent = 0.8;            // stage time scales as b^batch_exponent
    double stage_efficiency_exponent = 1.0; // effective stage time = sum * m^(q-1)
    double kv_bytes_per_token = 1.0e6;
    double max_batch_factor = 32.0;         // max batch = factor * stage count
    double iteration_budget_ms = 0.0;       // also cap batches so one full-pipe
                                            // compute pass stays under this; 0 = off
    double batch_max_wait_ms = 5.0;
    BatchScaling batch_scaling{0.1, 1};
};

/// Clamps every plan's max batch so a full pipeline compute pass (slowest
/// stage x stage count) stays within exec.iteration_budget_ms (no-op at 0).
void apply_iteration_budget(GranularitySet& set, const ExecModelParams& exec);

struct GraphPreset {
    std::string name;
    CompGraph graph;
    PartitionParams partition_defaults;  // bandwidth, memory; C auto
    ExecModelParams exec;
    double storage_bw_bytes_per_ms = 1.0;
    double host_bw_bytes_per_ms = 1.0;
};

/// Named presets: "opt66b-table2" (128-op chain calibrated against published
/// OPT-66B pipeline measurements) and "uniform-small" (light chain for trend
/// experiments). Throws InvalidSpecError for unknown names.
GraphPreset make_preset(const std::string& name);

/// Graph profile CSV: header `op_id,compute_ms,param_bytes,activation_bytes,group_id`.
CompGraph load_graph_csv(const std::string& path);
std::string to_graph_csv(const CompGraph& graph);

}  // namespace pipesim
