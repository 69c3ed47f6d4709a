// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include <json.hpp>

#include "pipesim/cluster.hpp"
#include "pipesim/controller.hpp"
#include "pipesim/metrics.hpp"
#include "pipesim/modelgraph.hpp"
#include "pipesim/workload.hpp"

namespace pipesim {

enum class EventKind {
    Arrival,
    StageStart,
    StageComplete,
    TransferComplete,
    RefactorBegin,
    KvSyncComplete,
    RefactorCommit,
    ScaleUpReady,
    ScaleDown,
    ControlTick,
};

const char* to_string(EventKind kind);

/// Timestamped simulation event; (time_ms, seq) is the total dispatch order.
struct SimEvent {
    double time_ms = 0.0;
    std::uint64_t seq = 0;
    EventKind kind = EventKind::Arrival;
    std::int64_t instance_id = -1;
    int stage = -1;
    std::int64_t batch_id = -1;
    std::int64_t aux = -1;  // request index / generation / epoch / reason
};

/// How the run is driven: a fixed static granularity or the adaptive policy.
struct PolicyConfig {
    bool adaptive = false;
    int static_stages = 4;
    int initial_instances = 1;
    int start_stages = 0;  // adaptive start granularity; 0 = coarsest configured
};

struct EngineConfig {
    CompGraph graph;
    GranularitySet granularities;
    ExecModelParams exec;
    double inter_stage_bw_bytes_per_ms = 1.0;
    double kv_sync_bw_bytes_per_ms = 0.0;  // 0 = use the inter-stage bandwidth
    double storage_bw_bytes_per_ms = 1.0;  // mirrored into the Hrg by the experiment
    ControllerParams ctrl;
    PolicyConfig policy;
    SelectServerParams select;
    double reclamation_window_ms = 300'000.0;  // idle time before GPUs are reclaimed
    double cv_window_s = 15.0;
    double horizon_ms = 0.0;  // 0 = run until all requests terminate
    double default_slo_ms = 0.0;
    std::uint64_t seed = 0;
    int max_sync_rounds = 8;
    bool collect_decision_log = true;
    double slo_required_rate = 1.0;  // r_j of the admission check
};

struct EngineResult {
    std::vector<RequestRecord> records;  // indexed by request id
    double duration_ms = 0.0;            // last completion (or horizon)
    double mean_queue_len = 0.0;         // time-averaged queued units
    std::vector<StageTimeline> stage_timelines;  // aggregated by stage position
    double stall_ratio = -1.0;
    double gpu_utilization = 0.0;  // busy GPU-time / allocated GPU-time
    double mean_allocated_gpus = 0.0;
    std::int64_t refactor_commits = 0;
    std::int64_t refactor_aborts = 0;
    std::int64_t refactor_holds = 0;  // directives that could not allocate
    std::int64_t kv_violations = 0;
    double kv_synced_bytes = 0.0;
    std::int64_t scale_up_count = 0;
    std::int64_t scale_down_count = 0;
    double provisioning_wait_ms = 0.0;  // parked-arrival waiting time
    double work_conservation_violation_ms = 0.0;
    bool anti_colocation_ok = true;
    bool memory_conserved = true;
    std::vector<nlohmann::json> decision_log;
    std::vector<double> decision_us;
    std::int64_t events_dispatched = 0;
};

/// Deterministic single-threaded discrete-event engine executing pipeline
/// instances over the cluster. All randomness comes from the seeded config;
/// two runs with identical inputs produce identical results.
class Engine {
public:
    Engine(EngineConfig config, Hrg cluster, std::vector<Request> workload);

    EngineResult run();

    /// Test hooks: schedule a forced granularity switch / a grant revocation
    /// for a model's in-flight refactor. Both must be called before run().
    void force_refactor_at(double time_ms, const std::string& model_id, int target_stages);
    void revoke_grant_at(double time_ms, const std::string& model_id);

    /// Optional sink receiving every dispatched event (trace export).
    void set_trace_sink(std::function<void(const SimEvent&)> sink) { trace_ = std::move(sink); }

    /// Granularity profiles for the adaptive controller, positionally aligned
    /// with the configured granularity plans. Required for adaptive runs.
    void set_profiles(std::vector<GranularityProfile> profiles) { profiles_ = std::move(profiles); }

private:
    struct Unit {
        std::int32_t req = -1;
        std::int32_t pass = 0;
    };
    struct HeadUnit {
        Unit unit;
        double enqueue_ms = 0.0;
    };
    struct MicroBatch {
        std::int64_t id = -1;
        std::vector<Unit> units;
        double stage_entered_ms = 0.0;  // inbound-wait / transfer-start timestamp
        double service_ms = 0.0;
        int transit_from = -1;  // stage the batch left, while in transit
    };
    struct StageRt {
        int gpu_id = -1;
        std::optional<MicroBatch> current;
        std::deque<MicroBatch> inbound;
        double busy_ms = 0.0;
        double bubble_ms = 0.0;
    };
    enum class InstState { Loading, Active, Refactoring, Draining, Terminated };
    struct RefactorCtx {
        int target_plan = -1;
        std::vector<int> new_gpus;
        double load_ready_ms = 0.0;
        std::map<std::int32_t, std::int64_t> synced_tokens;  // per request
        std::map<std::int32_t, std::int64_t> sync_target;    // tokens covered by in-flight round
        int rounds = 0;
        bool barrier = false;
        bool commit_scheduled = false;
    };
    struct InstanceRt {
        std::int64_t id = -1;
        int model = -1;
        int plan_index = -1;
        std::vector<StageRt> stages;
        std::deque<HeadUnit> head;
        InstState state = InstState::Loading;
        bool always_ready = false;
        std::uint64_t head_gen = 0;   // invalidates scheduled head dispatches
        bool reclaim_pending = false;
        std::uint64_t epoch = 0;      // invalidates stale refactor events
        int inflight_batches = 0;
        std::optional<RefactorCtx> refactor;
        std::map<std::int64_t, MicroBatch> in_transit;
        double last_active_ms = 0.0;
    };
    struct RequestRt {
        int model = -1;
        double arrival_ms = 0.0;
        int prompt_tokens = 1;
        int total_passes = 1;
        int passes_done = 0;
        std::int64_t kv_tokens = 0;  // prompt + generated, present in cache
        int generated = 0;
        double slo_ms = 0.0;
        double queue_ms = 0.0;
        double compute_ms = 0.0;
        double comm_ms = 0.0;
        double start_ms = -1.0;
        double finish_ms = -1.0;
        std::int64_t home = -1;  // serving instance
        bool parked = false;
        bool done = false;
    };
    struct ModelRt {
        std::string name;
        std::deque<double> recent_arrivals_ms;
        std::deque<HeadUnit> parked;
        std::vector<std::int64_t> instance_ids;
        int current_stages = 0;
        int pending_instances = 0;
        double last_refactor_ms = -1.0e18;
    };
    struct EventCmp {
        bool operator()(const SimEvent& a, const SimEvent& b) const {
            if (a.time_ms != b.time_ms) return a.time_ms > b.time_ms;
            return a.seq > b.seq;
        }
    };

    // Scheduling
    void schedule(double time_ms, EventKind kind, std::int64_t instance_id = -1, int stage = -1,
                  std::int64_t batch_id = -1, std::int64_t aux = -1);
    void dispatch(const SimEvent& ev);

    // Event handlers
    void on_arrival(const SimEvent& ev);
    void on_stage_start(const SimEvent& ev);
    void on_stage_complete(const SimEvent& ev);
    void on_transfer_complete(const SimEvent& ev);
    void on_refactor_begin(const SimEvent& ev);
    void on_kv_sync_complete(const SimEvent& ev);
    void on_refactor_commit(const SimEvent& ev);
    void on_scale_up_ready(const SimEvent& ev);
    void on_scale_down(const SimEvent& ev);
    void on_control_tick(const SimEvent& ev);

    // Pipeline mechanics
    void enqueue_head(InstanceRt& inst, Unit unit, double enqueue_ms, double now_ms);
    void maybe_dispatch_head(InstanceRt& inst, double now_ms);
    void dispatch_head(InstanceRt& inst, double now_ms);
    void start_stage_batch(InstanceRt& inst, int stage, double now_ms);
    void complete_pass(InstanceRt& inst, const Unit& unit, double now_ms);
    void finalize_request(std::int32_t req, double now_ms, RequestOutcome outcome, int stages);
    double stage_service_ms(const InstanceRt& inst, int stage, std::size_t units) const;
    double hop_ms(const InstanceRt& inst, int stage, std::size_t units) const;
    bool head_dispatch_allowed(const InstanceRt& inst) const;

    // Control / scaling
    void apply_decision(int model, const ControlDecision& decision, const MonitorSnapshot& snap,
                        double now_ms);
    bool begin_refactor(InstanceRt& inst, int target_plan, double now_ms);
    void abort_refactor(InstanceRt& inst, double now_ms);
    std::int64_t scale_up(int model, int plan_index, double now_ms, bool pre_provisioned = false);
    bool try_reclaim(InstanceRt& inst, double now_ms);
    void check_idle(InstanceRt& inst, double now_ms);
    InstanceRt* route(int model);
    void flush_parked(int model, double now_ms);
    void rebalance_heads(int model, double now_ms);
    int plan_index_for_stages(int stages) const;
    int nearest_plan_at_least(int stages) const;
    MonitorSnapshot make_snapshot(int model, double now_ms);

    // KV bookkeeping
    std::int64_t kv_tokens_unsynced(const InstanceRt& inst) const;
    void snapshot_sync_targets(InstanceRt& inst);

    // Accounting
    void advance_accounting(double now_ms);
    void note_stage_busy_change(InstanceRt& inst, int stage, bool now_busy);
    void bind_gpu(int gpu_id, const StageBinding& binding);
    void unbind_gpu(int gpu_id, const std::string& model_id, std::int64_t instance_id,
                    int stage_index);
    std::size_t queued_units(const InstanceRt& inst) const;

    const PartitionPlan& plan_of(const InstanceRt& inst) const;
    const GranularityConfig& config_of(const InstanceRt& inst) const;
    std::vector<StageLoad> stage_loads(int plan_index) const;
    double kv_bw() const;

    EngineConfig cfg_;
    Hrg hrg_;
    AffinityHistory affinity_;
    std::vector<Request> workload_;
    std::vector<RequestRt> reqs_;
    std::vector<ModelRt> models_;
    std::map<std::string, int> model_index_;
    std::vector<std::unique_ptr<InstanceRt>> instances_;
    std::priority_queue<SimEvent, std::vector<SimEvent>, EventCmp> heap_;
    std::uint64_t next_seq_ = 0;
    std::int64_t next_batch_id_ = 0;
    std::size_t arrival_cursor_ = 0;
    std::size_t completed_ = 0;
    double now_ms_ = 0.0;
    double last_account_ms_ = 0.0;
    double queue_len_integral_ = 0.0;
    double gpu_alloc_integral_ = 0.0;
    double gpu_busy_integral_ = 0.0;
    int allocated_gpus_ = 0;
    int busy_gpus_ = 0;
    std::vector<int> gpu_busy_stage_count_;
    std::vector<int> gpu_binding_count_;  // non-background bindings per GPU
    EngineResult result_;
    std::function<void(const SimEvent&)> trace_;
    struct ForcedRefactor {
        double time_ms;
        int model;
        int target_stages;
    };
    std::vector<ForcedRefactor> forced_;
    struct Revocation {
        double time_ms;
        int model;
    };
    std::vector<Revocation> revocations_;
    std::vector<GranularityProfile> profiles_;
};

}  // namespace pipesim
