// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#include "pipesim/engine.hpp"

#include <algorithm>
#include <cassert>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>

#include "pipesim/errors.hpp"

namespace pipesim {

namespace {
constexpr int kNewStageOffset = 1 << 20;  // disambiguates transition bindings
}

const char* to_string(EventKind kind) {
    switch (kind) {
        case EventKind::Arrival: return "arrival";
        case EventKind::StageStart: return "stage_start";
        case EventKind::StageComplete: return "stage_complete";
        case EventKind::TransferComplete: return "transfer_complete";
        case EventKind::RefactorBegin: return "refactor_begin";
        case EventKind::KvSyncComplete: return "kv_sync_complete";
        case EventKind::RefactorCommit: return "refactor_commit";
        case EventKind::ScaleUpReady: return "scale_up_ready";
        case EventKind::ScaleDown: return "scale_down";
        case EventKind::ControlTick: return "control_tick";
    }
    return "?";
}

Engine::Engine(EngineConfig config, Hrg cluster, std::vector<Request> workload)
    : cfg_(std::move(config)), hrg_(std::move(cluster)), workload_(std::move(workload)) {
    if (cfg_.granularities.plans.empty())
        throw InvalidSpecError("engine: no feasible granularity plans");
    hrg_.validate();
    affinity_.init(hrg_);
    gpu_busy_stage_count_.assign(hrg_.gpus.size(), 0);
    gpu_binding_count_.assign(hrg_.gpus.size(), 0);

    reqs_.resize(workload_.size());
    for (std::size_t i = 0; i < workload_.size(); ++i) {
        const Request& r = workload_[i];
        auto [it, inserted] = model_index_.try_emplace(r.model_id, static_cast<int>(models_.size()));
        if (inserted) {
            ModelRt m;
            m.name = r.model_id;
            models_.push_back(std::move(m));
        }
        RequestRt& rt = reqs_[i];
        rt.model = it->second;
        rt.arrival_ms = r.arrival_ms;
        rt.prompt_tokens = r.prompt_tokens;
        rt.total_passes = 1 + r.output_tokens;
        rt.slo_ms = r.slo_deadline_ms > 0.0 ? r.slo_deadline_ms : cfg_.default_slo_ms;
    }
    result_.records.resize(reqs_.size());
}

void Engine::force_refactor_at(double time_ms, const std::string& model_id, int target_stages) {
    auto it = model_index_.find(model_id);
    if (it == model_index_.end())
        throw InvalidSpecError("force_refactor_at: unknown model " + model_id);
    forced_.push_back({time_ms, it->second, target_stages});
}

void Engine::revoke_grant_at(double time_ms, const std::string& model_id) {
    auto it = model_index_.find(model_id);
    if (it == model_index_.end())
        throw InvalidSpecError("revoke_grant_at: unknown model " + model_id);
    revocations_.push_back({time_ms, it->second});
}

const PartitionPlan& Engine::plan_of(const InstanceRt& inst) const {
    return cfg_.granularities.plans[static_cast<std::size_t>(inst.plan_index)].plan;
}

const GranularityConfig& Engine::config_of(const InstanceRt& inst) const {
    return cfg_.granularities.plans[static_cast<std::size_t>(inst.plan_index)].config;
}

double Engine::kv_bw() const {
    return cfg_.kv_sync_bw_bytes_per_ms > 0.0 ? cfg_.kv_sync_bw_bytes_per_ms
                                              : cfg_.inter_stage_bw_bytes_per_ms;
}

int Engine::plan_index_for_stages(int stages) const {
    for (std::size_t i = 0; i < cfg_.granularities.plans.size(); ++i)
        if (cfg_.granularities.plans[i].config.stages == stages) return static_cast<int>(i);
    return -1;
}

int Engine::nearest_plan_at_least(int stages) const {
    // Nearest configured granularity by stage distance; ties go coarser.
    int best = -1;
    int best_dist = std::numeric_limits<int>::max();
    for (std::size_t i = 0; i < cfg_.granularities.plans.size(); ++i) {
        const int k = cfg_.granularities.plans[i].config.stages;
        const int dist = std::abs(k - stages);
        if (dist < best_dist || (dist == best_dist && best >= 0 &&
                                 k < cfg_.granularities.plans[static_cast<std::size_t>(best)]
                                          .config.stages)) {
            best_dist = dist;
            best = static_cast<int>(i);
        }
    }
    return best;
}

std::vector<StageLoad> Engine::stage_loads(int plan_index) const {
    const PartitionPlan& plan = cfg_.granularities.plans[static_cast<std::size_t>(plan_index)].plan;
    std::vector<StageLoad> loads;
    int begin = 0;
    for (int k = 0; k < plan.num_stages; ++k) {
        const int end = (k + 1 < plan.num_stages) ? plan.boundaries[static_cast<std::size_t>(k)]
                                                  : static_cast<int>(cfg_.graph.ops.size());
        loads.push_back({begin, end, plan.stage_param_bytes[static_cast<std::size_t>(k)]});
        begin = end;
    }
    return loads;
}

double Engine::stage_service_ms(const InstanceRt& inst, int stage, std::size_t units) const {
    const PartitionPlan& plan = plan_of(inst);
    const double base = plan.stage_compute_ms[static_cast<std::size_t>(stage)];
    const double m = static_cast<double>(plan.stage_op_count[static_cast<std::size_t>(stage)]);
    const double eff = base * std::pow(m, cfg_.exec.stage_efficiency_exponent - 1.0);
    return eff * std::pow(static_cast<double>(units), cfg_.exec.batch_exponent);
}

double Engine::hop_ms(const InstanceRt& inst, int stage, std::size_t units) const {
    const double bytes = scale_activation(plan_of(inst), stage, static_cast<int>(units),
                                          cfg_.exec.batch_scaling);
    return bytes / cfg_.inter_stage_bw_bytes_per_ms;
}

bool Engine::head_dispatch_allowed(const InstanceRt& inst) const {
    switch (inst.state) {
        case InstState::Active:
        case InstState::Draining: return true;
        case InstState::Refactoring: return !(inst.refactor && inst.refactor->barrier);
        default: return false;
    }
}

// ---------------------------------------------------------------- accounting

std::size_t Engine::queued_units(const InstanceRt& inst) const {
    std::size_t q = inst.head.size();
    for (const StageRt& st : inst.stages)
        for (const MicroBatch& b : st.inbound) q += b.units.size();
    return q;
}

void Engine::note_stage_busy_change(InstanceRt& inst, int stage, bool now_busy) {
    const int gpu = inst.stages[static_cast<std::size_t>(stage)].gpu_id;
    if (gpu < 0) return;
    int& cnt = gpu_busy_stage_count_[static_cast<std::size_t>(gpu)];
    if (now_busy) {
        if (cnt == 0) ++busy_gpus_;
        ++cnt;
    } else {
        --cnt;
        if (cnt == 0) --busy_gpus_;
    }
}

void Engine::advance_accounting(double now_ms) {
    const double dt = now_ms - last_account_ms_;
    if (dt <= 0.0) {
        last_account_ms_ = now_ms;
        return;
    }
    double queued = 0.0;
    for (auto& inst_ptr : instances_) {
        InstanceRt& inst = *inst_ptr;
        if (inst.state == InstState::Loading || inst.state == InstState::Terminated) continue;
        // Work in transit between stages counts as upstream work downstream.
        std::uint64_t transit_mask = 0;
        for (const auto& [id, b] : inst.in_transit) {
            (void)id;
            if (b.transit_from >= 0 && b.transit_from < 64)
                transit_mask |= (1ULL << b.transit_from);
        }
        bool upstream = !inst.head.empty();
        for (std::size_t s = 0; s < inst.stages.size(); ++s) {
            StageRt& st = inst.stages[s];
            const bool busy = st.current.has_value();
            if (busy) {
                st.busy_ms += dt;
            } else if (s > 0 && (upstream || !st.inbound.empty())) {
                st.bubble_ms += dt;
            }
            if (!busy && !st.inbound.empty() && inst.state != InstState::Refactoring)
                result_.work_conservation_violation_ms += dt;
            upstream = upstream || busy || !st.inbound.empty() ||
                       (s < 64 && (transit_mask & (1ULL << s)) != 0);
        }
        queued += static_cast<double>(queued_units(inst));
    }
    for (const ModelRt& m : models_) queued += static_cast<double>(m.parked.size());
    queue_len_integral_ += queued * dt;
    gpu_alloc_integral_ += static_cast<double>(allocated_gpus_) * dt;
    gpu_busy_integral_ += static_cast<double>(busy_gpus_) * dt;
    last_account_ms_ = now_ms;
}

void Engine::bind_gpu(int gpu_id, const StageBinding& binding) {
    hrg_.bind_stage(gpu_id, binding);
    int& cnt = gpu_binding_count_[static_cast<std::size_t>(gpu_id)];
    if (cnt == 0) ++allocated_gpus_;
    ++cnt;
}

void Engine::unbind_gpu(int gpu_id, const std::string& model_id, std::int64_t instance_id,
                        int stage_index) {
    hrg_.release_stage(gpu_id, model_id, instance_id, stage_index);
    int& cnt = gpu_binding_count_[static_cast<std::size_t>(gpu_id)];
    --cnt;
    if (cnt == 0) --allocated_gpus_;
}

// ---------------------------------------------------------------- scheduling

void Engine::schedule(double time_ms, EventKind kind, std::int64_t instance_id, int stage,
                      std::int64_t batch_id, std::int64_t aux) {
    SimEvent ev;
    ev.time_ms = std::max(time_ms, now_ms_);
    ev.seq = next_seq_++;
    ev.kind = kind;
    ev.instance_id = instance_id;
    ev.stage = stage;
    ev.batch_id = batch_id;
    ev.aux = aux;
    heap_.push(ev);
}

void Engine::dispatch(const SimEvent& ev) {
    ++result_.events_dispatched;
    if (trace_) trace_(ev);
    switch (ev.kind) {
        case EventKind::Arrival: on_arrival(ev); break;
        case EventKind::StageStart: on_stage_start(ev); break;
        case EventKind::StageComplete: on_stage_complete(ev); break;
        case EventKind::TransferComplete: on_transfer_complete(ev); break;
        case EventKind::RefactorBegin: on_refactor_begin(ev); break;
        case EventKind::KvSyncComplete: on_kv_sync_complete(ev); break;
        case EventKind::RefactorCommit: on_refactor_commit(ev); break;
        case EventKind::ScaleUpReady: on_scale_up_ready(ev); break;
        case EventKind::ScaleDown: on_scale_down(ev); break;
        case EventKind::ControlTick: on_control_tick(ev); break;
    }
}

// ------------------------------------------------------------------- routing

Engine::InstanceRt* Engine::route(int model) {
    InstanceRt* best = nullptr;
    std::size_t best_q = 0;
    for (std::int64_t id : models_[static_cast<std::size_t>(model)].instance_ids) {
        InstanceRt& inst = *instances_[static_cast<std::size_t>(id)];
        if (inst.state != InstState::Active && inst.state != InstState::Refactoring) continue;
        const std::size_t q = queued_units(inst);
        if (!best || q < best_q) {
            best = &inst;
            best_q = q;
        }
    }
    return best;
}

void Engine::flush_parked(int model, double now_ms) {
    ModelRt& m = models_[static_cast<std::size_t>(model)];
    while (!m.parked.empty()) {
        InstanceRt* inst = route(model);
        if (!inst) return;
        HeadUnit hu = m.parked.front();
        m.parked.pop_front();
        result_.provisioning_wait_ms += now_ms - hu.enqueue_ms;
        reqs_[static_cast<std::size_t>(hu.unit.req)].parked = false;
        enqueue_head(*inst, hu.unit, hu.enqueue_ms, now_ms);
    }
}

void Engine::rebalance_heads(int model, double now_ms) {
    // Spread queued prefill work over the serving replicas. Decode loopbacks
    // stay home: their KV cache lives on the instance that grew it.
    std::vector<InstanceRt*> serving;
    for (std::int64_t id : models_[static_cast<std::size_t>(model)].instance_ids) {
        InstanceRt& inst = *instances_[static_cast<std::size_t>(id)];
        if (inst.state == InstState::Active) serving.push_back(&inst);
    }
    if (serving.size() < 2) return;
    for (;;) {
        InstanceRt* longest = nullptr;
        InstanceRt* shortest = nullptr;
        for (InstanceRt* inst : serving) {
            if (!longest || queued_units(*inst) > queued_units(*longest)) longest = inst;
            if (!shortest || queued_units(*inst) < queued_units(*shortest)) shortest = inst;
        }
        if (queued_units(*longest) <= queued_units(*shortest) + 1) break;
        // Newest movable prefill unit migrates from the back of the long queue.
        bool moved = false;
        for (auto it = longest->head.rbegin(); it != longest->head.rend(); ++it) {
            if (it->unit.pass != 0) continue;
            HeadUnit hu = *it;
            longest->head.erase(std::next(it).base());
            enqueue_head(*shortest, hu.unit, hu.enqueue_ms, now_ms);
            moved = true;
            break;
        }
        if (!moved) break;
    }
}

// ---------------------------------------------------------------- event flow

void Engine::on_arrival(const SimEvent& ev) {
    const std::size_t idx = static_cast<std::size_t>(ev.aux);
    RequestRt& rt = reqs_[idx];
    ModelRt& m = models_[static_cast<std::size_t>(rt.model)];
    m.recent_arrivals_ms.push_back(now_ms_);
    const double window_ms = cfg_.cv_window_s * 1000.0;
    while (!m.recent_arrivals_ms.empty() && m.recent_arrivals_ms.front() < now_ms_ - window_ms)
        m.recent_arrivals_ms.pop_front();

    InstanceRt* inst = route(rt.model);
    if (inst) {
        enqueue_head(*inst, Unit{static_cast<std::int32_t>(idx), 0}, now_ms_, now_ms_);
    } else {
        rt.parked = true;
        m.parked.push_back({Unit{static_cast<std::int32_t>(idx), 0}, now_ms_});
        if (cfg_.policy.adaptive && m.pending_instances == 0) {
            int start = cfg_.policy.start_stages > 0 ? plan_index_for_stages(cfg_.policy.start_stages)
                                                     : 0;
            if (start < 0) start = 0;
            scale_up(rt.model, start, now_ms_);
        }
    }

    // Next arrival.
    if (arrival_cursor_ < workload_.size()) {
        const std::size_t next = arrival_cursor_++;
        schedule(workload_[next].arrival_ms, EventKind::Arrival, -1, -1, -1,
                 static_cast<std::int64_t>(next));
    }
}

void Engine::enqueue_head(InstanceRt& inst, Unit unit, double enqueue_ms, double now_ms) {
    inst.head.push_back({unit, enqueue_ms});
    reqs_[static_cast<std::size_t>(unit.req)].home = inst.id;
    maybe_dispatch_head(inst, now_ms);
}

void Engine::maybe_dispatch_head(InstanceRt& inst, double now_ms) {
    if (!head_dispatch_allowed(inst)) return;
    if (inst.stages.empty() || inst.stages[0].current.has_value()) return;
    if (inst.head.empty()) return;
    const std::size_t max_batch = static_cast<std::size_t>(config_of(inst).max_batch);
    if (inst.head.size() >= max_batch) {
        dispatch_head(inst, now_ms);
        return;
    }
    const double deadline = inst.head.front().enqueue_ms + cfg_.exec.batch_max_wait_ms;
    if (now_ms >= deadline - 1e-12) {
        dispatch_head(inst, now_ms);
        return;
    }
    ++inst.head_gen;
    schedule(deadline, EventKind::StageStart, inst.id, 0, -1,
             static_cast<std::int64_t>(inst.head_gen));
}

void Engine::dispatch_head(InstanceRt& inst, double now_ms) {
    ++inst.head_gen;  // cancel any scheduled hold-for-fill dispatch
    const std::size_t max_batch = static_cast<std::size_t>(config_of(inst).max_batch);
    const std::size_t take = std::min(inst.head.size(), max_batch);

    MicroBatch batch;
    batch.id = next_batch_id_++;
    batch.units.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
        HeadUnit hu = inst.head.front();
        inst.head.pop_front();
        RequestRt& rt = reqs_[static_cast<std::size_t>(hu.unit.req)];
        rt.queue_ms += now_ms - hu.enqueue_ms;
        if (rt.start_ms < 0.0) rt.start_ms = now_ms;
        batch.units.push_back(hu.unit);
    }
    batch.service_ms = stage_service_ms(inst, 0, batch.units.size());
    batch.stage_entered_ms = now_ms;
    inst.stages[0].current = batch;
    note_stage_busy_change(inst, 0, true);
    ++inst.inflight_batches;
    inst.last_active_ms = now_ms;
    schedule(now_ms + batch.service_ms, EventKind::StageComplete, inst.id, 0, batch.id);
}

void Engine::on_stage_start(const SimEvent& ev) {
    if (ev.instance_id < 0 || ev.instance_id >= static_cast<std::int64_t>(instances_.size())) return;
    InstanceRt& inst = *instances_[static_cast<std::size_t>(ev.instance_id)];
    if (inst.state == InstState::Terminated) return;
    if (ev.stage == 0) {
        // Hold-for-fill dispatch; stale generations are ignored.
        if (ev.aux != static_cast<std::int64_t>(inst.head_gen)) return;
        if (!head_dispatch_allowed(inst)) return;
        if (inst.stages[0].current.has_value() || inst.head.empty()) return;
        dispatch_head(inst, now_ms_);
    } else {
        start_stage_batch(inst, ev.stage, now_ms_);
    }
}

void Engine::start_stage_batch(InstanceRt& inst, int stage, double now_ms) {
    StageRt& st = inst.stages[static_cast<std::size_t>(stage)];
    if (st.current.has_value() || st.inbound.empty()) return;
    MicroBatch batch = std::move(st.inbound.front());
    st.inbound.pop_front();
    for (const Unit& u : batch.units)
        reqs_[static_cast<std::size_t>(u.req)].queue_ms += now_ms - batch.stage_entered_ms;
    batch.service_ms = stage_service_ms(inst, stage, batch.units.size());
    batch.stage_entered_ms = now_ms;
    st.current = std::move(batch);
    note_stage_busy_change(inst, stage, true);
    inst.last_active_ms = now_ms;
    schedule(now_ms + st.current->service_ms, EventKind::StageComplete, inst.id, stage,
             st.current->id);
}

void Engine::on_stage_complete(const SimEvent& ev) {
    InstanceRt& inst = *instances_[static_cast<std::size_t>(ev.instance_id)];
    if (inst.state == InstState::Terminated) return;
    const int stage = ev.stage;
    StageRt& st = inst.stages[static_cast<std::size_t>(stage)];
    if (!st.current.has_value() || st.current->id != ev.batch_id) return;  // stale after refactor

    MicroBatch batch = std::move(*st.current);
    st.current.reset();
    note_stage_busy_change(inst, stage, false);
    inst.last_active_ms = now_ms_;
    for (const Unit& u : batch.units)
        reqs_[static_cast<std::size_t>(u.req)].compute_ms += batch.service_ms;

    const int last = static_cast<int>(inst.stages.size()) - 1;
    if (stage < last) {
        const double hop = hop_ms(inst, stage, batch.units.size());
        batch.stage_entered_ms = now_ms_;  // transfer start, for comm accounting
        batch.transit_from = stage;
        const std::int64_t bid = batch.id;
        inst.in_transit.emplace(bid, std::move(batch));
        schedule(now_ms_ + hop, EventKind::TransferComplete, inst.id, stage, bid);
    } else {
        for (const Unit& u : batch.units) complete_pass(inst, u, now_ms_);
        --inst.inflight_batches;
        if (inst.refactor && inst.refactor->barrier) {
            // Commit once the pipeline is quiescent.
            on_kv_sync_complete(SimEvent{now_ms_, 0, EventKind::KvSyncComplete, inst.id, -1, -1,
                                         static_cast<std::int64_t>(inst.epoch)});
        }
        check_idle(inst, now_ms_);
    }

    if (stage == 0) {
        maybe_dispatch_head(inst, now_ms_);
    }
    if (!st.inbound.empty()) schedule(now_ms_, EventKind::StageStart, inst.id, stage);
}

void Engine::on_transfer_complete(const SimEvent& ev) {
    InstanceRt& inst = *instances_[static_cast<std::size_t>(ev.instance_id)];
    if (inst.state == InstState::Terminated) return;
    auto it = inst.in_transit.find(ev.batch_id);
    if (it == inst.in_transit.end()) return;
    MicroBatch batch = std::move(it->second);
    inst.in_transit.erase(it);
    const double comm = now_ms_ - batch.stage_entered_ms;
    for (const Unit& u : batch.units) reqs_[static_cast<std::size_t>(u.req)].comm_ms += comm;
    const int next_stage = ev.stage + 1;
    batch.stage_entered_ms = now_ms_;
    batch.transit_from = -1;
    StageRt& st = inst.stages[static_cast<std::size_t>(next_stage)];
    st.inbound.push_back(std::move(batch));
    if (!st.current.has_value()) schedule(now_ms_, EventKind::StageStart, inst.id, next_stage);
}

void Engine::complete_pass(InstanceRt& inst, const Unit& unit, double now_ms) {
    RequestRt& rt = reqs_[static_cast<std::size_t>(unit.req)];
    ++rt.passes_done;
    if (unit.pass == 0) {
        rt.kv_tokens = rt.prompt_tokens;  // prefill builds the prompt cache
    } else {
        ++rt.generated;
        ++rt.kv_tokens;
    }
    if (rt.passes_done < rt.total_passes) {
        enqueue_head(inst, Unit{unit.req, unit.pass + 1}, now_ms, now_ms);
    } else {
        rt.kv_tokens = 0;  // cache released at completion
        finalize_request(unit.req, now_ms, RequestOutcome::Completed,
                         static_cast<int>(inst.stages.size()));
    }
}

void Engine::finalize_request(std::int32_t req, double now_ms, RequestOutcome outcome, int stages) {
    RequestRt& rt = reqs_[static_cast<std::size_t>(req)];
    if (rt.done) return;
    rt.done = true;
    rt.finish_ms = now_ms;
    ++completed_;
    RequestRecord& rec = result_.records[static_cast<std::size_t>(req)];
    rec.request_id = workload_[static_cast<std::size_t>(req)].id;
    rec.model_id = workload_[static_cast<std::size_t>(req)].model_id;
    rec.arrival_ms = rt.arrival_ms;
    rec.start_ms = rt.start_ms < 0.0 ? now_ms : rt.start_ms;
    rec.finish_ms = now_ms;
    rec.queue_ms = rt.queue_ms;
    rec.compute_ms = rt.compute_ms;
    rec.comm_ms = rt.comm_ms;
    rec.slo_deadline_ms = rt.slo_ms;
    rec.met_slo = outcome == RequestOutcome::Completed &&
                  (rt.slo_ms <= 0.0 || rec.finish_ms - rec.arrival_ms <= rt.slo_ms);
    rec.stages_at_service = stages;
    rec.tokens_generated = rt.generated;
    rec.outcome = outcome;
}

// -------------------------------------------------------------- KV + refactor

std::int64_t Engine::kv_tokens_unsynced(const InstanceRt& inst) const {
    if (!inst.refactor) return 0;
    std::int64_t total = 0;
    for (std::size_t i = 0; i < reqs_.size(); ++i) {
        const RequestRt& rt = reqs_[i];
        if (rt.done || rt.home != inst.id) continue;
        std::int64_t synced = 0;
        auto it = inst.refactor->synced_tokens.find(static_cast<std::int32_t>(i));
        if (it != inst.refactor->synced_tokens.end()) synced = it->second;
        total += std::max<std::int64_t>(0, rt.kv_tokens - synced);
    }
    return total;
}

void Engine::snapshot_sync_targets(InstanceRt& inst) {
    RefactorCtx& ctx = *inst.refactor;
    ctx.sync_target.clear();
    for (std::size_t i = 0; i < reqs_.size(); ++i) {
        const RequestRt& rt = reqs_[i];
        if (rt.done || rt.home != inst.id) continue;
        ctx.sync_target[static_cast<std::int32_t>(i)] = rt.kv_tokens;
    }
}

void Engine::on_refactor_begin(const SimEvent& ev) {
    InstanceRt& inst = *instances_[static_cast<std::size_t>(ev.instance_id)];
    if (inst.state != InstState::Active) return;  // busy refactoring/draining: drop directive
    const int target_plan = static_cast<int>(ev.aux);
    if (target_plan < 0 || target_plan == inst.plan_index) return;
    if (!begin_refactor(inst, target_plan, now_ms_)) ++result_.refactor_holds;
}

bool Engine::begin_refactor(InstanceRt& inst, int target_plan, double now_ms) {
    const auto& target = cfg_.granularities.plans[static_cast<std::size_t>(target_plan)];
    const std::string& model_name = models_[static_cast<std::size_t>(inst.model)].name;

    AllocationProblem problem;
    double min_stage_bytes = std::numeric_limits<double>::infinity();
    for (double b : target.plan.stage_param_bytes) min_stage_bytes = std::min(min_stage_bytes, b);
    for (int k = 0; k < target.plan.num_stages; ++k) {
        StageRequest sr;
        sr.model_id = model_name;
        sr.instance_id = inst.id;
        sr.stage_index = k;
        sr.mem_bytes = target.plan.stage_param_bytes[static_cast<std::size_t>(k)];
        sr.workload_cv = 0.0;
        sr.balance_group = 0;
        sr.base_throughput = 1.0;
        problem.stages.push_back(std::move(sr));
    }
    for (const GpuDevice& g : hrg_.gpus) {
        if (g.free_memory_bytes < min_stage_bytes) continue;
        bool same_model = false;
        for (const auto& b : g.assigned)
            if (b.model_id == model_name) same_model = true;
        if (same_model) continue;
        problem.candidate_gpus.push_back(g.gpu_id);
    }
    if (problem.candidate_gpus.size() < static_cast<std::size_t>(target.plan.num_stages))
        return false;
    problem.gpu_score_factor.reserve(problem.candidate_gpus.size());
    for (int gid : problem.candidate_gpus)
        problem.gpu_score_factor.push_back(
            hrg_.path_penalized(hrg_.gpu(gid).server_id, now_ms, cfg_.select.marker_horizon_ms)
                ? cfg_.select.marker_penalty
                : 1.0);

    Allocation alloc;
    try {
        alloc = allocate(problem, hrg_);
    } catch (const InfeasibleError&) {
        return false;
    }

    RefactorCtx ctx;
    ctx.target_plan = target_plan;
    ctx.new_gpus = alloc.gpu_for_stage;
    for (int k = 0; k < target.plan.num_stages; ++k) {
        const int gid = alloc.gpu_for_stage[static_cast<std::size_t>(k)];
        StageBinding binding{model_name, inst.id, kNewStageOffset + k,
                             target.plan.stage_param_bytes[static_cast<std::size_t>(k)]};
        bind_gpu(gid, binding);
        const ResourcePath path{hrg_.server(hrg_.gpu(gid).server_id).rack_id,
                                hrg_.gpu(gid).server_id};
        hrg_.record_scaling_event(path, now_ms, cfg_.select.marker_horizon_ms * 10.0);
    }

    // Parameter loads per server, host tier when cached.
    const auto loads = stage_loads(target_plan);
    std::map<int, std::vector<StageLoad>> per_server;
    for (int k = 0; k < target.plan.num_stages; ++k) {
        const int server = hrg_.gpu(alloc.gpu_for_stage[static_cast<std::size_t>(k)]).server_id;
        per_server[server].push_back(loads[static_cast<std::size_t>(k)]);
    }
    double load_ms = 0.0;
    for (const auto& [server, ls] : per_server)
        load_ms = std::max(load_ms, warm_start_latency_ms(hrg_, affinity_, server, model_name, ls));
    ctx.load_ready_ms = now_ms + load_ms;

    inst.state = InstState::Refactoring;
    ++inst.epoch;
    inst.refactor = std::move(ctx);

    // First synchronization wave over the tokens present right now.
    snapshot_sync_targets(inst);
    std::int64_t tokens = 0;
    for (const auto& [req, t] : inst.refactor->sync_target) {
        (void)req;
        tokens += t;
    }
    const double sync_ms = static_cast<double>(tokens) * cfg_.exec.kv_bytes_per_token / kv_bw();
    result_.kv_synced_bytes += static_cast<double>(tokens) * cfg_.exec.kv_bytes_per_token;
    schedule(now_ms + sync_ms, EventKind::KvSyncComplete, inst.id, -1, -1,
             static_cast<std::int64_t>(inst.epoch));
    return true;
}

void Engine::on_kv_sync_complete(const SimEvent& ev) {
    InstanceRt& inst = *instances_[static_cast<std::size_t>(ev.instance_id)];
    if (inst.state != InstState::Refactoring || !inst.refactor) return;
    if (ev.aux != static_cast<std::int64_t>(inst.epoch)) return;
    RefactorCtx& ctx = *inst.refactor;

    // The wave that just finished covers its snapshot targets.
    for (const auto& [req, tokens] : ctx.sync_target) {
        auto& synced = ctx.synced_tokens[req];
        synced = std::max(synced, tokens);
    }
    ctx.sync_target.clear();

    if (!ctx.barrier) {
        const std::int64_t delta = kv_tokens_unsynced(inst);
        if (delta > 0 && ctx.rounds < cfg_.max_sync_rounds) {
            ++ctx.rounds;
            snapshot_sync_targets(inst);
            const double sync_ms =
                static_cast<double>(delta) * cfg_.exec.kv_bytes_per_token / kv_bw();
            result_.kv_synced_bytes += static_cast<double>(delta) * cfg_.exec.kv_bytes_per_token;
            schedule(now_ms_ + sync_ms, EventKind::KvSyncComplete, inst.id, -1, -1,
                     static_cast<std::int64_t>(inst.epoch));
            return;
        }
        ctx.barrier = true;  // stop dispatching new micro-batches, let the pipe drain
    }
    if (ctx.commit_scheduled || inst.inflight_batches > 0) return;

    // Quiescent: one final delta moves the tokens generated while draining.
    const std::int64_t final_delta = kv_tokens_unsynced(inst);
    snapshot_sync_targets(inst);
    const double final_ms = static_cast<double>(final_delta) * cfg_.exec.kv_bytes_per_token / kv_bw();
    result_.kv_synced_bytes += static_cast<double>(final_delta) * cfg_.exec.kv_bytes_per_token;
    ctx.commit_scheduled = true;
    schedule(std::max(now_ms_ + final_ms, ctx.load_ready_ms), EventKind::RefactorCommit, inst.id,
             -1, -1, static_cast<std::int64_t>(inst.epoch));
}

void Engine::on_refactor_commit(const SimEvent& ev) {
    InstanceRt& inst = *instances_[static_cast<std::size_t>(ev.instance_id)];
    if (inst.state != InstState::Refactoring || !inst.refactor) return;
    if (ev.aux != static_cast<std::int64_t>(inst.epoch)) return;
    RefactorCtx& ctx = *inst.refactor;
    const std::string& model_name = models_[static_cast<std::size_t>(inst.model)].name;

    // Final wave covers its snapshot.
    for (const auto& [req, tokens] : ctx.sync_target) {
        auto& synced = ctx.synced_tokens[req];
        synced = std::max(synced, tokens);
    }
    ctx.sync_target.clear();

    // Consistency: every in-flight request's valid prefix must be covered
    // exactly — no missing tokens, no re-synced overlap (waves are disjoint
    // increments by construction).
    for (std::size_t i = 0; i < reqs_.size(); ++i) {
        const RequestRt& rt = reqs_[i];
        if (rt.done || rt.home != inst.id) continue;
        auto it = ctx.synced_tokens.find(static_cast<std::int32_t>(i));
        const std::int64_t synced = it == ctx.synced_tokens.end() ? 0 : it->second;
        if (synced != rt.kv_tokens) ++result_.kv_violations;
    }

    // Old stages drain is complete (inflight == 0); release them and keep a
    // host-memory copy for future consolidations.
    const auto old_loads = stage_loads(inst.plan_index);
    for (std::size_t k = 0; k < inst.stages.size(); ++k) {
        const int gid = inst.stages[k].gpu_id;
        if (gid < 0) continue;
        result_.stage_timelines.resize(
            std::max(result_.stage_timelines.size(), inst.stages.size()));
        result_.stage_timelines[k].busy_ms += inst.stages[k].busy_ms;
        result_.stage_timelines[k].bubble_ms += inst.stages[k].bubble_ms;
        unbind_gpu(gid, model_name, inst.id, static_cast<int>(k));
        const int server = hrg_.gpu(gid).server_id;
        affinity_.cache_insert(server, model_name, old_loads[k].begin_op, old_loads[k].end_op,
                               old_loads[k].bytes);
    }

    // Re-key the transition bindings to their final stage indices.
    const auto& target = cfg_.granularities.plans[static_cast<std::size_t>(ctx.target_plan)];
    const auto new_loads = stage_loads(ctx.target_plan);
    std::vector<StageRt> new_stages(static_cast<std::size_t>(target.plan.num_stages));
    for (int k = 0; k < target.plan.num_stages; ++k) {
        const int gid = ctx.new_gpus[static_cast<std::size_t>(k)];
        unbind_gpu(gid, model_name, inst.id, kNewStageOffset + k);
        bind_gpu(gid, {model_name, inst.id, k,
                       target.plan.stage_param_bytes[static_cast<std::size_t>(k)]});
        new_stages[static_cast<std::size_t>(k)].gpu_id = gid;
        const int server = hrg_.gpu(gid).server_id;
        affinity_.record_hosting(model_name, server, now_ms_);
        affinity_.cache_insert(server, model_name, new_loads[static_cast<std::size_t>(k)].begin_op,
                               new_loads[static_cast<std::size_t>(k)].end_op,
                               new_loads[static_cast<std::size_t>(k)].bytes);
    }
    inst.stages = std::move(new_stages);
    inst.plan_index = ctx.target_plan;
    inst.in_transit.clear();
    inst.refactor.reset();
    inst.state = InstState::Active;
    ++inst.epoch;
    models_[static_cast<std::size_t>(inst.model)].current_stages = target.config.stages;
    ++result_.refactor_commits;
    maybe_dispatch_head(inst, now_ms_);
    check_idle(inst, now_ms_);
}

void Engine::abort_refactor(InstanceRt& inst, double now_ms) {
    if (!inst.refactor) return;
    const std::string& model_name = models_[static_cast<std::size_t>(inst.model)].name;
    const auto& target = cfg_.granularities.plans[static_cast<std::size_t>(inst.refactor->target_plan)];
    for (int k = 0; k < target.plan.num_stages; ++k) {
        const int gid = inst.refactor->new_gpus[static_cast<std::size_t>(k)];
        unbind_gpu(gid, model_name, inst.id, kNewStageOffset + k);
    }
    inst.refactor.reset();
    inst.state = InstState::Active;
    ++inst.epoch;  // invalidates in-flight sync/commit events
    ++result_.refactor_aborts;
    maybe_dispatch_head(inst, now_ms);
}

// ------------------------------------------------------------------- scaling

std::int64_t Engine::scale_up(int model, int plan_index, double now_ms, bool pre_provisioned) {
    ModelRt& m = models_[static_cast<std::size_t>(model)];
    const auto& gp = cfg_.granularities.plans[static_cast<std::size_t>(plan_index)];

    auto inst = std::make_unique<InstanceRt>();
    inst->id = static_cast<std::int64_t>(instances_.size());
    inst->model = model;
    inst->plan_index = plan_index;
    inst->stages.resize(static_cast<std::size_t>(gp.plan.num_stages));

    const auto loads = stage_loads(plan_index);
    std::vector<std::pair<int, int>> placed;  // (gpu, stage)
    for (int k = 0; k < gp.plan.num_stages; ++k) {
        const double bytes = gp.plan.stage_param_bytes[static_cast<std::size_t>(k)];
        SelectServerParams sel = cfg_.select;
        sel.required_free_bytes = bytes;
        std::optional<int> server = select_server(m.name, now_ms, sel, hrg_, affinity_);
        int chosen_gpu = -1;
        auto gpu_ok = [&](const GpuDevice& g, bool allow_shared) {
            if (g.free_memory_bytes < bytes) return false;
            for (const auto& b : g.assigned) {
                if (b.model_id == m.name) return false;
                if (!allow_shared && b.model_id != "__background__") return false;
            }
            return true;
        };
        // Prefer exclusive GPUs; multiplex with other models only when the
        // cluster has no empty candidates.
        for (int pass = 0; pass < 2 && chosen_gpu < 0; ++pass) {
            const bool allow_shared = pass == 1;
            if (server) {
                for (int gid : hrg_.server(*server).gpu_ids)
                    if (gpu_ok(hrg_.gpu(gid), allow_shared)) {
                        chosen_gpu = gid;
                        break;
                    }
            }
            if (chosen_gpu < 0) {
                for (const GpuDevice& g : hrg_.gpus)
                    if (gpu_ok(g, allow_shared)) {
                        chosen_gpu = g.gpu_id;
                        break;
                    }
            }
        }
        if (chosen_gpu < 0) {
            for (auto [gid, stage] : placed) unbind_gpu(gid, m.name, inst->id, stage);
            return -1;  // allocation unavailable; caller retries next tick
        }
        bind_gpu(chosen_gpu, {m.name, inst->id, k, bytes});
        placed.emplace_back(chosen_gpu, k);
        inst->stages[static_cast<std::size_t>(k)].gpu_id = chosen_gpu;
        const ResourcePath path{hrg_.server(hrg_.gpu(chosen_gpu).server_id).rack_id,
                                hrg_.gpu(chosen_gpu).server_id};
        hrg_.record_scaling_event(path, now_ms, cfg_.select.marker_horizon_ms * 10.0);
    }

    std::map<int, std::vector<StageLoad>> per_server;
    for (int k = 0; k < gp.plan.num_stages; ++k)
        per_server[hrg_.gpu(inst->stages[static_cast<std::size_t>(k)].gpu_id).server_id].push_back(
            loads[static_cast<std::size_t>(k)]);
    double load_ms = 0.0;
    for (const auto& [server, ls] : per_server)
        load_ms = std::max(load_ms, warm_start_latency_ms(hrg_, affinity_, server, m.name, ls));

    inst->last_active_ms = now_ms;
    const std::int64_t id = inst->id;
    m.instance_ids.push_back(id);
    instances_.push_back(std::move(inst));
    if (pre_provisioned) {
        InstanceRt& ready = *instances_[static_cast<std::size_t>(id)];
        ready.state = InstState::Active;
        ready.always_ready = true;
        m.current_stages = gp.config.stages;
        for (std::size_t k = 0; k < ready.stages.size(); ++k) {
            const int server = hrg_.gpu(ready.stages[k].gpu_id).server_id;
            affinity_.record_hosting(m.name, server, now_ms);
            affinity_.cache_insert(server, m.name, loads[k].begin_op, loads[k].end_op,
                                   loads[k].bytes);
        }
    } else {
        instances_[static_cast<std::size_t>(id)]->state = InstState::Loading;
        ++m.pending_instances;
        schedule(now_ms + load_ms, EventKind::ScaleUpReady, id);
    }
    return id;
}

void Engine::on_scale_up_ready(const SimEvent& ev) {
    InstanceRt& inst = *instances_[static_cast<std::size_t>(ev.instance_id)];
    if (inst.state != InstState::Loading) return;
    ModelRt& m = models_[static_cast<std::size_t>(inst.model)];
    inst.state = InstState::Active;
    inst.last_active_ms = now_ms_;
    --m.pending_instances;
    ++result_.scale_up_count;
    m.current_stages = config_of(inst).stages;
    const auto loads = stage_loads(inst.plan_index);
    for (std::size_t k = 0; k < inst.stages.size(); ++k) {
        const int server = hrg_.gpu(inst.stages[k].gpu_id).server_id;
        affinity_.record_hosting(m.name, server, now_ms_);
        affinity_.cache_insert(server, m.name, loads[k].begin_op, loads[k].end_op, loads[k].bytes);
    }
    flush_parked(inst.model, now_ms_);
    rebalance_heads(inst.model, now_ms_);
    maybe_dispatch_head(inst, now_ms_);
    check_idle(inst, now_ms_);
}

void Engine::check_idle(InstanceRt& inst, double now_ms) {
    if (inst.state != InstState::Active && inst.state != InstState::Draining) return;
    if (inst.always_ready || inst.reclaim_pending) return;
    if (inst.inflight_batches > 0 || !inst.head.empty()) return;
    inst.reclaim_pending = true;
    schedule(now_ms + cfg_.reclamation_window_ms, EventKind::ScaleDown, inst.id, -1, -1, -2);
}

bool Engine::try_reclaim(InstanceRt& inst, double now_ms) {
    if (inst.state != InstState::Active && inst.state != InstState::Draining) return false;
    if (inst.always_ready || inst.inflight_batches > 0 || !inst.head.empty()) return false;
    if (now_ms - inst.last_active_ms < cfg_.reclamation_window_ms - 1e-9) return false;

    const std::string& model_name = models_[static_cast<std::size_t>(inst.model)].name;
    const auto loads = stage_loads(inst.plan_index);
    result_.stage_timelines.resize(std::max(result_.stage_timelines.size(), inst.stages.size()));
    for (std::size_t k = 0; k < inst.stages.size(); ++k) {
        const int gid = inst.stages[k].gpu_id;
        result_.stage_timelines[k].busy_ms += inst.stages[k].busy_ms;
        result_.stage_timelines[k].bubble_ms += inst.stages[k].bubble_ms;
        if (gid < 0) continue;
        unbind_gpu(gid, model_name, inst.id, static_cast<int>(k));
        const int server = hrg_.gpu(gid).server_id;
        affinity_.record_hosting(model_name, server, now_ms);
        affinity_.cache_insert(server, model_name, loads[k].begin_op, loads[k].end_op,
                               loads[k].bytes);
    }
    inst.state = InstState::Terminated;
    ++result_.scale_down_count;
    return true;
}

void Engine::on_scale_down(const SimEvent& ev) {
    if (ev.instance_id < 0) {
        // Grant revocation hook: abort the lowest-id in-flight refactor.
        const int model = static_cast<int>(ev.aux);
        for (std::int64_t id : models_[static_cast<std::size_t>(model)].instance_ids) {
            InstanceRt& inst = *instances_[static_cast<std::size_t>(id)];
            if (inst.state == InstState::Refactoring) {
                abort_refactor(inst, now_ms_);
                return;
            }
        }
        return;
    }
    InstanceRt& inst = *instances_[static_cast<std::size_t>(ev.instance_id)];
    inst.reclaim_pending = false;
    if (try_reclaim(inst, now_ms_)) return;
    check_idle(inst, now_ms_);  // still idle but active too recently: re-arm
}

// ------------------------------------------------------------------ control

MonitorSnapshot Engine::make_snapshot(int model, double now_ms) {
    ModelRt& m = models_[static_cast<std::size_t>(model)];
    MonitorSnapshot snap;
    snap.now_ms = now_ms;

    std::vector<double> arrivals(m.recent_arrivals_ms.begin(), m.recent_arrivals_ms.end());
    if (auto est = estimate_cv(arrivals, cfg_.cv_window_s)) snap.nu_t = est->nu;
    snap.measured_rate_rps = static_cast<double>(arrivals.size()) / cfg_.cv_window_s;

    double q = static_cast<double>(m.parked.size());
    int active = 0;
    int own_gpus = 0;
    for (std::int64_t id : m.instance_ids) {
        const InstanceRt& inst = *instances_[static_cast<std::size_t>(id)];
        if (inst.state == InstState::Terminated || inst.state == InstState::Loading) continue;
        q += static_cast<double>(queued_units(inst));
        if (inst.state == InstState::Active || inst.state == InstState::Refactoring) {
            ++active;
            own_gpus += static_cast<int>(inst.stages.size());
        }
    }
    snap.queue_length = q;
    snap.current_stages = m.current_stages;
    snap.active_instances = active;
    snap.pending_instances = m.pending_instances;

    int free_gpus = 0;
    for (const GpuDevice& g : hrg_.gpus) {
        bool ours = false;
        for (const auto& b : g.assigned)
            if (b.model_id != "__background__") ours = true;
        if (!ours) ++free_gpus;
    }
    snap.free_gpus = static_cast<double>(free_gpus);
    snap.busy_gpus = static_cast<double>(busy_gpus_);

    snap.profile_needs_sharing.resize(cfg_.granularities.plans.size(), false);
    for (std::size_t k = 0; k < cfg_.granularities.plans.size(); ++k) {
        const int needed = cfg_.granularities.plans[k].config.stages * std::max(1, active);
        snap.profile_needs_sharing[k] = needed > free_gpus + own_gpus;
    }
    return snap;
}

void Engine::apply_decision(int model, const ControlDecision& decision, const MonitorSnapshot& snap,
                            double now_ms) {
    ModelRt& m = models_[static_cast<std::size_t>(model)];
    if (decision.held_insufficient_data) return;

    if (decision.refactor != RefactorDirective::Hold &&
        now_ms - m.last_refactor_ms >= cfg_.ctrl.refactor_cooldown_ms) {
        const int plan = plan_index_for_stages(decision.chosen_stages);
        if (plan >= 0) {
            bool any = false;
            for (std::int64_t id : m.instance_ids) {
                const InstanceRt& inst = *instances_[static_cast<std::size_t>(id)];
                if (inst.state == InstState::Active && inst.plan_index != plan) {
                    schedule(now_ms, EventKind::RefactorBegin, id, -1, -1, plan);
                    any = true;
                }
            }
            if (any) m.last_refactor_ms = now_ms;
        }
    }

    // Instance-count planning toward the chosen granularity.
    int active = 0;
    for (std::int64_t id : m.instance_ids) {
        const InstState st = instances_[static_cast<std::size_t>(id)]->state;
        if (st == InstState::Active || st == InstState::Refactoring) ++active;
    }
    const int provisioned = active + m.pending_instances;
    if (decision.target_instances > provisioned && snap.queue_length > 0.0) {
        // Demand-gated: provisioning toward the target only when work is
        // actually waiting, so an idle model does not flap between reclaim
        // and re-provision.
        const int plan = plan_index_for_stages(decision.chosen_stages);
        for (int i = provisioned; i < decision.target_instances; ++i)
            if (scale_up(model, plan >= 0 ? plan : 0, now_ms) < 0) break;
    } else if (decision.target_instances < active &&
               snap.queue_length < 0.05 * cfg_.ctrl.queue_max) {
        // Shed capacity only once the backlog is effectively gone.
        int excess = active - decision.target_instances;
        for (auto it = m.instance_ids.rbegin(); it != m.instance_ids.rend() && excess > 0; ++it) {
            InstanceRt& inst = *instances_[static_cast<std::size_t>(*it)];
            if (inst.state == InstState::Active && !inst.always_ready) {
                inst.state = InstState::Draining;
                --excess;
                check_idle(inst, now_ms);
            }
        }
    }

    // Burst path: elastic replica at the urgency-selected granularity, gated
    // by the admission check. A failing check escalates to finer configured
    // granularities up to G_max; past that the fallback is simply more
    // replicas, which the queue pressure keeps requesting.
    if (decision.scale.delta_instances > 0 && m.pending_instances < 2) {
        int plan = nearest_plan_at_least(decision.scale.stages);
        for (;;) {
            const auto& gp = cfg_.granularities.plans[static_cast<std::size_t>(plan)];
            std::vector<double> stage_rates;
            for (int k = 0; k < gp.plan.num_stages; ++k) {
                // Per-stage service rate at batch 1, in units/s.
                InstanceRt probe;
                probe.plan_index = plan;
                stage_rates.push_back(1000.0 / stage_service_ms(probe, k, 1));
            }
            // Init estimate: host tier once any server holds the whole model
            // in its cache, storage tier otherwise.
            bool warm = false;
            const int n_ops = static_cast<int>(cfg_.graph.ops.size());
            for (const ServerNode& server : hrg_.servers)
                if (affinity_.cache_covers(server.server_id, m.name, 0, n_ops)) {
                    warm = true;
                    break;
                }
            double init_ms = 0.0;
            for (std::size_t k = 0; k < gp.plan.stage_param_bytes.size(); ++k) {
                const double bytes = gp.plan.stage_param_bytes[k];
                const double bw = warm ? hrg_.servers.front().host_bw_bytes_per_ms
                                       : cfg_.storage_bw_bytes_per_ms;
                init_ms = std::max(init_ms, bytes / bw);
            }
            const bool ok = check_slo(cfg_.default_slo_ms, init_ms, stage_rates,
                                      snap.queue_length, cfg_.slo_required_rate);
            if (ok) break;
            int finer = -1;
            int finer_stages = std::numeric_limits<int>::max();
            for (std::size_t i = 0; i < cfg_.granularities.plans.size(); ++i) {
                const int k = cfg_.granularities.plans[i].config.stages;
                if (k > gp.config.stages && k < finer_stages && k <= cfg_.ctrl.granularity_max) {
                    finer_stages = k;
                    finer = static_cast<int>(i);
                }
            }
            if (finer < 0) break;  // nothing finer within G_max: add the replica anyway
            plan = finer;
        }
        scale_up(model, plan, now_ms);
    }
}

void Engine::on_control_tick(const SimEvent& ev) {
    if (ev.aux >= 0) {
        // Forced refactor (test hook): aux = model * 4096 + target stages.
        const int model = static_cast<int>(ev.aux / 4096);
        const int stages = static_cast<int>(ev.aux % 4096);
        const int plan = plan_index_for_stages(stages);
        if (plan < 0) return;
        for (std::int64_t id : models_[static_cast<std::size_t>(model)].instance_ids) {
            const InstanceRt& inst = *instances_[static_cast<std::size_t>(id)];
            if (inst.state == InstState::Active && inst.plan_index != plan)
                schedule(now_ms_, EventKind::RefactorBegin, id, -1, -1, plan);
        }
        return;
    }
    if (!cfg_.policy.adaptive) return;

    for (int model = 0; model < static_cast<int>(models_.size()); ++model) {
        MonitorSnapshot snap = make_snapshot(model, now_ms_);

        const auto t0 = std::chrono::steady_clock::now();
        // Profiles are positionally aligned with granularities.plans.
        ControlDecision decision = control_tick(snap, profiles_, cfg_.ctrl);
        const auto t1 = std::chrono::steady_clock::now();
        decision.decision_us =
            std::chrono::duration<double, std::micro>(t1 - t0).count();
        result_.decision_us.push_back(decision.decision_us);

        if (cfg_.collect_decision_log) {
            nlohmann::json entry;
            entry["t_ms"] = now_ms_;
            entry["model"] = models_[static_cast<std::size_t>(model)].name;
            entry["hold"] = decision.held_insufficient_data;
            entry["nu_t"] = decision.nu_used;
            entry["queue"] = snap.queue_length;
            entry["current_stages"] = snap.current_stages;
            entry["alpha"] = cfg_.ctrl.tradeoff_alpha;
            entry["sigma"] = cfg_.ctrl.sensitivity_sigma;
            entry["gamma0"] = cfg_.ctrl.multiplex_gamma0;
            entry["penalty_alpha"] = cfg_.ctrl.multiplex_alpha;
            entry["g_star"] = decision.chosen_stages;
            entry["target_instances"] = decision.target_instances;
            entry["directive"] = decision.refactor == RefactorDirective::Hold
                                     ? "hold"
                                     : (decision.refactor == RefactorDirective::Refine
                                            ? "refine"
                                            : "consolidate");
            entry["scale_stages"] = decision.scale.stages;
            // Wall-clock decision latency is reported via EngineResult only,
            // keeping the log byte-reproducible across replays.
            nlohmann::json profs = nlohmann::json::array();
            for (std::size_t k = 0; k < profiles_.size(); ++k) {
                nlohmann::json p;
                p["stages"] = profiles_[k].stages;
                p["T"] = profiles_[k].throughput;
                p["L"] = profiles_[k].latency_ms;
                p["nu_k"] = profiles_[k].nu_anchor;
                p["sharing"] = k < decision.sharing_flags.size() && decision.sharing_flags[k];
                p["score"] = k < decision.scores.size() ? decision.scores[k] : 0.0;
                profs.push_back(p);
            }
            entry["profiles"] = profs;
            result_.decision_log.push_back(std::move(entry));
        }
        apply_decision(model, decision, snap, now_ms_);
    }

    if (completed_ < reqs_.size() || arrival_cursor_ < workload_.size())
        schedule(now_ms_ + cfg_.ctrl.control_interval_ms, EventKind::ControlTick);
}

// ---------------------------------------------------------------------- run

EngineResult Engine::run() {
    // Initial deployment: static policies pre-provision all replicas; the
    // adaptive policy starts its always-ready replicas at the start granularity.
    int start_plan;
    if (cfg_.policy.adaptive) {
        start_plan = cfg_.policy.start_stages > 0
                         ? plan_index_for_stages(cfg_.policy.start_stages)
                         : 0;
        if (start_plan < 0)
            throw InvalidSpecError("engine: start_stages has no matching plan");
    } else {
        start_plan = plan_index_for_stages(cfg_.policy.static_stages);
        if (start_plan < 0)
            throw InvalidSpecError("engine: static_stages " +
                                   std::to_string(cfg_.policy.static_stages) +
                                   " has no matching plan");
    }
    for (int model = 0; model < static_cast<int>(models_.size()); ++model) {
        models_[static_cast<std::size_t>(model)].current_stages =
            cfg_.granularities.plans[static_cast<std::size_t>(start_plan)].config.stages;
        for (int i = 0; i < cfg_.policy.initial_instances; ++i) {
            if (scale_up(model, start_plan, 0.0, /*pre_provisioned=*/true) < 0)
                throw InfeasibleError("engine: initial deployment failed for model " +
                                      models_[static_cast<std::size_t>(model)].name);
        }
    }

    if (arrival_cursor_ < workload_.size()) {
        const std::size_t first = arrival_cursor_++;
        schedule(workload_[first].arrival_ms, EventKind::Arrival, -1, -1, -1,
                 static_cast<std::int64_t>(first));
    }
    if (cfg_.policy.adaptive)
        schedule(cfg_.ctrl.control_interval_ms, EventKind::ControlTick);
    for (const ForcedRefactor& f : forced_)
        schedule(f.time_ms, EventKind::ControlTick, -1, -1, -1,
                 static_cast<std::int64_t>(f.model) * 4096 + f.target_stages);
    for (const Revocation& r : revocations_)
        schedule(r.time_ms, EventKind::ScaleDown, -1, -1, -1, static_cast<std::int64_t>(r.model));

    while (!heap_.empty()) {
        const SimEvent ev = heap_.top();
        heap_.pop();
        if (cfg_.horizon_ms > 0.0 && ev.time_ms > cfg_.horizon_ms) break;
        now_ms_ = ev.time_ms;
        advance_accounting(now_ms_);
        dispatch(ev);
    }

    const bool hit_horizon = cfg_.horizon_ms > 0.0 && completed_ < reqs_.size();
    if (hit_horizon) {
        advance_accounting(cfg_.horizon_ms);
        now_ms_ = cfg_.horizon_ms;
        for (std::size_t i = 0; i < reqs_.size(); ++i) {
            if (reqs_[i].done) continue;
            const bool arrived = reqs_[i].arrival_ms <= cfg_.horizon_ms;
            finalize_request(static_cast<std::int32_t>(i),
                             arrived ? cfg_.horizon_ms : reqs_[i].arrival_ms,
                             arrived ? RequestOutcome::Expired : RequestOutcome::Rejected, 0);
        }
    } else if (completed_ < reqs_.size()) {
        std::ostringstream dump;
        dump << "engine deadlock: " << (reqs_.size() - completed_) << " requests pending;";
        for (const ModelRt& m : models_) dump << " model " << m.name << " parked=" << m.parked.size();
        for (const auto& inst : instances_)
            dump << " inst" << inst->id << "(state=" << static_cast<int>(inst->state)
                 << ",head=" << inst->head.size() << ",inflight=" << inst->inflight_batches << ")";
        throw DeadlockError(dump.str());
    }

    // Fold live stage timelines into the aggregates.
    for (const auto& inst : instances_) {
        if (inst->state == InstState::Terminated) continue;
        result_.stage_timelines.resize(
            std::max(result_.stage_timelines.size(), inst->stages.size()));
        for (std::size_t k = 0; k < inst->stages.size(); ++k) {
            result_.stage_timelines[k].busy_ms += inst->stages[k].busy_ms;
            result_.stage_timelines[k].bubble_ms += inst->stages[k].bubble_ms;
        }
    }

    double duration = cfg_.horizon_ms;
    if (duration <= 0.0) {
        for (const RequestRecord& r : result_.records) duration = std::max(duration, r.finish_ms);
    }
    result_.duration_ms = duration;
    // Resource means cover the whole accounted span: adaptive runs keep GPUs
    // through reclamation tails after the last completion, and that holding
    // time belongs in the average.
    const double span = std::max(duration, last_account_ms_);
    if (span > 0.0) {
        result_.mean_queue_len = queue_len_integral_ / span;
        result_.mean_allocated_gpus = gpu_alloc_integral_ / span;
    }
    result_.gpu_utilization = gpu_alloc_integral_ > 0.0 ? gpu_busy_integral_ / gpu_alloc_integral_
                                                        : 0.0;
    result_.stall_ratio = stall_cycle_ratio(result_.stage_timelines);
    result_.anti_colocation_ok = !hrg_.anti_colocation_violated();
    result_.memory_conserved = hrg_.memory_conserved();
    // Binding counters must agree with the cluster state they shadow.
    for (const GpuDevice& g : hrg_.gpus) {
        int nonbg = 0;
        for (const auto& b : g.assigned)
            if (b.model_id != "__background__") ++nonbg;
        if (nonbg != gpu_binding_count_[static_cast<std::size_t>(g.gpu_id)])
            result_.memory_conserved = false;
    }
    return result_;
}

}  // namespace pipesim
