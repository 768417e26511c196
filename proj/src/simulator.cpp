#include "moesim/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <tuple>

#include "moesim/error.hpp"

namespace moesim {

using nlohmann::json;

Nanos to_nanos(double seconds) {
    if (!std::isfinite(seconds) || seconds < 0) throw NumericError("duration must be finite and non-negative");
    return static_cast<Nanos>(std::llround(seconds * 1e9));
}

std::string_view to_string(Stream s) {
    switch (s) {
        case Stream::Comm: return "comm";
        case Stream::Predict: return "predict";
        case Stream::Compute: return "compute";
    }
    return "?";
}

std::string_view to_string(OpKind k) {
    switch (k) {
        case OpKind::Transfer: return "transfer";
        case OpKind::NonMoe: return "non_moe";
        case OpKind::Gate: return "gate";
        case OpKind::Expert: return "expert";
        case OpKind::Predict: return "predict";
    }
    return "?";
}

std::string_view to_string(TransferReason r) {
    switch (r) {
        case TransferReason::OnDemand: return "on_demand";
        case TransferReason::Prefetch: return "prefetch";
        case TransferReason::Speculative: return "speculative";
        case TransferReason::Refetch: return "refetch";
        case TransferReason::Bulk: return "bulk";
    }
    return "?";
}

std::string_view to_string(MarkKind k) {
    switch (k) {
        case MarkKind::Gate: return "gate";
        case MarkKind::Sync1: return "sync1";
        case MarkKind::Sync2: return "sync2";
        case MarkKind::ExpertReady: return "expert_ready";
        case MarkKind::Refetch: return "refetch";
        case MarkKind::Fallback: return "prediction_late";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Timeline

namespace {

Stream mark_stream(MarkKind k) {
    switch (k) {
        case MarkKind::Sync2:
        case MarkKind::Refetch: return Stream::Comm;
        case MarkKind::Fallback: return Stream::Predict;
        default: return Stream::Compute;
    }
}

std::string mark_event_kind(MarkKind k) {
    switch (k) {
        case MarkKind::Gate: return "gate";
        case MarkKind::Refetch: return "refetch";
        default: return "sync";
    }
}

bool same_slot(const Slot& a, const Slot& b) {
    return a.phase == b.phase && a.step == b.step && a.layer == b.layer;
}

std::string describe(const Slot& s) {
    std::ostringstream os;
    os << to_string(s.phase) << " step " << s.step << " layer " << s.layer;
    return os.str();
}

// Peak concurrent occupancy; a release and an acquisition at the same instant do
// not overlap.
int sweep_occupancy(const std::vector<Residency>& res) {
    std::vector<std::pair<Nanos, int>> deltas;
    deltas.reserve(res.size() * 2);
    for (const auto& r : res) {
        if (r.release == kUnknownTime) throw SimulationError("cache slot for expert " + std::to_string(r.expert) +
                                                             " at " + describe(r.at) + " was never released");
        deltas.emplace_back(r.start, +1);
        deltas.emplace_back(r.release, -1);
    }
    std::sort(deltas.begin(), deltas.end());
    int cur = 0, peak = 0;
    for (const auto& [t, d] : deltas) {
        cur += d;
        peak = std::max(peak, cur);
    }
    return peak;
}

}  // namespace

std::vector<TimelineEvent> EventTimeline::events() const {
    std::vector<TimelineEvent> out;
    out.reserve(ops.size() * 2 + marks.size());
    for (const auto& op : ops) {
        std::string start_kind, end_kind;
        std::string detail{to_string(op.kind)};
        if (op.kind == OpKind::Transfer) {
            start_kind = "transfer_start";
            end_kind = "transfer_end";
            detail = to_string(op.reason);
        } else if (op.kind == OpKind::Predict) {
            start_kind = "predict_start";
            end_kind = "predict_end";
        } else {
            start_kind = "op_start";
            end_kind = "op_end";
        }
        out.push_back({op.start, op.stream, start_kind, detail, op.at, op.expert, op.seq});
        out.push_back({op.end, op.stream, end_kind, detail, op.at, op.expert, op.seq});
    }
    for (const auto& m : marks)
        out.push_back({m.time, mark_stream(m.kind), mark_event_kind(m.kind), std::string(to_string(m.kind)), m.at,
                       m.expert, m.seq});
    std::stable_sort(out.begin(), out.end(), [](const TimelineEvent& a, const TimelineEvent& b) {
        return std::tie(a.time, a.stream, a.seq) < std::tie(b.time, b.stream, b.seq);
    });
    return out;
}

std::string EventTimeline::to_jsonl() const {
    std::string out;
    for (const auto& e : events()) {
        json j{{"t_ns", e.time},
               {"t_s", to_seconds(e.time)},
               {"stream", to_string(e.stream)},
               {"kind", e.kind},
               {"detail", e.detail},
               {"phase", to_string(e.at.phase)},
               {"step", e.at.step},
               {"layer", e.at.layer}};
        if (e.expert >= 0) j["expert"] = e.expert;
        out += j.dump();
        out += '\n';
    }
    return out;
}

void EventTimeline::verify(int slots) const {
    for (Stream s : {Stream::Comm, Stream::Predict, Stream::Compute}) {
        Nanos last_end = 0;
        const Op* last = nullptr;
        for (const auto& op : ops) {
            if (op.stream != s) continue;
            if (op.end < op.start) throw SimulationError("operation ends before it starts");
            if (last && op.start < last_end)
                throw SimulationError(std::string(to_string(s)) + " stream overlap at " + describe(op.at) + ": " +
                                      std::string(to_string(op.kind)) + " starts before " +
                                      std::string(to_string(last->kind)) + " ends");
            last_end = op.end;
            last = &op;
        }
    }

    std::map<std::tuple<int, int>, int> prefill_transfers;
    for (const auto& op : ops) {
        if (op.kind == OpKind::Transfer && op.at.phase == Phase::Prefill) {
            if (++prefill_transfers[{op.at.layer, op.expert}] > 1)
                throw SimulationError("expert " + std::to_string(op.expert) + " fetched twice in prefill layer " +
                                      std::to_string(op.at.layer));
        }
        if (op.kind != OpKind::Expert) continue;
        if (op.weights_from < 0 || static_cast<std::size_t>(op.weights_from) >= ops.size())
            throw SimulationError("expert compute without a weight transfer at " + describe(op.at));
        const Op& w = ops[static_cast<std::size_t>(op.weights_from)];
        if (w.kind != OpKind::Transfer || w.expert != op.expert || !same_slot(w.at, op.at))
            throw SimulationError("expert " + std::to_string(op.expert) + " at " + describe(op.at) +
                                  " computed with weights of expert " + std::to_string(w.expert) + " at " +
                                  describe(w.at));
        if (w.end > op.start)
            throw SimulationError("expert " + std::to_string(op.expert) + " at " + describe(op.at) +
                                  " computed before its weights arrived");
    }

    const int peak = sweep_occupancy(residency);
    if (peak > slots)
        throw SimulationError("device cache holds " + std::to_string(peak) + " experts, capacity " +
                              std::to_string(slots));
}

int EventTimeline::max_resident() const { return sweep_occupancy(residency); }

// ---------------------------------------------------------------------------
// Device cache

Nanos DeviceExpertCache::available_at(Nanos t) const {
    const auto& res = timeline_->residency;
    std::erase_if(live_, [&](std::size_t i) { return res[i].release <= t; });
    if (static_cast<int>(live_.size()) < slots_) return t;
    std::vector<Nanos> releases;
    releases.reserve(live_.size());
    for (std::size_t i : live_) releases.push_back(res[i].release);
    std::sort(releases.begin(), releases.end());
    const Nanos when = releases[live_.size() - static_cast<std::size_t>(slots_)];
    if (when == kUnknownTime) throw SimulationError("device cache full of experts that are not yet scheduled to leave");
    return when;
}

std::size_t DeviceExpertCache::occupy(Nanos start, Slot at, int expert) {
    if (available_at(start) != start) throw SimulationError("no free cache slot at the requested time");
    timeline_->residency.push_back({start, kUnknownTime, at, expert});
    live_.push_back(timeline_->residency.size() - 1);
    return timeline_->residency.size() - 1;
}

void DeviceExpertCache::release(std::size_t entry, Nanos time) {
    auto& r = timeline_->residency.at(entry);
    if (r.release != kUnknownTime) throw SimulationError("cache slot released twice");
    r.release = std::max(time, r.start);
}

// ---------------------------------------------------------------------------
// Scheduler

StepCosts StepCosts::from(const CostModel& cost, Bytes expert_bytes) {
    StepCosts c;
    c.transfer = to_nanos(cost.transfer_time(expert_bytes));
    c.non_moe = to_nanos(cost.non_moe_compute_per_layer_s);
    c.gate = to_nanos(cost.gate_compute_s);
    c.predict = to_nanos(cost.predictor_latency_s);
    c.expert_base = to_nanos(cost.expert_compute_base_s);
    c.expert_base_s = cost.expert_compute_base_s;
    c.expert_per_token_s = cost.expert_compute_per_token_s;
    return c;
}

Nanos StepCosts::expert(int tokens) const { return to_nanos(expert_base_s + tokens * expert_per_token_s); }

RequestScheduler::RequestScheduler(SchedulerPolicy policy, const ModelConfig& cfg, const CostModel& cost)
    : policy_(policy),
      cfg_(cfg),
      costs_(StepCosts::from(cost, cfg.expert_bytes())),
      cache_(slot_count(policy, cfg), timeline_) {}

void RequestScheduler::mark(MarkKind kind, Nanos time, Slot at, int expert) {
    timeline_.marks.push_back({seq_++, kind, time, at, expert});
}

RequestScheduler::Loaded RequestScheduler::transfer(Nanos issue, Slot at, int expert, TransferReason reason) {
    const Nanos start = cache_.available_at(std::max(issue, comm_free_));
    Op op;
    op.seq = seq_++;
    op.stream = Stream::Comm;
    op.kind = OpKind::Transfer;
    op.start = start;
    op.end = start + costs_.transfer;
    op.at = at;
    op.expert = expert;
    op.reason = reason;
    comm_free_ = op.end;
    timeline_.ops.push_back(op);
    return {timeline_.ops.size() - 1, cache_.occupy(start, at, expert)};
}

Nanos RequestScheduler::compute(OpKind kind, Nanos ready, Slot at, int expert, int tokens, std::int64_t weights) {
    Op op;
    op.seq = seq_++;
    op.stream = Stream::Compute;
    op.kind = kind;
    op.start = std::max(ready, compute_free_);
    switch (kind) {
        case OpKind::NonMoe: op.end = op.start + costs_.non_moe; break;
        case OpKind::Gate: op.end = op.start + costs_.gate; break;
        default: op.end = op.start + costs_.expert(tokens); break;
    }
    op.at = at;
    op.expert = expert;
    op.tokens = tokens;
    op.weights_from = weights;
    compute_free_ = op.end;
    timeline_.ops.push_back(op);
    return op.start;
}

Nanos RequestScheduler::compute_expert(const Loaded& w, Slot at, int expert, int tokens) {
    const Nanos ready = timeline_.ops[w.transfer_op].end;
    const Nanos start = compute(OpKind::Expert, ready, at, expert, tokens, static_cast<std::int64_t>(w.transfer_op));
    cache_.release(w.residency, compute_free_);
    return start;
}

Nanos RequestScheduler::layer_front(Slot at) {
    compute(OpKind::NonMoe, compute_free_, at);
    compute(OpKind::Gate, compute_free_, at);
    mark(MarkKind::Gate, compute_free_, at);
    return compute_free_;
}

namespace {

Slot next_slot(Slot at, int num_layers) {
    if (at.layer + 1 < num_layers) return {at.phase, at.step, at.layer + 1};
    return {Phase::Decode, at.step + 1, 0};
}

}  // namespace

void RequestScheduler::issue_bulk(Slot at) {
    bulk_next_.clear();
    for (int e = 0; e < cfg_.num_experts; ++e) {
        bulk_next_[e] = transfer(0, at, e, TransferReason::Bulk);
    }
}

void RequestScheduler::prefetch_all_layer(Slot at, const std::map<int, int>& tokens_per_expert, bool has_next) {
    if (!bulk_primed_) {
        issue_bulk(at);
        bulk_primed_ = true;
    }
    std::map<int, Loaded> loaded = std::move(bulk_next_);
    bulk_next_.clear();
    const Nanos gate_end = layer_front(at);
    for (const auto& [e, w] : loaded)
        if (!tokens_per_expert.contains(e))
            cache_.release(w.residency, std::max(timeline_.ops[w.transfer_op].end, gate_end));
    for (const auto& [e, n] : tokens_per_expert) compute_expert(loaded.at(e), at, e, n);
    if (has_next) issue_bulk(next_slot(at, cfg_.num_layers));
}

void RequestScheduler::prefill_layer(int layer, const std::map<int, int>& tokens_per_expert, int speculative,
                                     bool has_next_layer) {
    if (layer < 0 || layer >= cfg_.num_layers) throw ValidationError("layer", "out of range");
    const Slot at{Phase::Prefill, -1, layer};

    switch (policy_) {
        case SchedulerPolicy::OnDemand: {
            layer_front(at);
            for (const auto& [e, n] : tokens_per_expert) {
                compute_expert(transfer(compute_free_, at, e, TransferReason::OnDemand), at, e, n);
            }
            return;
        }
        case SchedulerPolicy::PrefetchAll:
            prefetch_all_layer(at, tokens_per_expert, has_next_layer);
            return;
        case SchedulerPolicy::DuoServe:
        case SchedulerPolicy::DuoServeOracle: break;
    }

    std::map<int, Loaded> preloaded;
    if (speculative >= 0) {
        preloaded[speculative] = transfer(compute_free_, at, speculative, TransferReason::Speculative);
    }
    const Nanos gate_end = layer_front(at);

    std::vector<int> order;
    if (speculative >= 0 && tokens_per_expert.contains(speculative)) order.push_back(speculative);
    for (const auto& [e, n] : tokens_per_expert)
        if (e != speculative) order.push_back(e);
    if (speculative >= 0 && !tokens_per_expert.contains(speculative)) {
        const Loaded& w = preloaded.at(speculative);
        cache_.release(w.residency, std::max(timeline_.ops[w.transfer_op].end, gate_end));
    }

    // Transfer i is issued before compute i-1, so a slot wait only ever depends on
    // computes that are already scheduled.
    std::vector<Loaded> w(order.size());
    for (std::size_t i = 0; i <= order.size(); ++i) {
        if (i < order.size()) {
            auto it = preloaded.find(order[i]);
            if (it != preloaded.end()) {
                w[i] = it->second;
            } else {
                w[i] = transfer(gate_end, at, order[i], TransferReason::OnDemand);
            }
        }
        if (i >= 1) {
            const int e = order[i - 1];
            const Nanos start = compute_expert(w[i - 1], at, e, tokens_per_expert.at(e));
            mark(MarkKind::ExpertReady, start, at, e);
        }
    }
}

void RequestScheduler::decode_layer(int step, int layer, const ExpertSet& truth,
                                    const std::optional<ExpertSet>& next_prediction, bool has_next_layer) {
    if (layer < 0 || layer >= cfg_.num_layers) throw ValidationError("layer", "out of range");
    const Slot at{Phase::Decode, step, layer};

    if (policy_ == SchedulerPolicy::OnDemand) {
        layer_front(at);
        for (int e : truth) {
            compute_expert(transfer(compute_free_, at, e, TransferReason::OnDemand), at, e, 1);
        }
        return;
    }
    if (policy_ == SchedulerPolicy::PrefetchAll) {
        std::map<int, int> tokens;
        for (int e : truth) tokens[e] = 1;
        prefetch_all_layer(at, tokens, has_next_layer);
        return;
    }

    const Nanos gate_end = layer_front(at);
    std::map<int, Loaded> preloaded;
    std::vector<int> order;
    const bool predicted = have_prefetch_;
    if (predicted) {
        mark(MarkKind::Sync1, gate_end, at);
        preloaded = std::move(prefetched_);
        std::vector<int> misses;
        for (int e : truth) (preloaded.contains(e) ? order : misses).push_back(e);
        hits_ += static_cast<std::int64_t>(order.size());
        for (auto it = preloaded.begin(); it != preloaded.end();) {
            if (std::find(truth.begin(), truth.end(), it->first) == truth.end()) {
                ++misses_;
                cache_.release(it->second.residency, std::max(timeline_.ops[it->second.transfer_op].end, gate_end));
                it = preloaded.erase(it);
            } else {
                ++it;
            }
        }
        for (int e : misses) {
            mark(MarkKind::Refetch, gate_end, at, e);
            order.push_back(e);
        }
    } else {
        order = truth;
    }
    prefetched_.clear();
    have_prefetch_ = false;

    Nanos first_start = 0, first_end = 0;
    std::vector<Loaded> w(order.size());
    for (std::size_t i = 0; i <= order.size(); ++i) {
        if (i < order.size()) {
            auto it = preloaded.find(order[i]);
            if (it != preloaded.end()) {
                w[i] = it->second;
            } else {
                w[i] = transfer(gate_end, at, order[i], predicted ? TransferReason::Refetch : TransferReason::OnDemand);
                if (predicted) ++refetches_;
            }
        }
        if (i >= 1) {
            const Nanos start = compute_expert(w[i - 1], at, order[i - 1], 1);
            if (i == 1) {
                first_start = start;
                first_end = compute_free_;
            }
        }
    }

    if (!next_prediction || layer + 1 >= cfg_.num_layers) return;

    // Predict layer + 1 alongside the first expert of this layer.
    Op pred;
    pred.seq = seq_++;
    pred.stream = Stream::Predict;
    pred.kind = OpKind::Predict;
    pred.start = std::max(first_start, predict_free_);
    pred.end = pred.start + costs_.predict;
    pred.at = {Phase::Decode, step, layer + 1};
    predict_free_ = pred.end;
    timeline_.ops.push_back(pred);

    const Slot next{Phase::Decode, step, layer + 1};
    const Nanos next_gate_end = compute_free_ + costs_.non_moe + costs_.gate;
    if (pred.end > next_gate_end) {
        // Too late to help: the next layer fetches its true set after the gate.
        ++fallbacks_;
        mark(MarkKind::Fallback, pred.end, next);
        return;
    }
    const Nanos sync2 = std::max(first_end, pred.end);
    mark(MarkKind::Sync2, sync2, next);
    for (int e : *next_prediction) {
        prefetched_[e] = transfer(sync2, next, e, TransferReason::Prefetch);
    }
    have_prefetch_ = true;
}

// ---------------------------------------------------------------------------
// Requests and reports

Bytes compute_peak_memory(SchedulerPolicy policy, const ModelConfig& cfg) {
    Bytes mem = cfg.non_moe_bytes + static_cast<Bytes>(slot_count(policy, cfg)) * cfg.expert_bytes() +
                cfg.kv_reserve_bytes;
    if (uses_predictor(policy)) mem += cfg.predictor_mem_bytes;
    return mem;
}

Bytes gpu_only_memory(const ModelConfig& cfg) { return cfg.total_param_bytes + cfg.kv_reserve_bytes; }

int speculative_prefill_expert(SchedulerPolicy policy, int layer, const std::map<int, int>& activated,
                               const ExpertStats* stats) {
    if (policy == SchedulerPolicy::DuoServeOracle) return activated.empty() ? -1 : activated.begin()->first;
    if (policy != SchedulerPolicy::DuoServe) return -1;
    if (!stats) throw ValidationError("stats", "DuoServe needs popularity statistics for prefill");
    const auto row = stats->popularity.values.row(layer);
    Eigen::Index best = 0;
    for (Eigen::Index e = 1; e < row.size(); ++e)
        if (row(e) > row(best)) best = e;
    return static_cast<int>(best);
}

RequestResult simulate_request(SchedulerPolicy policy, const RequestTraces& request, const ModelConfig& cfg,
                               const CostModel& cost, const SetPredictor* predictor, const ExpertStats* stats) {
    if (policy == SchedulerPolicy::DuoServe && (!predictor || !stats))
        throw ValidationError("predictor", "DuoServe needs a trained predictor and statistics");
    if (request.prefill.empty() || request.decode.empty())
        throw ValidationError("request " + std::to_string(request.request_id),
                              "needs at least one prefill and one decode token");
    const ModelShape shape = ModelShape::of(cfg);
    for (const auto* group : {&request.prefill, &request.decode})
        for (const ActivationTrace* t : *group) validate_trace(*t, shape);
    const int L = cfg.num_layers;
    const SetPredictor oracle = oracle_set_predictor();
    const SetPredictor* source = policy == SchedulerPolicy::DuoServeOracle ? &oracle : predictor;

    RequestScheduler sched(policy, cfg, cost);
    for (int l = 0; l < L; ++l) {
        std::map<int, int> tokens;
        for (const ActivationTrace* t : request.prefill)
            for (int e : t->path.at(static_cast<std::size_t>(l))) ++tokens[e];
        sched.prefill_layer(l, tokens, speculative_prefill_expert(policy, l, tokens, stats));
    }

    RequestMetrics m;
    m.request_id = request.request_id;
    m.ttft_ns = sched.compute_free();
    Nanos prev = m.ttft_ns;
    for (std::size_t s = 0; s < request.decode.size(); ++s) {
        const ActivationTrace& t = *request.decode[s];
        for (int l = 0; l < L; ++l) {
            std::optional<ExpertSet> next;
            if (uses_predictor(policy) && l + 1 < L) next = (*source)(t, l + 1);
            const bool has_next = !(s + 1 == request.decode.size() && l + 1 == L);
            sched.decode_layer(static_cast<int>(s), l, t.path.at(static_cast<std::size_t>(l)), next, has_next);
        }
        m.decode_step_ns.push_back(sched.compute_free() - prev);
        prev = sched.compute_free();
    }
    m.e2e_ns = sched.compute_free();
    m.ttft_s = to_seconds(m.ttft_ns);
    m.e2e_s = to_seconds(m.e2e_ns);
    m.decode_tokens = static_cast<std::int64_t>(request.decode.size());
    const Nanos decode_ns = m.e2e_ns - m.ttft_ns;
    m.throughput_tokens_per_s = decode_ns > 0 ? static_cast<double>(m.decode_tokens) / to_seconds(decode_ns) : 0.0;
    m.prefetch_hits = sched.prefetch_hits();
    m.prefetch_misses = sched.prefetch_misses();
    m.refetch_count = sched.refetch_count();
    m.fallback_count = sched.fallback_count();
    m.peak_mem_bytes = compute_peak_memory(policy, cfg);

    EventTimeline timeline = sched.take_timeline();
    timeline.verify(slot_count(policy, cfg));
    m.max_resident_slots = timeline.max_resident();
    return {std::move(m), std::move(timeline)};
}

std::vector<double> percentiles(std::vector<double> values) {
    std::vector<double> out(101, 0.0);
    if (values.empty()) return out;
    std::sort(values.begin(), values.end());
    const double last = static_cast<double>(values.size() - 1);
    for (int q = 0; q <= 100; ++q) {
        const double pos = last * q / 100.0;
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const std::size_t hi = std::min(lo + 1, values.size() - 1);
        const double frac = pos - static_cast<double>(lo);
        out[static_cast<std::size_t>(q)] = values[lo] + (values[hi] - values[lo]) * frac;
    }
    return out;
}

SimReport build_report(SchedulerPolicy policy, std::vector<RequestMetrics> metrics, const SystemConfig& cfg,
                       std::uint64_t seed) {
    SimReport r;
    r.policy = policy;
    r.seed = seed;
    r.config_digest = config_digest(cfg);
    r.peak_mem_bytes = compute_peak_memory(policy, cfg.model);
    r.gpu_only_bytes = gpu_only_memory(cfg.model);
    std::vector<double> tput;
    for (const auto& m : metrics) {
        r.mean_ttft_s += m.ttft_s;
        r.mean_e2e_s += m.e2e_s;
        r.mean_throughput += m.throughput_tokens_per_s;
        r.prefetch_hits += m.prefetch_hits;
        r.prefetch_misses += m.prefetch_misses;
        r.refetch_count += m.refetch_count;
        tput.push_back(m.throughput_tokens_per_s);
    }
    if (!metrics.empty()) {
        const auto n = static_cast<double>(metrics.size());
        r.mean_ttft_s /= n;
        r.mean_e2e_s /= n;
        r.mean_throughput /= n;
    }
    r.throughput_cdf = percentiles(std::move(tput));
    r.requests = std::move(metrics);
    return r;
}

json to_json(const SimReport& r) {
    json reqs = json::array();
    for (const auto& m : r.requests)
        reqs.push_back({{"request_id", m.request_id},
                        {"ttft_s", m.ttft_s},
                        {"e2e_s", m.e2e_s},
                        {"ttft_ns", m.ttft_ns},
                        {"e2e_ns", m.e2e_ns},
                        {"decode_tokens", m.decode_tokens},
                        {"throughput_tokens_per_s", m.throughput_tokens_per_s},
                        {"peak_mem_bytes", m.peak_mem_bytes},
                        {"max_resident_slots", m.max_resident_slots},
                        {"prefetch_hits", m.prefetch_hits},
                        {"prefetch_misses", m.prefetch_misses},
                        {"refetch_count", m.refetch_count},
                        {"prediction_late_count", m.fallback_count}});
    return json{{"schema_version", 1},
                {"policy", to_string(r.policy)},
                {"seed", r.seed},
                {"config_digest", r.config_digest},
                {"n_requests", r.requests.size()},
                {"mean_ttft_s", r.mean_ttft_s},
                {"mean_e2e_s", r.mean_e2e_s},
                {"mean_throughput_tokens_per_s", r.mean_throughput},
                {"throughput_cdf", r.throughput_cdf},
                {"prefetch_hits", r.prefetch_hits},
                {"prefetch_misses", r.prefetch_misses},
                {"refetch_count", r.refetch_count},
                {"peak_mem_bytes", r.peak_mem_bytes},
                {"gpu_only_bytes", r.gpu_only_bytes},
                {"requests", std::move(reqs)}};
}

std::vector<SimReport> run_experiment(const std::vector<SchedulerPolicy>& policies, const TraceDataset& ds,
                                      const SystemConfig& cfg, const SetPredictor* predictor,
                                      const ExpertStats* stats, std::uint64_t seed) {
    if (ds.model != ModelShape::of(cfg.model))
        throw ValidationError("traces", "model shape does not match the configuration");
    const std::vector<RequestTraces> requests = group_by_request(ds);
    std::vector<SimReport> out;
    for (SchedulerPolicy p : policies) {
        std::vector<RequestMetrics> metrics;
        metrics.reserve(requests.size());
        for (const auto& req : requests)
            metrics.push_back(simulate_request(p, req, cfg.model, cfg.cost, predictor, stats).metrics);
        out.push_back(build_report(p, std::move(metrics), cfg, seed));
    }
    return out;
}

json compare_reports(const std::vector<SimReport>& reports) {
    for (const auto& r : reports) {
        if (r.requests.size() != reports.front().requests.size())
            throw ValidationError("reports", "policies were run on different request sets");
        for (std::size_t i = 0; i < r.requests.size(); ++i)
            if (r.requests[i].request_id != reports.front().requests[i].request_id)
                throw ValidationError("reports", "policies were run on different request sets");
    }

    auto mean_ratio = [](const SimReport& self, const SimReport& other, auto field) {
        double sum = 0.0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < self.requests.size(); ++i) {
            const double mine = field(self.requests[i]);
            if (mine <= 0) continue;
            sum += field(other.requests[i]) / mine;
            ++n;
        }
        return n ? sum / static_cast<double>(n) : 0.0;
    };

    json rows = json::array();
    for (const auto& r : reports) {
        json e2e = json::object(), ttft = json::object();
        for (const auto& o : reports) {
            if (o.policy == r.policy) continue;
            e2e[std::string(to_string(o.policy))] = mean_ratio(r, o, [](const RequestMetrics& m) { return m.e2e_s; });
            ttft[std::string(to_string(o.policy))] =
                mean_ratio(r, o, [](const RequestMetrics& m) { return m.ttft_s; });
        }
        rows.push_back({{"policy", to_string(r.policy)},
                        {"mean_ttft_s", r.mean_ttft_s},
                        {"mean_e2e_s", r.mean_e2e_s},
                        {"mean_throughput_tokens_per_s", r.mean_throughput},
                        {"p50_throughput_tokens_per_s", r.throughput_cdf.empty() ? 0.0 : r.throughput_cdf[50]},
                        {"peak_mem_bytes", r.peak_mem_bytes},
                        {"gpu_only_bytes", r.gpu_only_bytes},
                        {"prefetch_hits", r.prefetch_hits},
                        {"prefetch_misses", r.prefetch_misses},
                        {"refetch_count", r.refetch_count},
                        {"e2e_speedup_vs", std::move(e2e)},
                        {"ttft_speedup_vs", std::move(ttft)}});
    }

    json per_request = json::array();
    if (!reports.empty()) {
        for (std::size_t i = 0; i < reports.front().requests.size(); ++i) {
            json e2e = json::object(), ttft = json::object();
            for (const auto& r : reports) {
                e2e[std::string(to_string(r.policy))] = r.requests[i].e2e_s;
                ttft[std::string(to_string(r.policy))] = r.requests[i].ttft_s;
            }
            per_request.push_back(
                {{"request_id", reports.front().requests[i].request_id}, {"e2e_s", e2e}, {"ttft_s", ttft}});
        }
    }
    return json{{"schema_version", 1}, {"policies", std::move(rows)}, {"per_request", std::move(per_request)}};
}

std::string format_comparison(const std::vector<SimReport>& reports) {
    std::ostringstream os;
    char line[256];
    std::snprintf(line, sizeof line, "%-12s %12s %12s %14s %12s\n", "policy", "ttft_ms", "e2e_ms", "tokens/s",
                  "mem_GB");
    os << line;
    for (const auto& r : reports) {
        std::snprintf(line, sizeof line, "%-12s %12.3f %12.3f %14.2f %12.3f\n", std::string(to_string(r.policy)).c_str(),
                      r.mean_ttft_s * 1e3, r.mean_e2e_s * 1e3, r.mean_throughput,
                      static_cast<double>(r.peak_mem_bytes) / 1e9);
        os << line;
    }
    if (!reports.empty())
        os << "gpu-only memory: " << static_cast<double>(reports.front().gpu_only_bytes) / 1e9 << " GB\n";
    return os.str();
}

}  // namespace moesim
