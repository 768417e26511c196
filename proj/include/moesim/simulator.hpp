#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "moesim/config.hpp"
#include "moesim/predictor.hpp"
#include "moesim/stats.hpp"
#include "moesim/trace.hpp"

namespace moesim {

// Simulated time is integer nanoseconds.
using Nanos = std::int64_t;
inline constexpr Nanos kUnknownTime = std::numeric_limits<Nanos>::max();

Nanos to_nanos(double seconds);
inline double to_seconds(Nanos ns) { return static_cast<double>(ns) * 1e-9; }

// Declaration order is the tie-break priority for simultaneous events.
enum class Stream { Comm = 0, Predict = 1, Compute = 2 };
enum class OpKind { Transfer, NonMoe, Gate, Expert, Predict };
enum class TransferReason { OnDemand, Prefetch, Speculative, Refetch, Bulk };
enum class MarkKind { Gate, Sync1, Sync2, ExpertReady, Refetch, Fallback };

std::string_view to_string(Stream s);
std::string_view to_string(OpKind k);
std::string_view to_string(TransferReason r);
std::string_view to_string(MarkKind k);

// Identifies where in the request an operation belongs. Prefill uses step -1.
struct Slot {
    Phase phase = Phase::Prefill;
    int step = -1;
    int layer = 0;
};

struct Op {
    std::uint64_t seq = 0;
    Stream stream = Stream::Compute;
    OpKind kind = OpKind::NonMoe;
    Nanos start = 0;
    Nanos end = 0;
    Slot at;
    int expert = -1;
    int tokens = 0;
    TransferReason reason = TransferReason::OnDemand;
    std::int64_t weights_from = -1;  // Expert ops: index of the transfer op that loaded the weights
};

struct Mark {
    std::uint64_t seq = 0;
    MarkKind kind = MarkKind::Gate;
    Nanos time = 0;
    Slot at;
    int expert = -1;
};

// Occupancy of one device cache slot, [start, release).
struct Residency {
    Nanos start = 0;
    Nanos release = kUnknownTime;
    Slot at;
    int expert = -1;
};

struct TimelineEvent {
    Nanos time = 0;
    Stream stream = Stream::Compute;
    std::string kind;  // transfer_start/_end, op_start/_end, gate, sync, predict_start/_end, refetch
    std::string detail;
    Slot at;
    int expert = -1;
    std::uint64_t seq = 0;
};

class EventTimeline {
public:
    std::vector<Op> ops;
    std::vector<Mark> marks;
    std::vector<Residency> residency;

    // Events ordered by (time, stream priority, sequence).
    std::vector<TimelineEvent> events() const;
    std::string to_jsonl() const;

    // Throws SimulationError on a broken invariant: stream overlap, computing with
    // weights that were not (fully) loaded for that (layer, expert), more than one
    // transfer per expert inside a prefill layer, or cache occupancy above `slots`.
    void verify(int slots) const;
    int max_resident() const;
};

// Cache slots handed out in link order. Acquisition times must be non-decreasing,
// which holds because every transfer goes through the single FIFO link.
class DeviceExpertCache {
public:
    DeviceExpertCache(int slots, EventTimeline& timeline) : slots_(slots), timeline_(&timeline) {}

    int slot_count() const { return slots_; }
    // Earliest time >= t at which a slot is free.
    Nanos available_at(Nanos t) const;
    std::size_t occupy(Nanos start, Slot at, int expert);
    void release(std::size_t entry, Nanos time);

private:
    int slots_;
    EventTimeline* timeline_;
    mutable std::vector<std::size_t> live_;  // entries whose release may lie after the last acquisition
};

// Integer-nanosecond cost table derived from a CostModel and expert size.
struct StepCosts {
    Nanos transfer = 0;
    Nanos non_moe = 0;
    Nanos gate = 0;
    Nanos predict = 0;
    Nanos expert_base = 0;
    double expert_per_token_s = 0.0;
    double expert_base_s = 0.0;

    static StepCosts from(const CostModel& cost, Bytes expert_bytes);
    Nanos expert(int tokens) const;
};

// Schedules one request layer by layer on three serial streams (compute, comm,
// predict) and a fixed-slot device cache.
class RequestScheduler {
public:
    RequestScheduler(SchedulerPolicy policy, const ModelConfig& cfg, const CostModel& cost);

    // `tokens_per_expert` maps each activated expert to its grouped token count.
    // `speculative` is the expert DuoServe fetches during the non-MoE compute,
    // before the gate is known (-1 for none). `has_next_layer` tells PrefetchAll
    // whether to stream another layer.
    void prefill_layer(int layer, const std::map<int, int>& tokens_per_expert, int speculative = -1,
                       bool has_next_layer = true);

    // `truth` is the gate's selection for this layer. `next_prediction` is the
    // predicted set for layer + 1 of the same token (DuoServe only; empty on the
    // last layer).
    void decode_layer(int step, int layer, const ExpertSet& truth, const std::optional<ExpertSet>& next_prediction,
                      bool has_next_layer = true);

    // End of the last compute op so far.
    Nanos compute_free() const { return compute_free_; }
    const EventTimeline& timeline() const { return timeline_; }
    EventTimeline take_timeline() { return std::move(timeline_); }

    std::int64_t prefetch_hits() const { return hits_; }
    std::int64_t prefetch_misses() const { return misses_; }
    std::int64_t refetch_count() const { return refetches_; }
    std::int64_t fallback_count() const { return fallbacks_; }
    SchedulerPolicy policy() const { return policy_; }

private:
    struct Loaded {
        std::size_t transfer_op = 0;
        std::size_t residency = 0;
    };

    // Queues a transfer on the link and takes a cache slot when it starts.
    Loaded transfer(Nanos issue, Slot at, int expert, TransferReason reason);
    Nanos compute(OpKind kind, Nanos ready, Slot at, int expert = -1, int tokens = 0, std::int64_t weights = -1);
    Nanos compute_expert(const Loaded& w, Slot at, int expert, int tokens);
    void mark(MarkKind kind, Nanos time, Slot at, int expert = -1);
    // Non-MoE block then gate; returns gate end.
    Nanos layer_front(Slot at);

    void prefetch_all_layer(Slot at, const std::map<int, int>& tokens_per_expert, bool has_next);
    void issue_bulk(Slot at);

    SchedulerPolicy policy_;
    ModelConfig cfg_;
    StepCosts costs_;
    EventTimeline timeline_;
    DeviceExpertCache cache_;
    Nanos compute_free_ = 0;
    Nanos comm_free_ = 0;
    Nanos predict_free_ = 0;
    std::uint64_t seq_ = 0;

    // DuoServe: prefetched experts for the next layer (issued during the current one).
    std::map<int, Loaded> prefetched_;
    bool have_prefetch_ = false;
    // PrefetchAll: loaded experts of the next layer in sequence.
    std::map<int, Loaded> bulk_next_;
    bool bulk_primed_ = false;

    std::int64_t hits_ = 0;
    std::int64_t misses_ = 0;
    std::int64_t refetches_ = 0;
    std::int64_t fallbacks_ = 0;
};

struct RequestMetrics {
    std::int64_t request_id = 0;
    Nanos ttft_ns = 0;
    Nanos e2e_ns = 0;
    std::vector<Nanos> decode_step_ns;
    double ttft_s = 0.0;
    double e2e_s = 0.0;
    std::int64_t decode_tokens = 0;
    double throughput_tokens_per_s = 0.0;
    Bytes peak_mem_bytes = 0;
    int max_resident_slots = 0;
    std::int64_t prefetch_hits = 0;
    std::int64_t prefetch_misses = 0;
    std::int64_t refetch_count = 0;
    std::int64_t fallback_count = 0;
};

struct RequestResult {
    RequestMetrics metrics;
    EventTimeline timeline;
};

// Provisioned device memory: non-MoE weights + slots * expert size + predictor
// (predicting policies) + KV reserve.
Bytes compute_peak_memory(SchedulerPolicy policy, const ModelConfig& cfg);
Bytes gpu_only_memory(const ModelConfig& cfg);

// Expert DuoServe streams in ahead of the prefill gate: the most popular expert of
// the layer, or for the oracle the lowest-index expert the gate will activate.
int speculative_prefill_expert(SchedulerPolicy policy, int layer, const std::map<int, int>& activated,
                               const ExpertStats* stats);

// Simulates one request (its prefill tokens, then each decode token). DuoServe
// needs `predictor` and `stats`; the oracle predicts the true sets.
RequestResult simulate_request(SchedulerPolicy policy, const RequestTraces& request, const ModelConfig& cfg,
                               const CostModel& cost, const SetPredictor* predictor, const ExpertStats* stats);

struct SimReport {
    SchedulerPolicy policy = SchedulerPolicy::OnDemand;
    std::uint64_t seed = 0;
    std::string config_digest;
    std::vector<RequestMetrics> requests;
    double mean_ttft_s = 0.0;
    double mean_e2e_s = 0.0;
    double mean_throughput = 0.0;
    std::vector<double> throughput_cdf;  // 101 percentiles (0..100) of per-request throughput
    std::int64_t prefetch_hits = 0;
    std::int64_t prefetch_misses = 0;
    std::int64_t refetch_count = 0;
    Bytes peak_mem_bytes = 0;
    Bytes gpu_only_bytes = 0;
};

nlohmann::json to_json(const SimReport& r);

// Linear-interpolated percentiles 0..100 of `values`.
std::vector<double> percentiles(std::vector<double> values);

SimReport build_report(SchedulerPolicy policy, std::vector<RequestMetrics> metrics, const SystemConfig& cfg,
                       std::uint64_t seed);

// Every policy sees the same requests in request-id order.
std::vector<SimReport> run_experiment(const std::vector<SchedulerPolicy>& policies, const TraceDataset& ds,
                                      const SystemConfig& cfg, const SetPredictor* predictor,
                                      const ExpertStats* stats, std::uint64_t seed);

// Per-policy summary plus mean per-request speedups (other / this) for e2e and TTFT.
nlohmann::json compare_reports(const std::vector<SimReport>& reports);
std::string format_comparison(const std::vector<SimReport>& reports);

}  // namespace moesim
