#pragma once

// Hand-traced scheduling scenarios with round millisecond costs. Transfers cost
// 1 ms latency plus 9e6 bytes over the link; expert compute is base + 1 ms per token.

#include <map>
#include <optional>

#include "moesim/simulator.hpp"

namespace moesim::fixtures {

inline constexpr Nanos kMs = 1'000'000;

// 2 layers x 4 experts (k = 2), 9e6 bytes per expert.
inline ModelConfig model(int layers = 2, int experts = 4) {
    ModelConfig m;
    m.name = "fixture";
    m.num_layers = layers;
    m.num_experts = experts;
    m.top_k = 2;
    m.non_moe_bytes = 1'000'000;
    m.total_param_bytes = m.non_moe_bytes + static_cast<Bytes>(layers) * static_cast<Bytes>(experts) * 9'000'000;
    m.predictor_mem_bytes = 1;
    m.kv_reserve_bytes = 1;
    return m;
}

// transfer = 1 ms + 9e6 / bandwidth; expert(1 token) = base + 1 ms.
inline CostModel cost(double transfer_ms, double compute_ms, double non_moe_ms, double gate_ms) {
    CostModel c;
    c.link_latency_s = 1e-3;
    c.link_bandwidth_bytes_per_s = 9e6 / ((transfer_ms - 1.0) * 1e-3);
    c.expert_compute_per_token_s = 1e-3;
    c.expert_compute_base_s = (compute_ms - 1.0) * 1e-3;
    c.non_moe_compute_per_layer_s = non_moe_ms * 1e-3;
    c.gate_compute_s = gate_ms * 1e-3;
    c.predictor_latency_s = 0.6e-3;
    return c;
}

// MoE block of one prefill layer with four activated experts (one token each):
// time from the gate's end to the last expert compute's end. The non-MoE block
// (12 ms) is longer than a transfer so DuoServe's speculative fetch is hidden.
inline Nanos prefill_block(SchedulerPolicy policy, double transfer_ms, double compute_ms,
                           EventTimeline* out = nullptr) {
    RequestScheduler s(policy, model(), cost(transfer_ms, compute_ms, 12.0, 0.5));
    const std::map<int, int> tokens{{0, 1}, {1, 1}, {2, 1}, {3, 1}};
    const bool speculates = policy == SchedulerPolicy::DuoServe || policy == SchedulerPolicy::DuoServeOracle;
    s.prefill_layer(0, tokens, speculates ? 0 : -1, false);
    Nanos gate_end = 0;
    for (const auto& m : s.timeline().marks)
        if (m.kind == MarkKind::Gate) gate_end = m.time;
    const Nanos block = s.compute_free() - gate_end;
    if (out) *out = s.timeline();
    return block;
}

enum class DecodeCase { FullHit, OneMiss, OnDemand };

// Per-layer decode time (T = 10 ms, C = 2 ms, non-MoE + gate = 1 ms, k = 2) of
// layer 2 in a four-layer token. Layers 0 and 1 warm the pipeline with correct
// predictions; in the miss case the prediction for layer 2 has one wrong expert.
inline Nanos decode_layer_time(DecodeCase c, std::int64_t* refetches = nullptr, EventTimeline* out = nullptr) {
    const SchedulerPolicy policy = c == DecodeCase::OnDemand ? SchedulerPolicy::OnDemand : SchedulerPolicy::DuoServe;
    RequestScheduler s(policy, model(4, 8), cost(10.0, 2.0, 0.5, 0.5));
    const ExpertSet truth[4] = {{0, 1}, {2, 5}, {3, 6}, {1, 7}};
    const ExpertSet wrong_for_2{3, 4};
    Nanos before = 0, after = 0;
    std::int64_t refetch_before = 0;
    for (int l = 0; l < 4; ++l) {
        std::optional<ExpertSet> next;
        if (policy == SchedulerPolicy::DuoServe && l + 1 < 4)
            next = (c == DecodeCase::OneMiss && l + 1 == 2) ? wrong_for_2 : truth[l + 1];
        if (l == 2) {
            before = s.compute_free();
            refetch_before = s.refetch_count();
        }
        s.decode_layer(0, l, truth[l], next, l + 1 < 4);
        if (l == 2) after = s.compute_free();
    }
    if (refetches) *refetches = s.refetch_count() - refetch_before;
    if (out) *out = s.timeline();
    return after - before;
}

}  // namespace moesim::fixtures
