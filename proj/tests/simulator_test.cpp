#include <gtest/gtest.h>

#include <numeric>

#include "fixtures.hpp"
#include "moesim/config.hpp"
#include "moesim/error.hpp"
#include "moesim/simulator.hpp"
#include "moesim/stats.hpp"
#include "support.hpp"

using namespace moesim;
using namespace moesim::testing;
using fixtures::kMs;

namespace {

const SchedulerPolicy kAll[] = {SchedulerPolicy::OnDemand, SchedulerPolicy::PrefetchAll, SchedulerPolicy::DuoServe,
                                SchedulerPolicy::DuoServeOracle};

struct Workload {
    SystemConfig cfg;
    TraceDataset ds;
    ExpertStats stats;
};

Workload workload(const std::string& preset_name, int requests, int decode, int prefill, std::uint64_t seed) {
    Workload w;
    w.cfg = load_config(preset(preset_name));
    const auto params = synthesize_generator_params(w.cfg.model, seed, 0.8);
    w.ds = generate_traces(params, w.cfg.model, requests, decode, prefill);
    w.stats = build_stats(w.ds, true);
    return w;
}

}  // namespace

TEST(Fixture, PrefillLinkBound) {
    EventTimeline t;
    EXPECT_EQ(fixtures::prefill_block(SchedulerPolicy::DuoServe, 10, 2, &t), 32 * kMs);
    // The speculative transfer overlaps the 12 ms non-MoE block.
    EXPECT_EQ(t.ops.front().kind, OpKind::Transfer);
    EXPECT_EQ(t.ops.front().reason, TransferReason::Speculative);
    EXPECT_EQ(t.ops.front().end, 10 * kMs);
    EXPECT_NO_THROW(t.verify(4));
}

TEST(Fixture, PrefillOnDemand) { EXPECT_EQ(fixtures::prefill_block(SchedulerPolicy::OnDemand, 10, 2), 48 * kMs); }

TEST(Fixture, PrefillComputeBound) {
    EventTimeline t;
    EXPECT_EQ(fixtures::prefill_block(SchedulerPolicy::DuoServe, 2, 10, &t), 40 * kMs);
    // Every expert compute starts as soon as the previous one ends: transfers are hidden.
    Nanos prev_end = -1;
    for (const auto& op : t.ops) {
        if (op.kind != OpKind::Expert) continue;
        if (prev_end >= 0) EXPECT_EQ(op.start, prev_end);
        prev_end = op.end;
    }
}

TEST(Fixture, DecodeFullHit) {
    std::int64_t refetches = -1;
    EXPECT_EQ(fixtures::decode_layer_time(fixtures::DecodeCase::FullHit, &refetches), 20 * kMs);
    EXPECT_EQ(refetches, 0);
}

TEST(Fixture, DecodeOneMiss) {
    std::int64_t refetches = -1;
    EventTimeline t;
    EXPECT_EQ(fixtures::decode_layer_time(fixtures::DecodeCase::OneMiss, &refetches, &t), 30 * kMs);
    EXPECT_EQ(refetches, 1);
    EXPECT_NO_THROW(t.verify(4));
}

TEST(Fixture, DecodeOnDemandSitsBetween) {
    const Nanos hit = fixtures::decode_layer_time(fixtures::DecodeCase::FullHit);
    const Nanos miss = fixtures::decode_layer_time(fixtures::DecodeCase::OneMiss);
    const Nanos od = fixtures::decode_layer_time(fixtures::DecodeCase::OnDemand);
    EXPECT_EQ(od, 25 * kMs);
    EXPECT_LT(hit, od);
    EXPECT_GT(miss, od);
}

TEST(Fixture, SyncPointsAreMarked) {
    EventTimeline t;
    fixtures::decode_layer_time(fixtures::DecodeCase::OneMiss, nullptr, &t);
    int sync1 = 0, sync2 = 0, refetch = 0;
    for (const auto& m : t.marks) {
        sync1 += m.kind == MarkKind::Sync1;
        sync2 += m.kind == MarkKind::Sync2;
        refetch += m.kind == MarkKind::Refetch;
    }
    EXPECT_EQ(sync1, 3);  // layers 1..3
    EXPECT_EQ(sync2, 3);
    EXPECT_EQ(refetch, 1);
}

TEST(Simulate, InvariantsOnRandomRequests) {
    const Workload w = workload("toy-4x2", 20, 6, 3, 4);
    const SetPredictor pop = popularity_set_predictor(w.stats);
    for (const auto& req : group_by_request(w.ds))
        for (SchedulerPolicy p : kAll) {
            const RequestResult r = simulate_request(p, req, w.cfg.model, w.cfg.cost, &pop, &w.stats);
            EXPECT_NO_THROW(r.timeline.verify(slot_count(p, w.cfg.model)));
            EXPECT_LE(r.metrics.max_resident_slots, slot_count(p, w.cfg.model));
            EXPECT_LE(r.metrics.ttft_s, r.metrics.e2e_s);
            EXPECT_GT(r.metrics.throughput_tokens_per_s, 0.0);
            const Nanos steps =
                std::accumulate(r.metrics.decode_step_ns.begin(), r.metrics.decode_step_ns.end(), Nanos{0});
            EXPECT_EQ(r.metrics.e2e_ns, r.metrics.ttft_ns + steps);
            const auto events = r.timeline.events();
            for (std::size_t i = 1; i < events.size(); ++i) EXPECT_LE(events[i - 1].time, events[i].time);
        }
}

TEST(Simulate, PredictedSlotsAreHitsOrMisses) {
    const Workload w = workload("toy-4x2", 10, 8, 2, 5);
    const SetPredictor pop = popularity_set_predictor(w.stats);
    const int L = w.cfg.model.num_layers, k = w.cfg.model.top_k;
    for (const auto& req : group_by_request(w.ds)) {
        const auto m = simulate_request(SchedulerPolicy::DuoServe, req, w.cfg.model, w.cfg.cost, &pop, &w.stats).metrics;
        const std::int64_t predicted = static_cast<std::int64_t>(req.decode.size()) * (L - 1) - m.fallback_count;
        EXPECT_EQ(m.prefetch_hits + m.prefetch_misses, predicted * k);
        EXPECT_EQ(m.refetch_count, m.prefetch_misses);
    }
}

TEST(Simulate, OracleNeverLosesToOnDemand) {
    const Workload w = workload("mixtral-8x7b", 100, 6, 4, 6);
    for (const auto& req : group_by_request(w.ds)) {
        const auto oracle = simulate_request(SchedulerPolicy::DuoServeOracle, req, w.cfg.model, w.cfg.cost, nullptr,
                                             nullptr).metrics;
        const auto od =
            simulate_request(SchedulerPolicy::OnDemand, req, w.cfg.model, w.cfg.cost, nullptr, nullptr).metrics;
        EXPECT_LE(oracle.e2e_ns, od.e2e_ns) << "request " << req.request_id;
        EXPECT_EQ(oracle.prefetch_misses, 0);
    }
}

TEST(Simulate, MoreBandwidthNeverHurts) {
    const Workload w = workload("toy-4x2", 15, 6, 3, 7);
    const SetPredictor pop = popularity_set_predictor(w.stats);
    for (const auto& req : group_by_request(w.ds))
        for (SchedulerPolicy p : kAll) {
            Nanos prev = std::numeric_limits<Nanos>::max();
            for (double bw : {100.0, 250.0, 500.0, 1000.0, 4000.0}) {
                CostModel c = w.cfg.cost;
                c.link_bandwidth_bytes_per_s = bw;
                const Nanos e2e = simulate_request(p, req, w.cfg.model, c, &pop, &w.stats).metrics.e2e_ns;
                EXPECT_LE(e2e, prev) << to_string(p) << " request " << req.request_id << " bandwidth " << bw;
                prev = e2e;
            }
        }
}

TEST(Simulate, DeterministicTimeline) {
    const Workload w = workload("toy-4x2", 2, 4, 2, 8);
    const SetPredictor pop = popularity_set_predictor(w.stats);
    const auto req = group_by_request(w.ds).front();
    const auto a = simulate_request(SchedulerPolicy::DuoServe, req, w.cfg.model, w.cfg.cost, &pop, &w.stats);
    const auto b = simulate_request(SchedulerPolicy::DuoServe, req, w.cfg.model, w.cfg.cost, &pop, &w.stats);
    EXPECT_EQ(a.timeline.to_jsonl(), b.timeline.to_jsonl());
    EXPECT_FALSE(a.timeline.to_jsonl().empty());
}

TEST(Simulate, RejectsBadRequests) {
    const Workload w = workload("toy-4x2", 1, 2, 2, 9);
    RequestTraces req = group_by_request(w.ds).front();
    RequestTraces no_decode = req;
    no_decode.decode.clear();
    EXPECT_THROW(simulate_request(SchedulerPolicy::OnDemand, no_decode, w.cfg.model, w.cfg.cost, nullptr, nullptr),
                 ValidationError);
    EXPECT_THROW(simulate_request(SchedulerPolicy::DuoServe, req, w.cfg.model, w.cfg.cost, nullptr, &w.stats),
                 ValidationError);
    ModelConfig other = w.cfg.model;
    other.num_layers = 5;
    other.total_param_bytes = 44;
    EXPECT_THROW(simulate_request(SchedulerPolicy::OnDemand, req, other, w.cfg.cost, nullptr, nullptr), ValidationError);
}

TEST(Timeline, VerifyCatchesOverlapAndMissingWeights) {
    EventTimeline t;
    Op a;
    a.stream = Stream::Compute;
    a.kind = OpKind::NonMoe;
    a.start = 0;
    a.end = 10;
    Op b = a;
    b.start = 5;
    b.end = 12;
    t.ops = {a, b};
    EXPECT_THROW(t.verify(1), SimulationError);

    EventTimeline u;
    Op e;
    e.stream = Stream::Compute;
    e.kind = OpKind::Expert;
    e.expert = 1;
    e.start = 0;
    e.end = 3;
    u.ops = {e};
    EXPECT_THROW(u.verify(1), SimulationError);

    EventTimeline v;
    v.residency = {{0, 10, {}, 0}, {5, 15, {}, 1}};
    EXPECT_EQ(v.max_resident(), 2);
    EXPECT_THROW(v.verify(1), SimulationError);
    EXPECT_NO_THROW(v.verify(2));
}

TEST(Memory, Mixtral8x7bDuoServe) {
    const SystemConfig cfg = load_config(preset("mixtral-8x7b"));
    const double gb = static_cast<double>(compute_peak_memory(SchedulerPolicy::DuoServe, cfg.model)) / 1e9;
    EXPECT_NEAR(gb, 3.91, 3.91 * 0.03);
    EXPECT_LE(gb / (static_cast<double>(gpu_only_memory(cfg.model)) / 1e9), 0.16);
}

TEST(Memory, OrderingOnBothPresets) {
    for (const char* name : {"mixtral-8x7b", "mixtral-8x22b"}) {
        const ModelConfig m = load_config(preset(name)).model;
        const Bytes od = compute_peak_memory(SchedulerPolicy::OnDemand, m);
        const Bytes duo = compute_peak_memory(SchedulerPolicy::DuoServe, m);
        const Bytes all = compute_peak_memory(SchedulerPolicy::PrefetchAll, m);
        EXPECT_LT(od, duo) << name;
        EXPECT_LT(duo, all) << name;
        EXPECT_LT(all, gpu_only_memory(m)) << name;
    }
}

TEST(Memory, ToyExact) {
    const ModelConfig m = toy_model();
    EXPECT_EQ(compute_peak_memory(SchedulerPolicy::DuoServe, m), 4u + 4u * 2u + 1u + 2u);
    EXPECT_EQ(compute_peak_memory(SchedulerPolicy::OnDemand, m), 4u + 2u * 2u + 2u);
    EXPECT_EQ(compute_peak_memory(SchedulerPolicy::PrefetchAll, m), 4u + 8u * 2u + 2u);
    EXPECT_EQ(gpu_only_memory(m), 38u);
}

TEST(Report, ComparisonRatios) {
    const Workload w = workload("toy-4x2", 5, 4, 2, 10);
    const SetPredictor pop = popularity_set_predictor(w.stats);
    const auto reports = run_experiment({SchedulerPolicy::OnDemand, SchedulerPolicy::DuoServeOracle}, w.ds, w.cfg,
                                        &pop, &w.stats, 1);
    ASSERT_EQ(reports.size(), 2u);
    EXPECT_EQ(reports[0].throughput_cdf.size(), 101u);
    const auto j = compare_reports(reports);
    double expected = 0.0;
    for (std::size_t i = 0; i < 5; ++i) expected += reports[0].requests[i].e2e_s / reports[1].requests[i].e2e_s;
    EXPECT_NEAR(j["policies"][1]["e2e_speedup_vs"]["ondemand"].get<double>(), expected / 5, 1e-12);
    EXPECT_EQ(to_json(reports[0])["schema_version"], 1);
}

TEST(Report, Percentiles) {
    const auto p = percentiles({4.0, 1.0, 3.0, 2.0, 5.0});
    EXPECT_EQ(p[0], 1.0);
    EXPECT_EQ(p[50], 3.0);
    EXPECT_EQ(p[100], 5.0);
    EXPECT_NEAR(p[25], 2.0, 1e-12);
    EXPECT_NEAR(p[10], 1.4, 1e-12);
}
