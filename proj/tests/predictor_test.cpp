#include <gtest/gtest.h>

#include <cmath>

#include "moesim/error.hpp"
#include "moesim/predictor.hpp"
#include "moesim/stats.hpp"
#include "oracles/mlp_oracle.hpp"
#include "support.hpp"

using namespace moesim;
using namespace moesim::testing;

namespace {

TrainHyper small_hyper(std::uint64_t seed = 3) {
    TrainHyper h;
    h.hidden = test_hidden_widths();
    h.epochs = 3;
    h.batch_size = 32;
    h.seed = seed;
    return h;
}

TraceDataset synthetic(int requests, std::uint64_t seed, double alpha = 0.8, double noise = 0.1) {
    ModelConfig cfg = toy_model();
    cfg.num_experts = 8;
    cfg.num_layers = 6;
    cfg.total_param_bytes = 1000;
    const auto params = synthesize_generator_params(cfg, seed, alpha, noise);
    return generate_traces(params, cfg, requests, 12, 2);
}

}  // namespace

TEST(Input, ToyHistoryAndFeatures) {
    const TraceDataset ds = toy_dataset();
    const ExpertStats stats = build_stats(ds);
    const InputLayout layout = InputLayout::of(ds.model);
    EXPECT_EQ(layout.size(), 6 + 4 + 4 + 1);
    const StateVector s = construct_input(ds.traces[0], 1, stats.popularity, stats.affinity, layout);
    EXPECT_EQ(s.history, (std::vector<int>{1, 2, 0, 0, 0, 0}));
    EXPECT_EQ(s.popularity, stats.popularity.values.row(1).transpose());
    // Mean of affinity rows 0 and 1 from the layer 0 -> 1 matrix.
    EXPECT_NEAR(s.affinity(2), 0.5, 1e-12);
    EXPECT_NEAR(s.affinity(3), 0.5, 1e-12);
    EXPECT_NEAR(s.layer_pos, 1.0 / 3.0, 1e-12);

    const Eigen::VectorXd f = s.features(4);
    EXPECT_DOUBLE_EQ(f(0), 0.25);
    EXPECT_DOUBLE_EQ(f(1), 0.5);
    EXPECT_DOUBLE_EQ(f(f.size() - 1), 1.0 / 3.0);

    const StateVector last = construct_input(ds.traces[0], 3, stats.popularity, stats.affinity, layout);
    EXPECT_EQ(last.history, (std::vector<int>{1, 2, 3, 4, 1, 3}));
}

TEST(Input, ConcatLayout) {
    const TraceDataset ds = toy_dataset();
    const ExpertStats stats = build_stats(ds);
    const InputLayout layout = InputLayout::of(ds.model, AffinityInput::Concat);
    const StateVector s = construct_input(ds.traces[1], 2, stats.popularity, stats.affinity, layout);
    ASSERT_EQ(s.affinity.size(), 8);
    EXPECT_EQ(s.affinity.head(4), stats.affinity.values[1].row(2).transpose());
    EXPECT_EQ(s.affinity.tail(4), stats.affinity.values[1].row(3).transpose());
}

TEST(Input, LayerZeroIsRejected) {
    const TraceDataset ds = toy_dataset();
    const ExpertStats stats = build_stats(ds);
    EXPECT_THROW(construct_input(ds.traces[0], 0, stats.popularity, stats.affinity, InputLayout::of(ds.model)),
                 ValidationError);
    EXPECT_THROW(construct_input(ds.traces[0], 4, stats.popularity, stats.affinity, InputLayout::of(ds.model)),
                 ValidationError);
}

TEST(Mlp, ZeroNetworkGivesOneHalf) {
    ExpertMlp net(5, {4, 3}, 4, 0.0, 1);
    for (auto& p : net.parameters()) p.setZero();
    net.eval();
    const Eigen::MatrixXd out = net.predict_proba(Eigen::MatrixXd::Random(5, 7));
    EXPECT_LE((out.array() - 0.5).abs().maxCoeff(), 1e-15);
}

TEST(Mlp, ForwardMatchesScalarLoops) {
    Rng rng(12);
    ExpertMlp net(9, {16, 8, 4}, 5, 0.1, 77);
    // Give batch-norm non-trivial running statistics.
    for (auto& m : net.running_mean()) m = Eigen::VectorXd::Random(m.size()) * 0.3;
    for (auto& v : net.running_var()) v = Eigen::VectorXd::Random(v.size()).cwiseAbs() + Eigen::VectorXd::Ones(v.size());
    for (int h = 0; h < net.num_hidden(); ++h) net.bn_gamma(h).setRandom();
    net.eval();
    Eigen::MatrixXd x(9, 6);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1, 1);
    const Eigen::MatrixXd p = net.predict_proba(x);
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        std::vector<double> col(x.col(c).data(), x.col(c).data() + x.rows());
        const auto ref = oracle::naive_forward(net, col);
        for (Eigen::Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p(r, c), ref[static_cast<std::size_t>(r)], 1e-6);
    }
}

TEST(Loss, AnalyticValue) {
    Eigen::MatrixXd p(2, 1), y(2, 1);
    p << 0.9, 0.2;
    y << 1, 0;
    EXPECT_NEAR(bce_loss(p, y), -std::log(0.9) - std::log(0.8), 1e-12);
}

TEST(Loss, MatchesOracleAndClamps) {
    Rng rng(4);
    Eigen::MatrixXd p(6, 10), y(6, 10);
    std::vector<std::vector<double>> pv(10, std::vector<double>(6)), yv(10, std::vector<double>(6));
    for (int c = 0; c < 10; ++c)
        for (int r = 0; r < 6; ++r) {
            p(r, c) = pv[c][r] = (r == 0 && c == 0) ? 0.0 : rng.uniform();
            y(r, c) = yv[c][r] = rng.below(2) ? 1.0 : 0.0;
        }
    y(0, 0) = yv[0][0] = 1.0;  // log(0) must be clamped
    const double loss = bce_loss(p, y);
    EXPECT_TRUE(std::isfinite(loss));
    EXPECT_NEAR(loss, oracle::naive_bce(pv, yv), 1e-9);
}

TEST(TopK, TiesGoToLowerIndex) {
    Eigen::VectorXd s(5);
    s << 0.3, 0.7, 0.7, 0.1, 0.7;
    EXPECT_EQ(predict_topk(s, 2), (ExpertSet{1, 2}));
    s.setConstant(0.5);
    EXPECT_EQ(predict_topk(s, 3), (ExpertSet{0, 1, 2}));
}

TEST(TopK, InvariantUnderMonotoneTransform) {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        Eigen::VectorXd s(8);
        for (int i = 0; i < 8; ++i) s(i) = rng.uniform(-3, 3);
        const Eigen::VectorXd t = s.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
        EXPECT_EQ(predict_topk(s, 3), predict_topk(t, 3));
        EXPECT_EQ(predict_topk(s, 3).size(), 3u);
    }
}

TEST(Gradient, MatchesFiniteDifferences) {
    Rng rng(31);
    ExpertMlp net(7, {6, 5}, 4, 0.0, 9);
    Eigen::MatrixXd x(7, 12), y(4, 12);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1, 1);
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = rng.below(2) ? 1.0 : 0.0;
    const GradientCheckResult r = gradient_check(net, x, y, 1e-5);
    EXPECT_GT(r.checked, r.skipped_kinks);
    EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(Serialization, RoundTripIsBitwise) {
    const TraceDataset ds = synthetic(6, 1);
    const ExpertStats stats = build_stats(ds, true);
    auto [p, report] = train(ds, stats, small_hyper());
    p.metadata = {{"note", "x"}};
    TempDir dir;
    save_predictor(p, dir / "m.bin");
    const ExpertPredictor back = load_predictor(dir / "m.bin");
    EXPECT_EQ(serialize_predictor(back), serialize_predictor(p));
    EXPECT_EQ(back.layout, p.layout);
    EXPECT_EQ(back.metadata, p.metadata);
    const auto sample = build_samples(ds, stats, p.layout, false);
    EXPECT_EQ(back.net.predict_proba(sample.features), p.net.predict_proba(sample.features));
}

TEST(Serialization, RejectsGarbage) {
    EXPECT_THROW(deserialize_predictor("not a model"), SchemaError);
    const TraceDataset ds = toy_dataset();
    const std::string bytes = serialize_predictor(init_predictor(ds.model, small_hyper()));
    EXPECT_THROW(deserialize_predictor(std::string_view(bytes).substr(0, bytes.size() - 3)), SchemaError);
    EXPECT_THROW(deserialize_predictor(bytes + "x"), SchemaError);
}

TEST(Training, DeterministicForFixedSeed) {
    const TraceDataset ds = synthetic(8, 2);
    const ExpertStats stats = build_stats(ds, true);
    auto [a, ra] = train(ds, stats, small_hyper(5));
    auto [b, rb] = train(ds, stats, small_hyper(5));
    EXPECT_EQ(serialize_predictor(a), serialize_predictor(b));
    EXPECT_EQ(ra.epoch_loss, rb.epoch_loss);
    auto [c, rc] = train(ds, stats, small_hyper(6));
    EXPECT_NE(serialize_predictor(a), serialize_predictor(c));
}

TEST(Training, ZeroEpochsIsUntrainedNetwork) {
    const TraceDataset ds = synthetic(4, 3);
    const ExpertStats stats = build_stats(ds, true);
    TrainHyper h = small_hyper(7);
    h.epochs = 0;
    auto [p, report] = train(ds, stats, h);
    EXPECT_TRUE(report.epoch_loss.empty());
    EXPECT_EQ(serialize_predictor(p), serialize_predictor(init_predictor(ds.model, h)));
}

TEST(Training, LossDecreases) {
    const TraceDataset ds = synthetic(30, 4, 1.0, 0.0);
    const ExpertStats stats = build_stats(ds, true);
    TrainHyper h = small_hyper(1);
    h.hidden = {64, 32};
    h.epochs = 15;
    auto [p, report] = train(ds, stats, h);
    EXPECT_LT(report.epoch_loss.back(), report.initial_loss);
    EXPECT_LT(report.epoch_loss.back(), report.epoch_loss.front());
}

TEST(Training, ExplodingLearningRateIsNumericError) {
    const TraceDataset ds = synthetic(8, 5);
    const ExpertStats stats = build_stats(ds, true);
    TrainHyper h = small_hyper(1);
    h.learning_rate = 1e300;
    h.epochs = 5;
    EXPECT_THROW(train(ds, stats, h), NumericError);
}

TEST(Evaluate, OracleIsPerfect) {
    const TraceDataset ds = synthetic(5, 6);
    const HitRateReport r = evaluate(oracle_set_predictor(), ds);
    EXPECT_EQ(r.topk_hit_rate, 1.0);
    EXPECT_EQ(r.at_least_one_rate, 1.0);
    EXPECT_EQ(r.n_evaluated, 5 * 12 * 5);
}

TEST(Evaluate, ComplementIsNeverRight) {
    const TraceDataset ds = toy_dataset();
    const SetPredictor complement = [](const ActivationTrace& t, int l) {
        ExpertSet out;
        for (int e = 0; e < 4; ++e)
            if (std::find(t.path[l].begin(), t.path[l].end(), e) == t.path[l].end()) out.push_back(e);
        return out;
    };
    const HitRateReport r = evaluate(complement, ds);
    EXPECT_EQ(r.topk_hit_rate, 0.0);
    EXPECT_EQ(r.at_least_one_rate, 0.0);
}

TEST(Evaluate, RandomGuessMatchesCombinatorics) {
    const TraceDataset ds = synthetic(200, 7);
    Rng rng(3);
    const SetPredictor guess = [&rng](const ActivationTrace&, int) { return random_set(rng, 8, 2); };
    const HitRateReport r = evaluate(guess, ds);
    EXPECT_NEAR(r.at_least_one_rate, oracle::random_guess_at_least_one(8, 2), 0.02);
    EXPECT_NEAR(r.topk_hit_rate, 1.0 / oracle::binomial(8, 2), 0.01);
}

TEST(Evaluate, BatchedMatchesPerSample) {
    const TraceDataset ds = synthetic(6, 8);
    const ExpertStats stats = build_stats(ds, true);
    auto [p, report] = train(ds, stats, small_hyper());
    const HitRateReport batched = evaluate(p, ds, stats);
    const HitRateReport single = evaluate(mlp_set_predictor(p, stats), ds);
    EXPECT_EQ(batched.topk_hit_rate, single.topk_hit_rate);
    EXPECT_EQ(batched.at_least_one_rate, single.at_least_one_rate);
    const SetPredictor pre = precomputed_set_predictor(p, stats, ds);
    const SetPredictor direct = mlp_set_predictor(p, stats);
    for (const auto& t : ds.traces)
        if (t.phase == Phase::Decode)
            for (int l = 1; l < 6; ++l) EXPECT_EQ(pre(t, l), direct(t, l));
}
