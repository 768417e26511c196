#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "moesim/mlp.hpp"
#include "moesim/stats.hpp"
#include "moesim/trace.hpp"

namespace moesim {

// How the previous layer's affinity rows enter the input: pooled into one M-vector
// (default) or concatenated as k rows.
enum class AffinityInput { Mean, Concat };

std::string_view to_string(AffinityInput a);
AffinityInput parse_affinity_input(std::string_view s);

// Fixed input geometry for a model shape. History holds E_0..E_{L-2} at most,
// so its capacity is (L-1) * k slots.
struct InputLayout {
    int num_layers = 0;
    int num_experts = 0;
    int top_k = 0;
    AffinityInput affinity = AffinityInput::Mean;

    static InputLayout of(const ModelShape& m, AffinityInput a = AffinityInput::Mean) {
        return {m.num_layers, m.num_experts, m.top_k, a};
    }
    int history_layers() const { return num_layers - 1; }
    int history_size() const { return history_layers() * top_k; }
    int affinity_size() const { return affinity == AffinityInput::Mean ? num_experts : top_k * num_experts; }
    int size() const { return history_size() + num_experts + affinity_size() + 1; }
    bool operator==(const InputLayout&) const = default;
};

// Predictor input for one (token, target layer).
struct StateVector {
    std::vector<int> history;         // expert index + 1, zero padded
    Eigen::VectorXd popularity;       // target layer's popularity row
    Eigen::VectorXd affinity;         // pooled (or concatenated) affinity rows from layer l-1
    double layer_pos = 0.0;           // target layer / (L - 1)

    // Network features: history scaled by 1/M, then popularity, affinity, layer_pos.
    Eigen::VectorXd features(int num_experts) const;
};

StateVector construct_input(const ActivationTrace& trace, int target_layer, const PopularityMatrix& pop,
                            const AffinityMatrix& aff, const InputLayout& layout);

// Multi-hot target for one layer.
Eigen::VectorXd multi_hot(const ExpertSet& experts, int num_experts);

// Mean over the batch (columns) of the per-sample sum of binary cross-entropy
// terms. Probabilities are clamped to [eps, 1 - eps].
inline constexpr double kProbClamp = 1e-7;
double bce_loss(const Eigen::MatrixXd& probs, const Eigen::MatrixXd& labels);

// Indices of the k largest scores; ties go to the lower index.
ExpertSet predict_topk(const Eigen::Ref<const Eigen::VectorXd>& scores, int k);

struct TrainHyper {
    int epochs = 20;
    int batch_size = 256;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    std::vector<int> hidden = {2048, 1024, 512, 256, 128, 64};
    double dropout = 0.1;
    AffinityInput affinity = AffinityInput::Mean;
    bool include_prefill = false;  // the predictor is only consulted during decode
};

std::vector<int> full_hidden_widths();
std::vector<int> test_hidden_widths();  // 8 per layer

struct TrainReport {
    std::vector<double> epoch_loss;  // mean training loss per epoch
    double initial_loss = 0.0;       // eval-mode loss of the initial network on the training set
    int epochs = 0;
    std::uint64_t seed = 0;
    std::int64_t n_samples = 0;
};

nlohmann::json to_json(const TrainReport& r);

// Trained network plus everything needed to rebuild its inputs.
struct ExpertPredictor {
    ModelShape model;
    InputLayout layout;
    ExpertMlp net;
    nlohmann::json metadata = nlohmann::json::object();  // training provenance (digests, request ids)

    // Probabilities for a batch of states (eval mode).
    Eigen::MatrixXd predict_proba(const std::vector<StateVector>& states) const;
    ExpertSet predict_set(const ActivationTrace& trace, int target_layer, const ExpertStats& stats) const;
};

// One sample per (trace, target layer l in [1, L)).
struct SampleSet {
    Eigen::MatrixXd features;  // input x n
    Eigen::MatrixXd labels;    // M x n
    std::vector<std::pair<std::size_t, int>> origin;  // (trace index, target layer)
};

SampleSet build_samples(const TraceDataset& ds, const ExpertStats& stats, const InputLayout& layout,
                        bool include_prefill);

// Mini-batch Adam on the BCE objective. Deterministic for fixed (data, hyper).
// Throws NumericError on a non-finite loss.
std::pair<ExpertPredictor, TrainReport> train(const TraceDataset& ds_train, const ExpertStats& stats,
                                              const TrainHyper& hyper);

// Untrained network with the given hyperparameters (epochs = 0 equivalent).
ExpertPredictor init_predictor(const ModelShape& model, const TrainHyper& hyper);

void save_predictor(const ExpertPredictor& p, const std::filesystem::path& path);
ExpertPredictor load_predictor(const std::filesystem::path& path);
std::string serialize_predictor(const ExpertPredictor& p);
ExpertPredictor deserialize_predictor(std::string_view bytes);

// Any strategy that names the experts of `target_layer` given the trace so far.
using SetPredictor = std::function<ExpertSet(const ActivationTrace&, int target_layer)>;

SetPredictor mlp_set_predictor(const ExpertPredictor& p, const ExpertStats& stats);
SetPredictor oracle_set_predictor();
// Top-k of the target layer's popularity row, ignoring history and affinity.
SetPredictor popularity_set_predictor(const ExpertStats& stats);
// Runs the network once over every decode trace of `ds` in batches and serves
// lookups by (request, position, layer). Unknown lookups fall back to a direct call.
SetPredictor precomputed_set_predictor(const ExpertPredictor& p, const ExpertStats& stats, const TraceDataset& ds);

struct LayerHitRate {
    int layer = 0;
    std::int64_t n = 0;
    double topk_hit_rate = 0.0;
    double at_least_one_rate = 0.0;
};

struct HitRateReport {
    double topk_hit_rate = 0.0;      // predicted set equals the true set
    double at_least_one_rate = 0.0;  // predicted and true sets intersect
    std::vector<LayerHitRate> per_layer;
    std::int64_t n_evaluated = 0;
};

nlohmann::json to_json(const HitRateReport& r);

HitRateReport evaluate(const SetPredictor& predictor, const TraceDataset& ds_test, bool include_prefill = false);
// Batched evaluation of a trained network.
HitRateReport evaluate(const ExpertPredictor& p, const TraceDataset& ds_test, const ExpertStats& stats,
                       bool include_prefill = false);

struct GradientCheckResult {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped_kinks = 0;  // entries whose +/-h perturbation flipped a ReLU
};

// Central finite differences on the BCE loss of one fixed batch with batch-norm
// in batch-statistics mode and dropout off. Relative error per entry is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
GradientCheckResult gradient_check(ExpertMlp net, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                                   double step = 1e-4);

}  // namespace moesim
