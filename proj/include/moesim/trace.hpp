#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "moesim/config.hpp"
#include "moesim/random.hpp"

namespace moesim {

enum class Phase { Prefill, Decode };

std::string_view to_string(Phase p);

// Experts selected at one layer for one token. Kept sorted ascending.
using ExpertSet = std::vector<int>;

// One token's expert activation path: the selected set at each of the L layers.
struct ActivationTrace {
    std::int64_t request_id = 0;
    Phase phase = Phase::Decode;
    std::int64_t token_index = 0;
    std::vector<ExpertSet> path;

    bool operator==(const ActivationTrace&) const = default;
};

// Identity of the model a dataset was recorded against.
struct ModelShape {
    std::string name;
    int num_layers = 0;
    int num_experts = 0;
    int top_k = 0;

    static ModelShape of(const ModelConfig& cfg) {
        return {cfg.name, cfg.num_layers, cfg.num_experts, cfg.top_k};
    }
    bool operator==(const ModelShape&) const = default;
};

struct TraceDataset {
    ModelShape model;
    std::vector<ActivationTrace> traces;
    // {"kind": "recorded"} or {"kind": "synthetic", "seed", "alpha", "params_digest", ...}
    nlohmann::json provenance = {{"kind", "recorded"}};

    bool operator==(const TraceDataset&) const = default;
};

// All traces of one request, each group ordered by token index.
struct RequestTraces {
    std::int64_t request_id = 0;
    std::vector<const ActivationTrace*> prefill;
    std::vector<const ActivationTrace*> decode;
};

// Throws ValidationError naming the request and layer on the first violation.
void validate_trace(const ActivationTrace& t, const ModelShape& shape);
// Also checks that prefill positions precede decode positions within each request.
void validate_dataset(const TraceDataset& ds);

// Groups by request id (ascending). Pointers refer into `ds`.
std::vector<RequestTraces> group_by_request(const TraceDataset& ds);

TraceDataset parse_traces(std::string_view text, const ModelConfig& cfg, std::string_view source = "<memory>");
TraceDataset load_traces(const std::filesystem::path& path, const ModelConfig& cfg);
std::string serialize_traces(const TraceDataset& ds);
void save_traces(const TraceDataset& ds, const std::filesystem::path& path);

// Restricts a dataset to one phase, preserving order and provenance.
TraceDataset filter_phase(const TraceDataset& ds, Phase phase);

struct GeneratorParams {
    Eigen::MatrixXd base_popularity;            // L x M, rows sum to 1
    std::vector<Eigen::MatrixXd> base_affinity;  // L-1 matrices, M x M row-stochastic
    double alpha = 0.8;                          // weight on affinity vs uniform
    std::uint64_t seed = 0;
};

void validate(const GeneratorParams& params, const ModelConfig& cfg);
nlohmann::json to_json(const GeneratorParams& params);
GeneratorParams generator_params_from_json(const nlohmann::json& j);

// Builds structured ground-truth statistics: a skewed, randomly permuted popularity
// vector per layer, and affinity rows concentrated on one successor expert per
// (layer, expert) via a random permutation. `affinity_noise` in [0,1] is the mass
// spread over the remaining experts; 0 gives a deterministic chain.
GeneratorParams synthesize_generator_params(const ModelConfig& cfg, std::uint64_t seed, double alpha,
                                            double affinity_noise = 0.1, double popularity_skew = 0.6);

// Sequential renormalized draws without replacement; on each draw the first index
// whose cumulative mass exceeds u * remaining wins (ties go to the lower index).
ExpertSet sample_without_replacement(std::span<const double> weights, int k, Rng& rng);

// The next-layer distribution: alpha * mean(affinity rows of `prev`) + (1 - alpha) / M.
Eigen::VectorXd next_layer_distribution(const Eigen::MatrixXd& affinity, const ExpertSet& prev, double alpha);

TraceDataset generate_traces(const GeneratorParams& params, const ModelConfig& cfg, int n_requests,
                             int decode_len, int prefill_len);

// Partition by request id. Train gets round-half-up(n * fraction) requests, clamped
// to [1, n-1].
std::pair<TraceDataset, TraceDataset> split_dataset(const TraceDataset& ds, double train_fraction,
                                                    std::uint64_t seed);

}  // namespace moesim
