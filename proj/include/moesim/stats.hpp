#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "moesim/trace.hpp"

namespace moesim {

using CountMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

// Per-layer expert selection frequency, normalized over the layer's total selections.
struct PopularityMatrix {
    Eigen::MatrixXd values;  // L x M
    CountMatrix counts;      // L x M raw selection counts
    std::int64_t n_episodes = 0;

    // counts / N: probability that an expert appears in a token's layer set.
    Eigen::MatrixXd marginal_frequency() const;
};

// Conditional selection probability across consecutive layers. Rows of experts that
// were never selected at layer l are all-zero.
struct AffinityMatrix {
    std::vector<Eigen::MatrixXd> values;  // (L-1) matrices, M x M
    std::vector<CountMatrix> counts;

    // Mean of the rows of `experts` in the (layer, layer+1) matrix.
    Eigen::VectorXd mean_row(int layer, const ExpertSet& experts) const;
};

struct ExpertStats {
    ModelShape model;
    PopularityMatrix popularity;
    AffinityMatrix affinity;
    bool decode_only = false;
};

PopularityMatrix build_popularity(const TraceDataset& ds);
AffinityMatrix build_affinity(const TraceDataset& ds);

// Builds both; with `decode_only` the prefill traces are excluded from the counts.
ExpertStats build_stats(const TraceDataset& ds, bool decode_only = false);

nlohmann::json to_json(const ExpertStats& stats);
ExpertStats stats_from_json(const nlohmann::json& j);
void save_stats(const ExpertStats& stats, const std::filesystem::path& path);
ExpertStats load_stats(const std::filesystem::path& path);

// Heatmap exports for plotting: popularity.csv (L rows) and affinity_l<l>.csv per layer pair.
void export_csv(const ExpertStats& stats, const std::filesystem::path& dir);
std::string matrix_csv(const Eigen::MatrixXd& m);

}  // namespace moesim
