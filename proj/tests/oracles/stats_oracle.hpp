#pragma once

// Brute-force re-count of expert statistics with plain nested loops. Shares no
// code with the production builders.

#include <vector>

#include "moesim/error.hpp"
#include "moesim/trace.hpp"

namespace moesim::oracle {

struct NaiveStats {
    std::vector<std::vector<long long>> pop_counts;                // [l][i]
    std::vector<std::vector<double>> popularity;                   // [l][i]
    std::vector<std::vector<std::vector<long long>>> aff_counts;   // [l][i][j]
    std::vector<std::vector<std::vector<double>>> affinity;        // [l][i][j]
};

inline bool contains(const std::vector<int>& set, int e) {
    for (int x : set)
        if (x == e) return true;
    return false;
}

inline NaiveStats stats_oracle(const TraceDataset& ds) {
    const int L = ds.model.num_layers;
    const int M = ds.model.num_experts;
    if (ds.traces.empty()) throw Error("empty dataset");
    NaiveStats s;
    s.pop_counts.assign(L, std::vector<long long>(M, 0));
    s.popularity.assign(L, std::vector<double>(M, 0.0));
    for (int l = 0; l < L; ++l)
        for (int i = 0; i < M; ++i)
            for (const auto& t : ds.traces)
                if (contains(t.path[l], i)) s.pop_counts[l][i] += 1;
    for (int l = 0; l < L; ++l) {
        long long total = 0;
        for (int i = 0; i < M; ++i) total += s.pop_counts[l][i];
        for (int i = 0; i < M; ++i)
            s.popularity[l][i] = total ? static_cast<double>(s.pop_counts[l][i]) / static_cast<double>(total) : 0.0;
    }

    const int pairs = L > 1 ? L - 1 : 0;
    s.aff_counts.assign(pairs, std::vector<std::vector<long long>>(M, std::vector<long long>(M, 0)));
    s.affinity.assign(pairs, std::vector<std::vector<double>>(M, std::vector<double>(M, 0.0)));
    for (int l = 0; l < pairs; ++l)
        for (int i = 0; i < M; ++i)
            for (int j = 0; j < M; ++j)
                for (const auto& t : ds.traces)
                    if (contains(t.path[l], i) && contains(t.path[l + 1], j)) s.aff_counts[l][i][j] += 1;
    for (int l = 0; l < pairs; ++l)
        for (int i = 0; i < M; ++i) {
            long long row = 0;
            for (int j = 0; j < M; ++j) row += s.aff_counts[l][i][j];
            for (int j = 0; j < M; ++j)
                s.affinity[l][i][j] = row ? static_cast<double>(s.aff_counts[l][i][j]) / static_cast<double>(row) : 0.0;
        }
    return s;
}

}  // namespace moesim::oracle
