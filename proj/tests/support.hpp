#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "moesim/config.hpp"
#include "moesim/random.hpp"
#include "moesim/trace.hpp"

namespace moesim::testing {

namespace fs = std::filesystem;

inline fs::path source_dir() { return fs::path(MOESIM_SOURCE_DIR); }
inline fs::path preset(const std::string& name) { return source_dir() / "configs" / (name + ".json"); }

// Scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = fs::temp_directory_path() /
                ("moesim-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

inline ModelConfig toy_model() {
    ModelConfig m;
    m.name = "toy-4x2";
    m.num_layers = 4;
    m.num_experts = 4;
    m.top_k = 2;
    m.total_param_bytes = 36;
    m.non_moe_bytes = 4;
    m.predictor_mem_bytes = 1;
    m.kv_reserve_bytes = 2;
    return m;
}

// The two hand-counted toy traces.
inline TraceDataset toy_dataset() {
    TraceDataset ds;
    ds.model = ModelShape::of(toy_model());
    ds.traces.push_back({0, Phase::Decode, 0, {{0, 1}, {2, 3}, {0, 2}, {1, 3}}});
    ds.traces.push_back({1, Phase::Decode, 0, {{0, 2}, {2, 3}, {0, 1}, {1, 3}}});
    return ds;
}

inline ExpertSet random_set(Rng& rng, int M, int k) {
    std::vector<int> all(static_cast<std::size_t>(M));
    for (int i = 0; i < M; ++i) all[static_cast<std::size_t>(i)] = i;
    rng.shuffle(all.begin(), all.end());
    ExpertSet s(all.begin(), all.begin() + k);
    std::sort(s.begin(), s.end());
    return s;
}

// Uniformly random traces; requests get a few prefill tokens followed by decode tokens.
inline TraceDataset random_dataset(Rng& rng, int L, int M, int k, int n_traces) {
    TraceDataset ds;
    ds.model = {"random", L, M, k};
    std::int64_t req = 0, pos = 0;
    for (int t = 0; t < n_traces; ++t) {
        if (rng.below(8) == 0) {
            ++req;
            pos = 0;
        }
        ActivationTrace tr{req, pos < 2 ? Phase::Prefill : Phase::Decode, pos, {}};
        ++pos;
        for (int l = 0; l < L; ++l) tr.path.push_back(random_set(rng, M, k));
        ds.traces.push_back(std::move(tr));
    }
    return ds;
}

}  // namespace moesim::testing
