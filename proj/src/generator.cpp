#include <algorithm>
#include <cmath>
#include <numeric>

#include "moesim/error.hpp"
#include "moesim/io.hpp"
#include "moesim/trace.hpp"

namespace moesim {

using nlohmann::json;

namespace {

void check_distribution(const Eigen::Ref<const Eigen::RowVectorXd>& row, const std::string& field) {
    if ((row.array() < 0.0).any() || !row.allFinite()) throw ValidationError(field, "entries must be finite and >= 0");
    if (std::abs(row.sum() - 1.0) > 1e-9) throw ValidationError(field, "row must sum to 1 (+-1e-9)");
}

json matrix_to_json(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

Eigen::MatrixXd matrix_from_json(const json& j, const char* field) {
    if (!j.is_array() || j.empty() || !j[0].is_array()) throw SchemaError(std::string(field) + ": expected matrix");
    Eigen::MatrixXd m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j[0].size()));
    for (std::size_t r = 0; r < j.size(); ++r) {
        if (j[r].size() != j[0].size()) throw SchemaError(std::string(field) + ": ragged matrix");
        for (std::size_t c = 0; c < j[r].size(); ++c)
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = j[r][c].get<double>();
    }
    return m;
}

}  // namespace

void validate(const GeneratorParams& params, const ModelConfig& cfg) {
    const auto L = cfg.num_layers;
    const auto M = cfg.num_experts;
    if (params.base_popularity.rows() != L || params.base_popularity.cols() != M)
        throw ValidationError("base_popularity", "expected L x M");
    if (static_cast<int>(params.base_affinity.size()) != L - 1)
        throw ValidationError("base_affinity", "expected L-1 layer pairs");
    if (!(params.alpha >= 0.0 && params.alpha <= 1.0)) throw ValidationError("alpha", "must lie in [0, 1]");
    for (int l = 0; l < L; ++l)
        check_distribution(params.base_popularity.row(l), "base_popularity[" + std::to_string(l) + "]");
    for (int l = 0; l + 1 < L; ++l) {
        const auto& a = params.base_affinity[static_cast<std::size_t>(l)];
        if (a.rows() != M || a.cols() != M) throw ValidationError("base_affinity", "expected M x M");
        for (int i = 0; i < M; ++i)
            check_distribution(a.row(i), "base_affinity[" + std::to_string(l) + "][" + std::to_string(i) + "]");
    }
}

json to_json(const GeneratorParams& params) {
    json aff = json::array();
    for (const auto& a : params.base_affinity) aff.push_back(matrix_to_json(a));
    return json{{"alpha", params.alpha},
                {"seed", params.seed},
                {"base_popularity", matrix_to_json(params.base_popularity)},
                {"base_affinity", std::move(aff)}};
}

GeneratorParams generator_params_from_json(const json& j) {
    GeneratorParams p;
    p.alpha = j.at("alpha").get<double>();
    p.seed = j.at("seed").get<std::uint64_t>();
    p.base_popularity = matrix_from_json(j.at("base_popularity"), "base_popularity");
    for (const auto& a : j.at("base_affinity")) p.base_affinity.push_back(matrix_from_json(a, "base_affinity"));
    return p;
}

GeneratorParams synthesize_generator_params(const ModelConfig& cfg, std::uint64_t seed, double alpha,
                                            double affinity_noise, double popularity_skew) {
    validate(cfg);
    if (!(affinity_noise >= 0.0 && affinity_noise <= 1.0))
        throw ValidationError("affinity_noise", "must lie in [0, 1]");
    const int L = cfg.num_layers;
    const int M = cfg.num_experts;
    Rng rng(derive_seed(seed, 0xA11F));

    GeneratorParams p;
    p.alpha = alpha;
    p.seed = seed;
    p.base_popularity.resize(L, M);
    std::vector<int> perm(static_cast<std::size_t>(M));
    for (int l = 0; l < L; ++l) {
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm.begin(), perm.end());
        for (int i = 0; i < M; ++i)
            p.base_popularity(l, perm[static_cast<std::size_t>(i)]) = std::pow(1.0 + i, -popularity_skew);
        p.base_popularity.row(l) /= p.base_popularity.row(l).sum();
    }
    for (int l = 0; l + 1 < L; ++l) {
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm.begin(), perm.end());
        Eigen::MatrixXd a = Eigen::MatrixXd::Zero(M, M);
        for (int i = 0; i < M; ++i) {
            Eigen::RowVectorXd noise(M);
            for (int j = 0; j < M; ++j) noise(j) = rng.uniform(0.05, 1.0);
            noise /= noise.sum();
            a.row(i) = affinity_noise * noise;
            a(i, perm[static_cast<std::size_t>(i)]) += 1.0 - affinity_noise;
            a.row(i) /= a.row(i).sum();
        }
        p.base_affinity.push_back(std::move(a));
    }
    return p;
}

ExpertSet sample_without_replacement(std::span<const double> weights, int k, Rng& rng) {
    std::vector<double> w(weights.begin(), weights.end());
    const auto positive = std::count_if(w.begin(), w.end(), [](double x) { return x > 0.0; });
    if (positive < k)
        throw Error("degenerate sampling distribution: " + std::to_string(positive) +
                    " experts with positive mass, need " + std::to_string(k));
    ExpertSet out;
    out.reserve(static_cast<std::size_t>(k));
    for (int draw = 0; draw < k; ++draw) {
        double total = 0.0;
        for (double x : w) total += x;
        const double u = rng.uniform() * total;
        double cum = 0.0;
        int pick = -1;
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (w[i] <= 0.0) continue;
            cum += w[i];
            pick = static_cast<int>(i);
            if (cum > u) break;
        }
        out.push_back(pick);
        w[static_cast<std::size_t>(pick)] = 0.0;
    }
    std::sort(out.begin(), out.end());
    return out;
}

Eigen::VectorXd next_layer_distribution(const Eigen::MatrixXd& affinity, const ExpertSet& prev, double alpha) {
    const auto M = affinity.cols();
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(M);
    for (int e : prev) mean += affinity.row(e).transpose();
    mean /= static_cast<double>(prev.size());
    return alpha * mean + Eigen::VectorXd::Constant(M, (1.0 - alpha) / static_cast<double>(M));
}

TraceDataset generate_traces(const GeneratorParams& params, const ModelConfig& cfg, int n_requests, int decode_len,
                             int prefill_len) {
    validate(params, cfg);
    if (n_requests < 1 || decode_len < 1 || prefill_len < 1)
        throw ValidationError("counts", "n_requests, decode_len and prefill_len must be >= 1");
    const int L = cfg.num_layers;
    const int k = cfg.top_k;

    TraceDataset ds;
    ds.model = ModelShape::of(cfg);
    ds.provenance = {{"kind", "synthetic"},
                     {"seed", params.seed},
                     {"alpha", params.alpha},
                     {"params_digest", sha256_hex(to_json(params).dump())}};
    ds.traces.reserve(static_cast<std::size_t>(n_requests) * static_cast<std::size_t>(decode_len + prefill_len));

    Eigen::VectorXd pop0 = params.base_popularity.row(0).transpose();
    for (int r = 0; r < n_requests; ++r) {
        Rng rng(derive_seed(params.seed, static_cast<std::uint64_t>(r)));
        for (int pos = 0; pos < prefill_len + decode_len; ++pos) {
            ActivationTrace t;
            t.request_id = r;
            t.token_index = pos;
            t.phase = pos < prefill_len ? Phase::Prefill : Phase::Decode;
            t.path.reserve(static_cast<std::size_t>(L));
            t.path.push_back(sample_without_replacement({pop0.data(), static_cast<std::size_t>(pop0.size())}, k, rng));
            for (int l = 1; l < L; ++l) {
                Eigen::VectorXd q =
                    next_layer_distribution(params.base_affinity[static_cast<std::size_t>(l - 1)], t.path.back(),
                                            params.alpha);
                t.path.push_back(sample_without_replacement({q.data(), static_cast<std::size_t>(q.size())}, k, rng));
            }
            ds.traces.push_back(std::move(t));
        }
    }
    return ds;
}

}  // namespace moesim
