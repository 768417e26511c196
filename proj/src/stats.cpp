#include "moesim/stats.hpp"

#include <iomanip>
#include <sstream>

#include "moesim/error.hpp"
#include "moesim/io.hpp"

namespace moesim {

using nlohmann::json;

Eigen::MatrixXd PopularityMatrix::marginal_frequency() const {
    if (n_episodes == 0) return Eigen::MatrixXd::Zero(counts.rows(), counts.cols());
    return counts.cast<double>() / static_cast<double>(n_episodes);
}

Eigen::VectorXd AffinityMatrix::mean_row(int layer, const ExpertSet& experts) const {
    const auto& a = values.at(static_cast<std::size_t>(layer));
    Eigen::VectorXd out = Eigen::VectorXd::Zero(a.cols());
    if (experts.empty()) return out;
    for (int e : experts) out += a.row(e).transpose();
    return out / static_cast<double>(experts.size());
}

namespace {

// Integer counts are normalized once per row. Zero rows stay zero.
Eigen::MatrixXd row_normalize(const CountMatrix& counts) {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(counts.rows(), counts.cols());
    for (Eigen::Index r = 0; r < counts.rows(); ++r) {
        const std::int64_t total = counts.row(r).sum();
        if (total > 0) out.row(r) = counts.row(r).cast<double>() / static_cast<double>(total);
    }
    return out;
}

void require_nonempty(const TraceDataset& ds) {
    if (ds.traces.empty()) throw Error("cannot build statistics from an empty dataset");
}

}  // namespace

PopularityMatrix build_popularity(const TraceDataset& ds) {
    require_nonempty(ds);
    const int L = ds.model.num_layers;
    const int M = ds.model.num_experts;
    PopularityMatrix p;
    p.counts = CountMatrix::Zero(L, M);
    for (const auto& t : ds.traces)
        for (int l = 0; l < L; ++l)
            for (int e : t.path[static_cast<std::size_t>(l)]) ++p.counts(l, e);
    p.n_episodes = static_cast<std::int64_t>(ds.traces.size());
    p.values = row_normalize(p.counts);
    return p;
}

AffinityMatrix build_affinity(const TraceDataset& ds) {
    require_nonempty(ds);
    const int L = ds.model.num_layers;
    const int M = ds.model.num_experts;
    if (L < 2) throw Error("affinity needs at least 2 layers");
    AffinityMatrix a;
    a.counts.assign(static_cast<std::size_t>(L - 1), CountMatrix::Zero(M, M));
    for (const auto& t : ds.traces) {
        for (int l = 0; l + 1 < L; ++l) {
            auto& c = a.counts[static_cast<std::size_t>(l)];
            for (int i : t.path[static_cast<std::size_t>(l)])
                for (int j : t.path[static_cast<std::size_t>(l + 1)]) ++c(i, j);
        }
    }
    a.values.reserve(a.counts.size());
    for (const auto& c : a.counts) a.values.push_back(row_normalize(c));
    return a;
}

ExpertStats build_stats(const TraceDataset& ds, bool decode_only) {
    ExpertStats s;
    s.model = ds.model;
    s.decode_only = decode_only;
    if (decode_only) {
        TraceDataset filtered = filter_phase(ds, Phase::Decode);
        s.popularity = build_popularity(filtered);
        s.affinity = build_affinity(filtered);
    } else {
        s.popularity = build_popularity(ds);
        s.affinity = build_affinity(ds);
    }
    return s;
}

namespace {

template <class Derived>
json to_rows(const Eigen::MatrixBase<Derived>& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

template <class Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> from_rows(const json& j, Eigen::Index rows, Eigen::Index cols,
                                                                const char* what) {
    if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows)
        throw SchemaError(std::string("stats: bad shape for ") + what);
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const json& row = j[static_cast<std::size_t>(r)];
        if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
            throw SchemaError(std::string("stats: bad shape for ") + what);
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<Scalar>();
    }
    return m;
}

}  // namespace

json to_json(const ExpertStats& s) {
    json aff = json::array();
    json aff_counts = json::array();
    for (std::size_t l = 0; l < s.affinity.values.size(); ++l) {
        aff.push_back(to_rows(s.affinity.values[l]));
        aff_counts.push_back(to_rows(s.affinity.counts[l]));
    }
    return json{{"schema_version", 1},
                {"model", {{"name", s.model.name}, {"L", s.model.num_layers}, {"M", s.model.num_experts}, {"k", s.model.top_k}}},
                {"decode_only", s.decode_only},
                {"n", s.popularity.n_episodes},
                {"popularity", to_rows(s.popularity.values)},
                {"affinity", std::move(aff)},
                {"counts", {{"popularity", to_rows(s.popularity.counts)}, {"affinity", std::move(aff_counts)}}}};
}

ExpertStats stats_from_json(const json& j) {
    try {
        ExpertStats s;
        const json& m = j.at("model");
        s.model = {m.at("name").get<std::string>(), m.at("L").get<int>(), m.at("M").get<int>(), m.at("k").get<int>()};
        s.decode_only = j.value("decode_only", false);
        const int L = s.model.num_layers;
        const int M = s.model.num_experts;
        s.popularity.n_episodes = j.at("n").get<std::int64_t>();
        s.popularity.values = from_rows<double>(j.at("popularity"), L, M, "popularity");
        s.popularity.counts = from_rows<std::int64_t>(j.at("counts").at("popularity"), L, M, "counts.popularity");
        const json& aff = j.at("affinity");
        const json& aff_counts = j.at("counts").at("affinity");
        if (static_cast<int>(aff.size()) != L - 1 || aff_counts.size() != aff.size())
            throw SchemaError("stats: affinity must have L-1 layer pairs");
        for (std::size_t l = 0; l < aff.size(); ++l) {
            s.affinity.values.push_back(from_rows<double>(aff[l], M, M, "affinity"));
            s.affinity.counts.push_back(from_rows<std::int64_t>(aff_counts[l], M, M, "counts.affinity"));
        }
        return s;
    } catch (const json::exception& e) {
        throw SchemaError(std::string("stats: ") + e.what());
    }
}

void save_stats(const ExpertStats& stats, const std::filesystem::path& path) {
    write_file(path, dump_json(to_json(stats)));
}

ExpertStats load_stats(const std::filesystem::path& path) {
    return stats_from_json(parse_json(read_file(path), path.string()));
}

std::string matrix_csv(const Eigen::MatrixXd& m) {
    std::ostringstream out;
    out << std::setprecision(17);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            if (c) out << ',';
            out << m(r, c);
        }
        out << '\n';
    }
    return out.str();
}

void export_csv(const ExpertStats& stats, const std::filesystem::path& dir) {
    write_file(dir / "popularity.csv", matrix_csv(stats.popularity.values));
    for (std::size_t l = 0; l < stats.affinity.values.size(); ++l)
        write_file(dir / ("affinity_l" + std::to_string(l) + ".csv"), matrix_csv(stats.affinity.values[l]));
}

}  // namespace moesim
