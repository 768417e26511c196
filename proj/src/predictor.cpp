#include "moesim/predictor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <tuple>

#include "moesim/error.hpp"
#include "moesim/io.hpp"

namespace moesim {

using nlohmann::json;

std::string_view to_string(AffinityInput a) { return a == AffinityInput::Mean ? "mean" : "concat"; }

AffinityInput parse_affinity_input(std::string_view s) {
    if (s == "mean") return AffinityInput::Mean;
    if (s == "concat") return AffinityInput::Concat;
    throw ValidationError("affinity_input", "expected 'mean' or 'concat'");
}

std::vector<int> full_hidden_widths() { return {2048, 1024, 512, 256, 128, 64}; }
std::vector<int> test_hidden_widths() { return {8, 8, 8, 8, 8, 8}; }

Eigen::VectorXd StateVector::features(int num_experts) const {
    const auto h = static_cast<Eigen::Index>(history.size());
    Eigen::VectorXd out(h + popularity.size() + affinity.size() + 1);
    for (Eigen::Index i = 0; i < h; ++i)
        out(i) = static_cast<double>(history[static_cast<std::size_t>(i)]) / static_cast<double>(num_experts);
    out.segment(h, popularity.size()) = popularity;
    out.segment(h + popularity.size(), affinity.size()) = affinity;
    out(out.size() - 1) = layer_pos;
    return out;
}

StateVector construct_input(const ActivationTrace& trace, int target_layer, const PopularityMatrix& pop,
                            const AffinityMatrix& aff, const InputLayout& layout) {
    const int L = layout.num_layers;
    if (target_layer < 1 || target_layer >= L)
        throw ValidationError("target_layer", "must lie in [1, L); layer 0 is fetched after the gate");
    if (static_cast<int>(trace.path.size()) < target_layer)
        throw ValidationError("trace", "path does not cover layers before the target");

    StateVector s;
    s.history.assign(static_cast<std::size_t>(layout.history_size()), 0);
    std::size_t slot = 0;
    for (int l = 0; l < target_layer; ++l)
        for (int e : trace.path[static_cast<std::size_t>(l)]) s.history[slot++] = e + 1;

    s.popularity = pop.values.row(target_layer).transpose();
    const ExpertSet& prev = trace.path[static_cast<std::size_t>(target_layer - 1)];
    if (layout.affinity == AffinityInput::Mean) {
        s.affinity = aff.mean_row(target_layer - 1, prev);
    } else {
        const auto& a = aff.values[static_cast<std::size_t>(target_layer - 1)];
        s.affinity.resize(layout.affinity_size());
        for (std::size_t i = 0; i < prev.size(); ++i)
            s.affinity.segment(static_cast<Eigen::Index>(i) * layout.num_experts, layout.num_experts) =
                a.row(prev[i]).transpose();
    }
    s.layer_pos = static_cast<double>(target_layer) / static_cast<double>(L - 1);
    return s;
}

Eigen::VectorXd multi_hot(const ExpertSet& experts, int num_experts) {
    Eigen::VectorXd y = Eigen::VectorXd::Zero(num_experts);
    for (int e : experts) y(e) = 1.0;
    return y;
}

double bce_loss(const Eigen::MatrixXd& probs, const Eigen::MatrixXd& labels) {
    if (probs.rows() != labels.rows() || probs.cols() != labels.cols())
        throw ValidationError("shape", "probabilities and labels differ in shape");
    if (probs.cols() == 0) throw ValidationError("shape", "empty batch");
    const Eigen::ArrayXXd p = probs.array().max(kProbClamp).min(1.0 - kProbClamp);
    const Eigen::ArrayXXd y = labels.array();
    const double total = -(y * p.log() + (1.0 - y) * (1.0 - p).log()).sum();
    return total / static_cast<double>(probs.cols());
}

ExpertSet predict_topk(const Eigen::Ref<const Eigen::VectorXd>& scores, int k) {
    std::vector<int> idx(static_cast<std::size_t>(scores.size()));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores(a) > scores(b); });
    ExpertSet out(idx.begin(), idx.begin() + std::min<std::ptrdiff_t>(k, scores.size()));
    std::sort(out.begin(), out.end());
    return out;
}

json to_json(const TrainReport& r) {
    return json{{"schema_version", 1},
                {"epochs", r.epochs},
                {"seed", r.seed},
                {"n_samples", r.n_samples},
                {"initial_loss", r.initial_loss},
                {"epoch_loss", r.epoch_loss},
                {"final_loss", r.epoch_loss.empty() ? r.initial_loss : r.epoch_loss.back()}};
}

SampleSet build_samples(const TraceDataset& ds, const ExpertStats& stats, const InputLayout& layout,
                        bool include_prefill) {
    const int L = layout.num_layers;
    const int M = layout.num_experts;
    std::vector<std::pair<std::size_t, int>> origin;
    for (std::size_t t = 0; t < ds.traces.size(); ++t) {
        if (!include_prefill && ds.traces[t].phase == Phase::Prefill) continue;
        for (int l = 1; l < L; ++l) origin.emplace_back(t, l);
    }
    SampleSet s;
    s.features.resize(layout.size(), static_cast<Eigen::Index>(origin.size()));
    s.labels.resize(M, static_cast<Eigen::Index>(origin.size()));
    for (std::size_t n = 0; n < origin.size(); ++n) {
        const auto& [t, l] = origin[n];
        const auto& trace = ds.traces[t];
        const auto col = static_cast<Eigen::Index>(n);
        s.features.col(col) = construct_input(trace, l, stats.popularity, stats.affinity, layout).features(M);
        s.labels.col(col) = multi_hot(trace.path[static_cast<std::size_t>(l)], M);
    }
    s.origin = std::move(origin);
    return s;
}

ExpertPredictor init_predictor(const ModelShape& model, const TrainHyper& hyper) {
    ExpertPredictor p;
    p.model = model;
    p.layout = InputLayout::of(model, hyper.affinity);
    if (p.layout.num_layers < 2) throw ValidationError("model.num_layers", "prediction needs at least 2 layers");
    p.net = ExpertMlp(p.layout.size(), hyper.hidden, model.num_experts, hyper.dropout, derive_seed(hyper.seed, 1));
    p.net.eval();
    return p;
}

namespace {

constexpr Eigen::Index kEvalChunk = 4096;

Eigen::MatrixXd eval_proba(const ExpertMlp& net, const Eigen::MatrixXd& x) {
    Eigen::MatrixXd out(net.output_dim(), x.cols());
    for (Eigen::Index c = 0; c < x.cols(); c += kEvalChunk) {
        const Eigen::Index n = std::min(kEvalChunk, x.cols() - c);
        out.middleCols(c, n) = net.predict_proba(x.middleCols(c, n));
    }
    return out;
}

}  // namespace

std::pair<ExpertPredictor, TrainReport> train(const TraceDataset& ds_train, const ExpertStats& stats,
                                              const TrainHyper& hyper) {
    if (hyper.epochs < 0 || hyper.batch_size < 2 || !(hyper.learning_rate > 0))
        throw ValidationError("hyper", "need epochs >= 0, batch_size >= 2, learning_rate > 0");
    ExpertPredictor pred = init_predictor(ds_train.model, hyper);
    SampleSet samples = build_samples(ds_train, stats, pred.layout, hyper.include_prefill);
    const Eigen::Index n = samples.features.cols();
    if (n < 2) throw ValidationError("dataset", "training needs at least 2 samples");

    TrainReport report;
    report.seed = hyper.seed;
    report.n_samples = n;
    report.initial_loss = bce_loss(eval_proba(pred.net, samples.features), samples.labels);

    ExpertMlp& net = pred.net;
    net.train();
    Adam adam(hyper.learning_rate);
    Rng shuffle_rng(derive_seed(hyper.seed, 2));
    Rng dropout_rng(derive_seed(hyper.seed, 3));
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    ExpertMlp::Tape tape;

    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        shuffle_rng.shuffle(order.begin(), order.end());
        double loss_sum = 0.0;
        Eigen::Index begin = 0;
        int batch_index = 0;
        while (begin < n) {
            Eigen::Index end = std::min<Eigen::Index>(begin + hyper.batch_size, n);
            if (n - end == 1) end = n;  // batch-norm cannot normalize a batch of one
            std::vector<Eigen::Index> idx(order.begin() + begin, order.begin() + end);
            const Eigen::MatrixXd xb = samples.features(Eigen::all, idx);
            const Eigen::MatrixXd yb = samples.labels(Eigen::all, idx);
            const Eigen::MatrixXd z = net.logits(xb, &dropout_rng, &tape);
            const Eigen::MatrixXd p = ExpertMlp::sigmoid(z);
            const double loss = bce_loss(p, yb);
            if (!std::isfinite(loss)) {
                std::ostringstream msg;
                msg << "non-finite loss (learning_rate=" << hyper.learning_rate << ", epoch=" << epoch
                    << ", batch=" << batch_index << ")";
                throw NumericError(msg.str());
            }
            const Eigen::MatrixXd dz = (p - yb) / static_cast<double>(xb.cols());
            adam.step(net.parameters(), net.backward(tape, dz));
            loss_sum += loss * static_cast<double>(xb.cols());
            begin = end;
            ++batch_index;
        }
        report.epoch_loss.push_back(loss_sum / static_cast<double>(n));
    }
    net.eval();
    report.epochs = hyper.epochs;
    return {std::move(pred), std::move(report)};
}

Eigen::MatrixXd ExpertPredictor::predict_proba(const std::vector<StateVector>& states) const {
    Eigen::MatrixXd x(layout.size(), static_cast<Eigen::Index>(states.size()));
    for (std::size_t i = 0; i < states.size(); ++i)
        x.col(static_cast<Eigen::Index>(i)) = states[i].features(layout.num_experts);
    return eval_proba(net, x);
}

ExpertSet ExpertPredictor::predict_set(const ActivationTrace& trace, int target_layer, const ExpertStats& stats) const {
    const StateVector s = construct_input(trace, target_layer, stats.popularity, stats.affinity, layout);
    const Eigen::VectorXd p = predict_proba({s}).col(0);
    return predict_topk(p, layout.top_k);
}

// ---------------------------------------------------------------------------
// Model container:
//   "MOESIMNN" | u32 version | u64 header length | header JSON | f64 tensors
// Tensors follow header["tensors"] order: parameters, then per hidden layer the
// batch-norm running mean and running variance. Column-major, little-endian.

namespace {

constexpr char kMagic[8] = {'M', 'O', 'E', 'S', 'I', 'M', 'N', 'N'};
constexpr std::uint32_t kModelVersion = 1;

template <class T>
void put(std::string& out, const T& v) {
    static_assert(std::endian::native == std::endian::little, "model container assumes little-endian hosts");
    out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::string_view& in) {
    if (in.size() < sizeof(T)) throw SchemaError("model file truncated");
    T v;
    std::memcpy(&v, in.data(), sizeof(T));
    in.remove_prefix(sizeof(T));
    return v;
}

void put_matrix(std::string& out, const Eigen::MatrixXd& m) {
    out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
}

void take_matrix(std::string_view& in, Eigen::MatrixXd& m) {
    const std::size_t bytes = static_cast<std::size_t>(m.size()) * sizeof(double);
    if (in.size() < bytes) throw SchemaError("model file truncated");
    std::memcpy(m.data(), in.data(), bytes);
    in.remove_prefix(bytes);
}

}  // namespace

std::string serialize_predictor(const ExpertPredictor& p) {
    json tensors = json::array();
    for (const auto& t : p.net.parameters()) tensors.push_back({t.rows(), t.cols()});
    json header{{"model", {{"name", p.model.name}, {"L", p.model.num_layers}, {"M", p.model.num_experts}, {"k", p.model.top_k}}},
                {"layout",
                 {{"L", p.layout.num_layers},
                  {"M", p.layout.num_experts},
                  {"k", p.layout.top_k},
                  {"affinity", to_string(p.layout.affinity)},
                  {"history_layers", p.layout.history_layers()}}},
                {"input_dim", p.net.input_dim()},
                {"hidden", p.net.hidden_widths()},
                {"output_dim", p.net.output_dim()},
                {"dropout", p.net.dropout_rate()},
                {"tensors", std::move(tensors)},
                {"metadata", p.metadata}};
    const std::string h = header.dump();
    std::string out(kMagic, sizeof(kMagic));
    put(out, kModelVersion);
    put(out, static_cast<std::uint64_t>(h.size()));
    out += h;
    for (const auto& t : p.net.parameters()) put_matrix(out, t);
    for (int i = 0; i < p.net.num_hidden(); ++i) {
        put_matrix(out, p.net.running_mean()[static_cast<std::size_t>(i)]);
        put_matrix(out, p.net.running_var()[static_cast<std::size_t>(i)]);
    }
    return out;
}

ExpertPredictor deserialize_predictor(std::string_view in) {
    if (in.size() < sizeof(kMagic) || std::memcmp(in.data(), kMagic, sizeof(kMagic)) != 0)
        throw SchemaError("not a model file (bad magic)");
    in.remove_prefix(sizeof(kMagic));
    const auto version = take<std::uint32_t>(in);
    if (version != kModelVersion) throw SchemaError("unsupported model version " + std::to_string(version));
    const auto hlen = take<std::uint64_t>(in);
    if (in.size() < hlen) throw SchemaError("model file truncated");
    const json header = parse_json(in.substr(0, hlen), "<model header>");
    in.remove_prefix(hlen);

    ExpertPredictor p;
    try {
        const json& m = header.at("model");
        p.model = {m.at("name").get<std::string>(), m.at("L").get<int>(), m.at("M").get<int>(), m.at("k").get<int>()};
        const json& lay = header.at("layout");
        p.layout = {lay.at("L").get<int>(), lay.at("M").get<int>(), lay.at("k").get<int>(),
                    parse_affinity_input(lay.at("affinity").get<std::string>())};
        p.net = ExpertMlp(header.at("input_dim").get<int>(), header.at("hidden").get<std::vector<int>>(),
                          header.at("output_dim").get<int>(), header.at("dropout").get<double>(), 0);
        p.metadata = header.value("metadata", json::object());
    } catch (const json::exception& e) {
        throw SchemaError(std::string("model header: ") + e.what());
    }
    if (p.net.input_dim() != p.layout.size()) throw SchemaError("model header: input_dim does not match layout");
    const json& shapes = header.at("tensors");
    auto& params = p.net.parameters();
    if (shapes.size() != params.size()) throw SchemaError("model header: tensor count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (shapes[i][0].get<Eigen::Index>() != params[i].rows() || shapes[i][1].get<Eigen::Index>() != params[i].cols())
            throw SchemaError("model header: tensor shape mismatch at " + std::to_string(i));
        take_matrix(in, params[i]);
    }
    for (int h = 0; h < p.net.num_hidden(); ++h) {
        Eigen::MatrixXd rm(p.net.hidden_widths()[static_cast<std::size_t>(h)], 1), rv(rm.rows(), 1);
        take_matrix(in, rm);
        take_matrix(in, rv);
        p.net.running_mean()[static_cast<std::size_t>(h)] = rm.col(0);
        p.net.running_var()[static_cast<std::size_t>(h)] = rv.col(0);
    }
    if (!in.empty()) throw SchemaError("model file has trailing bytes");
    p.net.eval();
    return p;
}

void save_predictor(const ExpertPredictor& p, const std::filesystem::path& path) {
    write_file(path, serialize_predictor(p));
}

ExpertPredictor load_predictor(const std::filesystem::path& path) { return deserialize_predictor(read_file(path)); }

SetPredictor mlp_set_predictor(const ExpertPredictor& p, const ExpertStats& stats) {
    return [&p, &stats](const ActivationTrace& t, int l) { return p.predict_set(t, l, stats); };
}

SetPredictor oracle_set_predictor() {
    return [](const ActivationTrace& t, int l) { return t.path.at(static_cast<std::size_t>(l)); };
}

SetPredictor popularity_set_predictor(const ExpertStats& stats) {
    return [&stats](const ActivationTrace&, int l) {
        const Eigen::VectorXd row = stats.popularity.values.row(l).transpose();
        return predict_topk(row, stats.model.top_k);
    };
}

SetPredictor precomputed_set_predictor(const ExpertPredictor& p, const ExpertStats& stats, const TraceDataset& ds) {
    using Key = std::tuple<std::int64_t, std::int64_t, int>;
    auto table = std::make_shared<std::map<Key, ExpertSet>>();
    const SampleSet samples = build_samples(ds, stats, p.layout, false);
    if (!samples.origin.empty()) {
        const Eigen::MatrixXd probs = eval_proba(p.net, samples.features);
        for (std::size_t n = 0; n < samples.origin.size(); ++n) {
            const auto& [t, l] = samples.origin[n];
            const auto& trace = ds.traces[t];
            (*table)[Key{trace.request_id, trace.token_index, l}] =
                predict_topk(probs.col(static_cast<Eigen::Index>(n)), p.layout.top_k);
        }
    }
    return [table, &p, &stats](const ActivationTrace& t, int l) {
        auto it = table->find(Key{t.request_id, t.token_index, l});
        return it != table->end() ? it->second : p.predict_set(t, l, stats);
    };
}

json to_json(const HitRateReport& r) {
    json layers = json::array();
    for (const auto& l : r.per_layer)
        layers.push_back({{"layer", l.layer}, {"n", l.n}, {"topk_hit_rate", l.topk_hit_rate},
                          {"at_least_one_rate", l.at_least_one_rate}});
    return json{{"topk_hit_rate", r.topk_hit_rate},
                {"at_least_one_rate", r.at_least_one_rate},
                {"n_evaluated", r.n_evaluated},
                {"per_layer", std::move(layers)}};
}

namespace {

struct HitCounter {
    explicit HitCounter(int L) : n(L, 0), topk(L, 0), any(L, 0) {}

    void add(int layer, const ExpertSet& predicted, const ExpertSet& truth) {
        ExpertSet p = predicted;
        std::sort(p.begin(), p.end());
        ExpertSet common;
        std::set_intersection(p.begin(), p.end(), truth.begin(), truth.end(), std::back_inserter(common));
        ++n[static_cast<std::size_t>(layer)];
        if (p == truth) ++topk[static_cast<std::size_t>(layer)];
        if (!common.empty()) ++any[static_cast<std::size_t>(layer)];
    }

    HitRateReport report() const {
        HitRateReport r;
        std::int64_t total = 0, total_topk = 0, total_any = 0;
        for (std::size_t l = 1; l < n.size(); ++l) {
            if (n[l] == 0) continue;
            r.per_layer.push_back({static_cast<int>(l), n[l], static_cast<double>(topk[l]) / static_cast<double>(n[l]),
                                   static_cast<double>(any[l]) / static_cast<double>(n[l])});
            total += n[l];
            total_topk += topk[l];
            total_any += any[l];
        }
        if (total == 0) throw Error("evaluation set is empty");
        r.n_evaluated = total;
        r.topk_hit_rate = static_cast<double>(total_topk) / static_cast<double>(total);
        r.at_least_one_rate = static_cast<double>(total_any) / static_cast<double>(total);
        return r;
    }

    std::vector<std::int64_t> n, topk, any;
};

}  // namespace

HitRateReport evaluate(const SetPredictor& predictor, const TraceDataset& ds_test, bool include_prefill) {
    const int L = ds_test.model.num_layers;
    HitCounter counter(L);
    for (const auto& t : ds_test.traces) {
        if (!include_prefill && t.phase == Phase::Prefill) continue;
        for (int l = 1; l < L; ++l) counter.add(l, predictor(t, l), t.path[static_cast<std::size_t>(l)]);
    }
    return counter.report();
}

HitRateReport evaluate(const ExpertPredictor& p, const TraceDataset& ds_test, const ExpertStats& stats,
                       bool include_prefill) {
    const SampleSet samples = build_samples(ds_test, stats, p.layout, include_prefill);
    if (samples.origin.empty()) throw Error("evaluation set is empty");
    const Eigen::MatrixXd probs = eval_proba(p.net, samples.features);
    HitCounter counter(p.layout.num_layers);
    for (std::size_t n = 0; n < samples.origin.size(); ++n) {
        const auto& [t, l] = samples.origin[n];
        counter.add(l, predict_topk(probs.col(static_cast<Eigen::Index>(n)), p.layout.top_k),
                    ds_test.traces[t].path[static_cast<std::size_t>(l)]);
    }
    return counter.report();
}

GradientCheckResult gradient_check(ExpertMlp net, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double step) {
    const ExpertMlp::ForwardOptions opt{true, false, false, nullptr};
    ExpertMlp::Tape tape;
    const Eigen::MatrixXd z = net.forward(x, opt, &tape);
    const Eigen::MatrixXd dz = (ExpertMlp::sigmoid(z) - y) / static_cast<double>(x.cols());
    const std::vector<Eigen::MatrixXd> grads = net.backward(tape, dz);

    auto relu_pattern = [](const ExpertMlp::Tape& t) {
        std::vector<Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>> out;
        for (const auto& m : t.pre_relu) out.push_back(m.array() > 0.0);
        return out;
    };
    const auto base_pattern = relu_pattern(tape);

    GradientCheckResult result;
    auto& params = net.parameters();
    for (std::size_t t = 0; t < params.size(); ++t) {
        for (Eigen::Index i = 0; i < params[t].size(); ++i) {
            double& theta = params[t].data()[i];
            const double saved = theta;
            ExpertMlp::Tape tp, tm;
            theta = saved + step;
            const double lp = bce_loss(ExpertMlp::sigmoid(net.forward(x, opt, &tp)), y);
            theta = saved - step;
            const double lm = bce_loss(ExpertMlp::sigmoid(net.forward(x, opt, &tm)), y);
            theta = saved;
            const auto pp = relu_pattern(tp);
            const auto pm = relu_pattern(tm);
            bool kink = false;
            for (std::size_t h = 0; h < base_pattern.size() && !kink; ++h)
                kink = (pp[h] != base_pattern[h]).any() || (pm[h] != base_pattern[h]).any();
            if (kink) {
                ++result.skipped_kinks;
                continue;
            }
            const double numeric = (lp - lm) / (2.0 * step);
            const double analytic = grads[t].data()[i];
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
            result.max_relative_error = std::max(result.max_relative_error, std::abs(analytic - numeric) / denom);
            ++result.checked;
        }
    }
    return result;
}

}  // namespace moesim
