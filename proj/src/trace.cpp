#include "moesim/trace.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "moesim/error.hpp"
#include "moesim/io.hpp"

namespace moesim {

using nlohmann::json;

std::string_view to_string(Phase p) { return p == Phase::Prefill ? "prefill" : "decode"; }

namespace {

std::string where(const ActivationTrace& t) {
    return "request " + std::to_string(t.request_id) + " pos " + std::to_string(t.token_index);
}

}  // namespace

void validate_trace(const ActivationTrace& t, const ModelShape& shape) {
    if (static_cast<int>(t.path.size()) != shape.num_layers)
        throw ValidationError("path", where(t) + ": expected " + std::to_string(shape.num_layers) +
                                          " layers, got " + std::to_string(t.path.size()));
    for (std::size_t l = 0; l < t.path.size(); ++l) {
        const ExpertSet& s = t.path[l];
        const std::string at = where(t) + " layer " + std::to_string(l);
        if (static_cast<int>(s.size()) != shape.top_k)
            throw ValidationError("path", at + ": expected " + std::to_string(shape.top_k) + " experts, got " +
                                              std::to_string(s.size()));
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] < 0 || s[i] >= shape.num_experts)
                throw ValidationError("path", at + ": expert index " + std::to_string(s[i]) + " out of range [0, " +
                                                  std::to_string(shape.num_experts) + ")");
            if (i > 0 && s[i] <= s[i - 1])
                throw ValidationError("path", at + ": duplicate or unsorted expert " + std::to_string(s[i]));
        }
    }
}

void validate_dataset(const TraceDataset& ds) {
    std::map<std::int64_t, std::pair<std::int64_t, std::int64_t>> bounds;  // max prefill pos, min decode pos
    for (const auto& t : ds.traces) {
        validate_trace(t, ds.model);
        auto [it, inserted] = bounds.try_emplace(t.request_id, INT64_MIN, INT64_MAX);
        auto& [max_prefill, min_decode] = it->second;
        if (t.phase == Phase::Prefill)
            max_prefill = std::max(max_prefill, t.token_index);
        else
            min_decode = std::min(min_decode, t.token_index);
        if (max_prefill >= min_decode)
            throw ValidationError("pos", "request " + std::to_string(t.request_id) +
                                             ": prefill positions must precede decode positions");
    }
}

std::vector<RequestTraces> group_by_request(const TraceDataset& ds) {
    std::map<std::int64_t, RequestTraces> by_id;
    for (const auto& t : ds.traces) {
        auto& r = by_id[t.request_id];
        r.request_id = t.request_id;
        (t.phase == Phase::Prefill ? r.prefill : r.decode).push_back(&t);
    }
    std::vector<RequestTraces> out;
    out.reserve(by_id.size());
    auto by_pos = [](const ActivationTrace* a, const ActivationTrace* b) { return a->token_index < b->token_index; };
    for (auto& [id, r] : by_id) {
        std::stable_sort(r.prefill.begin(), r.prefill.end(), by_pos);
        std::stable_sort(r.decode.begin(), r.decode.end(), by_pos);
        out.push_back(std::move(r));
    }
    return out;
}

namespace {

const json& require(const json& obj, const char* key, const std::string& ctx) {
    auto it = obj.find(key);
    if (it == obj.end()) throw SchemaError(ctx + ": missing key '" + key + "'");
    return *it;
}

std::int64_t require_int(const json& obj, const char* key, const std::string& ctx) {
    const json& v = require(obj, key, ctx);
    if (!v.is_number_integer()) throw SchemaError(ctx + ": '" + key + "' must be an integer");
    return v.get<std::int64_t>();
}

ActivationTrace trace_from_json(const json& j, const std::string& ctx) {
    if (!j.is_object()) throw SchemaError(ctx + ": record must be an object");
    ActivationTrace t;
    t.request_id = require_int(j, "req", ctx);
    t.token_index = require_int(j, "pos", ctx);
    const json& phase = require(j, "phase", ctx);
    if (phase == "prefill")
        t.phase = Phase::Prefill;
    else if (phase == "decode")
        t.phase = Phase::Decode;
    else
        throw SchemaError(ctx + ": phase must be \"prefill\" or \"decode\"");
    const json& path = require(j, "path", ctx);
    if (!path.is_array()) throw SchemaError(ctx + ": path must be an array of arrays");
    t.path.reserve(path.size());
    for (const auto& layer : path) {
        if (!layer.is_array()) throw SchemaError(ctx + ": path must be an array of arrays");
        ExpertSet s;
        s.reserve(layer.size());
        for (const auto& e : layer) {
            if (!e.is_number_integer()) throw SchemaError(ctx + ": expert indices must be integers");
            s.push_back(e.get<int>());
        }
        std::sort(s.begin(), s.end());
        t.path.push_back(std::move(s));
    }
    return t;
}

json trace_to_json(const ActivationTrace& t) {
    return json{{"req", t.request_id}, {"phase", to_string(t.phase)}, {"pos", t.token_index}, {"path", t.path}};
}

}  // namespace

TraceDataset parse_traces(std::string_view text, const ModelConfig& cfg, std::string_view source) {
    TraceDataset ds;
    ds.model = ModelShape::of(cfg);
    const std::string src(source);
    std::size_t pos = 0;
    int line_no = 0;
    bool have_header = false;
    while (pos < text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        const std::string ctx = src + ":" + std::to_string(line_no);
        json j = parse_json(line, src, line_no);
        if (!have_header) {
            if (!j.is_object() || !j.contains("model"))
                throw SchemaError(ctx + ": first line must be the header {\"model\", \"L\", \"M\", \"k\"}");
            ModelShape shape;
            const json& name = require(j, "model", ctx);
            if (!name.is_string()) throw SchemaError(ctx + ": header 'model' must be a string");
            shape.name = name.get<std::string>();
            shape.num_layers = static_cast<int>(require_int(j, "L", ctx));
            shape.num_experts = static_cast<int>(require_int(j, "M", ctx));
            shape.top_k = static_cast<int>(require_int(j, "k", ctx));
            if (shape.num_layers != cfg.num_layers || shape.num_experts != cfg.num_experts ||
                shape.top_k != cfg.top_k)
                throw ValidationError("header", ctx + ": trace shape (L=" + std::to_string(shape.num_layers) +
                                                    ", M=" + std::to_string(shape.num_experts) +
                                                    ", k=" + std::to_string(shape.top_k) +
                                                    ") does not match config '" + cfg.name + "'");
            ds.model.name = shape.name;
            if (auto it = j.find("provenance"); it != j.end()) ds.provenance = *it;
            have_header = true;
            continue;
        }
        ActivationTrace t = trace_from_json(j, ctx);
        try {
            validate_trace(t, ds.model);
        } catch (const ValidationError& e) {
            throw ValidationError(e.field(), ctx + ": " + e.what());
        }
        ds.traces.push_back(std::move(t));
    }
    if (!have_header) throw SchemaError(src + ": missing header line");
    validate_dataset(ds);
    return ds;
}

TraceDataset load_traces(const std::filesystem::path& path, const ModelConfig& cfg) {
    return parse_traces(read_file(path), cfg, path.string());
}

std::string serialize_traces(const TraceDataset& ds) {
    std::string out;
    json header{{"model", ds.model.name},
                {"L", ds.model.num_layers},
                {"M", ds.model.num_experts},
                {"k", ds.model.top_k},
                {"provenance", ds.provenance}};
    out += header.dump();
    out += '\n';
    for (const auto& t : ds.traces) {
        out += trace_to_json(t).dump();
        out += '\n';
    }
    return out;
}

void save_traces(const TraceDataset& ds, const std::filesystem::path& path) { write_file(path, serialize_traces(ds)); }

TraceDataset filter_phase(const TraceDataset& ds, Phase phase) {
    TraceDataset out{ds.model, {}, ds.provenance};
    for (const auto& t : ds.traces)
        if (t.phase == phase) out.traces.push_back(t);
    return out;
}

std::pair<TraceDataset, TraceDataset> split_dataset(const TraceDataset& ds, double train_fraction,
                                                    std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw ValidationError("train_fraction", "must lie in (0, 1)");
    std::vector<std::int64_t> ids;
    {
        std::set<std::int64_t> uniq;
        for (const auto& t : ds.traces) uniq.insert(t.request_id);
        ids.assign(uniq.begin(), uniq.end());
    }
    if (ids.size() < 2) throw ValidationError("dataset", "need at least 2 requests to split");

    Rng rng(derive_seed(seed, 0x5EED5EEDULL));
    rng.shuffle(ids.begin(), ids.end());
    const auto n = static_cast<std::int64_t>(ids.size());
    auto n_train = static_cast<std::int64_t>(std::floor(static_cast<double>(n) * train_fraction + 0.5));
    n_train = std::clamp<std::int64_t>(n_train, 1, n - 1);
    const std::set<std::int64_t> train_ids(ids.begin(), ids.begin() + n_train);

    TraceDataset train{ds.model, {}, ds.provenance};
    TraceDataset test{ds.model, {}, ds.provenance};
    for (const auto& t : ds.traces) (train_ids.count(t.request_id) ? train : test).traces.push_back(t);
    return {std::move(train), std::move(test)};
}

}  // namespace moesim
