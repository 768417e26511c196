#include "moesim/config.hpp"

#include <cmath>

#include "moesim/error.hpp"
#include "moesim/io.hpp"

namespace moesim {

using nlohmann::json;

Bytes ModelConfig::expert_bytes() const { return derive_expert_bytes(*this); }

std::string_view to_string(SchedulerPolicy p) {
    switch (p) {
        case SchedulerPolicy::OnDemand: return "ondemand";
        case SchedulerPolicy::PrefetchAll: return "prefetchall";
        case SchedulerPolicy::DuoServe: return "duoserve";
        case SchedulerPolicy::DuoServeOracle: return "oracle";
    }
    return "?";
}

SchedulerPolicy parse_policy(std::string_view name) {
    if (name == "ondemand" || name == "acc") return SchedulerPolicy::OnDemand;
    if (name == "prefetchall" || name == "moesys") return SchedulerPolicy::PrefetchAll;
    if (name == "duoserve") return SchedulerPolicy::DuoServe;
    if (name == "oracle" || name == "duoserve-oracle") return SchedulerPolicy::DuoServeOracle;
    throw ValidationError("policy", "unknown policy '" + std::string(name) + "'");
}

std::vector<SchedulerPolicy> parse_policy_list(std::string_view csv) {
    std::vector<SchedulerPolicy> out;
    std::size_t pos = 0;
    while (pos <= csv.size()) {
        auto comma = csv.find(',', pos);
        if (comma == std::string_view::npos) comma = csv.size();
        auto item = csv.substr(pos, comma - pos);
        if (!item.empty()) out.push_back(parse_policy(item));
        pos = comma + 1;
    }
    if (out.empty()) throw ValidationError("policies", "empty policy list");
    return out;
}

int slot_count(SchedulerPolicy p, const ModelConfig& cfg) {
    switch (p) {
        case SchedulerPolicy::OnDemand: return cfg.top_k;
        case SchedulerPolicy::PrefetchAll: return 2 * cfg.num_experts;
        case SchedulerPolicy::DuoServe:
        case SchedulerPolicy::DuoServeOracle: return 2 * cfg.top_k;
    }
    return 0;
}

bool uses_predictor(SchedulerPolicy p) {
    return p == SchedulerPolicy::DuoServe || p == SchedulerPolicy::DuoServeOracle;
}

void validate(const ModelConfig& cfg) {
    if (cfg.num_layers < 1) throw ValidationError("model.num_layers", "must be >= 1");
    if (cfg.num_experts < 2) throw ValidationError("model.num_experts", "must be >= 2");
    if (cfg.top_k < 1 || cfg.top_k >= cfg.num_experts)
        throw ValidationError("model.top_k", "requires 1 <= top_k < num_experts (got top_k=" +
                                                 std::to_string(cfg.top_k) + ", num_experts=" +
                                                 std::to_string(cfg.num_experts) + ")");
    if (cfg.non_moe_bytes >= cfg.total_param_bytes)
        throw ValidationError("model.non_moe_bytes", "must be smaller than total_param_bytes");
    const Bytes experts = static_cast<Bytes>(cfg.num_layers) * static_cast<Bytes>(cfg.num_experts);
    if ((cfg.total_param_bytes - cfg.non_moe_bytes) / experts == 0)
        throw ValidationError("model.total_param_bytes", "derived expert size is zero");
}

void validate(const CostModel& cost) {
    auto positive = [](double v, const char* field) {
        if (!(std::isfinite(v) && v > 0.0)) throw ValidationError(field, "must be finite and > 0");
    };
    positive(cost.link_bandwidth_bytes_per_s, "cost.link_bandwidth_bytes_per_s");
    positive(cost.link_latency_s, "cost.link_latency_s");
    positive(cost.expert_compute_base_s, "cost.expert_compute_base_s");
    positive(cost.expert_compute_per_token_s, "cost.expert_compute_per_token_s");
    positive(cost.non_moe_compute_per_layer_s, "cost.non_moe_compute_per_layer_s");
    positive(cost.gate_compute_s, "cost.gate_compute_s");
    positive(cost.predictor_latency_s, "cost.predictor_latency_s");
}

Bytes derive_expert_bytes(const ModelConfig& cfg) {
    validate(cfg);
    return (cfg.total_param_bytes - cfg.non_moe_bytes) /
           (static_cast<Bytes>(cfg.num_layers) * static_cast<Bytes>(cfg.num_experts));
}

namespace {

const json& field(const json& obj, const char* section, const char* name) {
    auto it = obj.find(name);
    if (it == obj.end())
        throw SchemaError(std::string("missing field ") + section + "." + name);
    return *it;
}

Bytes bytes_field(const json& obj, const char* section, const char* name) {
    const json& v = field(obj, section, name);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
        throw SchemaError(std::string(section) + "." + name + " must be a non-negative integer");
    return v.get<Bytes>();
}

int int_field(const json& obj, const char* section, const char* name) {
    const json& v = field(obj, section, name);
    if (!v.is_number_integer()) throw SchemaError(std::string(section) + "." + name + " must be an integer");
    return v.get<int>();
}

double seconds_field(const json& obj, const char* section, const char* name) {
    const json& v = field(obj, section, name);
    if (!v.is_number()) throw SchemaError(std::string(section) + "." + name + " must be a number");
    return v.get<double>();
}

}  // namespace

SystemConfig config_from_json(const json& j) {
    if (!j.is_object()) throw SchemaError("config root must be an object");
    const json& m = field(j, "", "model");
    const json& c = field(j, "", "cost");
    if (!m.is_object() || !c.is_object()) throw SchemaError("model and cost must be objects");

    SystemConfig out;
    const json& name = field(m, "model", "name");
    if (!name.is_string()) throw SchemaError("model.name must be a string");
    out.model.name = name.get<std::string>();
    out.model.num_layers = int_field(m, "model", "num_layers");
    out.model.num_experts = int_field(m, "model", "num_experts");
    out.model.top_k = int_field(m, "model", "top_k");
    out.model.total_param_bytes = bytes_field(m, "model", "total_param_bytes");
    out.model.non_moe_bytes = bytes_field(m, "model", "non_moe_bytes");
    out.model.predictor_mem_bytes = bytes_field(m, "model", "predictor_mem_bytes");
    out.model.kv_reserve_bytes = bytes_field(m, "model", "kv_reserve_bytes");

    out.cost.link_bandwidth_bytes_per_s = seconds_field(c, "cost", "link_bandwidth_bytes_per_s");
    out.cost.link_latency_s = seconds_field(c, "cost", "link_latency_s");
    out.cost.expert_compute_base_s = seconds_field(c, "cost", "expert_compute_base_s");
    out.cost.expert_compute_per_token_s = seconds_field(c, "cost", "expert_compute_per_token_s");
    out.cost.non_moe_compute_per_layer_s = seconds_field(c, "cost", "non_moe_compute_per_layer_s");
    out.cost.gate_compute_s = seconds_field(c, "cost", "gate_compute_s");
    out.cost.predictor_latency_s = seconds_field(c, "cost", "predictor_latency_s");

    validate(out.model);
    validate(out.cost);
    return out;
}

json to_json(const SystemConfig& cfg) {
    const auto& m = cfg.model;
    const auto& c = cfg.cost;
    return json{
        {"model",
         {{"name", m.name},
          {"num_layers", m.num_layers},
          {"num_experts", m.num_experts},
          {"top_k", m.top_k},
          {"total_param_bytes", m.total_param_bytes},
          {"non_moe_bytes", m.non_moe_bytes},
          {"predictor_mem_bytes", m.predictor_mem_bytes},
          {"kv_reserve_bytes", m.kv_reserve_bytes}}},
        {"cost",
         {{"link_bandwidth_bytes_per_s", c.link_bandwidth_bytes_per_s},
          {"link_latency_s", c.link_latency_s},
          {"expert_compute_base_s", c.expert_compute_base_s},
          {"expert_compute_per_token_s", c.expert_compute_per_token_s},
          {"non_moe_compute_per_layer_s", c.non_moe_compute_per_layer_s},
          {"gate_compute_s", c.gate_compute_s},
          {"predictor_latency_s", c.predictor_latency_s}}},
    };
}

SystemConfig parse_config(std::string_view text, std::string_view source) {
    return config_from_json(parse_json(text, source));
}

SystemConfig load_config(const std::filesystem::path& path) {
    return parse_config(read_file(path), path.string());
}

void save_config(const SystemConfig& cfg, const std::filesystem::path& path) {
    write_file(path, dump_json(to_json(cfg)));
}

std::string config_digest(const SystemConfig& cfg) { return sha256_hex(to_json(cfg).dump()); }

}  // namespace moesim
