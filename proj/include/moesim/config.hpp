#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace moesim {

using Bytes = std::uint64_t;

struct ModelConfig {
    std::string name;
    int num_layers = 0;   // L
    int num_experts = 0;  // M, per layer
    int top_k = 0;        // k, experts activated per token per layer
    Bytes total_param_bytes = 0;
    Bytes non_moe_bytes = 0;
    Bytes predictor_mem_bytes = 0;
    Bytes kv_reserve_bytes = 0;

    Bytes expert_bytes() const;
    bool operator==(const ModelConfig&) const = default;
};

// Timing parameters, all in seconds (bandwidth in bytes/s).
struct CostModel {
    double link_bandwidth_bytes_per_s = 20e9;
    double link_latency_s = 10e-6;
    double expert_compute_base_s = 0.0;
    double expert_compute_per_token_s = 0.0;
    double non_moe_compute_per_layer_s = 0.0;
    double gate_compute_s = 0.0;
    double predictor_latency_s = 0.6e-3;

    double transfer_time(Bytes bytes) const {
        return link_latency_s + static_cast<double>(bytes) / link_bandwidth_bytes_per_s;
    }
    double expert_compute_time(int n_tokens) const {
        return expert_compute_base_s + n_tokens * expert_compute_per_token_s;
    }
    bool operator==(const CostModel&) const = default;
};

enum class SchedulerPolicy { OnDemand, PrefetchAll, DuoServe, DuoServeOracle };

std::string_view to_string(SchedulerPolicy p);
// Accepts "ondemand"/"acc", "prefetchall"/"moesys", "duoserve", "oracle"/"duoserve-oracle".
SchedulerPolicy parse_policy(std::string_view name);
std::vector<SchedulerPolicy> parse_policy_list(std::string_view csv);

// Device expert-cache slots provisioned by a policy.
int slot_count(SchedulerPolicy p, const ModelConfig& cfg);
bool uses_predictor(SchedulerPolicy p);

struct SystemConfig {
    ModelConfig model;
    CostModel cost;
    bool operator==(const SystemConfig&) const = default;
};

void validate(const ModelConfig& cfg);
void validate(const CostModel& cost);

// (total - non_moe) / (L * M), rounded down.
Bytes derive_expert_bytes(const ModelConfig& cfg);

SystemConfig parse_config(std::string_view text, std::string_view source = "<memory>");
SystemConfig load_config(const std::filesystem::path& path);
void save_config(const SystemConfig& cfg, const std::filesystem::path& path);

nlohmann::json to_json(const SystemConfig& cfg);
SystemConfig config_from_json(const nlohmann::json& j);

// Stable hex digest of the canonical JSON form.
std::string config_digest(const SystemConfig& cfg);

}  // namespace moesim
