#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace moesim::cli {

namespace fs = std::filesystem;

enum ExitCode { kOk = 0, kOther = 1, kUsage = 2, kNumeric = 3 };

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct GenOptions {
    fs::path config, out, params_out;
    int requests = 0;
    int decode_len = 0;
    int prefill_len = 0;
    double alpha = 0.8;
    double affinity_noise = 0.1;
    std::uint64_t seed = 0;
};

struct SplitOptions {
    fs::path traces, config, train_out, test_out;
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
};

struct StatsOptions {
    fs::path traces, config, out, csv_dir;
    bool decode_only = false;
};

struct TrainOptions {
    fs::path traces, config, stats, out, report;
    int epochs = 20;
    int batch_size = 256;
    double learning_rate = 1e-3;
    double dropout = 0.1;
    std::string hidden = "full";  // "full", "test", or comma-separated widths
    std::string affinity = "mean";
    bool include_prefill = false;
    std::uint64_t seed = 0;
};

struct EvalOptions {
    fs::path model, traces, stats, config, out;
    bool oracle_stub = false;
    bool popularity_baseline = false;
};

struct SimOptions {
    fs::path traces, config, model, stats, out, timeline;
    std::string policies;
    std::optional<std::int64_t> timeline_request;
    std::uint64_t seed = 0;
};

struct PipelineOptions {
    fs::path config, out_dir;
    // Sized so a default run trains at full widths in a few minutes on one core.
    int requests = 40;
    int decode_len = 8;
    int prefill_len = 8;
    double alpha = 0.8;
    double affinity_noise = 0.1;
    double train_fraction = 0.8;
    int epochs = 20;
    std::string hidden = "full";
    std::string policies = "ondemand,prefetchall,duoserve,oracle";
    std::uint64_t seed = 0;
};

// Each command writes its artifacts plus a `<artifact>.manifest.json` sidecar and
// prints a short summary to `out`. Errors are thrown.
void gen_traces(const GenOptions& o, std::ostream& out);
void split(const SplitOptions& o, std::ostream& out);
void stats(const StatsOptions& o, std::ostream& out);
void train(const TrainOptions& o, std::ostream& out);
void eval(const EvalOptions& o, std::ostream& out);
void simulate(const SimOptions& o, std::ostream& out);
// `o.out` is a directory receiving one report per policy plus comparison.json.
void compare(const SimOptions& o, std::ostream& out);
void pipeline(const PipelineOptions& o, std::ostream& out);

// Parses `args` (without the program name), runs the command and maps failures to
// exit codes: 2 usage, 3 numeric, 1 anything else.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace moesim::cli
