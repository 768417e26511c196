#include "cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "moesim/config.hpp"
#include "moesim/error.hpp"
#include "moesim/io.hpp"
#include "moesim/predictor.hpp"
#include "moesim/simulator.hpp"
#include "moesim/stats.hpp"
#include "moesim/trace.hpp"

#ifndef MOESIM_VERSION
#define MOESIM_VERSION "0.0.0"
#endif

namespace moesim::cli {

using nlohmann::json;

namespace {

std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

// Run record written next to an artifact. Timestamps live here and nowhere else,
// so the artifacts themselves stay byte-reproducible.
class Manifest {
public:
    explicit Manifest(std::string command) : command_(std::move(command)), started_(utc_now()) {}

    Manifest& config(const fs::path& p) {
        configs_.push_back(p.string());
        return input(p);
    }
    Manifest& seed(const std::string& name, std::uint64_t v) {
        seeds_[name] = v;
        return *this;
    }
    Manifest& input(const fs::path& p) {
        inputs_[p.string()] = file_sha256(p);
        return *this;
    }
    Manifest& output(const fs::path& p) {
        outputs_[p.string()] = file_sha256(p);
        return *this;
    }
    Manifest& arg(const std::string& name, json v) {
        args_[name] = std::move(v);
        return *this;
    }

    void write(const fs::path& artifact) const {
        const json j{{"schema_version", 1},
                     {"command", command_},
                     {"tool_version", MOESIM_VERSION},
                     {"config_paths", configs_},
                     {"seeds", seeds_},
                     {"args", args_},
                     {"inputs", inputs_},
                     {"outputs", outputs_},
                     {"started_at", started_},
                     {"finished_at", utc_now()}};
        write_file(artifact.string() + ".manifest.json", dump_json(j));
    }

private:
    std::string command_;
    std::string started_;
    std::vector<std::string> configs_;
    json seeds_ = json::object();
    json args_ = json::object();
    json inputs_ = json::object();
    json outputs_ = json::object();
};

std::vector<int> parse_hidden(const std::string& spec) {
    if (spec == "full") return full_hidden_widths();
    if (spec == "test") return test_hidden_widths();
    std::vector<int> out;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const int w = std::stoi(item, &used);
            if (used != item.size() || w < 1) throw std::invalid_argument(item);
            out.push_back(w);
        } catch (const std::exception&) {
            throw UsageError("--hidden: expected 'full', 'test' or positive integers, got '" + item + "'");
        }
    }
    if (out.empty()) throw UsageError("--hidden: no widths given");
    return out;
}

void check_shape(const ModelShape& a, const ModelShape& b, const std::string& what) {
    if (a.num_layers != b.num_layers || a.num_experts != b.num_experts || a.top_k != b.top_k)
        throw ValidationError(what, "was built for a different model shape");
}

double random_guess_at_least_one(int M, int k) {
    // 1 - C(M-k, k) / C(M, k)
    double miss = 1.0;
    for (int i = 0; i < k; ++i) miss *= static_cast<double>(M - k - i) / static_cast<double>(M - i);
    return 1.0 - miss;
}

struct SimInputs {
    SystemConfig cfg;
    TraceDataset ds;
    std::vector<SchedulerPolicy> policies;
    std::optional<ExpertPredictor> model;
    std::optional<ExpertStats> stats;
    SetPredictor predictor;
    json inputs;
};

SimInputs load_sim_inputs(const SimOptions& o, Manifest& manifest) {
    SimInputs in;
    in.cfg = load_config(o.config);
    manifest.config(o.config).input(o.traces).seed("seed", o.seed);
    in.ds = load_traces(o.traces, in.cfg.model);
    if (in.ds.traces.empty()) throw ValidationError("traces", "file holds no traces");
    try {
        in.policies = parse_policy_list(o.policies);
    } catch (const ValidationError& e) {
        throw UsageError(std::string("--policies: ") + e.what());
    }
    in.inputs = {{"traces_sha256", file_sha256(o.traces)}, {"config_digest", config_digest(in.cfg)}};

    bool needs_model = false;
    for (auto p : in.policies) needs_model |= p == SchedulerPolicy::DuoServe;
    if (needs_model && (o.model.empty() || o.stats.empty()))
        throw UsageError("duoserve needs --model and --stats");
    if (!o.stats.empty()) {
        in.stats = load_stats(o.stats);
        check_shape(in.stats->model, in.ds.model, "stats");
        manifest.input(o.stats);
        in.inputs["stats_sha256"] = file_sha256(o.stats);
    }
    if (!o.model.empty()) {
        in.model = load_predictor(o.model);
        check_shape(in.model->model, in.ds.model, "model");
        manifest.input(o.model);
        in.inputs["model_sha256"] = file_sha256(o.model);
        if (!in.stats) throw UsageError("--model needs --stats");
        in.predictor = precomputed_set_predictor(*in.model, *in.stats, in.ds);
    }
    return in;
}

json report_json(const SimReport& r, const json& inputs) {
    json j = to_json(r);
    j["inputs"] = inputs;
    return j;
}

}  // namespace

void gen_traces(const GenOptions& o, std::ostream& out) {
    if (!(o.alpha >= 0.0 && o.alpha <= 1.0)) throw UsageError("--alpha must lie in [0, 1]");
    if (!(o.affinity_noise >= 0.0 && o.affinity_noise <= 1.0)) throw UsageError("--affinity-noise must lie in [0, 1]");
    if (o.requests < 1 || o.decode_len < 1 || o.prefill_len < 1)
        throw UsageError("--requests, --decode-len and --prefill-len must be positive");
    Manifest manifest("gen-traces");
    const SystemConfig cfg = load_config(o.config);
    manifest.config(o.config).seed("seed", o.seed);
    manifest.arg("requests", o.requests).arg("decode_len", o.decode_len).arg("prefill_len", o.prefill_len);
    manifest.arg("alpha", o.alpha).arg("affinity_noise", o.affinity_noise);

    const GeneratorParams params = synthesize_generator_params(cfg.model, o.seed, o.alpha, o.affinity_noise);
    TraceDataset ds = generate_traces(params, cfg.model, o.requests, o.decode_len, o.prefill_len);
    ds.provenance["config_digest"] = config_digest(cfg);
    ds.provenance["affinity_noise"] = o.affinity_noise;
    save_traces(ds, o.out);
    manifest.output(o.out);
    if (!o.params_out.empty()) {
        write_file(o.params_out, dump_json(to_json(params)));
        manifest.output(o.params_out);
    }
    manifest.write(o.out);
    out << "wrote " << ds.traces.size() << " traces (" << o.requests << " requests) to " << o.out.string() << "\n";
}

void split(const SplitOptions& o, std::ostream& out) {
    Manifest manifest("split");
    const SystemConfig cfg = load_config(o.config);
    manifest.config(o.config).input(o.traces).seed("seed", o.seed).arg("train_fraction", o.train_fraction);
    const TraceDataset ds = load_traces(o.traces, cfg.model);
    auto [train, test] = split_dataset(ds, o.train_fraction, o.seed);
    const std::string source = file_sha256(o.traces);
    for (auto* fold : {&train, &test})
        fold->provenance["split"] = {{"source_sha256", source},
                                     {"fold", fold == &train ? "train" : "test"},
                                     {"seed", o.seed},
                                     {"train_fraction", o.train_fraction}};
    save_traces(train, o.train_out);
    save_traces(test, o.test_out);
    manifest.output(o.train_out).output(o.test_out);
    manifest.write(o.train_out);
    out << "train: " << train.traces.size() << " traces, test: " << test.traces.size() << " traces\n";
}

void stats(const StatsOptions& o, std::ostream& out) {
    Manifest manifest("stats");
    const SystemConfig cfg = load_config(o.config);
    manifest.config(o.config).input(o.traces).arg("decode_only", o.decode_only);
    const TraceDataset ds = load_traces(o.traces, cfg.model);
    const ExpertStats s = build_stats(ds, o.decode_only);
    json j = to_json(s);
    j["inputs"] = {{"traces_sha256", file_sha256(o.traces)}, {"config_digest", config_digest(cfg)}};
    write_file(o.out, dump_json(j));
    manifest.output(o.out);
    if (!o.csv_dir.empty()) {
        export_csv(s, o.csv_dir);
        manifest.output(o.csv_dir / "popularity.csv");
    }
    manifest.write(o.out);
    out << "stats over " << s.popularity.n_episodes << " traces written to " << o.out.string() << "\n";
}

void train(const TrainOptions& o, std::ostream& out) {
    Manifest manifest("train");
    const SystemConfig cfg = load_config(o.config);
    manifest.config(o.config).input(o.traces).input(o.stats).seed("seed", o.seed);
    const TraceDataset ds = load_traces(o.traces, cfg.model);
    const ExpertStats s = load_stats(o.stats);
    check_shape(s.model, ds.model, "stats");

    TrainHyper hyper;
    hyper.epochs = o.epochs;
    hyper.batch_size = o.batch_size;
    hyper.learning_rate = o.learning_rate;
    hyper.dropout = o.dropout;
    hyper.seed = o.seed;
    hyper.hidden = parse_hidden(o.hidden);
    hyper.include_prefill = o.include_prefill;
    try {
        hyper.affinity = parse_affinity_input(o.affinity);
    } catch (const ValidationError& e) {
        throw UsageError(std::string("--affinity-input: ") + e.what());
    }
    manifest.arg("epochs", o.epochs).arg("batch_size", o.batch_size).arg("learning_rate", o.learning_rate);
    manifest.arg("hidden", hyper.hidden).arg("dropout", o.dropout).arg("affinity_input", o.affinity);

    auto [model, report] = moesim::train(ds, s, hyper);
    const json inputs{{"train_traces_sha256", file_sha256(o.traces)},
                      {"stats_sha256", file_sha256(o.stats)},
                      {"config_digest", config_digest(cfg)}};
    model.metadata = {{"inputs", inputs},
                      {"epochs", hyper.epochs},
                      {"batch_size", hyper.batch_size},
                      {"learning_rate", hyper.learning_rate},
                      {"seed", hyper.seed},
                      {"include_prefill", hyper.include_prefill}};
    save_predictor(model, o.out);
    json rj = to_json(report);
    rj["inputs"] = inputs;
    rj["model_sha256"] = file_sha256(o.out);
    const fs::path report_path = o.report.empty() ? fs::path(o.out.string() + ".report.json") : o.report;
    write_file(report_path, dump_json(rj));
    manifest.output(o.out).output(report_path);
    manifest.write(o.out);
    out << "trained " << report.epochs << " epochs on " << report.n_samples << " samples, loss "
        << report.initial_loss << " -> " << (report.epoch_loss.empty() ? report.initial_loss : report.epoch_loss.back())
        << "\n";
}

void eval(const EvalOptions& o, std::ostream& out) {
    if (o.model.empty() && !o.oracle_stub) throw UsageError("eval needs --model or --oracle-stub");
    Manifest manifest("eval");
    const SystemConfig cfg = load_config(o.config);
    manifest.config(o.config).input(o.traces).input(o.stats);
    const TraceDataset ds = load_traces(o.traces, cfg.model);
    const ExpertStats s = load_stats(o.stats);
    check_shape(s.model, ds.model, "stats");
    const std::string test_digest = file_sha256(o.traces);

    json report{{"schema_version", 1},
                {"inputs", {{"test_traces_sha256", test_digest}, {"stats_sha256", file_sha256(o.stats)}}},
                {"random_guess_at_least_one_rate",
                 random_guess_at_least_one(ds.model.num_experts, ds.model.top_k)},
                {"warnings", json::array()}};
    if (o.oracle_stub) {
        report["predictor"] = "oracle-stub";
        report["rates"] = to_json(evaluate(oracle_set_predictor(), ds));
    } else {
        const ExpertPredictor model = load_predictor(o.model);
        check_shape(model.model, ds.model, "model");
        manifest.input(o.model);
        report["predictor"] = "mlp";
        report["inputs"]["model_sha256"] = file_sha256(o.model);
        report["rates"] = to_json(evaluate(model, ds, s));
        const json& mi = model.metadata.contains("inputs") ? model.metadata["inputs"] : json::object();
        if (mi.value("train_traces_sha256", "") == test_digest)
            report["warnings"].push_back("train/test overlap: evaluation traces are the training traces");
    }
    if (o.popularity_baseline) report["popularity_baseline"] = to_json(evaluate(popularity_set_predictor(s), ds));
    write_file(o.out, dump_json(report));
    manifest.output(o.out);
    manifest.write(o.out);
    out << "topk_hit_rate " << report["rates"]["topk_hit_rate"].get<double>() << ", at_least_one_rate "
        << report["rates"]["at_least_one_rate"].get<double>();
    if (o.popularity_baseline)
        out << " (popularity baseline " << report["popularity_baseline"]["at_least_one_rate"].get<double>() << ")";
    out << "\n";
    for (const auto& w : report["warnings"]) out << "warning: " << w.get<std::string>() << "\n";
}

void simulate(const SimOptions& o, std::ostream& out) {
    Manifest manifest("simulate");
    SimInputs in = load_sim_inputs(o, manifest);
    if (in.policies.size() != 1) throw UsageError("simulate takes exactly one --policy; use compare for several");
    const SchedulerPolicy policy = in.policies.front();
    const SetPredictor* pred = in.model ? &in.predictor : nullptr;
    const ExpertStats* st = in.stats ? &*in.stats : nullptr;

    const auto requests = group_by_request(in.ds);
    std::vector<RequestMetrics> metrics;
    for (const auto& req : requests) {
        RequestResult r = simulate_request(policy, req, in.cfg.model, in.cfg.cost, pred, st);
        const bool dump = !o.timeline.empty() &&
                          (o.timeline_request ? *o.timeline_request == req.request_id : &req == &requests.front());
        if (dump) {
            write_file(o.timeline, r.timeline.to_jsonl());
            manifest.output(o.timeline);
        }
        metrics.push_back(std::move(r.metrics));
    }
    const SimReport report = build_report(policy, std::move(metrics), in.cfg, o.seed);
    write_file(o.out, dump_json(report_json(report, in.inputs)));
    manifest.output(o.out);
    manifest.write(o.out);
    out << format_comparison({report});
}

void compare(const SimOptions& o, std::ostream& out) {
    Manifest manifest("compare");
    SimInputs in = load_sim_inputs(o, manifest);
    const std::vector<SimReport> reports =
        run_experiment(in.policies, in.ds, in.cfg, in.model ? &in.predictor : nullptr,
                       in.stats ? &*in.stats : nullptr, o.seed);
    for (const auto& r : reports) {
        const fs::path p = o.out / (std::string(to_string(r.policy)) + ".json");
        write_file(p, dump_json(report_json(r, in.inputs)));
        manifest.output(p);
    }
    json cmp = compare_reports(reports);
    cmp["inputs"] = in.inputs;
    const fs::path cmp_path = o.out / "comparison.json";
    write_file(cmp_path, dump_json(cmp));
    const std::string table = format_comparison(reports);
    write_file(o.out / "comparison.txt", table);
    manifest.output(cmp_path).output(o.out / "comparison.txt");
    manifest.write(cmp_path);
    out << table;
}

void pipeline(const PipelineOptions& o, std::ostream& out) {
    const fs::path d = o.out_dir;
    GenOptions g;
    g.config = o.config;
    g.out = d / "traces.jsonl";
    g.params_out = d / "generator_params.json";
    g.requests = o.requests;
    g.decode_len = o.decode_len;
    g.prefill_len = o.prefill_len;
    g.alpha = o.alpha;
    g.affinity_noise = o.affinity_noise;
    g.seed = o.seed;
    gen_traces(g, out);

    SplitOptions sp{g.out, o.config, d / "train.jsonl", d / "test.jsonl", o.train_fraction, o.seed};
    split(sp, out);

    StatsOptions st{sp.train_out, o.config, d / "stats.json", d / "csv", false};
    stats(st, out);

    TrainOptions tr;
    tr.traces = sp.train_out;
    tr.config = o.config;
    tr.stats = st.out;
    tr.out = d / "model.bin";
    tr.report = d / "train_report.json";
    tr.epochs = o.epochs;
    tr.hidden = o.hidden;
    tr.seed = o.seed;
    train(tr, out);

    EvalOptions ev{tr.out, sp.test_out, st.out, o.config, d / "eval.json", false, true};
    eval(ev, out);

    SimOptions sim;
    sim.traces = sp.test_out;
    sim.config = o.config;
    sim.model = tr.out;
    sim.stats = st.out;
    sim.out = d / "sim";
    sim.policies = o.policies;
    sim.seed = o.seed;
    compare(sim, out);
}

// ---------------------------------------------------------------------------

namespace {

std::uint64_t default_seed() {
    const char* env = std::getenv("DUOSERVE_SEED");
    if (!env || !*env) return 0;
    try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(env, &used);
        if (used != std::string_view(env).size()) throw std::invalid_argument(env);
        return v;
    } catch (const std::exception&) {
        throw UsageError(std::string("DUOSERVE_SEED is not an unsigned integer: ") + env);
    }
}

void add_seed(CLI::App* cmd, std::uint64_t& seed, std::string help = "random seed (default: $DUOSERVE_SEED, else 0)") {
    cmd->add_option("--seed", seed, std::move(help));
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Expert-offloading MoE inference simulator", "moesim"};
    app.set_version_flag("--version", MOESIM_VERSION);
    app.require_subcommand(1);

    std::uint64_t seed_default = 0;
    try {
        seed_default = default_seed();
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    }

    GenOptions gen;
    gen.seed = seed_default;
    auto* c_gen = app.add_subcommand("gen-traces", "generate synthetic activation traces");
    c_gen->add_option("--config", gen.config, "system config JSON")->required()->check(CLI::ExistingFile);
    c_gen->add_option("--out", gen.out, "output JSONL")->required();
    c_gen->add_option("--requests", gen.requests, "number of requests")->required();
    c_gen->add_option("--decode-len", gen.decode_len, "decode tokens per request")->required();
    c_gen->add_option("--prefill-len", gen.prefill_len, "prefill tokens per request")->required();
    c_gen->add_option("--alpha", gen.alpha, "weight of affinity vs uniform, in [0, 1]")->required();
    c_gen->add_option("--affinity-noise", gen.affinity_noise, "mass spread off the preferred successor")
        ->capture_default_str();
    c_gen->add_option("--params-out", gen.params_out, "also write the generator parameters");
    add_seed(c_gen, gen.seed);

    SplitOptions sp;
    sp.seed = seed_default;
    auto* c_split = app.add_subcommand("split", "split traces into train/test folds by request");
    c_split->add_option("--traces", sp.traces)->required()->check(CLI::ExistingFile);
    c_split->add_option("--config", sp.config)->required()->check(CLI::ExistingFile);
    c_split->add_option("--train-out", sp.train_out)->required();
    c_split->add_option("--test-out", sp.test_out)->required();
    c_split->add_option("--train-fraction", sp.train_fraction)->capture_default_str()->check(CLI::Range(0.0, 1.0));
    add_seed(c_split, sp.seed);

    StatsOptions st;
    auto* c_stats = app.add_subcommand("stats", "popularity and affinity matrices");
    c_stats->add_option("--traces", st.traces)->required()->check(CLI::ExistingFile);
    c_stats->add_option("--config", st.config)->required()->check(CLI::ExistingFile);
    c_stats->add_option("--out", st.out, "matrices JSON")->required();
    c_stats->add_option("--csv-dir", st.csv_dir, "per-layer CSV export directory");
    c_stats->add_flag("--decode-only", st.decode_only, "ignore prefill traces");

    TrainOptions tr;
    tr.seed = seed_default;
    auto* c_train = app.add_subcommand("train", "train the expert predictor");
    c_train->add_option("--traces", tr.traces, "training traces")->required()->check(CLI::ExistingFile);
    c_train->add_option("--config", tr.config)->required()->check(CLI::ExistingFile);
    c_train->add_option("--stats", tr.stats, "matrices from the training fold")->required()->check(CLI::ExistingFile);
    c_train->add_option("--out", tr.out, "model file")->required();
    c_train->add_option("--report", tr.report, "training report (default: <out>.report.json)");
    c_train->add_option("--epochs", tr.epochs)->capture_default_str()->check(CLI::NonNegativeNumber);
    c_train->add_option("--batch-size", tr.batch_size)->capture_default_str()->check(CLI::Range(2, 1 << 24));
    c_train->add_option("--lr", tr.learning_rate)->capture_default_str()->check(CLI::PositiveNumber);
    c_train->add_option("--dropout", tr.dropout)->capture_default_str()->check(CLI::Range(0.0, 0.99));
    c_train->add_option("--hidden", tr.hidden, "full, test, or comma-separated widths")->capture_default_str();
    c_train->add_option("--affinity-input", tr.affinity, "mean or concat")->capture_default_str();
    c_train->add_flag("--include-prefill", tr.include_prefill, "also train on prefill traces");
    add_seed(c_train, tr.seed);

    EvalOptions ev;
    auto* c_eval = app.add_subcommand("eval", "hit rates of a predictor on held-out traces");
    c_eval->add_option("--model", ev.model)->check(CLI::ExistingFile);
    c_eval->add_option("--traces", ev.traces, "held-out traces")->required()->check(CLI::ExistingFile);
    c_eval->add_option("--stats", ev.stats)->required()->check(CLI::ExistingFile);
    c_eval->add_option("--config", ev.config)->required()->check(CLI::ExistingFile);
    c_eval->add_option("--out", ev.out, "report JSON")->required();
    c_eval->add_flag("--oracle-stub", ev.oracle_stub, "evaluate a predictor that returns the true sets");
    c_eval->add_flag("--popularity-baseline", ev.popularity_baseline, "add the popularity-only baseline");

    SimOptions sim;
    sim.seed = seed_default;
    std::int64_t timeline_request = -1;
    auto* c_sim = app.add_subcommand("simulate", "simulate one policy");
    c_sim->add_option("--traces", sim.traces)->required()->check(CLI::ExistingFile);
    c_sim->add_option("--config", sim.config)->required()->check(CLI::ExistingFile);
    c_sim->add_option("--policy", sim.policies, "ondemand, prefetchall, duoserve or oracle")->required();
    c_sim->add_option("--model", sim.model)->check(CLI::ExistingFile);
    c_sim->add_option("--stats", sim.stats)->check(CLI::ExistingFile);
    c_sim->add_option("--out", sim.out, "report JSON")->required();
    c_sim->add_option("--timeline", sim.timeline, "write one request's event timeline as JSONL");
    c_sim->add_option("--request", timeline_request, "request id for --timeline (default: first)");
    add_seed(c_sim, sim.seed, "seed recorded in the report");

    SimOptions cmp;
    cmp.seed = seed_default;
    cmp.policies = "ondemand,prefetchall,duoserve,oracle";
    auto* c_cmp = app.add_subcommand("compare", "simulate several policies on the same requests");
    c_cmp->add_option("--traces", cmp.traces)->required()->check(CLI::ExistingFile);
    c_cmp->add_option("--config", cmp.config)->required()->check(CLI::ExistingFile);
    c_cmp->add_option("--policies", cmp.policies)->capture_default_str();
    c_cmp->add_option("--model", cmp.model)->check(CLI::ExistingFile);
    c_cmp->add_option("--stats", cmp.stats)->check(CLI::ExistingFile);
    c_cmp->add_option("--out-dir", cmp.out, "directory for reports")->required();
    add_seed(c_cmp, cmp.seed, "seed recorded in the reports");

    PipelineOptions pl;
    pl.seed = seed_default;
    auto* c_pl = app.add_subcommand("pipeline", "gen-traces, split, stats, train, eval and compare in one go");
    c_pl->add_option("--config", pl.config)->required()->check(CLI::ExistingFile);
    c_pl->add_option("--out-dir", pl.out_dir)->required();
    c_pl->add_option("--requests", pl.requests)->capture_default_str();
    c_pl->add_option("--decode-len", pl.decode_len)->capture_default_str();
    c_pl->add_option("--prefill-len", pl.prefill_len)->capture_default_str();
    c_pl->add_option("--alpha", pl.alpha)->capture_default_str();
    c_pl->add_option("--affinity-noise", pl.affinity_noise)->capture_default_str();
    c_pl->add_option("--train-fraction", pl.train_fraction)->capture_default_str()->check(CLI::Range(0.0, 1.0));
    c_pl->add_option("--epochs", pl.epochs)->capture_default_str()->check(CLI::NonNegativeNumber);
    c_pl->add_option("--hidden", pl.hidden)->capture_default_str();
    c_pl->add_option("--policies", pl.policies)->capture_default_str();
    add_seed(c_pl, pl.seed);

    std::vector<const char*> argv{"moesim"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::Success& e) {
        app.exit(e, out, err);
        return kOk;
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kUsage;
    }

    try {
        if (c_gen->parsed()) gen_traces(gen, out);
        else if (c_split->parsed()) split(sp, out);
        else if (c_stats->parsed()) stats(st, out);
        else if (c_train->parsed()) train(tr, out);
        else if (c_eval->parsed()) eval(ev, out);
        else if (c_sim->parsed()) {
            if (timeline_request >= 0) sim.timeline_request = timeline_request;
            simulate(sim, out);
        } else if (c_cmp->parsed()) compare(cmp, out);
        else if (c_pl->parsed()) pipeline(pl, out);
        return kOk;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return kUsage;
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << "\n";
        return kNumeric;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kOther;
    }
}

}  // namespace moesim::cli
