// sinklab: train, analyze, intervene, and compare attention-sink experiments.
//
// Exit codes: 0 success, 2 usage/config error, 3 runtime failure.
// The default output root is $SINKLAB_OUT_ROOT (falling back to ./runs).

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "sinklab/analysis.hpp"
#include "sinklab/training.hpp"

namespace fs = std::filesystem;
using namespace sinklab;
using nlohmann::json;

namespace {

constexpr const char* kOutRootEnv = "SINKLAB_OUT_ROOT";

std::string out_root() {
    const char* env = std::getenv(kOutRootEnv);
    return env && *env ? std::string(env) : std::string("runs");
}

json load_config_json(const std::string& path) {
    if (path.empty()) return json(RunConfig{});
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    try {
        json j;
        f >> j;
        return j;
    } catch (const std::exception& e) {
        throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
}

// --set model.d_k=32 / --set train.peak_lr=3e-4: dotted path into the config
// JSON; the value parses as JSON when possible, else as a plain string.
void apply_set(json& j, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("--set wants key.path=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    json* node = &j;
    size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part =
            key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("--set has an empty path segment in '" + key + "'");
        if (dot == std::string::npos) {
            json val = json::parse(raw, nullptr, false);
            if (val.is_discarded()) val = raw;
            (*node)[part] = val;
            return;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

RunConfig build_config(const std::string& config_path, const std::vector<std::string>& sets) {
    json j = load_config_json(config_path);
    for (const auto& kv : sets) apply_set(j, kv);
    try {
        return j.get<RunConfig>();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config does not match the expected schema: ") + e.what());
    }
}

// "64x128" -> batch 64, seq 128.
std::pair<int64_t, int64_t> parse_batch_by_seq(const std::string& s) {
    const auto x = s.find_first_of("xX");
    if (x == std::string::npos || x == 0 || x + 1 >= s.size())
        throw ConfigError("expected NxT (e.g. 64x128), got '" + s + "'");
    try {
        size_t done = 0;
        const int64_t b = std::stoll(s.substr(0, x), &done);
        if (done != x) throw std::invalid_argument(s);
        const int64_t t = std::stoll(s.substr(x + 1), &done);
        if (done != s.size() - x - 1) throw std::invalid_argument(s);
        if (b < 1 || t < 2) throw ConfigError("batch must be >= 1 and seq >= 2 in '" + s + "'");
        return {b, t};
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        throw ConfigError("expected NxT (e.g. 64x128), got '" + s + "'");
    }
}

ReportFormat format_from(const std::string& s) {
    if (s == "csv") return ReportFormat::Csv;
    if (s == "json") return ReportFormat::Json;
    throw ConfigError("unknown report format '" + s + "' (want csv|json)");
}

struct LoadedModel {
    ModelConfig cfg;
    ModelParams<float> mp;
    json header;
};

LoadedModel load_model(const std::string& ckpt) {
    if (!fs::exists(ckpt)) throw ConfigError("checkpoint does not exist: " + ckpt);
    auto raw = read_checkpoint_file(ckpt);
    if (!raw.header.contains("model"))
        throw IoError("checkpoint header lacks a model config: " + ckpt);
    LoadedModel lm{raw.header.at("model").get<ModelConfig>(), {}, raw.header};
    lm.cfg.validate();
    lm.mp = alloc_params<float>(lm.cfg);
    load_model_checkpoint(ckpt, lm.mp);
    return lm;
}

// Shared input selection for analyze/intervene: random tokens or corpus draws.
struct InputArgs {
    std::string random_bxt;
    std::string corpus;
    int64_t batch = 16;
    int64_t block = 0;  // 0: min(128, t_max)
    uint64_t seed = 1;
};

AnalysisInputs build_inputs(const ModelConfig& cfg, const InputArgs& a,
                            const std::string& fallback_bxt) {
    if (!a.random_bxt.empty() && !a.corpus.empty())
        throw ConfigError("--random-tokens and --corpus are mutually exclusive");
    if (!a.corpus.empty()) {
        if (!fs::exists(a.corpus)) throw ConfigError("corpus file does not exist: " + a.corpus);
        auto stream = TokenStream::from_file(a.corpus);
        const int64_t block = a.block > 0 ? a.block : std::min<int64_t>(128, cfg.t_max);
        return corpus_inputs(stream, cfg, a.batch, block, a.seed);
    }
    const std::string bxt = a.random_bxt.empty() ? fallback_bxt : a.random_bxt;
    auto [b, t] = parse_batch_by_seq(bxt);
    return random_token_inputs(cfg, b, t, a.seed);
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    std::string config, variant, corpus, out, resume;
    std::vector<std::string> sets;
    uint64_t seed = 0;
    bool seed_given = false;
    int64_t max_iters = 0;
};

int cmd_train(const TrainArgs& a) {
    RunConfig rc = build_config(a.config, a.sets);
    if (!a.variant.empty()) rc.model.variant = variant_from_string(a.variant);
    if (a.seed_given) rc.train.seed = a.seed;
    if (a.max_iters > 0) rc.train.max_iters = a.max_iters;
    if (!a.corpus.empty()) rc.corpus = a.corpus;
    if (!a.out.empty())
        rc.out_dir = a.out;
    else if (rc.out_dir == RunConfig{}.out_dir)
        rc.out_dir = out_root() + "/" + to_string(rc.model.variant) + "_seed" +
                     std::to_string(rc.train.seed);
    rc.validate();
    if (rc.corpus.empty())
        throw ConfigError("no corpus given (use --corpus or the config's corpus field)");
    if (!fs::exists(rc.corpus)) throw ConfigError("corpus file does not exist: " + rc.corpus);
    auto stream = TokenStream::from_file(rc.corpus);

    fs::create_directories(rc.out_dir);
    {
        std::ofstream snap(fs::path(rc.out_dir) / "config.json");
        snap << json(rc).dump(2) << "\n";
        if (!snap) throw IoError("cannot write config snapshot in " + rc.out_dir);
    }
    auto res = train_run<float>(rc.model, rc.train, stream, rc.out_dir, a.resume);
    std::printf("trained %s variant for %lld steps; final checkpoint: %s\n",
                to_string(rc.model.variant), static_cast<long long>(res.opt.step),
                res.final_checkpoint.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeArgs {
    std::string ckpt, metrics, out = "analysis.csv", format = "csv";
    InputArgs in;
};

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    size_t start = 0;
    while (start <= s.size()) {
        const auto comma = s.find(',', start);
        const std::string part =
            s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        if (!part.empty()) out.push_back(part);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

int cmd_analyze(const AnalyzeArgs& a) {
    auto lm = load_model(a.ckpt);
    const auto metrics = a.metrics.empty() ? analysis_names() : split_csv(a.metrics);
    validate_metric_names(metrics);
    auto in = build_inputs(lm.cfg, a.in, "64x128");
    ReportWriter w(a.out, format_from(a.format));
    run_analyses(lm.cfg, lm.mp, in, metrics, w);
    w.close();
    std::printf("analyzed %lld x %lld tokens; report: %s\n", static_cast<long long>(in.batch),
                static_cast<long long>(in.seq), a.out.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// intervene

struct IntervArgs {
    std::string ckpt, kind = "mask_block", out = "intervention.csv", format = "csv";
    int64_t position = 1, layer_begin = 0, layer_end = -1;
    std::vector<int64_t> heads;
    double factor = 4.0;
    InputArgs in;
};

int cmd_intervene(const IntervArgs& a) {
    auto lm = load_model(a.ckpt);
    auto in = build_inputs(lm.cfg, a.in, "16x128");

    InterventionSpec spec;
    spec.kind = intervention_kind_from_string(a.kind);
    spec.position = a.position;
    spec.layer_begin = a.layer_begin;
    spec.layer_end = a.layer_end;
    spec.heads = a.heads;
    spec.factor = a.factor;
    spec.validate(lm.cfg.n_layers, in.seq);

    auto oc = run_intervention_pair(lm.cfg, lm.mp, in, spec, a.in.seed);
    ReportWriter w(a.out, format_from(a.format));
    emit_intervention_records(lm.cfg, in, oc, "", w);

    const auto pos = static_cast<size_t>(spec.position);
    if (spec.kind == InterventionKind::NormScale) {
        // Matched-factor control: amplify the value variance instead of the
        // representation norm, same factor, same layers, same inputs.
        InterventionSpec ctrl = spec;
        ctrl.kind = InterventionKind::VarianceAmplify;
        auto oc2 = run_intervention_pair(lm.cfg, lm.mp, in, ctrl, a.in.seed);
        emit_intervention_records(lm.cfg, in, oc2, "_control", w);
        w.close();
        std::printf("%-5s | %-22s | %-22s\n", "layer", "norm_scale recv delta",
                    "variance_amplify recv delta");
        for (int64_t l = 0; l < lm.cfg.n_layers; ++l) {
            const auto lu = static_cast<size_t>(l);
            std::printf("%-5lld | %22.6g | %22.6g\n", static_cast<long long>(l),
                        oc.recv_poked[lu][pos] - oc.recv_base[lu][pos],
                        oc2.recv_poked[lu][pos] - oc2.recv_base[lu][pos]);
        }
    } else {
        w.close();
        std::printf("%-5s | %-14s | %-14s\n", "layer", "sink delta", "recv delta");
        for (int64_t l = 0; l < lm.cfg.n_layers; ++l) {
            const auto lu = static_cast<size_t>(l);
            std::printf("%-5lld | %14.6g | %14.6g\n", static_cast<long long>(l),
                        oc.sink_poked[lu] - oc.sink_base[lu],
                        oc.recv_poked[lu][pos] - oc.recv_base[lu][pos]);
        }
    }
    std::printf("report: %s\n", a.out.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// compare

struct CompareArgs {
    std::vector<std::string> dirs;
    std::string out;
    uint64_t seed = kCompareProbeSeed;
};

int cmd_compare(const CompareArgs& a) {
    auto table = compare_runs<float>(a.dirs, a.seed);
    std::fputs(format_comparison(table).c_str(), stdout);
    if (!a.out.empty()) {
        write_comparison_csv(table, a.out);
        std::printf("summary: %s\n", a.out.c_str());
    }
    return 0;
}

void add_input_flags(CLI::App* cmd, InputArgs& in) {
    cmd->add_option("--random-tokens", in.random_bxt,
                    "Random input batch as NxT (e.g. 64x128); mutually exclusive with --corpus");
    cmd->add_option("--corpus", in.corpus, "Sample inputs from this corpus file instead");
    cmd->add_option("--batch", in.batch, "Sequences per corpus-sampled batch")
        ->capture_default_str();
    cmd->add_option("--block", in.block, "Corpus sample length (0: min(128, t_max))")
        ->capture_default_str();
    cmd->add_option("--seed", in.seed, "Seed for input sampling")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"attention-sink laboratory: tiny-transformer training and analysis"};
    app.require_subcommand(1);

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Train a model and write a run directory");
    train->add_option("--config", ta.config, "JSON run config (flags override it)");
    train->add_option("--variant", ta.variant, "Attention variant: softmax|sigmoid|headnorm");
    auto* seed_opt = train->add_option("--seed", ta.seed, "Training seed");
    train->add_option("--max-iters", ta.max_iters, "Override train.max_iters (0: keep config)")
        ->capture_default_str();
    train->add_option("--corpus", ta.corpus, "Training corpus (raw bytes or pre-tokenized)");
    train->add_option("--out", ta.out, "Run directory (default: $SINKLAB_OUT_ROOT/<variant>_seed<seed>)");
    train->add_option("--resume", ta.resume, "Resume from this checkpoint");
    train->add_option("--set", ta.sets, "Dotted config override, e.g. --set train.peak_lr=3e-4")
        ->take_all();

    AnalyzeArgs aa;
    auto* analyze = app.add_subcommand("analyze", "Run diagnostics over a checkpoint");
    analyze->add_option("checkpoint", aa.ckpt, "Checkpoint to analyze")->required();
    analyze->add_option("--metrics", aa.metrics, "Comma-separated analysis names (default: all)");
    analyze->add_option("--out", aa.out, "Report path")->capture_default_str();
    analyze->add_option("--format", aa.format, "Report format: csv|json")->capture_default_str();
    add_input_flags(analyze, aa.in);

    IntervArgs ia;
    auto* intervene = app.add_subcommand("intervene", "Paired baseline/intervened forward passes");
    intervene->add_option("checkpoint", ia.ckpt, "Checkpoint to probe")->required();
    intervene->add_option("--kind", ia.kind, "mask_block|variance_amplify|norm_scale")
        ->capture_default_str();
    intervene->add_option("--position", ia.position, "Target position")->capture_default_str();
    intervene->add_option("--factor", ia.factor, "Amplification / scale factor")
        ->capture_default_str();
    intervene->add_option("--layer-begin", ia.layer_begin, "First affected layer")
        ->capture_default_str();
    intervene->add_option("--layer-end", ia.layer_end, "Last affected layer (-1: last)")
        ->capture_default_str();
    intervene->add_option("--heads", ia.heads, "Affected heads (default: all)")->delimiter(',');
    intervene->add_option("--out", ia.out, "Report path")->capture_default_str();
    intervene->add_option("--format", ia.format, "Report format: csv|json")->capture_default_str();
    add_input_flags(intervene, ia.in);

    CompareArgs ca;
    auto* compare = app.add_subcommand("compare", "Summarize completed runs per variant");
    compare->add_option("run_dirs", ca.dirs, "Two or more run directories")
        ->required()
        ->expected(2, -1);
    compare->add_option("--out", ca.out, "Also write the summary as CSV here");
    compare->add_option("--seed", ca.seed, "Seed for the shared probe batch")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    ta.seed_given = seed_opt->count() > 0;

    try {
        if (train->parsed()) return cmd_train(ta);
        if (analyze->parsed()) return cmd_analyze(aa);
        if (intervene->parsed()) return cmd_intervene(ia);
        if (compare->parsed()) return cmd_compare(ca);
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const InputError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
}
