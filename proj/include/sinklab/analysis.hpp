#pragma once

// Checkpoint-level analysis orchestration. Builds token batches (random or
// corpus-sampled), runs a single traced forward pass, and streams metric
// records for a requested set of named analyses. Also hosts the paired
// baseline/intervened runner and the multi-run comparison summary the CLI
// surfaces.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sinklab/checkpoint.hpp"
#include "sinklab/common.hpp"
#include "sinklab/config.hpp"
#include "sinklab/diagnostics.hpp"
#include "sinklab/interventions.hpp"
#include "sinklab/model.hpp"
#include "sinklab/report.hpp"
#include "sinklab/rng.hpp"
#include "sinklab/token_stream.hpp"

namespace sinklab {

// ---------------------------------------------------------------------------
// analysis inputs

struct AnalysisInputs {
    std::vector<int32_t> tokens;  // batch * seq, row-major
    int64_t batch = 0, seq = 0;
};

// Fully random sequences: every position uniform over the byte range, so the
// across-batch variance at position 0 reflects an unaggregated value vector.
inline AnalysisInputs random_token_inputs(const ModelConfig& cfg, int64_t batch, int64_t seq,
                                          uint64_t seed) {
    if (batch < 1) throw InputError("random_token_inputs: batch must be >= 1");
    if (seq < 2 || seq > cfg.t_max)
        throw InputError("random_token_inputs: seq " + std::to_string(seq) +
                         " outside [2, " + std::to_string(cfg.t_max) + "]");
    AnalysisInputs in;
    in.batch = batch;
    in.seq = seq;
    in.tokens.resize(static_cast<size_t>(batch * seq));
    const int64_t hi = std::min<int64_t>(cfg.vocab, 256);
    auto rng = CounterRng(seed).fork("random_tokens");
    for (int64_t b = 0; b < batch; ++b) {
        auto row = rng.fork(static_cast<uint64_t>(b));
        for (int64_t t = 0; t < seq; ++t)
            in.tokens[static_cast<size_t>(b * seq + t)] =
                static_cast<int32_t>(row.next_u64() % static_cast<uint64_t>(hi));
    }
    return in;
}

inline AnalysisInputs corpus_inputs(const TokenStream& stream, const ModelConfig& cfg,
                                    int64_t batch, int64_t seq, uint64_t seed) {
    if (batch < 1) throw InputError("corpus_inputs: batch must be >= 1");
    if (seq < 2 || seq > cfg.t_max)
        throw InputError("corpus_inputs: seq " + std::to_string(seq) + " outside [2, " +
                         std::to_string(cfg.t_max) + "]");
    if (stream.vocab() > cfg.vocab)
        throw ConfigError("corpus vocabulary " + std::to_string(stream.vocab()) +
                          " exceeds model vocabulary " + std::to_string(cfg.vocab));
    AnalysisInputs in;
    in.batch = batch;
    in.seq = seq;
    in.tokens.resize(static_cast<size_t>(batch * seq));
    std::vector<int32_t> y(static_cast<size_t>(seq));
    auto rng = CounterRng(seed).fork("analysis_batch");
    for (int64_t b = 0; b < batch; ++b) {
        auto row = rng.fork(static_cast<uint64_t>(b));
        sample_block(stream.data(), stream.size(), seq, row, in.tokens.data() + b * seq, y.data());
    }
    return in;
}

// ---------------------------------------------------------------------------
// registry

inline const std::vector<std::string>& analysis_names() {
    static const std::vector<std::string> names = {
        "sink_score",
        "received_attention_profile",
        "positional_variance",
        "representation_norm",
        "wo_alignment",
        "super_neuron_scan",
        "neuron_activation_trace",
        "dominance_ratio",
        "effective_rank",
        "qk_locking_report",
        "head_entropy_std",
        "key_approximation_check",
    };
    return names;
}

inline void validate_metric_names(const std::vector<std::string>& metrics) {
    if (metrics.empty()) throw ConfigError("no analyses requested");
    const auto& known = analysis_names();
    for (const auto& m : metrics) {
        if (std::find(known.begin(), known.end(), m) != known.end()) continue;
        std::string msg = "unknown analysis '" + m + "'; valid names:";
        for (const auto& k : known) msg += " " + k;
        throw ConfigError(msg);
    }
}

inline TraceOptions trace_needs(const std::vector<std::string>& metrics) {
    TraceOptions t;
    for (const auto& m : metrics) {
        if (m == "sink_score" || m == "received_attention_profile") {
            t.attention = true;
        } else if (m == "positional_variance") {
            t.aggregated = true;
            t.attn_out = true;
        } else if (m == "representation_norm" || m == "dominance_ratio" || m == "effective_rank") {
            t.hidden = true;
        } else if (m == "wo_alignment") {
            t.aggregated = true;
        } else if (m == "neuron_activation_trace") {
            t.normed_inputs = true;
        } else if (m == "qk_locking_report") {
            t.qkv = true;
        } else if (m == "head_entropy_std") {
            t.attention = true;
            t.aggregated = true;
        } else if (m == "key_approximation_check") {
            t.qkv = true;
            t.normed_inputs = true;
        }
        // super_neuron_scan reads parameters only.
    }
    return t;
}

// ---------------------------------------------------------------------------
// per-analysis record emission

namespace analysis_detail {

// Input of W_O laid out as concatenated heads; per-dimension std across all
// (batch, position) rows. HeadNorm models feed the normalized aggregate.
template <typename T>
std::vector<double> wo_input_std(const ModelConfig& cfg, const LayerTrace<T>& tr, int64_t batch,
                                 int64_t seq) {
    const auto& o = tr.aggregated_normed.defined() ? tr.aggregated_normed : tr.aggregated;
    if (!o.defined()) throw ContractError("wo_alignment: trace lacks aggregated outputs");
    std::vector<double> sigma(static_cast<size_t>(cfg.d));
    for (int64_t h = 0; h < cfg.n_heads; ++h)
        for (int64_t j = 0; j < cfg.d_k; ++j) {
            detail::VarAcc acc;
            for (int64_t b = 0; b < batch; ++b)
                for (int64_t t = 0; t < seq; ++t)
                    acc.add(static_cast<double>(
                        o.data()[((b * cfg.n_heads + h) * seq + t) * cfg.d_k + j]));
            sigma[static_cast<size_t>(h * cfg.d_k + j)] = acc.stddev();
        }
    return sigma;
}

template <typename T>
double row_dominance(const T* row, int64_t d) {
    std::vector<double> tmp(row, row + d);
    return dominance_ratio(tmp.data(), d);
}

// Index of the input dimension with the largest batch-mean magnitude at
// position 0 of the normalized attention input (the outlier coordinate the
// first-token key rides on).
template <typename T>
int64_t dominant_input_dim(const ModelConfig& cfg, const LayerTrace<T>& tr, int64_t batch,
                           int64_t seq) {
    const auto& x = tr.attn_input_normed;
    if (!x.defined()) throw ContractError("key_approximation_check: trace lacks normed inputs");
    int64_t best = 0;
    double best_mag = -1.0;
    for (int64_t i = 0; i < cfg.d; ++i) {
        double acc = 0.0;
        for (int64_t b = 0; b < batch; ++b)
            acc += static_cast<double>(x.data()[(b * seq + 0) * cfg.d + i]);
        const double mag = std::abs(acc / batch);
        if (mag > best_mag) {
            best_mag = mag;
            best = i;
        }
    }
    return best;
}

}  // namespace analysis_detail

template <typename T>
void emit_analysis(const ModelConfig& cfg, const ModelParams<T>& mp,
                   const std::vector<LayerTrace<T>>& traces, const AnalysisInputs& in,
                   const std::string& metric, ReportWriter& w) {
    const int64_t B = in.batch, S = in.seq, L = cfg.n_layers, H = cfg.n_heads;
    if (metric == "sink_score") {
        const int64_t n = B * H * (S - 1);
        for (int64_t l = 0; l < L; ++l)
            w.add({metric, l, -1, -1, -1, sink_score(cfg, traces, l, B, S), n});
    } else if (metric == "received_attention_profile") {
        for (int64_t l = 0; l < L; ++l) {
            auto recv = received_attention_profile(cfg, traces, l, B, S);
            for (int64_t j = 0; j < S; ++j)
                w.add({metric, l, -1, j, -1, recv[static_cast<size_t>(j)],
                       B * H * (S - std::max<int64_t>(j, 1))});
        }
    } else if (metric == "positional_variance") {
        for (int64_t l = 0; l < L; ++l) {
            auto agg = positional_variance(cfg, traces, l, B, S, VarianceStage::PostAggregation);
            for (int64_t t = 0; t < S; ++t)
                w.add({metric, l, -1, t, -1, agg[static_cast<size_t>(t)], B});
        }
        for (int64_t l = 0; l < L; ++l) {
            auto wo = positional_variance(cfg, traces, l, B, S, VarianceStage::PostWo);
            for (int64_t t = 0; t < S; ++t)
                w.add({"positional_variance_post_wo", l, -1, t, -1, wo[static_cast<size_t>(t)], B});
        }
    } else if (metric == "representation_norm") {
        for (int64_t l = 0; l < L; ++l)
            for (int64_t t = 0; t < S; ++t)
                w.add({metric, l, -1, t, -1, representation_norm(cfg, traces, l, B, S, t), B});
    } else if (metric == "wo_alignment") {
        for (int64_t l = 0; l < L; ++l) {
            auto sigma = analysis_detail::wo_input_std(cfg, traces.at(static_cast<size_t>(l)), B, S);
            auto rep = wo_alignment(mp.blocks.at(static_cast<size_t>(l)).wo, sigma);
            w.add({metric, l, -1, -1, -1, rep.mean, rep.n_valid});
            for (int64_t j = 0; j < static_cast<int64_t>(rep.tau.size()); ++j)
                if (rep.tau[static_cast<size_t>(j)])
                    w.add({metric, l, -1, -1, j, *rep.tau[static_cast<size_t>(j)], 1});
        }
    } else if (metric == "super_neuron_scan") {
        for (int64_t l = 0; l < L; ++l) {
            auto rep = super_neuron_scan(mp.blocks.at(static_cast<size_t>(l)));
            for (const auto& sn : rep.top) {
                const double key = std::hypot(sn.gate_norm, sn.up_norm);
                w.add({metric, l, -1, -1, sn.index, key, 1});
                w.add({"super_neuron_scan_down_kurtosis", l, -1, -1, sn.index,
                       sn.down_row_kurtosis, 1});
            }
            w.add({"super_neuron_scan_flagged", l, -1, -1, -1,
                   static_cast<double>(rep.flagged.size()), cfg.d_f});
        }
    } else if (metric == "neuron_activation_trace") {
        for (int64_t l = 0; l < L; ++l) {
            const auto& blk = mp.blocks.at(static_cast<size_t>(l));
            auto rep = super_neuron_scan(blk, 1);
            if (rep.top.empty()) continue;
            const int64_t neuron = rep.top[0].index;
            auto act = neuron_activation_trace(cfg, blk, traces.at(static_cast<size_t>(l)), neuron);
            for (int64_t t = 0; t < S; ++t) {
                double cos_acc = 0.0, up_acc = 0.0;
                int64_t n_cos = 0;
                for (int64_t b = 0; b < B; ++b) {
                    const size_t r = static_cast<size_t>(b * S + t);
                    if (act.cosine[r]) {
                        cos_acc += *act.cosine[r];
                        ++n_cos;
                    }
                    up_acc += act.up_activation[r];
                }
                if (n_cos > 0) w.add({metric, l, -1, t, neuron, cos_acc / n_cos, n_cos});
                w.add({"neuron_activation_trace_up", l, -1, t, neuron, up_acc / B, B});
            }
        }
    } else if (metric == "dominance_ratio") {
        for (int64_t l = 0; l < L; ++l) {
            const auto& x = traces.at(static_cast<size_t>(l)).block_input;
            if (!x.defined()) throw ContractError("dominance_ratio: trace lacks hidden states");
            double acc = 0.0;
            for (int64_t b = 0; b < B; ++b)
                acc += analysis_detail::row_dominance(x.data() + (b * S + 0) * cfg.d, cfg.d);
            w.add({metric, l, -1, 0, -1, acc / B, B});
        }
    } else if (metric == "effective_rank") {
        for (int64_t l = 0; l < L; ++l) {
            const auto& x = traces.at(static_cast<size_t>(l)).block_input;
            if (!x.defined()) throw ContractError("effective_rank: trace lacks hidden states");
            for (int64_t b = 0; b < B; ++b) {
                auto m = Tensor<T>::zeros({S, cfg.d});
                std::memcpy(m.mutable_data(), x.data() + b * S * cfg.d,
                            static_cast<size_t>(S * cfg.d) * sizeof(T));
                w.add({metric, l, -1, -1, -1, effective_rank(m), 1});
            }
        }
    } else if (metric == "qk_locking_report") {
        for (int64_t l = 0; l < L; ++l) {
            auto reps = qk_locking_report(cfg, mp, traces, l, B, S);
            for (int64_t h = 0; h < H; ++h) {
                const auto& r = reps[static_cast<size_t>(h)];
                if (r.alignment) w.add({metric, l, h, -1, -1, *r.alignment, B});
                w.add({"qk_locking_report_positive_ratio", l, h, -1, -1, r.positive_ratio, B * S});
            }
        }
    } else if (metric == "head_entropy_std") {
        for (int64_t l = 0; l < L; ++l) {
            auto reps = head_entropy_std(cfg, traces, l, B, S);
            for (int64_t h = 0; h < H; ++h) {
                const auto& r = reps[static_cast<size_t>(h)];
                w.add({metric, l, h, -1, -1, r.entropy, B * S});
                w.add({"head_output_std", l, h, -1, -1, r.out_std, B * S * cfg.d_k});
            }
        }
    } else if (metric == "key_approximation_check") {
        for (int64_t l = 0; l < L; ++l) {
            const int64_t c =
                analysis_detail::dominant_input_dim(cfg, traces.at(static_cast<size_t>(l)), B, S);
            auto cosines = key_approximation_check(cfg, mp, traces, l, B, S, c);
            for (int64_t h = 0; h < H; ++h)
                if (cosines[static_cast<size_t>(h)])
                    w.add({metric, l, h, -1, c, std::abs(*cosines[static_cast<size_t>(h)]), B});
        }
    } else {
        throw ContractError("emit_analysis: unhandled metric '" + metric + "'");
    }
}

// One traced forward pass, then every requested analysis in request order.
template <typename T>
void run_analyses(const ModelConfig& cfg, const ModelParams<T>& mp, const AnalysisInputs& in,
                  const std::vector<std::string>& metrics, ReportWriter& w) {
    validate_metric_names(metrics);
    for (const auto& m : metrics)
        if (m == "positional_variance" && in.batch < 2)
            throw ConfigError("positional_variance needs a batch of at least 2 sequences");
    ForwardOptions opt;
    opt.trace = trace_needs(metrics);
    auto res = model_forward(mp, in.tokens, in.batch, in.seq, opt);
    for (const auto& m : metrics) emit_analysis(cfg, mp, res.traces, in, m, w);
}

// ---------------------------------------------------------------------------
// paired intervention runs

struct InterventionOutcome {
    std::vector<double> sink_base, sink_poked;               // per layer
    std::vector<std::vector<double>> recv_base, recv_poked;  // [layer][position]
};

// Baseline and intervened forward passes on identical inputs. The value-mean
// table a VarianceAmplify needs is estimated here from fresh random sequences.
template <typename T>
InterventionOutcome run_intervention_pair(const ModelConfig& cfg, const ModelParams<T>& mp,
                                          const AnalysisInputs& in, const InterventionSpec& spec,
                                          uint64_t seed) {
    spec.validate(cfg.n_layers, in.seq);
    ForwardOptions base_opt;
    base_opt.trace.attention = true;
    auto base = model_forward(mp, in.tokens, in.batch, in.seq, base_opt);

    std::vector<InterventionSpec> specs{spec};
    ValueMeanTable means;
    ForwardOptions poke_opt;
    poke_opt.trace.attention = true;
    poke_opt.interventions = &specs;
    if (spec.kind == InterventionKind::VarianceAmplify) {
        means = estimate_value_means(mp, 32, in.seq, seed);
        poke_opt.value_means = &means;
    }
    auto poked = model_forward(mp, in.tokens, in.batch, in.seq, poke_opt);

    InterventionOutcome out;
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        out.sink_base.push_back(sink_score(cfg, base.traces, l, in.batch, in.seq));
        out.sink_poked.push_back(sink_score(cfg, poked.traces, l, in.batch, in.seq));
        out.recv_base.push_back(received_attention_profile(cfg, base.traces, l, in.batch, in.seq));
        out.recv_poked.push_back(received_attention_profile(cfg, poked.traces, l, in.batch, in.seq));
    }
    return out;
}

// Records for one paired run; tag distinguishes multiple paired runs in one
// report (e.g. the matched-factor control next to the main intervention).
inline void emit_intervention_records(const ModelConfig& cfg, const AnalysisInputs& in,
                                      const InterventionOutcome& oc, const std::string& tag,
                                      ReportWriter& w) {
    const int64_t B = in.batch, S = in.seq, H = cfg.n_heads;
    const int64_t n_sink = B * H * (S - 1);
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const auto lu = static_cast<size_t>(l);
        w.add({"sink_score_baseline" + tag, l, -1, -1, -1, oc.sink_base[lu], n_sink});
        w.add({"sink_score_intervened" + tag, l, -1, -1, -1, oc.sink_poked[lu], n_sink});
        w.add({"sink_score_delta" + tag, l, -1, -1, -1, oc.sink_poked[lu] - oc.sink_base[lu],
               n_sink});
    }
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const auto lu = static_cast<size_t>(l);
        for (int64_t j = 0; j < S; ++j) {
            const auto ju = static_cast<size_t>(j);
            const int64_t n = B * H * (S - std::max<int64_t>(j, 1));
            w.add({"received_attention_baseline" + tag, l, -1, j, -1, oc.recv_base[lu][ju], n});
            w.add({"received_attention_intervened" + tag, l, -1, j, -1, oc.recv_poked[lu][ju], n});
            w.add({"received_attention_delta" + tag, l, -1, j, -1,
                   oc.recv_poked[lu][ju] - oc.recv_base[lu][ju], n});
        }
    }
}

// ---------------------------------------------------------------------------
// multi-run comparison

inline const std::vector<std::string>& comparison_metric_names() {
    static const std::vector<std::string> names = {
        "Train Loss",
        "Validation Loss",
        "Effective Rank (layer-wise mean)",
        "Dimension Disparity (layer-wise mean)",
    };
    return names;
}

struct RunSummary {
    std::string dir, variant;
    double train_loss = std::numeric_limits<double>::quiet_NaN();
    double val_loss = std::numeric_limits<double>::quiet_NaN();
    double effective_rank_mean = std::numeric_limits<double>::quiet_NaN();
    double dominance_mean = std::numeric_limits<double>::quiet_NaN();

    double metric(size_t i) const {
        switch (i) {
            case 0: return train_loss;
            case 1: return val_loss;
            case 2: return effective_rank_mean;
            case 3: return dominance_mean;
        }
        throw ContractError("RunSummary::metric: index out of range");
    }
};

namespace analysis_detail {

inline void parse_loss_log(const std::string& path, RunSummary& s) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open loss log: " + path);
    std::string line;
    if (!std::getline(f, line)) throw IoError("empty loss log: " + path);
    bool any = false;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        // step,lr,train_loss,val_loss,grad_norm
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() < 5) throw IoError("malformed loss log line in " + path + ": " + line);
        s.train_loss = std::stod(cells[2]);
        if (!cells[3].empty()) s.val_loss = std::stod(cells[3]);
        any = true;
    }
    if (!any) throw IoError("loss log has no data rows: " + path);
}

}  // namespace analysis_detail

// Probe batch shared by every run in one comparison so the rank/disparity
// summaries are computed on identical token inputs.
inline constexpr int64_t kCompareProbeBatch = 16;
inline constexpr uint64_t kCompareProbeSeed = 20260823;

template <typename T = float>
RunSummary summarize_run(const std::string& dir, uint64_t probe_seed = kCompareProbeSeed) {
    namespace fs = std::filesystem;
    RunSummary s;
    s.dir = dir;
    if (!fs::is_directory(dir)) throw ConfigError("not a run directory: " + dir);
    const fs::path log = fs::path(dir) / "loss_log.csv";
    if (!fs::exists(log)) throw ConfigError("run directory missing loss log: " + log.string());
    analysis_detail::parse_loss_log(log.string(), s);

    const fs::path ck = fs::path(dir) / "checkpoints" / "final.snkl";
    if (!fs::exists(ck))
        throw ConfigError("run directory missing final checkpoint: " + ck.string());
    auto loaded = read_checkpoint_file(ck.string());
    const ModelConfig cfg = loaded.header.at("model").template get<ModelConfig>();
    s.variant = loaded.header.contains("variant")
                    ? loaded.header.at("variant").template get<std::string>()
                    : std::string(to_string(cfg.variant));
    auto mp = alloc_params<T>(cfg);
    load_model_checkpoint(ck.string(), mp);

    const int64_t seq = std::min<int64_t>(64, cfg.t_max);
    auto in = random_token_inputs(cfg, kCompareProbeBatch, seq, probe_seed);
    ForwardOptions opt;
    opt.trace.hidden = true;
    auto res = model_forward(mp, in.tokens, in.batch, in.seq, opt);

    double rank_acc = 0.0, dom_acc = 0.0;
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const auto& x = res.traces.at(static_cast<size_t>(l)).block_input;
        rank_acc += effective_rank(x);
        double layer_dom = 0.0;
        for (int64_t b = 0; b < in.batch; ++b)
            layer_dom += analysis_detail::row_dominance(x.data() + (b * in.seq + 0) * cfg.d, cfg.d);
        dom_acc += layer_dom / in.batch;
    }
    s.effective_rank_mean = rank_acc / cfg.n_layers;
    s.dominance_mean = dom_acc / cfg.n_layers;
    return s;
}

struct ComparisonCell {
    double mean = 0.0, stddev = 0.0;
    int64_t n_runs = 0;
};

struct ComparisonTable {
    std::vector<std::string> variants;               // first-seen order
    std::vector<std::vector<ComparisonCell>> cells;  // [metric][variant]
    std::vector<RunSummary> runs;
};

template <typename T = float>
ComparisonTable compare_runs(const std::vector<std::string>& dirs,
                             uint64_t probe_seed = kCompareProbeSeed) {
    if (dirs.size() < 2) throw ConfigError("compare needs at least two run directories");
    ComparisonTable table;
    for (const auto& d : dirs) {
        auto s = summarize_run<T>(d, probe_seed);
        if (std::find(table.variants.begin(), table.variants.end(), s.variant) ==
            table.variants.end())
            table.variants.push_back(s.variant);
        table.runs.push_back(std::move(s));
    }
    const auto& metrics = comparison_metric_names();
    table.cells.assign(metrics.size(), std::vector<ComparisonCell>(table.variants.size()));
    for (size_t mi = 0; mi < metrics.size(); ++mi)
        for (size_t vi = 0; vi < table.variants.size(); ++vi) {
            detail::VarAcc acc;
            for (const auto& run : table.runs)
                if (run.variant == table.variants[vi]) acc.add(run.metric(mi));
            auto& c = table.cells[mi][vi];
            c.n_runs = acc.n;
            if (acc.n > 0) {
                c.mean = acc.mean();
                c.stddev = acc.stddev();
            }
        }
    return table;
}

inline std::string format_comparison(const ComparisonTable& table) {
    const auto& metrics = comparison_metric_names();
    std::vector<std::vector<std::string>> grid;
    std::vector<std::string> head{"Metric"};
    for (const auto& v : table.variants) head.push_back(v);
    grid.push_back(head);
    for (size_t mi = 0; mi < metrics.size(); ++mi) {
        std::vector<std::string> row{metrics[mi]};
        for (size_t vi = 0; vi < table.variants.size(); ++vi) {
            const auto& c = table.cells[mi][vi];
            char buf[96];
            if (c.n_runs == 0)
                std::snprintf(buf, sizeof buf, "-");
            else
                std::snprintf(buf, sizeof buf, "%.4f +/- %.4f (n=%lld)", c.mean, c.stddev,
                              static_cast<long long>(c.n_runs));
            row.push_back(buf);
        }
        grid.push_back(std::move(row));
    }
    std::vector<size_t> width(grid[0].size(), 0);
    for (const auto& row : grid)
        for (size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
    std::string out;
    for (size_t r = 0; r < grid.size(); ++r) {
        for (size_t i = 0; i < grid[r].size(); ++i) {
            std::string cell = grid[r][i];
            cell.resize(width[i], ' ');
            out += cell;
            out += i + 1 < grid[r].size() ? " | " : "";
        }
        out += "\n";
        if (r == 0) {
            for (size_t i = 0; i < width.size(); ++i) {
                out += std::string(width[i], '-');
                out += i + 1 < width.size() ? "-+-" : "";
            }
            out += "\n";
        }
    }
    return out;
}

inline void write_comparison_csv(const ComparisonTable& table, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot open comparison output: " + path);
    std::fputs("metric,variant,mean,std,n_runs\n", f);
    const auto& metrics = comparison_metric_names();
    bool ok = true;
    for (size_t mi = 0; mi < metrics.size(); ++mi)
        for (size_t vi = 0; vi < table.variants.size(); ++vi) {
            const auto& c = table.cells[mi][vi];
            ok = ok && std::fprintf(f, "\"%s\",%s,%.9g,%.9g,%lld\n", metrics[mi].c_str(),
                                    table.variants[vi].c_str(), c.mean, c.stddev,
                                    static_cast<long long>(c.n_runs)) > 0;
        }
    ok = std::fclose(f) == 0 && ok;
    if (!ok) throw IoError("write failed: " + path);
}

}  // namespace sinklab
