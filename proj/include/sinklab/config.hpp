#pragma once

// Run configuration: model architecture, training recipe, and the JSON
// round-trip used by config files, checkpoint headers, and --set overrides.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sinklab/common.hpp"
#include "sinklab/interventions.hpp"

namespace sinklab {

using json = nlohmann::json;

enum class AttentionVariant { Softmax, Sigmoid, HeadNormSoftmax };

inline const char* to_string(AttentionVariant v) {
    switch (v) {
        case AttentionVariant::Softmax: return "softmax";
        case AttentionVariant::Sigmoid: return "sigmoid";
        case AttentionVariant::HeadNormSoftmax: return "headnorm";
    }
    return "?";
}

inline AttentionVariant variant_from_string(const std::string& s) {
    if (s == "softmax") return AttentionVariant::Softmax;
    if (s == "sigmoid") return AttentionVariant::Sigmoid;
    if (s == "headnorm") return AttentionVariant::HeadNormSoftmax;
    throw ConfigError("unknown attention variant '" + s + "' (want softmax|sigmoid|headnorm)");
}

struct ModelConfig {
    int64_t d = 128;       // hidden size
    int64_t d_f = 512;     // FFN intermediate size
    int64_t d_k = 16;      // per-head dimension
    int64_t n_heads = 8;   // H; d == n_heads * d_k
    int64_t n_layers = 6;  // L
    int64_t t_max = 128;   // maximum sequence length
    int64_t vocab = 259;   // byte vocab + BOS/EOS/PAD
    AttentionVariant variant = AttentionVariant::Softmax;
    double rope_base = 10000.0;
    double norm_eps = 1e-6;
    // Smaller than norm_eps: the defining property RMS(out / lambda) = 1 must
    // hold to 1e-4 even for the tiny aggregated outputs of an untrained net.
    double head_norm_eps = 1e-10;

    void validate() const {
        auto positive = [](const char* name, int64_t v) {
            if (v < 1) throw ConfigError(std::string("model.") + name + " must be >= 1, got " +
                                         std::to_string(v));
        };
        positive("d", d);
        positive("d_f", d_f);
        positive("d_k", d_k);
        positive("n_heads", n_heads);
        positive("n_layers", n_layers);
        positive("vocab", vocab);
        if (t_max < 2)
            throw ConfigError("model.t_max must be >= 2, got " + std::to_string(t_max));
        if (d != n_heads * d_k)
            throw ConfigError("model.d (" + std::to_string(d) + ") != n_heads*d_k (" +
                              std::to_string(n_heads) + "*" + std::to_string(d_k) + ")");
        if (d_k % 2 != 0)
            throw ConfigError("model.d_k must be even for rotary embedding, got " +
                              std::to_string(d_k));
        if (!(rope_base > 0.0)) throw ConfigError("model.rope_base must be > 0");
        if (!(norm_eps > 0.0)) throw ConfigError("model.norm_eps must be > 0");
        if (!(head_norm_eps > 0.0)) throw ConfigError("model.head_norm_eps must be > 0");
    }
};

struct TrainConfig {
    double peak_lr = 1e-3;
    double min_lr = 1e-4;
    int64_t warmup_iters = 300;
    int64_t max_iters = 3000;
    int64_t batch_size = 8;
    int64_t block_size = 128;
    int64_t grad_accum = 1;
    double weight_decay = 0.1;
    double grad_clip = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps_adam = 1e-8;
    uint64_t seed = 1;
    int64_t eval_interval = 250;
    int64_t checkpoint_interval = 1000;

    void validate() const {
        if (!(min_lr > 0.0) || min_lr > peak_lr)
            throw ConfigError("train.min_lr must satisfy 0 < min_lr <= peak_lr");
        if (warmup_iters < 0 || warmup_iters >= max_iters)
            throw ConfigError("train.warmup_iters must be in [0, max_iters)");
        if (!(grad_clip > 0.0)) throw ConfigError("train.grad_clip must be > 0");
        if (batch_size < 1 || block_size < 2 || grad_accum < 1)
            throw ConfigError("train.batch_size/block_size/grad_accum out of range");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
            throw ConfigError("train.betas must be in [0, 1)");
        if (!(eps_adam > 0.0)) throw ConfigError("train.eps_adam must be > 0");
        if (eval_interval < 1 || checkpoint_interval < 1)
            throw ConfigError("train.eval_interval/checkpoint_interval must be >= 1");
    }
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    std::string corpus;
    std::string out_dir = "runs/default";
    std::vector<std::string> analyses;
    std::vector<InterventionSpec> interventions;

    void validate() const {
        model.validate();
        train.validate();
        if (train.block_size > model.t_max)
            throw ConfigError("train.block_size exceeds model.t_max");
    }
};

// ---- JSON round-trip -------------------------------------------------------

inline void to_json(json& j, const ModelConfig& m) {
    j = json{{"d", m.d},           {"d_f", m.d_f},
             {"d_k", m.d_k},       {"n_heads", m.n_heads},
             {"n_layers", m.n_layers}, {"t_max", m.t_max},
             {"vocab", m.vocab},   {"variant", to_string(m.variant)},
             {"rope_base", m.rope_base}, {"norm_eps", m.norm_eps},
             {"head_norm_eps", m.head_norm_eps}};
}

inline void from_json(const json& j, ModelConfig& m) {
    m = ModelConfig{};
    if (j.contains("d")) j.at("d").get_to(m.d);
    if (j.contains("d_f")) j.at("d_f").get_to(m.d_f);
    if (j.contains("d_k")) j.at("d_k").get_to(m.d_k);
    if (j.contains("n_heads")) j.at("n_heads").get_to(m.n_heads);
    if (j.contains("n_layers")) j.at("n_layers").get_to(m.n_layers);
    if (j.contains("t_max")) j.at("t_max").get_to(m.t_max);
    if (j.contains("vocab")) j.at("vocab").get_to(m.vocab);
    if (j.contains("variant")) m.variant = variant_from_string(j.at("variant").get<std::string>());
    if (j.contains("rope_base")) j.at("rope_base").get_to(m.rope_base);
    if (j.contains("norm_eps")) j.at("norm_eps").get_to(m.norm_eps);
    if (j.contains("head_norm_eps")) j.at("head_norm_eps").get_to(m.head_norm_eps);
}

inline void to_json(json& j, const TrainConfig& t) {
    j = json{{"peak_lr", t.peak_lr},
             {"min_lr", t.min_lr},
             {"warmup_iters", t.warmup_iters},
             {"max_iters", t.max_iters},
             {"batch_size", t.batch_size},
             {"block_size", t.block_size},
             {"grad_accum", t.grad_accum},
             {"weight_decay", t.weight_decay},
             {"grad_clip", t.grad_clip},
             {"beta1", t.beta1},
             {"beta2", t.beta2},
             {"eps_adam", t.eps_adam},
             {"seed", t.seed},
             {"eval_interval", t.eval_interval},
             {"checkpoint_interval", t.checkpoint_interval}};
}

inline void from_json(const json& j, TrainConfig& t) {
    t = TrainConfig{};
    if (j.contains("peak_lr")) j.at("peak_lr").get_to(t.peak_lr);
    if (j.contains("min_lr")) j.at("min_lr").get_to(t.min_lr);
    if (j.contains("warmup_iters")) j.at("warmup_iters").get_to(t.warmup_iters);
    if (j.contains("max_iters")) j.at("max_iters").get_to(t.max_iters);
    if (j.contains("batch_size")) j.at("batch_size").get_to(t.batch_size);
    if (j.contains("block_size")) j.at("block_size").get_to(t.block_size);
    if (j.contains("grad_accum")) j.at("grad_accum").get_to(t.grad_accum);
    if (j.contains("weight_decay")) j.at("weight_decay").get_to(t.weight_decay);
    if (j.contains("grad_clip")) j.at("grad_clip").get_to(t.grad_clip);
    if (j.contains("beta1")) j.at("beta1").get_to(t.beta1);
    if (j.contains("beta2")) j.at("beta2").get_to(t.beta2);
    if (j.contains("eps_adam")) j.at("eps_adam").get_to(t.eps_adam);
    if (j.contains("seed")) j.at("seed").get_to(t.seed);
    if (j.contains("eval_interval")) j.at("eval_interval").get_to(t.eval_interval);
    if (j.contains("checkpoint_interval")) j.at("checkpoint_interval").get_to(t.checkpoint_interval);
}

inline void to_json(json& j, const InterventionSpec& s) {
    j = json{{"kind", to_string(s.kind)},       {"position", s.position},
             {"layer_begin", s.layer_begin},    {"layer_end", s.layer_end},
             {"heads", s.heads},                {"factor", s.factor}};
}

inline void from_json(const json& j, InterventionSpec& s) {
    s = InterventionSpec{};
    if (j.contains("kind")) s.kind = intervention_kind_from_string(j.at("kind").get<std::string>());
    if (j.contains("position")) j.at("position").get_to(s.position);
    if (j.contains("layer_begin")) j.at("layer_begin").get_to(s.layer_begin);
    if (j.contains("layer_end")) j.at("layer_end").get_to(s.layer_end);
    if (j.contains("heads")) j.at("heads").get_to(s.heads);
    if (j.contains("factor")) j.at("factor").get_to(s.factor);
}

inline void to_json(json& j, const RunConfig& r) {
    j = json{{"model", r.model},   {"train", r.train},
             {"corpus", r.corpus}, {"out_dir", r.out_dir},
             {"analyses", r.analyses}, {"interventions", r.interventions}};
}

inline void from_json(const json& j, RunConfig& r) {
    r = RunConfig{};
    if (j.contains("model")) j.at("model").get_to(r.model);
    if (j.contains("train")) j.at("train").get_to(r.train);
    if (j.contains("corpus")) j.at("corpus").get_to(r.corpus);
    if (j.contains("out_dir")) j.at("out_dir").get_to(r.out_dir);
    if (j.contains("analyses")) j.at("analyses").get_to(r.analyses);
    if (j.contains("interventions")) j.at("interventions").get_to(r.interventions);
}

// Apply a dotted-path override like "train.peak_lr=3e-4" onto a JSON config.
// The value is parsed as JSON when possible, else kept as a string.
inline void apply_override(json& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override must look like path.to.field=value, got '" + assignment + "'");
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw;  // bare strings like softmax
    }
    json* node = &cfg;
    size_t start = 0;
    while (true) {
        const size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (key.empty()) throw ConfigError("override path has empty segment: '" + path + "'");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

inline RunConfig parse_run_config(const json& j, const std::vector<std::string>& overrides = {}) {
    json patched = j;
    for (const auto& o : overrides) apply_override(patched, o);
    RunConfig r = patched.get<RunConfig>();
    r.validate();
    return r;
}

}  // namespace sinklab
