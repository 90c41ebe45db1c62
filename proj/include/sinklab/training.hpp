#pragma once

// AdamW training loop: cosine schedule with linear warmup, global-norm
// gradient clipping, gradient accumulation, periodic validation and
// checkpointing. Fully deterministic: every batch is derived from
// (seed, step, micro, index), so an interrupted run resumed from a
// checkpoint is bit-identical to an uninterrupted one.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "sinklab/checkpoint.hpp"
#include "sinklab/config.hpp"
#include "sinklab/model.hpp"
#include "sinklab/rng.hpp"
#include "sinklab/token_stream.hpp"

namespace sinklab {

inline double cosine_lr(int64_t step, const TrainConfig& tc) {
    if (step < 0) throw InputError("cosine_lr: negative step");
    if (tc.warmup_iters > 0 && step < tc.warmup_iters)
        return tc.peak_lr * static_cast<double>(step) / static_cast<double>(tc.warmup_iters);
    double progress = 1.0;
    if (tc.max_iters > tc.warmup_iters)
        progress = static_cast<double>(step - tc.warmup_iters) /
                   static_cast<double>(tc.max_iters - tc.warmup_iters);
    progress = std::min(1.0, std::max(0.0, progress));
    return tc.min_lr + 0.5 * (tc.peak_lr - tc.min_lr) * (1.0 + std::cos(M_PI * progress));
}

// Parameter tensors in a fixed iteration order, with their names.
template <typename T>
struct ParamRefs {
    std::vector<std::string> names;
    std::vector<Tensor<T>*> tensors;

    static ParamRefs collect(ModelParams<T>& mp) {
        ParamRefs out;
        mp.for_each_param([&](const std::string& name, Tensor<T>& t) {
            out.names.push_back(name);
            out.tensors.push_back(&t);
        });
        return out;
    }
};

template <typename T>
struct OptimizerState {
    int64_t step = 0;
    std::vector<Tensor<T>> m, v;  // aligned with ParamRefs order

    static OptimizerState init(ModelParams<T>& mp) {
        OptimizerState s;
        mp.for_each_param([&](const std::string&, Tensor<T>& t) {
            s.m.push_back(Tensor<T>::zeros(t.shape()));
            s.v.push_back(Tensor<T>::zeros(t.shape()));
        });
        return s;
    }
};

// Scales all gradients to a global l2 norm of at most max_norm; returns the
// pre-clip norm.
template <typename T>
double clip_global_norm(std::vector<Tensor<T>>& grads, double max_norm) {
    if (max_norm <= 0.0) throw ConfigError("clip_global_norm: max_norm must be positive");
    double ss = 0.0;
    for (const auto& g : grads)
        for (int64_t i = 0; i < g.numel(); ++i) {
            const double v = static_cast<double>(g.data()[i]);
            ss += v * v;
        }
    const double norm = std::sqrt(ss);
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& g : grads)
            for (int64_t i = 0; i < g.numel(); ++i)
                g.mutable_data()[i] = static_cast<T>(static_cast<double>(g.data()[i]) * scale);
    }
    return norm;
}

// Decoupled weight decay applies to matrices only; norm gains, the head-norm
// scale, and the token embedding are excluded.
inline bool weight_decay_applies(const std::string& name, const Shape& shape) {
    return shape.size() == 2 && name != "tok_embedding";
}

template <typename T>
void adamw_step(ParamRefs<T>& params, const std::vector<Tensor<T>>& grads, OptimizerState<T>& st,
                double lr, const TrainConfig& tc) {
    st.step += 1;
    const double b1 = tc.beta1, b2 = tc.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
    for (size_t i = 0; i < params.tensors.size(); ++i) {
        auto& p = *params.tensors[i];
        const auto& g = grads[i];
        for (int64_t j = 0; j < g.numel(); ++j)
            if (!std::isfinite(static_cast<double>(g.data()[j])))
                throw NumericError("non-finite gradient in '" + params.names[i] + "' at step " +
                                   std::to_string(st.step));
        const bool decay = weight_decay_applies(params.names[i], p.shape());
        T* pd = p.mutable_data();
        T* md = st.m[i].mutable_data();
        T* vd = st.v[i].mutable_data();
        for (int64_t j = 0; j < p.numel(); ++j) {
            const double gj = static_cast<double>(g.data()[j]);
            const double mj = b1 * static_cast<double>(md[j]) + (1.0 - b1) * gj;
            const double vj = b2 * static_cast<double>(vd[j]) + (1.0 - b2) * gj * gj;
            md[j] = static_cast<T>(mj);
            vd[j] = static_cast<T>(vj);
            double pj = static_cast<double>(pd[j]);
            if (decay) pj -= lr * tc.weight_decay * pj;
            pj -= lr * (mj / c1) / (std::sqrt(vj / c2) + tc.eps_adam);
            pd[j] = static_cast<T>(pj);
        }
    }
}

// ---------------------------------------------------------------------------
// batching

// Fills x/y for one micro-batch, deterministically from (seed, step, micro).
inline void make_batch(const TokenStream& stream, const TrainConfig& tc, uint64_t seed,
                       int64_t step, int64_t micro, bool val, std::vector<int32_t>& x,
                       std::vector<int32_t>& y) {
    const int64_t B = tc.batch_size, L = tc.block_size;
    x.resize(static_cast<size_t>(B * L));
    y.resize(static_cast<size_t>(B * L));
    const int32_t* region = val ? stream.val_data() : stream.train_data();
    const int64_t region_len = val ? stream.val_size() : stream.train_size();
    CounterRng root(seed);
    auto branch = root.fork(val ? "val_batch" : "batch").fork(static_cast<uint64_t>(step));
    for (int64_t i = 0; i < B; ++i) {
        auto r = branch.fork(static_cast<uint64_t>(micro * B + i));
        sample_block(region, region_len, L, r, x.data() + i * L, y.data() + i * L);
    }
}

// Mean loss over a fixed set of validation batches; no parameter mutation,
// no trace capture.
template <typename T>
double estimate_val_loss(const ModelParams<T>& mp, const TokenStream& stream,
                         const TrainConfig& tc, uint64_t seed, int64_t step,
                         int64_t n_batches = 8) {
    std::vector<int32_t> x, y;
    double acc = 0.0;
    for (int64_t k = 0; k < n_batches; ++k) {
        make_batch(stream, tc, seed, step, k, true, x, y);
        auto res = model_forward(mp, x, tc.batch_size, tc.block_size);
        acc += cross_entropy_mean(res.logits, y).item();
    }
    return acc / static_cast<double>(n_batches);
}

// ---------------------------------------------------------------------------
// checkpoint composition (parameters + optimizer moments)

template <typename T>
void save_train_checkpoint(const std::string& path, ModelParams<T>& mp, OptimizerState<T>& st,
                           const TrainConfig& tc, uint64_t seed) {
    nlohmann::json header;
    header["model"] = mp.cfg;
    header["train"] = tc;
    header["step"] = st.step;
    header["seed"] = seed;
    header["variant"] = to_string(mp.cfg.variant);

    std::vector<TensorRef> refs;
    auto params = ParamRefs<T>::collect(mp);
    for (size_t i = 0; i < params.names.size(); ++i) {
        refs.push_back(tensor_ref(params.names[i], *params.tensors[i]));
        refs.push_back(tensor_ref("adam_m." + params.names[i], st.m[i]));
        refs.push_back(tensor_ref("adam_v." + params.names[i], st.v[i]));
    }
    write_checkpoint_file(path, header, refs);
}

template <typename T>
struct TrainCheckpoint {
    ModelParams<T> params;
    OptimizerState<T> opt;
    TrainConfig train;
    uint64_t seed = 0;
    nlohmann::json header;
    bool has_optimizer = false;
};

template <typename T>
TrainCheckpoint<T> load_train_checkpoint(const std::string& path) {
    TrainCheckpoint<T> out;
    auto res = load_model_checkpoint(path, out.params);
    out.header = res.header;
    if (res.header.contains("train")) out.train = res.header.at("train").template get<TrainConfig>();
    if (res.header.contains("seed")) out.seed = res.header.at("seed").template get<uint64_t>();

    auto file = read_checkpoint_file(path);
    out.opt = OptimizerState<T>::init(out.params);
    if (res.header.contains("step")) out.opt.step = res.header.at("step").template get<int64_t>();
    auto params = ParamRefs<T>::collect(out.params);
    bool all = true;
    for (size_t i = 0; i < params.names.size(); ++i) {
        auto im = file.tensors.find("adam_m." + params.names[i]);
        auto iv = file.tensors.find("adam_v." + params.names[i]);
        if (im == file.tensors.end() || iv == file.tensors.end()) {
            all = false;
            continue;
        }
        std::memcpy(out.opt.m[i].mutable_data(), im->second.template as<T>(),
                    static_cast<size_t>(out.opt.m[i].numel()) * sizeof(T));
        std::memcpy(out.opt.v[i].mutable_data(), iv->second.template as<T>(),
                    static_cast<size_t>(out.opt.v[i].numel()) * sizeof(T));
    }
    out.has_optimizer = all;
    return out;
}

// ---------------------------------------------------------------------------
// the loop

struct StepLog {
    int64_t step = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_loss = std::numeric_limits<double>::quiet_NaN();  // NaN = not evaluated
    double grad_norm = 0.0;
};

template <typename T>
struct TrainResult {
    ModelParams<T> params;
    OptimizerState<T> opt;
    std::vector<StepLog> log;
    std::string final_checkpoint;
};

namespace train_detail {

inline void dump_batch(const std::string& path, int64_t step, const std::vector<int32_t>& x,
                       const std::vector<int32_t>& y) {
    nlohmann::json j;
    j["step"] = step;
    j["inputs"] = x;
    j["targets"] = y;
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) return;  // best-effort diagnostic
    const std::string s = j.dump(2);
    std::fwrite(s.data(), 1, s.size(), f);
    std::fclose(f);
}

}  // namespace train_detail

// Runs (or resumes) training. Writes out_dir/loss_log.csv,
// out_dir/checkpoints/step_N.snkl, and out_dir/checkpoints/final.snkl.
template <typename T>
TrainResult<T> train_run(const ModelConfig& mcfg, const TrainConfig& tc, const TokenStream& corpus,
                         const std::string& out_dir, const std::string& resume_from = "") {
    namespace fs = std::filesystem;
    mcfg.validate();
    tc.validate();
    if (corpus.train_size() < tc.block_size)
        throw ConfigError("corpus too small: " + std::to_string(corpus.train_size()) +
                          " training tokens for block size " + std::to_string(tc.block_size));
    if (corpus.vocab() > mcfg.vocab)
        throw ConfigError("corpus vocab " + std::to_string(corpus.vocab()) +
                          " exceeds model vocab " + std::to_string(mcfg.vocab));
    force_single_thread_blas();
    fs::create_directories(fs::path(out_dir) / "checkpoints");
    fs::create_directories(fs::path(out_dir) / "reports");

    TrainResult<T> res;
    int64_t start_step = 0;
    if (!resume_from.empty()) {
        auto ck = load_train_checkpoint<T>(resume_from);
        if (!ck.has_optimizer)
            throw IoError("checkpoint lacks optimizer state, cannot resume: " + resume_from);
        res.params = std::move(ck.params);
        res.opt = std::move(ck.opt);
        start_step = res.opt.step;
    } else {
        res.params = init_params<T>(mcfg, tc.seed);
        res.opt = OptimizerState<T>::init(res.params);
    }
    auto params = ParamRefs<T>::collect(res.params);

    const std::string log_path = (fs::path(out_dir) / "loss_log.csv").string();
    std::FILE* log_f = std::fopen(log_path.c_str(), start_step == 0 ? "wb" : "ab");
    if (!log_f) throw IoError("cannot open loss log: " + log_path);
    if (start_step == 0 || std::ftell(log_f) == 0)
        std::fputs("step,lr,train_loss,val_loss,grad_norm\n", log_f);

    std::vector<Tensor<T>> grads;
    for (auto* p : params.tensors) grads.push_back(Tensor<T>::zeros((*p).shape()));

    std::vector<int32_t> x, y;
    const bool have_val = corpus.val_size() >= tc.block_size;

    for (int64_t step = start_step; step < tc.max_iters; ++step) {
        const double lr = cosine_lr(step, tc);
        for (auto& g : grads)
            std::memset(g.mutable_data(), 0, static_cast<size_t>(g.numel()) * sizeof(T));

        double loss_acc = 0.0;
        for (int64_t micro = 0; micro < tc.grad_accum; ++micro) {
            make_batch(corpus, tc, tc.seed, step, micro, false, x, y);
            Tape<T> tape;
            TapeScope<T> scope(tape);
            res.params.watch_all(tape);
            auto fwd = model_forward(res.params, x, tc.batch_size, tc.block_size);
            auto loss = cross_entropy_mean(fwd.logits, y);
            const double lval = static_cast<double>(loss.item());
            if (!std::isfinite(lval)) {
                const std::string dump =
                    (fs::path(out_dir) / ("abort_batch_step_" + std::to_string(step) + ".json"))
                        .string();
                train_detail::dump_batch(dump, step, x, y);
                std::fclose(log_f);
                throw NumericError("non-finite training loss at step " + std::to_string(step) +
                                   "; offending batch dumped to " + dump);
            }
            loss_acc += lval;
            tape.backward(loss);
            for (size_t i = 0; i < params.tensors.size(); ++i) {
                const T* g = tape.grad_of(*params.tensors[i]).data();
                T* acc = grads[i].mutable_data();
                for (int64_t j = 0; j < grads[i].numel(); ++j) acc[j] += g[j];
            }
        }
        if (tc.grad_accum > 1) {
            const T inv = static_cast<T>(1.0 / static_cast<double>(tc.grad_accum));
            for (auto& g : grads)
                for (int64_t j = 0; j < g.numel(); ++j) g.mutable_data()[j] *= inv;
        }

        StepLog sl;
        sl.step = step;
        sl.lr = lr;
        sl.train_loss = loss_acc / static_cast<double>(tc.grad_accum);
        sl.grad_norm = clip_global_norm(grads, tc.grad_clip);
        adamw_step(params, grads, res.opt, lr, tc);

        const bool last = step + 1 == tc.max_iters;
        if (have_val && (((step + 1) % tc.eval_interval) == 0 || last))
            sl.val_loss = estimate_val_loss(res.params, corpus, tc, tc.seed, step + 1);
        res.log.push_back(sl);

        char line[256];
        if (std::isnan(sl.val_loss))
            std::snprintf(line, sizeof line, "%lld,%.9g,%.9g,,%.9g\n",
                          static_cast<long long>(sl.step), sl.lr, sl.train_loss, sl.grad_norm);
        else
            std::snprintf(line, sizeof line, "%lld,%.9g,%.9g,%.9g,%.9g\n",
                          static_cast<long long>(sl.step), sl.lr, sl.train_loss, sl.val_loss,
                          sl.grad_norm);
        std::fputs(line, log_f);
        std::fflush(log_f);

        if (((step + 1) % tc.checkpoint_interval) == 0 && !last) {
            const std::string p =
                (fs::path(out_dir) / "checkpoints" / ("step_" + std::to_string(step + 1) + ".snkl"))
                    .string();
            save_train_checkpoint(p, res.params, res.opt, tc, tc.seed);
        }
    }
    std::fclose(log_f);

    res.final_checkpoint = (fs::path(out_dir) / "checkpoints" / "final.snkl").string();
    save_train_checkpoint(res.final_checkpoint, res.params, res.opt, tc, tc.seed);
    return res;
}

}  // namespace sinklab
