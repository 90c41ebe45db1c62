#pragma once
#include <type_traits>

// Decoder-only pre-norm transformer: RMSNorm, rotary positions, SwiGLU FFN,
// and three attention flavors (softmax / sigmoid / head-normalized softmax).
// Activations are rank-2 tensors of (batch*seq) rows; per-head tensors use
// (batch*heads*seq) rows so each (batch, head) block is a contiguous matrix.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sinklab/config.hpp"
#include "sinklab/interventions.hpp"
#include "sinklab/rng.hpp"
#include "sinklab/tensor.hpp"

namespace sinklab {

// ---------------------------------------------------------------------------
// fused ops

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<int32_t>& ids) {
    if (table.rank() != 2) throw ShapeError("embedding_lookup: table must be rank-2");
    const int64_t vocab = table.dim(0), d = table.dim(1);
    const int64_t n = static_cast<int64_t>(ids.size());
    for (int64_t r = 0; r < n; ++r)
        if (ids[r] < 0 || ids[r] >= vocab)
            throw InputError("token id " + std::to_string(ids[r]) + " at position " +
                             std::to_string(r) + " outside vocab of " + std::to_string(vocab));
    auto out = Tensor<T>::zeros({n, d});
    T* o = out.mutable_data();
    const T* tb = table.data();
    for (int64_t r = 0; r < n; ++r)
        for (int64_t j = 0; j < d; ++j) o[r * d + j] = tb[ids[r] * d + j];

    Tape<T>* tp = detail::active_tape(table);
    const int64_t tn = detail::node_on(tp, table);
    detail::finish(out, tp, [=, ids_copy = ids](Tape<T>& t, const std::vector<T>& g) {
        auto& dt = t.grad_buffer(tn);
        for (int64_t r = 0; r < n; ++r)
            for (int64_t j = 0; j < d; ++j) dt[ids_copy[r] * d + j] += g[r * d + j];
    });
    return out;
}

// Per-row RMS normalization with a learnable per-column scale:
//   y_rj = x_rj / sqrt(mean_j(x_rj^2) + eps) * gamma_j
// Used both for the usual pre-norm (gamma over d) and for the per-head output
// norm (gamma = lambda over d_k, rows being per-head vectors).
template <typename T>
Tensor<T> rms_scale_rows(const Tensor<T>& x, const Tensor<T>& gamma, double eps) {
    if (x.rank() != 2 || gamma.numel() != x.dim(1))
        throw ShapeError("rms_scale_rows: x " + shape_str(x.shape()) + " vs scale of " +
                         std::to_string(gamma.numel()));
    const int64_t rows = x.dim(0), m = x.dim(1);
    auto out = Tensor<T>::zeros({rows, m});
    auto inv_r = std::make_shared<std::vector<T>>(rows);
    const T* px = x.data();
    const T* pg = gamma.data();
    T* o = out.mutable_data();
    for (int64_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (int64_t j = 0; j < m; ++j) ss += static_cast<double>(px[r * m + j]) * px[r * m + j];
        const T ir = static_cast<T>(1.0 / std::sqrt(ss / m + eps));
        (*inv_r)[r] = ir;
        for (int64_t j = 0; j < m; ++j) o[r * m + j] = px[r * m + j] * ir * pg[j];
    }
    check_all_finite("rms_scale_rows", out);

    Tape<T>* tp = detail::active_tape(x, gamma);
    auto xs = x.store(), gs = gamma.store();
    const int64_t xn = detail::node_on(tp, x), gn = detail::node_on(tp, gamma);
    detail::finish(out, tp, [=](Tape<T>& t, const std::vector<T>& g) {
        const T* xp = xs->data();
        const T* gp = gs->data();
        if (xn >= 0) {
            auto& dx = t.grad_buffer(xn);
            for (int64_t r = 0; r < rows; ++r) {
                const T ir = (*inv_r)[r];
                double dot = 0.0;
                for (int64_t j = 0; j < m; ++j)
                    dot += static_cast<double>(g[r * m + j]) * gp[j] * xp[r * m + j];
                const T c = static_cast<T>(dot / m) * ir * ir * ir;
                for (int64_t j = 0; j < m; ++j)
                    dx[r * m + j] += g[r * m + j] * gp[j] * ir - xp[r * m + j] * c;
            }
        }
        if (gn >= 0) {
            auto& dg = t.grad_buffer(gn);
            for (int64_t r = 0; r < rows; ++r) {
                const T ir = (*inv_r)[r];
                for (int64_t j = 0; j < m; ++j) dg[j] += g[r * m + j] * xp[r * m + j] * ir;
            }
        }
    });
    return out;
}

// (batch*seq) x d  ->  (batch*heads*seq) x d_k, so that the rows of one
// (batch, head) pair form a contiguous seq x d_k matrix.
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int64_t batch, int64_t seq, int64_t heads) {
    if (x.rank() != 2 || x.dim(0) != batch * seq || x.dim(1) % heads != 0)
        throw ShapeError("split_heads: bad shape " + shape_str(x.shape()));
    const int64_t d = x.dim(1), dk = d / heads;
    auto out = Tensor<T>::zeros({batch * heads * seq, dk});
    T* o = out.mutable_data();
    const T* px = x.data();
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t t = 0; t < seq; ++t) {
                const T* src = px + (b * seq + t) * d + h * dk;
                T* dst = o + ((b * heads + h) * seq + t) * dk;
                for (int64_t i = 0; i < dk; ++i) dst[i] = src[i];
            }

    Tape<T>* tp = detail::active_tape(x);
    const int64_t xn = detail::node_on(tp, x);
    detail::finish(out, tp, [=](Tape<T>& t, const std::vector<T>& g) {
        auto& dx = t.grad_buffer(xn);
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t tt = 0; tt < seq; ++tt) {
                    const T* src = g.data() + ((b * heads + h) * seq + tt) * dk;
                    T* dst = dx.data() + (b * seq + tt) * d + h * dk;
                    for (int64_t i = 0; i < dk; ++i) dst[i] += src[i];
                }
    });
    return out;
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, int64_t batch, int64_t seq, int64_t heads) {
    const int64_t dk = x.dim(1), d = heads * dk;
    if (x.rank() != 2 || x.dim(0) != batch * heads * seq)
        throw ShapeError("merge_heads: bad shape " + shape_str(x.shape()));
    auto out = Tensor<T>::zeros({batch * seq, d});
    T* o = out.mutable_data();
    const T* px = x.data();
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t t = 0; t < seq; ++t) {
                const T* src = px + ((b * heads + h) * seq + t) * dk;
                T* dst = o + (b * seq + t) * d + h * dk;
                for (int64_t i = 0; i < dk; ++i) dst[i] = src[i];
            }

    Tape<T>* tp = detail::active_tape(x);
    const int64_t xn = detail::node_on(tp, x);
    detail::finish(out, tp, [=](Tape<T>& t, const std::vector<T>& g) {
        auto& dx = t.grad_buffer(xn);
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t tt = 0; tt < seq; ++tt) {
                    const T* src = g.data() + (b * seq + tt) * d + h * dk;
                    T* dst = dx.data() + ((b * heads + h) * seq + tt) * dk;
                    for (int64_t i = 0; i < dk; ++i) dst[i] += src[i];
                }
    });
    return out;
}

// Rotary position embedding over adjacent pairs: pair i of the row at
// sequence position t is rotated by angle t * base^(-2i/d_k).
template <typename T>
Tensor<T> rope_rows(const Tensor<T>& x, int64_t seq, double base) {
    if (x.rank() != 2 || x.dim(0) % seq != 0)
        throw ShapeError("rope_rows: rows not a multiple of seq");
    const int64_t dk = x.dim(1);
    if (dk % 2 != 0) throw ConfigError("rope_rows: head dimension must be even");
    const int64_t rows = x.dim(0), half = dk / 2;
    // cos/sin per (position, pair)
    auto table = std::make_shared<std::vector<T>>(2 * seq * half);
    for (int64_t t = 0; t < seq; ++t)
        for (int64_t i = 0; i < half; ++i) {
            const double theta = t * std::pow(base, -2.0 * i / dk);
            (*table)[(t * half + i) * 2] = static_cast<T>(std::cos(theta));
            (*table)[(t * half + i) * 2 + 1] = static_cast<T>(std::sin(theta));
        }
    auto out = Tensor<T>::zeros({rows, dk});
    T* o = out.mutable_data();
    const T* px = x.data();
    for (int64_t r = 0; r < rows; ++r) {
        const int64_t t = r % seq;
        for (int64_t i = 0; i < half; ++i) {
            const T c = (*table)[(t * half + i) * 2];
            const T s = (*table)[(t * half + i) * 2 + 1];
            const T x0 = px[r * dk + 2 * i], x1 = px[r * dk + 2 * i + 1];
            o[r * dk + 2 * i] = c * x0 - s * x1;
            o[r * dk + 2 * i + 1] = s * x0 + c * x1;
        }
    }

    Tape<T>* tp = detail::active_tape(x);
    const int64_t xn = detail::node_on(tp, x);
    detail::finish(out, tp, [=](Tape<T>& t, const std::vector<T>& g) {
        auto& dx = t.grad_buffer(xn);
        for (int64_t r = 0; r < rows; ++r) {
            const int64_t pos = r % seq;
            for (int64_t i = 0; i < half; ++i) {
                const T c = (*table)[(pos * half + i) * 2];
                const T s = (*table)[(pos * half + i) * 2 + 1];
                const T g0 = g[r * dk + 2 * i], g1 = g[r * dk + 2 * i + 1];
                dx[r * dk + 2 * i] += c * g0 + s * g1;
                dx[r * dk + 2 * i + 1] += -s * g0 + c * g1;
            }
        }
    });
    return out;
}

inline std::vector<uint8_t> causal_mask(int64_t seq) {
    std::vector<uint8_t> m(static_cast<size_t>(seq) * seq, 0);
    for (int64_t i = 0; i < seq; ++i)
        for (int64_t j = 0; j <= i; ++j) m[i * seq + j] = 1;
    return m;
}

// Attention weights from queries and keys: logits = QK^T / sqrt(d_k) per
// (batch, head) block, then row-wise softmax over the visible prefix, or
// elementwise sigmoid with masked entries forced to zero.
template <typename T>
Tensor<T> attention_scores(const Tensor<T>& q, const Tensor<T>& k, const std::vector<uint8_t>& mask,
                           int64_t seq, AttentionVariant variant) {
    if (q.rank() != 2 || q.shape() != k.shape() || q.dim(0) % seq != 0)
        throw ShapeError("attention_scores: bad shapes " + shape_str(q.shape()) + " and " +
                         shape_str(k.shape()));
    if (static_cast<int64_t>(mask.size()) != seq * seq)
        throw ShapeError("attention_scores: mask size does not match seq");
    const int64_t rows = q.dim(0), dk = q.dim(1), nb = rows / seq;
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
    const bool is_sigmoid = variant == AttentionVariant::Sigmoid;

    auto out = Tensor<T>::zeros({rows, seq});
    T* a = out.mutable_data();
    for (int64_t blk = 0; blk < nb; ++blk) {
        const T* qb = q.data() + blk * seq * dk;
        const T* kb = k.data() + blk * seq * dk;
        T* ab = a + blk * seq * seq;
        gemm_raw(false, true, seq, seq, dk, inv_sqrt, qb, dk, kb, dk, T(0), ab, seq);
        for (int64_t t = 0; t < seq; ++t) {
            T* row = ab + t * seq;
            const uint8_t* vis = mask.data() + t * seq;
            if (is_sigmoid) {
                for (int64_t j = 0; j < seq; ++j)
                    row[j] = vis[j] ? detail::stable_sigmoid(row[j]) : T(0);
            } else {
                T mx = -std::numeric_limits<T>::infinity();
                for (int64_t j = 0; j < seq; ++j)
                    if (vis[j] && row[j] > mx) mx = row[j];
                if (mx == -std::numeric_limits<T>::infinity())
                    throw ContractError("attention row " + std::to_string(t) +
                                        " is fully masked under softmax");
                double z = 0.0;
                for (int64_t j = 0; j < seq; ++j) {
                    row[j] = vis[j] ? std::exp(row[j] - mx) : T(0);
                    z += static_cast<double>(row[j]);
                }
                const T iz = static_cast<T>(1.0 / z);
                for (int64_t j = 0; j < seq; ++j) row[j] *= iz;
            }
        }
    }
    check_all_finite("attention_scores", out);

    Tape<T>* tp = detail::active_tape(q, k);
    auto qs = q.store(), ks = k.store(), as = out.store();
    const int64_t qn = detail::node_on(tp, q), kn = detail::node_on(tp, k);
    detail::finish(out, tp, [=](Tape<T>& t, const std::vector<T>& g) {
        std::vector<T> ds(static_cast<size_t>(seq) * seq);
        for (int64_t blk = 0; blk < nb; ++blk) {
            const T* ab = as->data() + blk * seq * seq;
            const T* gb = g.data() + blk * seq * seq;
            for (int64_t tt = 0; tt < seq; ++tt) {
                const T* arow = ab + tt * seq;
                const T* grow = gb + tt * seq;
                T* drow = ds.data() + tt * seq;
                if (is_sigmoid) {
                    for (int64_t j = 0; j < seq; ++j)
                        drow[j] = grow[j] * arow[j] * (T(1) - arow[j]);
                } else {
                    double dot = 0.0;
                    for (int64_t j = 0; j < seq; ++j)
                        dot += static_cast<double>(grow[j]) * arow[j];
                    for (int64_t j = 0; j < seq; ++j)
                        drow[j] = arow[j] * (grow[j] - static_cast<T>(dot));
                }
            }
            if (qn >= 0) {
                auto& dq = t.grad_buffer(qn);
                gemm_raw(false, false, seq, dk, seq, inv_sqrt, ds.data(), seq,
                         ks->data() + blk * seq * dk, dk, T(1), dq.data() + blk * seq * dk, dk);
            }
            if (kn >= 0) {
                auto& dkg = t.grad_buffer(kn);
                gemm_raw(true, false, seq, dk, seq, inv_sqrt, ds.data(), seq,
                         qs->data() + blk * seq * dk, dk, T(1), dkg.data() + blk * seq * dk, dk);
            }
        }
    });
    return out;
}

// O = A V per (batch, head) block.
template <typename T>
Tensor<T> aggregate_values(const Tensor<T>& a, const Tensor<T>& v, int64_t seq) {
    if (a.rank() != 2 || v.rank() != 2 || a.dim(1) != seq || a.dim(0) != v.dim(0) ||
        a.dim(0) % seq != 0)
        throw ShapeError("aggregate_values: bad shapes " + shape_str(a.shape()) + " and " +
                         shape_str(v.shape()));
    const int64_t rows = a.dim(0), dk = v.dim(1), nb = rows / seq;
    auto out = Tensor<T>::zeros({rows, dk});
    for (int64_t blk = 0; blk < nb; ++blk)
        gemm_raw(false, false, seq, dk, seq, T(1), a.data() + blk * seq * seq, seq,
                 v.data() + blk * seq * dk, dk, T(0), out.mutable_data() + blk * seq * dk, dk);
    check_all_finite("aggregate_values", out);

    Tape<T>* tp = detail::active_tape(a, v);
    auto as = a.store(), vs = v.store();
    const int64_t an = detail::node_on(tp, a), vn = detail::node_on(tp, v);
    detail::finish(out, tp, [=](Tape<T>& t, const std::vector<T>& g) {
        for (int64_t blk = 0; blk < nb; ++blk) {
            if (an >= 0) {
                auto& da = t.grad_buffer(an);
                gemm_raw(false, true, seq, seq, dk, T(1), g.data() + blk * seq * dk, dk,
                         vs->data() + blk * seq * dk, dk, T(1), da.data() + blk * seq * seq, seq);
            }
            if (vn >= 0) {
                auto& dv = t.grad_buffer(vn);
                gemm_raw(true, false, seq, dk, seq, T(1), as->data() + blk * seq * seq, seq,
                         g.data() + blk * seq * dk, dk, T(1), dv.data() + blk * seq * dk, dk);
            }
        }
    });
    return out;
}

// Mean cross-entropy over rows of logits against integer targets, computed
// via log-sum-exp in double.
template <typename T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits, const std::vector<int32_t>& targets) {
    if (logits.rank() != 2 || logits.dim(0) != static_cast<int64_t>(targets.size()))
        throw ShapeError("cross_entropy_mean: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
    const int64_t n = logits.dim(0), vocab = logits.dim(1);
    for (int64_t r = 0; r < n; ++r)
        if (targets[r] < 0 || targets[r] >= vocab)
            throw InputError("target id " + std::to_string(targets[r]) + " at row " +
                             std::to_string(r) + " outside vocab of " + std::to_string(vocab));
    auto lse = std::make_shared<std::vector<double>>(n);
    const T* p = logits.data();
    double total = 0.0;
    for (int64_t r = 0; r < n; ++r) {
        const T* row = p + r * vocab;
        double mx = row[0];
        for (int64_t j = 1; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double z = 0.0;
        for (int64_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
        (*lse)[r] = mx + std::log(z);
        total += (*lse)[r] - static_cast<double>(row[targets[r]]);
    }
    auto out = Tensor<T>::scalar(static_cast<T>(total / n));
    check_all_finite("cross_entropy_mean", out);

    Tape<T>* tp = detail::active_tape(logits);
    auto ls = logits.store();
    const int64_t ln = detail::node_on(tp, logits);
    detail::finish(out, tp, [=, tg = targets](Tape<T>& t, const std::vector<T>& g) {
        auto& dl = t.grad_buffer(ln);
        const T* lp = ls->data();
        const T scale = g[0] / static_cast<T>(n);
        for (int64_t r = 0; r < n; ++r)
            for (int64_t j = 0; j < vocab; ++j) {
                const double pj = std::exp(static_cast<double>(lp[r * vocab + j]) - (*lse)[r]);
                dl[r * vocab + j] += scale * static_cast<T>(pj - (j == tg[r] ? 1.0 : 0.0));
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// parameters

template <typename T>
struct BlockParams {
    Tensor<T> attn_norm_gamma;  // d
    Tensor<T> wq, wk, wv, wo;   // d x d
    Tensor<T> head_lambda;      // d_k, HeadNormSoftmax only
    Tensor<T> ffn_norm_gamma;   // d
    Tensor<T> w_gate, w_up;     // d x d_f
    Tensor<T> w_down;           // d_f x d
};

template <typename T>
struct ModelParams {
    ModelConfig cfg;
    Tensor<T> tok_embedding;  // vocab x d
    std::vector<BlockParams<T>> blocks;
    Tensor<T> final_norm_gamma;  // d
    Tensor<T> w_out;             // d x vocab

    template <typename F>
    void for_each_param(F&& f) {
        f("tok_embedding", tok_embedding);
        for (size_t l = 0; l < blocks.size(); ++l) {
            const std::string p = "blocks." + std::to_string(l) + ".";
            auto& b = blocks[l];
            f(p + "attn_norm_gamma", b.attn_norm_gamma);
            f(p + "wq", b.wq);
            f(p + "wk", b.wk);
            f(p + "wv", b.wv);
            f(p + "wo", b.wo);
            if (cfg.variant == AttentionVariant::HeadNormSoftmax) f(p + "head_lambda", b.head_lambda);
            f(p + "ffn_norm_gamma", b.ffn_norm_gamma);
            f(p + "w_gate", b.w_gate);
            f(p + "w_up", b.w_up);
            f(p + "w_down", b.w_down);
        }
        f("final_norm_gamma", final_norm_gamma);
        f("w_out", w_out);
    }

    void watch_all(Tape<T>& tape) {
        for_each_param([&](const std::string&, Tensor<T>& p) { tape.watch(p); });
    }

    int64_t param_count() {
        int64_t n = 0;
        for_each_param([&](const std::string&, Tensor<T>& p) { n += p.numel(); });
        return n;
    }
};

// ---------------------------------------------------------------------------
// forward

struct TraceOptions {
    bool normed_inputs = false;  // attn_input_normed, ffn_input_normed
    bool qkv = false;            // rotary-position q and k, plus v, per head
    bool attention = false;      // full attention matrices (largest tensor)
    bool aggregated = false;     // per-head aggregated outputs (pre/post norm)
    bool attn_out = false;       // post-W_O attention output
    bool ffn_inner = false;      // gate pre-activation, up projection, gated product
    bool hidden = false;         // block input, mid residual, block output

    static TraceOptions all() { return {true, true, true, true, true, true, true}; }
    bool any() const {
        return normed_inputs || qkv || attention || aggregated || attn_out || ffn_inner || hidden;
    }
};

template <typename T>
struct LayerTrace {
    Tensor<T> block_input;        // x_l, (B*T) x d
    Tensor<T> attn_input_normed;  // (B*T) x d
    Tensor<T> q, k, v;            // (B*H*T) x d_k, q/k after rotation
    Tensor<T> attention;          // (B*H*T) x T
    Tensor<T> aggregated;         // (B*H*T) x d_k, pre head-norm
    Tensor<T> aggregated_normed;  // (B*H*T) x d_k, HeadNormSoftmax only
    Tensor<T> attn_out;           // (B*T) x d, post W_O
    Tensor<T> resid_mid;          // h_l
    Tensor<T> ffn_input_normed;   // (B*T) x d
    Tensor<T> ffn_gate_pre;       // (B*T) x d_f
    Tensor<T> ffn_up;             // (B*T) x d_f
    Tensor<T> ffn_gated;          // (B*T) x d_f
    Tensor<T> ffn_out;            // (B*T) x d
    Tensor<T> block_output;       // x_{l+1}
};

struct ForwardOptions {
    TraceOptions trace;
    const std::vector<InterventionSpec>* interventions = nullptr;
    const ValueMeanTable* value_means = nullptr;
};

template <typename T>
struct ForwardResult {
    Tensor<T> logits;  // (B*T) x vocab
    std::vector<LayerTrace<T>> traces;
};

inline std::vector<uint8_t> layer_mask(int64_t seq, int64_t layer, int64_t n_layers,
                                       const std::vector<InterventionSpec>* specs) {
    auto m = causal_mask(seq);
    if (specs)
        for (const auto& s : *specs)
            if (s.kind == InterventionKind::MaskBlock && s.covers_layer(layer, n_layers))
                apply_mask_block(m.data(), seq, s.position);
    return m;
}

namespace detail {

// In-place output interventions on the aggregated rows at the target
// position. Inference-only: the tensors involved are not on a tape.
template <typename T>
void apply_output_interventions(Tensor<T>& o, const ModelConfig& cfg, int64_t layer, int64_t batch,
                                int64_t seq, const ForwardOptions& opt) {
    if (!opt.interventions) return;
    for (const auto& s : *opt.interventions) {
        if (s.kind == InterventionKind::MaskBlock) continue;
        if (!s.covers_layer(layer, cfg.n_layers)) continue;
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t h = 0; h < cfg.n_heads; ++h) {
                if (!s.covers_head(h)) continue;
                T* row = o.mutable_data() + ((b * cfg.n_heads + h) * seq + s.position) * cfg.d_k;
                if (s.kind == InterventionKind::VarianceAmplify)
                    apply_variance_amplify(row, opt.value_means->at(layer, h), cfg.d_k, s.factor);
                else
                    apply_norm_scale(row, cfg.d_k, s.factor);
            }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> block_forward(const ModelParams<T>& mp, int64_t layer, const Tensor<T>& x, int64_t batch,
                        int64_t seq, const std::vector<uint8_t>& mask, const ForwardOptions& opt,
                        std::type_identity_t<LayerTrace<T>*> trace = nullptr) {
    const auto& cfg = mp.cfg;
    const auto& b = mp.blocks[static_cast<size_t>(layer)];
    try {
        auto normed = rms_scale_rows(x, b.attn_norm_gamma, cfg.norm_eps);
        auto q = rope_rows(split_heads(matmul(normed, b.wq), batch, seq, cfg.n_heads), seq,
                           cfg.rope_base);
        auto k = rope_rows(split_heads(matmul(normed, b.wk), batch, seq, cfg.n_heads), seq,
                           cfg.rope_base);
        auto v = split_heads(matmul(normed, b.wv), batch, seq, cfg.n_heads);
        auto att = attention_scores(q, k, mask, seq, cfg.variant);
        auto o = aggregate_values(att, v, seq);
        detail::apply_output_interventions(o, cfg, layer, batch, seq, opt);
        Tensor<T> o_normed;
        if (cfg.variant == AttentionVariant::HeadNormSoftmax)
            o_normed = rms_scale_rows(o, b.head_lambda, cfg.head_norm_eps);
        auto merged = merge_heads(o_normed.defined() ? o_normed : o, batch, seq, cfg.n_heads);
        auto attn_out = matmul(merged, b.wo);
        auto h = add(x, attn_out);
        auto fnormed = rms_scale_rows(h, b.ffn_norm_gamma, cfg.norm_eps);
        auto gate_pre = matmul(fnormed, b.w_gate);
        auto up = matmul(fnormed, b.w_up);
        auto gated = mul(silu(gate_pre), up);
        auto ffn_out = matmul(gated, b.w_down);
        auto out = add(h, ffn_out);

        if (trace) {
            const auto& tr = opt.trace;
            if (tr.hidden) {
                trace->block_input = x;
                trace->resid_mid = h;
                trace->block_output = out;
            }
            if (tr.normed_inputs) {
                trace->attn_input_normed = normed;
                trace->ffn_input_normed = fnormed;
            }
            if (tr.qkv) {
                trace->q = q;
                trace->k = k;
                trace->v = v;
            }
            if (tr.attention) trace->attention = att;
            if (tr.aggregated) {
                trace->aggregated = o;
                trace->aggregated_normed = o_normed;
            }
            if (tr.attn_out) trace->attn_out = attn_out;
            if (tr.ffn_inner) {
                trace->ffn_gate_pre = gate_pre;
                trace->ffn_up = up;
                trace->ffn_gated = gated;
            }
        }
        return out;
    } catch (const NumericError& e) {
        throw NumericError("layer " + std::to_string(layer) + ": " + e.what());
    }
}

template <typename T>
ForwardResult<T> model_forward(const ModelParams<T>& mp, const std::vector<int32_t>& tokens,
                               int64_t batch, int64_t seq, const ForwardOptions& opt = {}) {
    const auto& cfg = mp.cfg;
    if (batch < 1 || seq < 1 || static_cast<int64_t>(tokens.size()) != batch * seq)
        throw InputError("model_forward: token count " + std::to_string(tokens.size()) +
                         " does not match batch " + std::to_string(batch) + " x seq " +
                         std::to_string(seq));
    if (seq > cfg.t_max)
        throw InputError("model_forward: seq " + std::to_string(seq) + " exceeds t_max " +
                         std::to_string(cfg.t_max));
    if (opt.interventions && !opt.interventions->empty()) {
        if (ambient_tape<T>())
            throw ContractError("interventions are inference-only; no tape may be active");
        bool needs_means = false;
        for (const auto& s : *opt.interventions) {
            s.validate(cfg.n_layers, seq);
            if (s.kind == InterventionKind::VarianceAmplify) needs_means = true;
        }
        if (needs_means && !opt.value_means)
            throw ConfigError("variance_amplify intervention requires a value-mean table");
    }

    ForwardResult<T> result;
    const bool tracing = opt.trace.any();
    if (tracing) result.traces.resize(static_cast<size_t>(cfg.n_layers));

    auto x = embedding_lookup(mp.tok_embedding, tokens);
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const auto mask = layer_mask(seq, l, cfg.n_layers, opt.interventions);
        x = block_forward(mp, l, x, batch, seq, mask, opt,
                          tracing ? &result.traces[static_cast<size_t>(l)] : nullptr);
    }
    auto final_normed = rms_scale_rows(x, mp.final_norm_gamma, cfg.norm_eps);
    result.logits = matmul(final_normed, mp.w_out);
    return result;
}

// ---------------------------------------------------------------------------
// initialization

inline std::vector<int32_t> uniform_random_tokens(CounterRng& rng, int64_t n, int64_t vocab) {
    std::vector<int32_t> ids(static_cast<size_t>(n));
    for (auto& id : ids) id = static_cast<int32_t>(rng.uniform_int(static_cast<uint64_t>(vocab)));
    return ids;
}

// Correctly-shaped zero tensors, no initialization work; for loaders.
template <typename T>
ModelParams<T> alloc_params(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams<T> mp;
    mp.cfg = cfg;
    mp.tok_embedding = Tensor<T>::zeros({cfg.vocab, cfg.d});
    mp.blocks.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& b : mp.blocks) {
        b.attn_norm_gamma = Tensor<T>::zeros({cfg.d});
        b.wq = Tensor<T>::zeros({cfg.d, cfg.d});
        b.wk = Tensor<T>::zeros({cfg.d, cfg.d});
        b.wv = Tensor<T>::zeros({cfg.d, cfg.d});
        b.wo = Tensor<T>::zeros({cfg.d, cfg.d});
        if (cfg.variant == AttentionVariant::HeadNormSoftmax)
            b.head_lambda = Tensor<T>::zeros({cfg.d_k});
        b.ffn_norm_gamma = Tensor<T>::zeros({cfg.d});
        b.w_gate = Tensor<T>::zeros({cfg.d, cfg.d_f});
        b.w_up = Tensor<T>::zeros({cfg.d, cfg.d_f});
        b.w_down = Tensor<T>::zeros({cfg.d_f, cfg.d});
    }
    mp.final_norm_gamma = Tensor<T>::zeros({cfg.d});
    mp.w_out = Tensor<T>::zeros({cfg.d, cfg.vocab});
    return mp;
}

// Normal(0, 0.02) everywhere except the residual-writing projections W_O and
// W_down, which get 0.02/sqrt(2L); norm scales start at 1.  For the
// head-normalized variant, lambda is set to the measured per-dimension std of
// the first token's aggregated output on one batch of random tokens.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelParams<T> mp;
    mp.cfg = cfg;
    CounterRng root(seed);
    const double base_std = 0.02;
    const double resid_std = base_std / std::sqrt(2.0 * cfg.n_layers);

    auto normal = [&](const std::string& name, Shape shape, double stddev) {
        auto t = Tensor<T>::zeros(std::move(shape));
        auto r = root.fork(name);
        r.fill_normal(t.mutable_data(), t.numel(), 0.0, stddev);
        return t;
    };

    mp.tok_embedding = normal("tok_embedding", {cfg.vocab, cfg.d}, base_std);
    mp.blocks.resize(static_cast<size_t>(cfg.n_layers));
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        auto& b = mp.blocks[static_cast<size_t>(l)];
        const std::string p = "blocks." + std::to_string(l) + ".";
        b.attn_norm_gamma = Tensor<T>::full({cfg.d}, T(1));
        b.wq = normal(p + "wq", {cfg.d, cfg.d}, base_std);
        b.wk = normal(p + "wk", {cfg.d, cfg.d}, base_std);
        b.wv = normal(p + "wv", {cfg.d, cfg.d}, base_std);
        b.wo = normal(p + "wo", {cfg.d, cfg.d}, resid_std);
        if (cfg.variant == AttentionVariant::HeadNormSoftmax)
            b.head_lambda = Tensor<T>::full({cfg.d_k}, T(1));
        b.ffn_norm_gamma = Tensor<T>::full({cfg.d}, T(1));
        b.w_gate = normal(p + "w_gate", {cfg.d, cfg.d_f}, base_std);
        b.w_up = normal(p + "w_up", {cfg.d, cfg.d_f}, base_std);
        b.w_down = normal(p + "w_down", {cfg.d_f, cfg.d}, resid_std);
    }
    mp.final_norm_gamma = Tensor<T>::full({cfg.d}, T(1));
    mp.w_out = normal("w_out", {cfg.d, cfg.vocab}, base_std);

    if (cfg.variant == AttentionVariant::HeadNormSoftmax) {
        // Measure lambda layer by layer: layer l's statistics depend on the
        // already-final lambdas of layers < l, so one forward per layer.
        const int64_t mb = 32;
        const int64_t mt = std::min<int64_t>(cfg.t_max, 128);
        auto tok_rng = root.fork("head_lambda_tokens");
        const auto tokens = uniform_random_tokens(tok_rng, mb * mt, cfg.vocab);
        ForwardOptions opt;
        opt.trace.aggregated = true;
        for (int64_t l = 0; l < cfg.n_layers; ++l) {
            auto res = model_forward(mp, tokens, mb, mt, opt);
            const auto& o = res.traces[static_cast<size_t>(l)].aggregated;
            auto& lam = mp.blocks[static_cast<size_t>(l)].head_lambda;
            for (int64_t i = 0; i < cfg.d_k; ++i) {
                double s1 = 0.0, s2 = 0.0;
                int64_t n = 0;
                for (int64_t bb = 0; bb < mb; ++bb)
                    for (int64_t h = 0; h < cfg.n_heads; ++h) {
                        const double val =
                            o.data()[((bb * cfg.n_heads + h) * mt + 0) * cfg.d_k + i];
                        s1 += val;
                        s2 += val * val;
                        ++n;
                    }
                const double mean = s1 / n;
                const double var = std::max(0.0, s2 / n - mean * mean);
                lam.mutable_data()[i] = static_cast<T>(std::max(std::sqrt(var), 1e-8));
            }
        }
    }
    return mp;
}

// Mean aggregated-output vector per layer/head over random-token sequences,
// averaged across batch and sequence position.
template <typename T>
ValueMeanTable estimate_value_means(const ModelParams<T>& mp, int64_t n_sequences, int64_t seq_len,
                                    uint64_t seed) {
    if (n_sequences < 1) throw InputError("estimate_value_means: need at least one sequence");
    const auto& cfg = mp.cfg;
    ValueMeanTable table;
    table.n_layers = cfg.n_layers;
    table.n_heads = cfg.n_heads;
    table.d_k = cfg.d_k;
    table.mu.assign(static_cast<size_t>(cfg.n_layers * cfg.n_heads * cfg.d_k), 0.0);
    table.sample_count = n_sequences * seq_len;

    CounterRng rng(seed);
    auto tok_rng = rng.fork("value_mean_tokens");
    const auto tokens = uniform_random_tokens(tok_rng, n_sequences * seq_len, cfg.vocab);
    ForwardOptions opt;
    opt.trace.aggregated = true;
    auto res = model_forward(mp, tokens, n_sequences, seq_len, opt);
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const auto& o = res.traces[static_cast<size_t>(l)].aggregated;
        for (int64_t b = 0; b < n_sequences; ++b)
            for (int64_t h = 0; h < cfg.n_heads; ++h)
                for (int64_t t = 0; t < seq_len; ++t) {
                    const T* row = o.data() + ((b * cfg.n_heads + h) * seq_len + t) * cfg.d_k;
                    double* mu = table.at(l, h);
                    for (int64_t i = 0; i < cfg.d_k; ++i) mu[i] += static_cast<double>(row[i]);
                }
    }
    const double inv = 1.0 / static_cast<double>(n_sequences * seq_len);
    for (auto& x : table.mu) x *= inv;
    return table;
}

}  // namespace sinklab
