#pragma once

// Measurements over forward traces and parameters: attention-sink scores,
// positional variance profiles, rank statistics, super-neuron scans, and the
// query-key locking geometry. Pure functions; f32 traces, f64 accumulation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sinklab/config.hpp"
#include "sinklab/linalg.hpp"
#include "sinklab/model.hpp"

namespace sinklab {

struct MetricRecord {
    std::string metric;
    int64_t layer = -1;  // -1 where an index does not apply
    int64_t head = -1;
    int64_t position = -1;
    int64_t dimension = -1;
    double value = 0.0;
    int64_t n = 1;  // sample count behind the value
};

namespace detail {

// Population variance with a provisional shift: exact zero on constant
// samples, no catastrophic cancellation.
struct VarAcc {
    double shift = 0.0, s1 = 0.0, s2 = 0.0;
    int64_t n = 0;
    void add(double v) {
        if (n == 0) shift = v;
        const double d = v - shift;
        s1 += d;
        s2 += d * d;
        ++n;
    }
    double mean() const { return shift + s1 / n; }
    double variance() const {
        const double m = s1 / n;
        return std::max(0.0, s2 / n - m * m);
    }
    double stddev() const { return std::sqrt(variance()); }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// attention mass

// Mean attention to position 0 over heads and query positions 1..T-1.
template <typename T>
double sink_score(const ModelConfig& cfg, const std::vector<LayerTrace<T>>& traces, int64_t layer,
                  int64_t batch, int64_t seq) {
    if (seq < 2) throw InputError("sink_score: need seq >= 2");
    const auto& a = traces.at(static_cast<size_t>(layer)).attention;
    if (!a.defined()) throw ContractError("sink_score: trace lacks attention matrices");
    double acc = 0.0;
    int64_t n = 0;
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t h = 0; h < cfg.n_heads; ++h)
            for (int64_t t = 1; t < seq; ++t) {
                acc += static_cast<double>(a.data()[((b * cfg.n_heads + h) * seq + t) * seq + 0]);
                ++n;
            }
    return acc / n;
}

// recv(j): mean attention received by position j from queries t >= max(j, 1).
template <typename T>
std::vector<double> received_attention_profile(const ModelConfig& cfg,
                                               const std::vector<LayerTrace<T>>& traces,
                                               int64_t layer, int64_t batch, int64_t seq) {
    const auto& a = traces.at(static_cast<size_t>(layer)).attention;
    if (!a.defined())
        throw ContractError("received_attention_profile: trace lacks attention matrices");
    std::vector<double> recv(static_cast<size_t>(seq), 0.0);
    for (int64_t j = 0; j < seq; ++j) {
        double acc = 0.0;
        int64_t n = 0;
        const int64_t t0 = std::max<int64_t>(j, 1);
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t h = 0; h < cfg.n_heads; ++h)
                for (int64_t t = t0; t < seq; ++t) {
                    acc += static_cast<double>(a.data()[((b * cfg.n_heads + h) * seq + t) * seq + j]);
                    ++n;
                }
        recv[static_cast<size_t>(j)] = n ? acc / n : 0.0;
    }
    return recv;
}

// ---------------------------------------------------------------------------
// variance profiles

enum class VarianceStage { PostAggregation, PostWo };

// Per position: mean over dimensions of the across-batch std of the chosen
// stage's activations.
template <typename T>
std::vector<double> positional_variance(const ModelConfig& cfg,
                                        const std::vector<LayerTrace<T>>& traces, int64_t layer,
                                        int64_t batch, int64_t seq, VarianceStage stage) {
    if (batch < 2) throw StatisticsError("positional_variance: need a batch of at least 2");
    const auto& tr = traces.at(static_cast<size_t>(layer));
    std::vector<double> out(static_cast<size_t>(seq), 0.0);
    if (stage == VarianceStage::PostAggregation) {
        const auto& o = tr.aggregated;
        if (!o.defined()) throw ContractError("positional_variance: trace lacks aggregated outputs");
        for (int64_t t = 0; t < seq; ++t) {
            double sum_std = 0.0;
            for (int64_t h = 0; h < cfg.n_heads; ++h)
                for (int64_t i = 0; i < cfg.d_k; ++i) {
                    detail::VarAcc acc;
                    for (int64_t b = 0; b < batch; ++b)
                        acc.add(o.data()[((b * cfg.n_heads + h) * seq + t) * cfg.d_k + i]);
                    sum_std += acc.stddev();
                }
            out[static_cast<size_t>(t)] = sum_std / cfg.d;
        }
    } else {
        const auto& x = tr.attn_out;
        if (!x.defined()) throw ContractError("positional_variance: trace lacks post-Wo outputs");
        for (int64_t t = 0; t < seq; ++t) {
            double sum_std = 0.0;
            for (int64_t j = 0; j < cfg.d; ++j) {
                detail::VarAcc acc;
                for (int64_t b = 0; b < batch; ++b) acc.add(x.data()[(b * seq + t) * cfg.d + j]);
                sum_std += acc.stddev();
            }
            out[static_cast<size_t>(t)] = sum_std / cfg.d;
        }
    }
    return out;
}

// Mean l2 norm of the block-input representation at one position.
template <typename T>
double representation_norm(const ModelConfig& cfg, const std::vector<LayerTrace<T>>& traces,
                           int64_t layer, int64_t batch, int64_t seq, int64_t position) {
    const auto& x = traces.at(static_cast<size_t>(layer)).block_input;
    if (!x.defined()) throw ContractError("representation_norm: trace lacks hidden states");
    double acc = 0.0;
    for (int64_t b = 0; b < batch; ++b) {
        double ss = 0.0;
        for (int64_t j = 0; j < cfg.d; ++j) {
            const double v = x.data()[(b * seq + position) * cfg.d + j];
            ss += v * v;
        }
        acc += std::sqrt(ss);
    }
    return acc / batch;
}

// ---------------------------------------------------------------------------
// rank correlation

// Tie-corrected Kendall tau (tau-b) in O(n log n): sort by (a, b), count
// inversions of b by merge sort (= discordant pairs), correct with tie
// counts. Constant input on either side leaves tau undefined.
inline std::optional<double> kendall_tau(const std::vector<double>& a,
                                         const std::vector<double>& b) {
    const int64_t n = static_cast<int64_t>(a.size());
    if (a.size() != b.size()) throw ShapeError("kendall_tau: length mismatch");
    if (n < 2) throw InputError("kendall_tau: need at least 2 observations");

    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](int64_t x, int64_t y) {
        if (a[static_cast<size_t>(x)] != a[static_cast<size_t>(y)])
            return a[static_cast<size_t>(x)] < a[static_cast<size_t>(y)];
        return b[static_cast<size_t>(x)] < b[static_cast<size_t>(y)];
    });

    const int64_t n0 = n * (n - 1) / 2;
    int64_t n1 = 0, n3 = 0;
    for (int64_t i = 0; i < n;) {
        int64_t j = i;
        while (j < n && a[static_cast<size_t>(idx[static_cast<size_t>(j)])] ==
                            a[static_cast<size_t>(idx[static_cast<size_t>(i)])])
            ++j;
        const int64_t t = j - i;
        n1 += t * (t - 1) / 2;
        for (int64_t p = i; p < j;) {
            int64_t q = p;
            while (q < j && b[static_cast<size_t>(idx[static_cast<size_t>(q)])] ==
                                b[static_cast<size_t>(idx[static_cast<size_t>(p)])])
                ++q;
            const int64_t u = q - p;
            n3 += u * (u - 1) / 2;
            p = q;
        }
        i = j;
    }

    // Merge sort on b in the (a, b) order, counting strict inversions.
    std::vector<double> work(static_cast<size_t>(n)), tmp(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        work[static_cast<size_t>(i)] = b[static_cast<size_t>(idx[static_cast<size_t>(i)])];
    int64_t swaps = 0;
    for (int64_t width = 1; width < n; width *= 2) {
        for (int64_t lo = 0; lo < n; lo += 2 * width) {
            const int64_t mid = std::min(lo + width, n), hi = std::min(lo + 2 * width, n);
            int64_t i = lo, j = mid, k = lo;
            while (i < mid && j < hi) {
                if (work[static_cast<size_t>(j)] < work[static_cast<size_t>(i)]) {
                    swaps += mid - i;
                    tmp[static_cast<size_t>(k++)] = work[static_cast<size_t>(j++)];
                } else {
                    tmp[static_cast<size_t>(k++)] = work[static_cast<size_t>(i++)];
                }
            }
            while (i < mid) tmp[static_cast<size_t>(k++)] = work[static_cast<size_t>(i++)];
            while (j < hi) tmp[static_cast<size_t>(k++)] = work[static_cast<size_t>(j++)];
        }
        std::swap(work, tmp);
    }

    int64_t n2 = 0;
    std::vector<double> bs = b;
    std::sort(bs.begin(), bs.end());
    for (int64_t i = 0; i < n;) {
        int64_t j = i;
        while (j < n && bs[static_cast<size_t>(j)] == bs[static_cast<size_t>(i)]) ++j;
        const int64_t t = j - i;
        n2 += t * (t - 1) / 2;
        i = j;
    }

    if (n0 == n1 || n0 == n2) return std::nullopt;  // constant side
    const int64_t num = n0 - n1 - n2 + n3 - 2 * swaps;
    return static_cast<double>(num) /
           std::sqrt(static_cast<double>(n0 - n1) * static_cast<double>(n0 - n2));
}

struct WoAlignment {
    std::vector<std::optional<double>> tau;  // per output neuron
    double mean = 0.0;                       // over defined entries
    int64_t n_valid = 0;
};

// Rank correlation between |W_O column j| and the per-input-dimension std
// vector, for every output neuron j.
template <typename T>
WoAlignment wo_alignment(const Tensor<T>& w_o, const std::vector<double>& sigma_in) {
    if (w_o.rank() != 2 || w_o.dim(0) != static_cast<int64_t>(sigma_in.size()))
        throw ShapeError("wo_alignment: W_O " + shape_str(w_o.shape()) + " vs sigma of " +
                         std::to_string(sigma_in.size()));
    const int64_t d_in = w_o.dim(0), d_out = w_o.dim(1);
    WoAlignment out;
    out.tau.resize(static_cast<size_t>(d_out));
    double acc = 0.0;
    for (int64_t j = 0; j < d_out; ++j) {
        std::vector<double> col(static_cast<size_t>(d_in));
        for (int64_t i = 0; i < d_in; ++i)
            col[static_cast<size_t>(i)] = std::abs(static_cast<double>(w_o.data()[i * d_out + j]));
        auto tau = kendall_tau(col, sigma_in);
        out.tau[static_cast<size_t>(j)] = tau;
        if (tau) {
            acc += *tau;
            ++out.n_valid;
        }
    }
    out.mean = out.n_valid ? acc / out.n_valid : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// super neurons

struct SuperNeuron {
    int64_t index = -1;
    double gate_norm = 0.0, up_norm = 0.0;
    double down_row_norm = 0.0;
    double down_row_kurtosis = 0.0;  // excess
    std::vector<int64_t> outlier_entries;  // |w| > 6 * row std
    bool heavy_tail = false;
};

struct SuperNeuronReport {
    std::vector<double> gate_col_norms, up_col_norms;  // per FFN neuron
    std::vector<SuperNeuron> top;                      // descending by combined norm
    double key_mean = 0.0, key_std = 0.0;              // of sqrt(gate^2 + up^2)
    std::vector<int64_t> flagged;                      // key > mean + 4 std
};

template <typename T>
SuperNeuronReport super_neuron_scan(const BlockParams<T>& b, int64_t top_k = 8) {
    const int64_t d = b.w_gate.dim(0), d_f = b.w_gate.dim(1);
    SuperNeuronReport rep;
    rep.gate_col_norms.resize(static_cast<size_t>(d_f));
    rep.up_col_norms.resize(static_cast<size_t>(d_f));
    std::vector<double> key(static_cast<size_t>(d_f));
    for (int64_t j = 0; j < d_f; ++j) {
        double g2 = 0.0, u2 = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            const double g = b.w_gate.data()[i * d_f + j];
            const double u = b.w_up.data()[i * d_f + j];
            g2 += g * g;
            u2 += u * u;
        }
        rep.gate_col_norms[static_cast<size_t>(j)] = std::sqrt(g2);
        rep.up_col_norms[static_cast<size_t>(j)] = std::sqrt(u2);
        key[static_cast<size_t>(j)] = std::sqrt(g2 + u2);
    }
    detail::VarAcc key_acc;
    for (double v : key) key_acc.add(v);
    rep.key_mean = key_acc.mean();
    rep.key_std = key_acc.stddev();
    for (int64_t j = 0; j < d_f; ++j)
        if (key[static_cast<size_t>(j)] > rep.key_mean + 4.0 * rep.key_std) rep.flagged.push_back(j);

    std::vector<int64_t> order(static_cast<size_t>(d_f));
    for (int64_t j = 0; j < d_f; ++j) order[static_cast<size_t>(j)] = j;
    std::stable_sort(order.begin(), order.end(), [&](int64_t x, int64_t y) {
        return key[static_cast<size_t>(x)] > key[static_cast<size_t>(y)];
    });
    const int64_t k = std::min<int64_t>(top_k, d_f);
    for (int64_t r = 0; r < k; ++r) {
        const int64_t j = order[static_cast<size_t>(r)];
        SuperNeuron sn;
        sn.index = j;
        sn.gate_norm = rep.gate_col_norms[static_cast<size_t>(j)];
        sn.up_norm = rep.up_col_norms[static_cast<size_t>(j)];
        // Row j of W_down: the write-out vector of this neuron.
        detail::VarAcc row_acc;
        double rs2 = 0.0;
        for (int64_t c = 0; c < d; ++c) {
            const double w = b.w_down.data()[j * d + c];
            row_acc.add(w);
            rs2 += w * w;
        }
        sn.down_row_norm = std::sqrt(rs2);
        const double mean = row_acc.mean();
        const double var = row_acc.variance();
        double m4 = 0.0;
        for (int64_t c = 0; c < d; ++c) {
            const double w = b.w_down.data()[j * d + c] - mean;
            m4 += w * w * w * w;
        }
        m4 /= d;
        sn.down_row_kurtosis = var > 0.0 ? m4 / (var * var) - 3.0 : 0.0;
        const double row_std = std::sqrt(var);
        for (int64_t c = 0; c < d; ++c)
            if (std::abs(b.w_down.data()[j * d + c]) > 6.0 * row_std) sn.outlier_entries.push_back(c);
        sn.heavy_tail = sn.down_row_kurtosis > 3.0 || !sn.outlier_entries.empty();
        rep.top.push_back(std::move(sn));
    }
    return rep;
}

// Per position: cosine of the normalized FFN input with gate column j, and
// its raw up-projection activation. Rows follow the trace layout (batch-major).
template <typename T>
struct NeuronActivation {
    std::vector<std::optional<double>> cosine;
    std::vector<double> up_activation;
};

template <typename T>
NeuronActivation<T> neuron_activation_trace(const ModelConfig& cfg, const BlockParams<T>& b,
                                            const LayerTrace<T>& trace, int64_t neuron) {
    const auto& x = trace.ffn_input_normed;
    if (!x.defined()) throw ContractError("neuron_activation_trace: trace lacks FFN inputs");
    if (neuron < 0 || neuron >= cfg.d_f)
        throw InputError("neuron_activation_trace: neuron " + std::to_string(neuron) +
                         " outside d_f " + std::to_string(cfg.d_f));
    const int64_t rows = x.dim(0), d = cfg.d, d_f = cfg.d_f;
    NeuronActivation<T> out;
    out.cosine.resize(static_cast<size_t>(rows));
    out.up_activation.resize(static_cast<size_t>(rows));
    double wg2 = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        const double w = b.w_gate.data()[i * d_f + neuron];
        wg2 += w * w;
    }
    for (int64_t r = 0; r < rows; ++r) {
        double dot_g = 0.0, dot_u = 0.0, x2 = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            const double xv = x.data()[r * d + i];
            dot_g += xv * b.w_gate.data()[i * d_f + neuron];
            dot_u += xv * b.w_up.data()[i * d_f + neuron];
            x2 += xv * xv;
        }
        out.up_activation[static_cast<size_t>(r)] = dot_u;
        if (x2 == 0.0 || wg2 == 0.0)
            out.cosine[static_cast<size_t>(r)] = std::nullopt;
        else
            out.cosine[static_cast<size_t>(r)] = dot_g / (std::sqrt(x2) * std::sqrt(wg2));
    }
    return out;
}

// ---------------------------------------------------------------------------
// dominance and rank

// max |h_j| over mean |h_j|; scale-invariant.
inline double dominance_ratio(const double* h, int64_t d) {
    double mx = 0.0, sum = 0.0;
    for (int64_t j = 0; j < d; ++j) {
        const double a = std::abs(h[j]);
        mx = std::max(mx, a);
        sum += a;
    }
    if (sum == 0.0) throw DomainError("dominance_ratio: all-zero vector");
    return mx / (sum / d);
}

template <typename T>
double dominance_ratio(const std::vector<T>& h) {
    std::vector<double> tmp(h.begin(), h.end());
    return dominance_ratio(tmp.data(), static_cast<int64_t>(tmp.size()));
}

// exp of the entropy of the (L1-)normalized singular values.
template <typename T>
double effective_rank(const Tensor<T>& hmat) {
    check_all_finite("effective_rank", hmat);
    auto sigma = singular_values(hmat);
    double total = 0.0;
    for (double s : sigma) total += s;
    if (total == 0.0) throw DomainError("effective_rank: all-zero matrix");
    double ent = 0.0;
    for (double s : sigma) {
        const double p = s / total;
        if (p > 0.0) ent -= p * std::log(p);
    }
    return std::exp(ent);
}

// ---------------------------------------------------------------------------
// query-key locking

struct QkHeadReport {
    std::optional<double> alignment;  // |cos(u1, k0)|
    double positive_ratio = 0.0;      // fraction of <q_t, k0> > 0
};

// Per head: alignment of the batch-mean first-token key with the principal
// output direction of that head's query map, plus the sign statistic of
// query projections onto the first-token key.
template <typename T>
std::vector<QkHeadReport> qk_locking_report(const ModelConfig& cfg, const ModelParams<T>& mp,
                                            const std::vector<LayerTrace<T>>& traces, int64_t layer,
                                            int64_t batch, int64_t seq) {
    const auto& tr = traces.at(static_cast<size_t>(layer));
    if (!tr.k.defined() || !tr.q.defined())
        throw ContractError("qk_locking_report: trace lacks q/k vectors");
    const auto& wq = mp.blocks.at(static_cast<size_t>(layer)).wq;
    const int64_t d = cfg.d, dk = cfg.d_k, H = cfg.n_heads;
    std::vector<QkHeadReport> out(static_cast<size_t>(H));
    for (int64_t h = 0; h < H; ++h) {
        // d x d_k column block of the query projection for this head.
        auto wq_h = Tensor<double>::zeros({d, dk});
        for (int64_t i = 0; i < d; ++i)
            for (int64_t j = 0; j < dk; ++j)
                wq_h.mutable_data()[i * dk + j] =
                    static_cast<double>(wq.data()[i * d + h * dk + j]);
        auto svd = jacobi_svd(wq_h);
        const auto& u1 = svd.right[0];

        std::vector<double> k0(static_cast<size_t>(dk), 0.0);
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t j = 0; j < dk; ++j)
                k0[static_cast<size_t>(j)] +=
                    static_cast<double>(tr.k.data()[((b * H + h) * seq + 0) * dk + j]);
        for (auto& v : k0) v /= batch;

        double k0n = 0.0;
        for (double v : k0) k0n += v * v;
        auto& rep = out[static_cast<size_t>(h)];
        if (k0n == 0.0) {
            rep.alignment = std::nullopt;
        } else {
            rep.alignment = std::abs(cosine_similarity(u1.data(), k0.data(), dk));
        }
        int64_t pos = 0, n = 0;
        for (int64_t b = 0; b < batch; ++b) {
            const T* kb = tr.k.data() + ((b * H + h) * seq + 0) * dk;
            for (int64_t t = 0; t < seq; ++t) {
                double dot = 0.0;
                const T* qt = tr.q.data() + ((b * H + h) * seq + t) * dk;
                for (int64_t j = 0; j < dk; ++j)
                    dot += static_cast<double>(qt[j]) * static_cast<double>(kb[j]);
                if (dot > 0.0) ++pos;
                ++n;
            }
        }
        rep.positive_ratio = static_cast<double>(pos) / n;
    }
    return out;
}

struct HeadEntropyStd {
    double entropy = 0.0;  // mean attention-row entropy
    double out_std = 0.0;  // std of the head's aggregated output entries
    bool renormalized = false;  // sigmoid rows renormalized before entropy
};

template <typename T>
std::vector<HeadEntropyStd> head_entropy_std(const ModelConfig& cfg,
                                             const std::vector<LayerTrace<T>>& traces,
                                             int64_t layer, int64_t batch, int64_t seq) {
    const auto& tr = traces.at(static_cast<size_t>(layer));
    if (!tr.attention.defined() || !tr.aggregated.defined())
        throw ContractError("head_entropy_std: trace lacks attention or aggregated outputs");
    const bool renorm = cfg.variant == AttentionVariant::Sigmoid;
    std::vector<HeadEntropyStd> out(static_cast<size_t>(cfg.n_heads));
    for (int64_t h = 0; h < cfg.n_heads; ++h) {
        double ent_acc = 0.0;
        int64_t rows = 0;
        detail::VarAcc out_acc;
        for (int64_t b = 0; b < batch; ++b) {
            const T* a = tr.attention.data() + ((b * cfg.n_heads + h) * seq) * seq;
            for (int64_t t = 0; t < seq; ++t) {
                double z = 1.0;
                if (renorm) {
                    z = 0.0;
                    for (int64_t j = 0; j < seq; ++j) z += static_cast<double>(a[t * seq + j]);
                    if (z == 0.0) continue;  // fully masked sigmoid row: no entropy contribution
                }
                double ent = 0.0;
                for (int64_t j = 0; j < seq; ++j) {
                    const double p = static_cast<double>(a[t * seq + j]) / z;
                    if (p > 0.0) ent -= p * std::log(p);
                }
                ent_acc += ent;
                ++rows;
            }
            const T* o = tr.aggregated.data() + ((b * cfg.n_heads + h) * seq) * cfg.d_k;
            for (int64_t i = 0; i < seq * cfg.d_k; ++i) out_acc.add(static_cast<double>(o[i]));
        }
        auto& r = out[static_cast<size_t>(h)];
        r.entropy = rows ? ent_acc / rows : 0.0;
        r.out_std = out_acc.stddev();
        r.renormalized = renorm;
    }
    return out;
}

// Cosine of the batch-mean first-token key with row c of this head's key
// projection: near +-1 indicates the locked regime.
template <typename T>
std::vector<std::optional<double>> key_approximation_check(const ModelConfig& cfg,
                                                           const ModelParams<T>& mp,
                                                           const std::vector<LayerTrace<T>>& traces,
                                                           int64_t layer, int64_t batch,
                                                           int64_t seq, int64_t outlier_dim) {
    const auto& tr = traces.at(static_cast<size_t>(layer));
    if (!tr.k.defined()) throw ContractError("key_approximation_check: trace lacks k vectors");
    if (outlier_dim < 0 || outlier_dim >= cfg.d)
        throw InputError("key_approximation_check: dimension " + std::to_string(outlier_dim) +
                         " outside d " + std::to_string(cfg.d));
    const auto& wk = mp.blocks.at(static_cast<size_t>(layer)).wk;
    const int64_t dk = cfg.d_k, H = cfg.n_heads;
    std::vector<std::optional<double>> out(static_cast<size_t>(H));
    for (int64_t h = 0; h < H; ++h) {
        std::vector<double> k0(static_cast<size_t>(dk), 0.0), row(static_cast<size_t>(dk));
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t j = 0; j < dk; ++j)
                k0[static_cast<size_t>(j)] +=
                    static_cast<double>(tr.k.data()[((b * H + h) * seq + 0) * dk + j]);
        for (auto& v : k0) v /= batch;
        for (int64_t j = 0; j < dk; ++j)
            row[static_cast<size_t>(j)] = static_cast<double>(wk.data()[outlier_dim * cfg.d + h * dk + j]);
        double kn = 0.0, rn = 0.0;
        for (int64_t j = 0; j < dk; ++j) {
            kn += k0[static_cast<size_t>(j)] * k0[static_cast<size_t>(j)];
            rn += row[static_cast<size_t>(j)] * row[static_cast<size_t>(j)];
        }
        if (kn == 0.0 || rn == 0.0)
            out[static_cast<size_t>(h)] = std::nullopt;
        else
            out[static_cast<size_t>(h)] = cosine_similarity(k0.data(), row.data(), dk);
    }
    return out;
}

}  // namespace sinklab
