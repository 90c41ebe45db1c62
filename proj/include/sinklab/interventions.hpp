#pragma once

// Causal interventions on the attention pathway: masking a token's row so it
// can only attend to itself, and amplifying the variance of its aggregated
// head output around a precomputed mean (plus the plain norm-scaling control).

#include <cstdint>
#include <string>
#include <vector>

#include "sinklab/common.hpp"

namespace sinklab {

enum class InterventionKind { MaskBlock, VarianceAmplify, NormScale };

inline const char* to_string(InterventionKind k) {
    switch (k) {
        case InterventionKind::MaskBlock: return "mask_block";
        case InterventionKind::VarianceAmplify: return "variance_amplify";
        case InterventionKind::NormScale: return "norm_scale";
    }
    return "?";
}

inline InterventionKind intervention_kind_from_string(const std::string& s) {
    if (s == "mask_block") return InterventionKind::MaskBlock;
    if (s == "variance_amplify") return InterventionKind::VarianceAmplify;
    if (s == "norm_scale") return InterventionKind::NormScale;
    throw ConfigError("unknown intervention kind '" + s +
                      "' (want mask_block|variance_amplify|norm_scale)");
}

struct InterventionSpec {
    InterventionKind kind = InterventionKind::MaskBlock;
    int64_t position = 1;      // token index k the intervention targets
    int64_t layer_begin = 0;   // inclusive
    int64_t layer_end = -1;    // inclusive; -1 means last layer
    std::vector<int64_t> heads;  // empty = all heads
    double factor = 1.0;       // amplification kinds only

    void validate(int64_t n_layers, int64_t seq_len) const {
        if (kind == InterventionKind::MaskBlock && position < 1)
            throw ConfigError("intervention.position: mask_block needs k >= 1, got " +
                              std::to_string(position));
        if (position < 0 || position >= seq_len)
            throw InputError("intervention.position " + std::to_string(position) +
                             " out of range for sequence length " + std::to_string(seq_len));
        const int64_t le = layer_end < 0 ? n_layers - 1 : layer_end;
        if (layer_begin < 0 || le >= n_layers || layer_begin > le)
            throw ConfigError("intervention.layers [" + std::to_string(layer_begin) + ", " +
                              std::to_string(le) + "] outside [0, " +
                              std::to_string(n_layers - 1) + "]");
        if (!(factor > 0.0) || !std::isfinite(factor))
            throw ConfigError("intervention.factor must be finite and > 0, got " +
                              std::to_string(factor));
        for (int64_t h : heads)
            if (h < 0) throw ConfigError("intervention.heads: negative head index");
    }

    bool covers_layer(int64_t layer, int64_t n_layers) const {
        const int64_t le = layer_end < 0 ? n_layers - 1 : layer_end;
        return layer >= layer_begin && layer <= le;
    }

    bool covers_head(int64_t head) const {
        if (heads.empty()) return true;
        for (int64_t h : heads)
            if (h == head) return true;
        return false;
    }
};

// Mean aggregated-output vector per layer and head, estimated over random
// tokens (averaged over batch and sequence).
struct ValueMeanTable {
    int64_t n_layers = 0, n_heads = 0, d_k = 0;
    std::vector<double> mu;  // [L][H][d_k]
    int64_t sample_count = 0;

    const double* at(int64_t layer, int64_t head) const {
        return mu.data() + (layer * n_heads + head) * d_k;
    }
    double* at(int64_t layer, int64_t head) {
        return mu.data() + (layer * n_heads + head) * d_k;
    }
};

// Row k of the causal mask becomes self-only; other rows untouched.
// mask is T x T, row-major, nonzero = visible.
inline void apply_mask_block(uint8_t* mask, int64_t seq_len, int64_t k) {
    if (k < 1 || k >= seq_len)
        throw InputError("apply_mask_block: k = " + std::to_string(k) +
                         " outside [1, " + std::to_string(seq_len - 1) + "]");
    for (int64_t j = 0; j < seq_len; ++j) mask[k * seq_len + j] = (j == k) ? 1 : 0;
}

// o' = mu + factor * (o - mu), in place. Factor 1 is the exact identity.
template <typename T>
void apply_variance_amplify(T* o, const double* mu, int64_t n, double factor) {
    if (factor == 1.0) return;
    for (int64_t i = 0; i < n; ++i)
        o[i] = static_cast<T>(mu[i] + factor * (static_cast<double>(o[i]) - mu[i]));
}

// o' = factor * o, in place (the control: scales the mean too).
template <typename T>
void apply_norm_scale(T* o, int64_t n, double factor) {
    for (int64_t i = 0; i < n; ++i) o[i] = static_cast<T>(factor * static_cast<double>(o[i]));
}

}  // namespace sinklab
