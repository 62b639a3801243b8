#pragma once

#include <cstddef>
#include <string>

#include "kfcl/errors.hpp"

namespace kfcl {

enum class LayerKind { Linear, Conv1d, Embedding, LayerNorm, Activation };
enum class ActivationKind { ReLU, Tanh, Identity };

inline const char* to_string(LayerKind k) {
    switch (k) {
        case LayerKind::Linear: return "linear";
        case LayerKind::Conv1d: return "conv1d";
        case LayerKind::Embedding: return "embedding";
        case LayerKind::LayerNorm: return "layernorm";
        case LayerKind::Activation: return "activation";
    }
    return "?";
}

inline const char* to_string(ActivationKind k) {
    switch (k) {
        case ActivationKind::ReLU: return "relu";
        case ActivationKind::Tanh: return "tanh";
        case ActivationKind::Identity: return "identity";
    }
    return "?";
}

// Static description of one layer. For Linear and Conv1d the bias is folded
// into the weight matrix as an extra input row (the input gains a trailing
// constant 1), so each layer owns exactly one parameter tensor:
//   Linear:    (p [+1]) x q
//   Conv1d:    (kernel_width*p [+1]) x q   -- applied to flattened patches
//   Embedding: p x q with p = vocabulary size, q = embedding dim
//   LayerNorm: 2 x q (row 0 = gain, row 1 = bias), p == q
//   Activation: no parameters, p == q
struct LayerSpec {
    LayerKind kind = LayerKind::Activation;
    std::size_t input_dim = 0;   // p
    std::size_t output_dim = 0;  // q
    std::size_t kernel_width = 1;
    bool has_bias = false;
    ActivationKind activation_kind = ActivationKind::Identity;
    int shared_group = -1;  // layers with the same non-negative id share one parameter tensor

    static LayerSpec linear(std::size_t p, std::size_t q, bool bias = true) {
        return {LayerKind::Linear, p, q, 1, bias, ActivationKind::Identity, -1};
    }
    static LayerSpec conv1d(std::size_t p, std::size_t q, std::size_t kernel, bool bias = true) {
        return {LayerKind::Conv1d, p, q, kernel, bias, ActivationKind::Identity, -1};
    }
    static LayerSpec embedding(std::size_t vocab, std::size_t dim) {
        return {LayerKind::Embedding, vocab, dim, 1, false, ActivationKind::Identity, -1};
    }
    static LayerSpec layer_norm(std::size_t dim) {
        return {LayerKind::LayerNorm, dim, dim, 1, false, ActivationKind::Identity, -1};
    }
    static LayerSpec activation(ActivationKind a, std::size_t dim) {
        return {LayerKind::Activation, dim, dim, 1, false, a, -1};
    }

    // Row count of the weight matrix: the augmented input size for Linear
    // and Conv1d.
    std::size_t weight_rows() const {
        switch (kind) {
            case LayerKind::Linear: return input_dim + (has_bias ? 1 : 0);
            case LayerKind::Conv1d: return kernel_width * input_dim + (has_bias ? 1 : 0);
            case LayerKind::Embedding: return input_dim;
            case LayerKind::LayerNorm: return 2;
            case LayerKind::Activation: return 0;
        }
        return 0;
    }

    std::size_t weight_cols() const {
        return kind == LayerKind::Activation ? 0 : output_dim;
    }

    std::size_t param_count() const { return weight_rows() * weight_cols(); }

    bool has_params() const { return kind != LayerKind::Activation; }

    // Layers eligible for a curvature penalty. LayerNorm parameters train
    // freely but are never regularized.
    bool regularized() const {
        return kind == LayerKind::Linear || kind == LayerKind::Conv1d ||
               kind == LayerKind::Embedding;
    }

    // Layers whose weight block factors as (augmented input) x (output).
    bool kron_factorable() const {
        return kind == LayerKind::Linear || kind == LayerKind::Conv1d;
    }

    void validate() const {
        if (kind == LayerKind::Activation) {
            if (input_dim != output_dim)
                throw ConfigError("activation layer must preserve its dimension");
            return;
        }
        if (input_dim < 1 || output_dim < 1)
            throw ConfigError(std::string(to_string(kind)) + " layer needs positive dims");
        if (kind == LayerKind::Conv1d && kernel_width < 1)
            throw ConfigError("conv1d kernel width must be >= 1");
        if (kind == LayerKind::LayerNorm && input_dim != output_dim)
            throw ConfigError("layernorm must preserve its dimension");
    }

    bool shares_shape_with(const LayerSpec& o) const {
        return kind == o.kind && input_dim == o.input_dim && output_dim == o.output_dim &&
               kernel_width == o.kernel_width && has_bias == o.has_bias;
    }
};

} // namespace kfcl
