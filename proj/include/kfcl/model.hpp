#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "kfcl/errors.hpp"
#include "kfcl/layers.hpp"
#include "kfcl/rng.hpp"
#include "kfcl/tensor.hpp"

namespace kfcl {

// Execution step in the context stage. Plain wraps a single layer applied
// to the running sequence; SelfAttention consumes four consecutive Linear
// layers (query, key, value, output projection) and adds a residual
// connection around the attention output.
struct Block {
    enum class Kind { Plain, SelfAttention } kind = Kind::Plain;
    std::size_t first_layer = 0;  // Plain: the layer; SelfAttention: q projection, layers [first, first+4)
};

// A candidate-ranking model.
//
// Layers [0, scoring_start) encode the context token sequence; the final
// sequence is mean-pooled over positions into a context vector. Layers
// [scoring_start, layers.size()) form the scoring head, applied once per
// candidate to concat(context_vector, candidate_features) and ending in a
// single score. scoring_start == 0 yields a context-free scorer.
//
// Parameters live in slots; layers with the same shared_group map to one
// slot, so a gradient step updates every use at once.
struct Model {
    std::vector<LayerSpec> layers;
    std::vector<Block> context_blocks;
    std::size_t scoring_start = 0;
    std::size_t candidate_count = 0;  // k
    std::size_t candidate_dim = 0;

    std::vector<std::size_t> slot_of_layer;  // layer index -> slot index
    std::vector<Tensor> params;              // one tensor per slot

    std::size_t layer_count() const { return layers.size(); }
    std::size_t slot_count() const { return params.size(); }

    // Output dimension of the context encoder (0 for context-free models).
    std::size_t encoded_dim() const {
        if (scoring_start == 0) return 0;
        return layers[scoring_start - 1].output_dim;
    }

    std::size_t scoring_input_dim() const { return encoded_dim() + candidate_dim; }

    std::size_t total_params() const {
        std::size_t n = 0;
        for (const auto& p : params) n += p.size();
        return n;
    }

    // First layer index using each slot, in layer order.
    std::vector<std::size_t> slot_owner_layer() const {
        std::vector<std::size_t> owner(params.size(), layers.size());
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::size_t s = slot_of_layer[l];
            if (s != static_cast<std::size_t>(-1) && owner[s] == layers.size()) owner[s] = l;
        }
        return owner;
    }

    const LayerSpec& slot_spec(std::size_t slot) const {
        for (std::size_t l = 0; l < layers.size(); ++l)
            if (slot_of_layer[l] == slot) return layers[l];
        throw ConfigError("slot has no layer");
    }

    void validate() const;
};

inline std::vector<Tensor> zero_like_params(const Model& m) {
    std::vector<Tensor> out;
    out.reserve(m.params.size());
    for (const auto& p : m.params) out.emplace_back(p.dims());
    return out;
}

// Gradients are a tensor per parameter slot, shape-congruent with params.
using GradientSet = std::vector<Tensor>;

namespace detail {

inline void check_seq_composition(const Model& m) {
    // Walk the context stage tracking (positions known only at run time,
    // channel dim statically).
    std::size_t dim = 0;
    bool first = true;
    for (const auto& blk : m.context_blocks) {
        if (blk.kind == Block::Kind::Plain) {
            const LayerSpec& spec = m.layers[blk.first_layer];
            switch (spec.kind) {
                case LayerKind::Embedding:
                    if (!first) throw ConfigError("embedding layer only allowed first");
                    dim = spec.output_dim;
                    break;
                case LayerKind::Conv1d:
                case LayerKind::Linear:
                    if (spec.input_dim != dim)
                        throw ConfigError("layer " + std::to_string(blk.first_layer) +
                                          " input dim does not compose");
                    dim = spec.output_dim;
                    break;
                case LayerKind::LayerNorm:
                case LayerKind::Activation:
                    if (spec.input_dim != dim)
                        throw ConfigError("layer " + std::to_string(blk.first_layer) +
                                          " dim does not compose");
                    break;
            }
        } else {
            if (blk.first_layer + 4 > m.scoring_start)
                throw ConfigError("attention block exceeds context stage");
            const LayerSpec& q = m.layers[blk.first_layer];
            const LayerSpec& k = m.layers[blk.first_layer + 1];
            const LayerSpec& v = m.layers[blk.first_layer + 2];
            const LayerSpec& o = m.layers[blk.first_layer + 3];
            for (const LayerSpec* s : {&q, &k, &v, &o})
                if (s->kind != LayerKind::Linear)
                    throw ConfigError("attention block must be built from linear layers");
            if (q.input_dim != dim || k.input_dim != dim || v.input_dim != dim)
                throw ConfigError("attention projections do not compose");
            if (q.output_dim != k.output_dim || v.output_dim != q.output_dim)
                throw ConfigError("attention projections must share an output dim");
            if (o.input_dim != v.output_dim || o.output_dim != dim)
                throw ConfigError("attention output projection must restore the model dim");
        }
        first = false;
    }
    if (m.scoring_start > 0 && dim == 0) throw ConfigError("context stage produced no features");

    // Scoring stage: Linear/Activation chain ending in one score.
    std::size_t d = m.scoring_input_dim();
    for (std::size_t l = m.scoring_start; l < m.layers.size(); ++l) {
        const LayerSpec& spec = m.layers[l];
        if (spec.kind != LayerKind::Linear && spec.kind != LayerKind::Activation)
            throw ConfigError("scoring head supports linear and activation layers only");
        if (spec.input_dim != d)
            throw ConfigError("scoring layer " + std::to_string(l) + " input dim does not compose");
        d = spec.output_dim;
    }
    if (m.layers.empty() || m.layers.back().output_dim != 1)
        throw ConfigError("final layer must produce one score per candidate");
}

} // namespace detail

inline void Model::validate() const {
    if (candidate_count < 2) throw ConfigError("model needs candidate_count >= 2");
    if (candidate_dim < 1) throw ConfigError("model needs candidate_dim >= 1");
    if (slot_of_layer.size() != layers.size())
        throw ConfigError("slot map does not cover all layers");
    for (const auto& spec : layers) spec.validate();

    // Parameter shapes must match their specs; shared layers must agree.
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const LayerSpec& spec = layers[l];
        const std::size_t slot = slot_of_layer[l];
        if (!spec.has_params()) {
            if (slot != static_cast<std::size_t>(-1))
                throw ConfigError("activation layer cannot own parameters");
            continue;
        }
        if (slot >= params.size()) throw ConfigError("layer slot out of range");
        const Tensor& t = params[slot];
        if (t.rank() != 2 || t.rows() != spec.weight_rows() || t.cols() != spec.weight_cols())
            throw ConfigError("parameter tensor shape mismatch at layer " + std::to_string(l));
        for (std::size_t o = 0; o < layers.size(); ++o)
            if (o != l && slot_of_layer[o] == slot && !layers[o].shares_shape_with(spec))
                throw ConfigError("shared layers disagree on shape");
    }
    detail::check_seq_composition(*this);
}

// ---------------------------------------------------------------------------
// Construction

// Assembles slots from layer specs: layers with the same non-negative
// shared_group share one parameter slot.
inline void assign_slots(Model& m) {
    m.slot_of_layer.assign(m.layers.size(), static_cast<std::size_t>(-1));
    std::map<int, std::size_t> group_slot;
    std::map<int, std::size_t> group_first_layer;
    m.params.clear();
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const LayerSpec& spec = m.layers[l];
        if (!spec.has_params()) continue;
        if (spec.shared_group >= 0) {
            auto it = group_slot.find(spec.shared_group);
            if (it != group_slot.end()) {
                if (!spec.shares_shape_with(m.layers[group_first_layer[spec.shared_group]]))
                    throw ConfigError("shared group members differ in shape");
                m.slot_of_layer[l] = it->second;
                continue;
            }
            group_first_layer[spec.shared_group] = l;
        }
        const std::size_t slot = m.params.size();
        m.params.emplace_back(std::vector<std::size_t>{spec.weight_rows(), spec.weight_cols()});
        m.slot_of_layer[l] = slot;
        if (spec.shared_group >= 0) group_slot[spec.shared_group] = slot;
    }
}

// Seeded uniform init in [-r, r] with r = sqrt(6 / (rows + cols)) computed
// on the actual weight matrix; LayerNorm starts at gain 1, bias 0.
inline void init_params(Model& m, std::uint64_t seed) {
    const auto owners = m.slot_owner_layer();
    for (std::size_t s = 0; s < m.params.size(); ++s) {
        const LayerSpec& spec = m.layers[owners[s]];
        Tensor& w = m.params[s];
        if (spec.kind == LayerKind::LayerNorm) {
            for (std::size_t j = 0; j < w.cols(); ++j) {
                w(0, j) = 1.0;
                w(1, j) = 0.0;
            }
            continue;
        }
        Rng rng(derive_seed(seed, 0x70000 + s));
        const double r = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
        for (auto& v : w.values()) v = rng.uniform(-r, r);
    }
}

struct RankerConfig {
    std::size_t vocab_size = 1400;
    std::size_t hidden = 32;
    std::size_t kernel_width = 3;
    std::size_t candidate_count = 10;
    std::size_t candidate_dim = 16;
};

// Reference architecture (a): embedding -> conv1d -> relu -> mean pool,
// then a two-layer scoring head per candidate.
inline Model make_cnn_ranker(const RankerConfig& cfg, std::uint64_t seed) {
    Model m;
    const std::size_t h = cfg.hidden;
    m.layers = {
        LayerSpec::embedding(cfg.vocab_size, h),
        LayerSpec::conv1d(h, h, cfg.kernel_width, true),
        LayerSpec::activation(ActivationKind::ReLU, h),
        LayerSpec::linear(h + cfg.candidate_dim, h, true),
        LayerSpec::activation(ActivationKind::ReLU, h),
        LayerSpec::linear(h, 1, true),
    };
    m.context_blocks = {{Block::Kind::Plain, 0}, {Block::Kind::Plain, 1}, {Block::Kind::Plain, 2}};
    m.scoring_start = 3;
    m.candidate_count = cfg.candidate_count;
    m.candidate_dim = cfg.candidate_dim;
    assign_slots(m);
    init_params(m, seed);
    m.validate();
    return m;
}

// Reference architecture (b): embedding -> single-head self-attention block
// (four linear layers, residual) -> layernorm -> mean pool -> linear head.
inline Model make_transformer_ranker(const RankerConfig& cfg, std::uint64_t seed) {
    Model m;
    const std::size_t h = cfg.hidden;
    m.layers = {
        LayerSpec::embedding(cfg.vocab_size, h),
        LayerSpec::linear(h, h, true),  // Wq
        LayerSpec::linear(h, h, true),  // Wk
        LayerSpec::linear(h, h, true),  // Wv
        LayerSpec::linear(h, h, true),  // Wo
        LayerSpec::layer_norm(h),
        LayerSpec::linear(h + cfg.candidate_dim, 1, true),
    };
    m.context_blocks = {{Block::Kind::Plain, 0},
                        {Block::Kind::SelfAttention, 1},
                        {Block::Kind::Plain, 5}};
    m.scoring_start = 6;
    m.candidate_count = cfg.candidate_count;
    m.candidate_dim = cfg.candidate_dim;
    assign_slots(m);
    init_params(m, seed);
    m.validate();
    return m;
}

} // namespace kfcl
