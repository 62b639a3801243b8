#pragma once

#include <cstddef>
#include <utility>
#include <variant>
#include <vector>

#include "kfcl/autodiff.hpp"
#include "kfcl/data.hpp"
#include "kfcl/errors.hpp"
#include "kfcl/model.hpp"
#include "kfcl/tensor.hpp"

namespace kfcl {

// Parameter-count cap for dense curvature oracles. Anything larger must use
// the diagonal or Kronecker-factored representation.
inline constexpr std::size_t kDefaultOracleCap = 2500;

// Per-slot squared-gradient means, shape-congruent with the parameters.
struct DiagFisher {
    std::vector<Tensor> diag;
};

// Kronecker factors of one layer's Fisher block: A is the mean augmented
// input outer product (p [+1] square), G the mean output-gradient outer
// product (q square). The block is approximated as A (x) G under the
// input-major flattening of the weight matrix.
struct KroneckerFactorPair {
    std::size_t slot = 0;
    Tensor a;
    Tensor g;
};

// Kronecker representation for a whole model: factor pairs for Linear and
// Conv1d slots plus exact diagonal entries for embedding slots (an
// embedding lookup has one-hot inputs, so its input factor is diagonal and
// the diagonal treatment is exact).
struct KfcFisher {
    std::vector<KroneckerFactorPair> pairs;
    std::vector<std::pair<std::size_t, Tensor>> embed_diag;

    const KroneckerFactorPair* find(std::size_t slot) const {
        for (const auto& p : pairs)
            if (p.slot == slot) return &p;
        return nullptr;
    }
    const Tensor* find_embed(std::size_t slot) const {
        for (const auto& [s, t] : embed_diag)
            if (s == slot) return &t;
        return nullptr;
    }
};

// Dense Fisher over all model parameters, flattened in slot order with
// row-major order inside each slot. Oracle for tiny models only.
struct FullFisher {
    Tensor matrix;  // n x n
    std::size_t n() const { return matrix.rows(); }
};

// Exactly one representation is populated; monostate means "mean only"
// (the L2 and penalty-free strategies).
using FisherRepr = std::variant<std::monostate, DiagFisher, KfcFisher, FullFisher>;

// ---------------------------------------------------------------------------
// Helpers

inline std::vector<bool> regularized_slots(const Model& m) {
    std::vector<bool> out(m.slot_count(), false);
    const auto owners = m.slot_owner_layer();
    for (std::size_t s = 0; s < m.slot_count(); ++s)
        out[s] = m.layers[owners[s]].regularized();
    return out;
}

inline std::size_t flatten_params(const GradientSet& tensors, std::vector<double>& out) {
    out.clear();
    for (const auto& t : tensors) out.insert(out.end(), t.values().begin(), t.values().end());
    return out.size();
}

// ---------------------------------------------------------------------------
// Estimation. All three estimators take the empirical expectation over the
// given data of outer products of per-instance loss gradients, accumulated
// one instance at a time.

inline FullFisher estimate_full_fim(const Model& m, const std::vector<RankingInstance>& data,
                                    std::size_t cap = kDefaultOracleCap) {
    if (data.empty()) throw UsageError("estimate_full_fim: empty data");
    const std::size_t n = m.total_params();
    if (n > cap)
        throw OracleScaleError("full Fisher of " + std::to_string(n) +
                               " parameters exceeds the oracle cap of " + std::to_string(cap));
    FullFisher f;
    f.matrix = Tensor::matrix(n, n);
    Workspace ws;
    GradientSet scratch = zero_like_params(m);
    std::vector<double> flat;
    for (const auto& inst : data) {
        for (auto& t : scratch) t.fill(0.0);
        instance_loss_and_backward(m, inst, ws, scratch, 1.0);
        flatten_params(scratch, flat);
        add_outer(f.matrix, flat.data(), n, flat.data(), n);
    }
    f.matrix.scale(1.0 / static_cast<double>(data.size()));
    return f;
}

inline DiagFisher estimate_diag_fim(const Model& m, const std::vector<RankingInstance>& data) {
    if (data.empty()) throw UsageError("estimate_diag_fim: empty data");
    DiagFisher f;
    f.diag = zero_like_params(m);
    Workspace ws;
    GradientSet scratch = zero_like_params(m);
    for (const auto& inst : data) {
        for (auto& t : scratch) t.fill(0.0);
        instance_loss_and_backward(m, inst, ws, scratch, 1.0);
        for (std::size_t s = 0; s < scratch.size(); ++s) {
            const auto& g = scratch[s].values();
            auto& d = f.diag[s].values();
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * g[i];
        }
    }
    for (auto& t : f.diag) t.scale(1.0 / static_cast<double>(data.size()));
    return f;
}

namespace detail {

// Accumulates sum x'x'^T and sum dy dy^T per slot across layer uses.
class KfacAccumulator : public UsageObserver {
public:
    explicit KfacAccumulator(const Model& m) : counts_(m.slot_count(), 0) {
        a_.resize(m.slot_count());
        g_.resize(m.slot_count());
        active_.assign(m.slot_count(), false);
    }

    void activate(std::size_t slot, std::size_t aug_rows, std::size_t cols) {
        a_[slot] = Tensor::matrix(aug_rows, aug_rows);
        g_[slot] = Tensor::matrix(cols, cols);
        active_[slot] = true;
    }

    void on_usage(std::size_t slot, const double* x_aug, std::size_t x_len, const double* dy,
                  std::size_t y_len) override {
        if (!active_[slot]) return;
        add_outer(a_[slot], x_aug, x_len, x_aug, x_len);
        add_outer(g_[slot], dy, y_len, dy, y_len);
        counts_[slot] += 1;
    }

    Tensor take_a(std::size_t slot) {
        Tensor t = std::move(a_[slot]);
        t.scale(1.0 / static_cast<double>(counts_[slot]));
        return t;
    }
    Tensor take_g(std::size_t slot) {
        Tensor t = std::move(g_[slot]);
        t.scale(1.0 / static_cast<double>(counts_[slot]));
        return t;
    }
    std::size_t count(std::size_t slot) const { return counts_[slot]; }

private:
    std::vector<Tensor> a_, g_;
    std::vector<std::size_t> counts_;
    std::vector<bool> active_;
};

} // namespace detail

// Kronecker factors for every regularized slot. Linear and Conv1d slots get
// (A, G) pairs averaged uniformly over every (instance, use) pair — conv
// positions, attention positions, per-candidate scoring calls, and shared
// weight call sites all count as uses. Embedding slots get exact diagonal
// entries. `slots`, when non-empty, restricts estimation to those slots and
// rejects ineligible ones.
inline KfcFisher estimate_kfac(const Model& m, const std::vector<RankingInstance>& data,
                               const std::vector<std::size_t>& slots = {}) {
    if (data.empty()) throw UsageError("estimate_kfac: empty data");
    const auto owners = m.slot_owner_layer();

    std::vector<bool> want(m.slot_count(), slots.empty());
    for (std::size_t s : slots) {
        if (s >= m.slot_count()) throw ConfigError("estimate_kfac: slot out of range");
        want[s] = true;
    }

    detail::KfacAccumulator acc(m);
    std::vector<std::size_t> embed_slots;
    for (std::size_t s = 0; s < m.slot_count(); ++s) {
        const LayerSpec& spec = m.layers[owners[s]];
        if (!want[s]) continue;
        if (spec.kind == LayerKind::LayerNorm) {
            if (!slots.empty())
                throw ConfigError(
                    "layernorm parameters are excluded from curvature penalties and cannot be "
                    "regularized");
            continue;
        }
        if (spec.kind == LayerKind::Embedding) {
            embed_slots.push_back(s);
            continue;
        }
        acc.activate(s, spec.weight_rows(), spec.weight_cols());
    }

    KfcFisher f;
    Workspace ws;
    GradientSet scratch = zero_like_params(m);
    std::vector<Tensor> embed_sq;
    for (std::size_t s : embed_slots) embed_sq.push_back(Tensor(m.params[s].dims()));

    for (const auto& inst : data) {
        for (std::size_t i = 0; i < embed_slots.size(); ++i) scratch[embed_slots[i]].fill(0.0);
        instance_loss_and_backward(m, inst, ws, scratch, 1.0, &acc);
        for (std::size_t i = 0; i < embed_slots.size(); ++i) {
            const auto& g = scratch[embed_slots[i]].values();
            auto& d = embed_sq[i].values();
            for (std::size_t j = 0; j < g.size(); ++j) d[j] += g[j] * g[j];
        }
    }

    for (std::size_t s = 0; s < m.slot_count(); ++s) {
        if (!want[s]) continue;
        const LayerSpec& spec = m.layers[owners[s]];
        if (!spec.kron_factorable()) continue;
        KroneckerFactorPair pair;
        pair.slot = s;
        pair.a = acc.take_a(s);
        pair.g = acc.take_g(s);
        f.pairs.push_back(std::move(pair));
    }
    for (std::size_t i = 0; i < embed_slots.size(); ++i) {
        embed_sq[i].scale(1.0 / static_cast<double>(data.size()));
        f.embed_diag.emplace_back(embed_slots[i], std::move(embed_sq[i]));
    }
    return f;
}

// trace(Delta^T A Delta G): the quadratic form of one layer's Kronecker
// block evaluated without materializing A (x) G.
inline double kron_quadratic(const KroneckerFactorPair& pair, const Tensor& delta) {
    if (delta.rows() != pair.a.rows() || delta.cols() != pair.g.rows())
        throw SnapshotMismatchError("kron factors do not match the weight difference shape");
    const Tensor ad = matmul(pair.a, delta);
    const Tensor dg = matmul(delta, pair.g);
    return frobenius_dot(ad, dg);
}

// Gradient of kron_quadratic with respect to Delta: 2 A Delta G for
// symmetric factors.
inline Tensor kron_quadratic_gradient(const KroneckerFactorPair& pair, const Tensor& delta) {
    if (delta.rows() != pair.a.rows() || delta.cols() != pair.g.rows())
        throw SnapshotMismatchError("kron factors do not match the weight difference shape");
    Tensor adg = matmul(matmul(pair.a, delta), pair.g);
    adg.scale(2.0);
    return adg;
}

// Dense A (x) G under the input-major flattening of the weight matrix:
// entry ((ia, ig), (ja, jg)) = A(ia, ja) * G(ig, jg). Quadratic forms in the
// result agree with trace(D^T A D G).
inline Tensor materialize_kron(const KroneckerFactorPair& pair,
                               std::size_t cap = kDefaultOracleCap) {
    const std::size_t ra = pair.a.rows(), rg = pair.g.rows();
    const std::size_t n = ra * rg;
    if (n > cap)
        throw OracleScaleError("materialized Kronecker block of dimension " + std::to_string(n) +
                               " exceeds the oracle cap of " + std::to_string(cap));
    Tensor out = Tensor::matrix(n, n);
    for (std::size_t ia = 0; ia < ra; ++ia)
        for (std::size_t ig = 0; ig < rg; ++ig) {
            double* orow = out.row(ia * rg + ig);
            for (std::size_t ja = 0; ja < ra; ++ja) {
                const double av = pair.a(ia, ja);
                if (av == 0.0) continue;
                const double* grow = pair.g.row(ig);
                for (std::size_t jg = 0; jg < rg; ++jg) orow[ja * rg + jg] += av * grow[jg];
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// Memory accounting for the penalized parameters (LayerNorm never counts).
// Shared slots are stored once.

enum class FisherScheme { Full, BlockDiag, Kfc, Diag };

inline const char* to_string(FisherScheme s) {
    switch (s) {
        case FisherScheme::Full: return "full";
        case FisherScheme::BlockDiag: return "block-diag";
        case FisherScheme::Kfc: return "kfc";
        case FisherScheme::Diag: return "diag";
    }
    return "?";
}

// Exact stored-element count for one scheme over the given penalized
// layers. Full and BlockDiag grow with the square of layer size; the
// Kronecker factorization stores only (p[+1])^2 + q^2 per layer.
inline unsigned long long memory_footprint(const std::vector<LayerSpec>& layers,
                                           FisherScheme scheme) {
    unsigned long long total = 0;
    unsigned long long param_total = 0;
    for (const LayerSpec& spec : layers) {
        if (!spec.regularized()) continue;
        const unsigned long long rows = spec.weight_rows();
        const unsigned long long cols = spec.weight_cols();
        const unsigned long long count = rows * cols;
        param_total += count;
        switch (scheme) {
            case FisherScheme::Full:
                break;  // handled below from the total
            case FisherScheme::BlockDiag:
                total += count * count;
                break;
            case FisherScheme::Kfc:
                if (spec.kron_factorable())
                    total += rows * rows + cols * cols;
                else
                    total += count;  // embeddings stay diagonal
                break;
            case FisherScheme::Diag:
                total += count;
                break;
        }
    }
    if (scheme == FisherScheme::Full) total = param_total * param_total;
    return total;
}

// Model-level accounting; shared slots are stored (and counted) once.
inline unsigned long long memory_footprint(const Model& m, FisherScheme scheme) {
    const auto owners = m.slot_owner_layer();
    std::vector<LayerSpec> slot_layers;
    for (std::size_t s = 0; s < m.slot_count(); ++s) slot_layers.push_back(m.layers[owners[s]]);
    return memory_footprint(slot_layers, scheme);
}

} // namespace kfcl
