#pragma once

#include <cstddef>
#include <vector>

#include "kfcl/errors.hpp"
#include "kfcl/fisher.hpp"
#include "kfcl/model.hpp"
#include "kfcl/snapshot.hpp"
#include "kfcl/tensor.hpp"

namespace kfcl {

// Quadratic penalties anchoring the current parameters to a snapshot mean,
// weighted by the snapshot's Fisher representation. No factor of 1/2
// anywhere: the penalty is lambda * Delta^T F Delta.
//
// LayerNorm slots are never penalized under any scheme; they train freely.

namespace detail {

inline void check_snapshot_shapes(const Model& m, const TaskSnapshot& snap) {
    if (snap.mean.size() != m.params.size())
        throw SnapshotMismatchError("snapshot '" + snap.task_id + "' has " +
                                    std::to_string(snap.mean.size()) + " slots, model has " +
                                    std::to_string(m.params.size()));
    for (std::size_t s = 0; s < m.params.size(); ++s)
        if (!snap.mean[s].same_shape(m.params[s]))
            throw SnapshotMismatchError("snapshot '" + snap.task_id +
                                        "' mean shape mismatch at slot " + std::to_string(s));
}

inline void check_lambda(double lambda) {
    if (lambda < 0.0) throw UsageError("penalty strength lambda must be >= 0");
}

} // namespace detail

// lambda * sum_j F_jj (theta_j - mu_j)^2 over regularized slots.
inline double diag_penalty(const Model& m, const TaskSnapshot& snap, double lambda) {
    detail::check_lambda(lambda);
    detail::check_snapshot_shapes(m, snap);
    const auto* fisher = std::get_if<DiagFisher>(&snap.fisher);
    if (!fisher || fisher->diag.size() != m.params.size())
        throw SnapshotMismatchError("snapshot '" + snap.task_id + "' carries no diagonal Fisher");
    const auto reg = regularized_slots(m);
    double total = 0.0;
    for (std::size_t s = 0; s < m.params.size(); ++s) {
        if (!reg[s]) continue;
        const auto& cur = m.params[s].values();
        const auto& mu = snap.mean[s].values();
        const auto& f = fisher->diag[s].values();
        for (std::size_t i = 0; i < cur.size(); ++i) {
            const double d = cur[i] - mu[i];
            total += f[i] * d * d;
        }
    }
    return lambda * total;
}

// lambda * sum over layers of trace(Delta^T A Delta G) with Delta the
// augmented weight difference; evaluated without materializing A (x) G.
// Embedding slots use their exact diagonal entries.
inline double kfac_penalty(const Model& m, const TaskSnapshot& snap, double lambda) {
    detail::check_lambda(lambda);
    detail::check_snapshot_shapes(m, snap);
    const auto* fisher = std::get_if<KfcFisher>(&snap.fisher);
    if (!fisher)
        throw SnapshotMismatchError("snapshot '" + snap.task_id + "' carries no Kronecker factors");
    const auto reg = regularized_slots(m);
    const auto owners = m.slot_owner_layer();
    double total = 0.0;
    for (std::size_t s = 0; s < m.params.size(); ++s) {
        if (!reg[s]) continue;
        const LayerSpec& spec = m.layers[owners[s]];
        Tensor delta = m.params[s];
        delta.add_scaled(snap.mean[s], -1.0);
        if (spec.kron_factorable()) {
            const auto* pair = fisher->find(s);
            if (!pair)
                throw SnapshotMismatchError("snapshot '" + snap.task_id +
                                            "' misses factors for slot " + std::to_string(s));
            total += kron_quadratic(*pair, delta);
        } else {
            const auto* diag = fisher->find_embed(s);
            if (!diag)
                throw SnapshotMismatchError("snapshot '" + snap.task_id +
                                            "' misses embedding diagonal for slot " +
                                            std::to_string(s));
            const auto& d = delta.values();
            const auto& f = diag->values();
            for (std::size_t i = 0; i < d.size(); ++i) total += f[i] * d[i] * d[i];
        }
    }
    return lambda * total;
}

// lambda * Delta^T F Delta against a dense Fisher over all parameters.
inline double full_penalty(const Model& m, const TaskSnapshot& snap, double lambda) {
    detail::check_lambda(lambda);
    detail::check_snapshot_shapes(m, snap);
    const auto* fisher = std::get_if<FullFisher>(&snap.fisher);
    if (!fisher)
        throw SnapshotMismatchError("snapshot '" + snap.task_id + "' carries no full Fisher");
    const auto reg_full = regularized_slots(m);
    GradientSet delta = zero_like_params(m);
    for (std::size_t s = 0; s < m.params.size(); ++s) {
        if (!reg_full[s]) continue;
        delta[s] = m.params[s];
        delta[s].add_scaled(snap.mean[s], -1.0);
    }
    std::vector<double> flat;
    flatten_params(delta, flat);
    const std::size_t n = flat.size();
    if (fisher->n() != n)
        throw SnapshotMismatchError("full Fisher dimension mismatch for '" + snap.task_id + "'");
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double di = flat[i];
        if (di == 0.0) continue;
        total += di * dot(fisher->matrix.row(i), flat.data(), n);
    }
    return lambda * total;
}

// lambda * ||theta - mu||^2 over regularized slots (identity Fisher).
inline double l2_penalty(const Model& m, const TaskSnapshot& snap, double lambda) {
    detail::check_lambda(lambda);
    detail::check_snapshot_shapes(m, snap);
    const auto reg = regularized_slots(m);
    double total = 0.0;
    for (std::size_t s = 0; s < m.params.size(); ++s) {
        if (!reg[s]) continue;
        const auto& cur = m.params[s].values();
        const auto& mu = snap.mean[s].values();
        for (std::size_t i = 0; i < cur.size(); ++i) {
            const double d = cur[i] - mu[i];
            total += d * d;
        }
    }
    return lambda * total;
}

// Dispatches on the snapshot's Fisher representation; monostate snapshots
// contribute a penalty only under the L2 strategy, which the caller signals
// by setting the snapshot method.
inline double snapshot_penalty(const Model& m, const TaskSnapshot& snap, double lambda) {
    if (std::holds_alternative<DiagFisher>(snap.fisher)) return diag_penalty(m, snap, lambda);
    if (std::holds_alternative<KfcFisher>(snap.fisher)) return kfac_penalty(m, snap, lambda);
    if (std::holds_alternative<FullFisher>(snap.fisher)) return full_penalty(m, snap, lambda);
    if (snap.method == Method::L2) return l2_penalty(m, snap, lambda);
    return 0.0;
}

// Exact gradient of snapshot_penalty, accumulated into `grads`:
// diagonal 2*lambda*F.Delta, Kronecker 2*lambda*A Delta G, full
// 2*lambda*F Delta, L2 2*lambda*Delta.
inline void add_penalty_gradient(const Model& m, const TaskSnapshot& snap, double lambda,
                                 GradientSet& grads) {
    detail::check_lambda(lambda);
    detail::check_snapshot_shapes(m, snap);
    if (lambda == 0.0) return;
    const auto reg = regularized_slots(m);
    const auto owners = m.slot_owner_layer();

    if (const auto* fisher = std::get_if<DiagFisher>(&snap.fisher)) {
        for (std::size_t s = 0; s < m.params.size(); ++s) {
            if (!reg[s]) continue;
            const auto& cur = m.params[s].values();
            const auto& mu = snap.mean[s].values();
            const auto& f = fisher->diag[s].values();
            auto& g = grads[s].values();
            for (std::size_t i = 0; i < cur.size(); ++i)
                g[i] += 2.0 * lambda * f[i] * (cur[i] - mu[i]);
        }
        return;
    }
    if (const auto* fisher = std::get_if<KfcFisher>(&snap.fisher)) {
        for (std::size_t s = 0; s < m.params.size(); ++s) {
            if (!reg[s]) continue;
            const LayerSpec& spec = m.layers[owners[s]];
            Tensor delta = m.params[s];
            delta.add_scaled(snap.mean[s], -1.0);
            if (spec.kron_factorable()) {
                const auto* pair = fisher->find(s);
                if (!pair)
                    throw SnapshotMismatchError("snapshot '" + snap.task_id +
                                                "' misses factors for slot " + std::to_string(s));
                grads[s].add_scaled(kron_quadratic_gradient(*pair, delta), lambda);
            } else {
                const auto* diag = fisher->find_embed(s);
                if (!diag)
                    throw SnapshotMismatchError("snapshot '" + snap.task_id +
                                                "' misses embedding diagonal for slot " +
                                                std::to_string(s));
                const auto& d = delta.values();
                const auto& f = diag->values();
                auto& g = grads[s].values();
                for (std::size_t i = 0; i < d.size(); ++i) g[i] += 2.0 * lambda * f[i] * d[i];
            }
        }
        return;
    }
    if (const auto* fisher = std::get_if<FullFisher>(&snap.fisher)) {
        GradientSet delta = zero_like_params(m);
        for (std::size_t s = 0; s < m.params.size(); ++s) {
            if (!reg[s]) continue;
            delta[s] = m.params[s];
            delta[s].add_scaled(snap.mean[s], -1.0);
        }
        std::vector<double> flat;
        flatten_params(delta, flat);
        const std::size_t n = flat.size();
        if (fisher->n() != n)
            throw SnapshotMismatchError("full Fisher dimension mismatch for '" + snap.task_id +
                                        "'");
        std::vector<double> fd(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) fd[i] = dot(fisher->matrix.row(i), flat.data(), n);
        std::size_t off = 0;
        for (std::size_t s = 0; s < m.params.size(); ++s) {
            auto& g = grads[s].values();
            if (reg[s])
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * lambda * fd[off + i];
            off += g.size();
        }
        return;
    }
    if (snap.method == Method::L2) {
        for (std::size_t s = 0; s < m.params.size(); ++s) {
            if (!reg[s]) continue;
            const auto& cur = m.params[s].values();
            const auto& mu = snap.mean[s].values();
            auto& g = grads[s].values();
            for (std::size_t i = 0; i < cur.size(); ++i) g[i] += 2.0 * lambda * (cur[i] - mu[i]);
        }
    }
}

} // namespace kfcl
