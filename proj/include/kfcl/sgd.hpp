#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "kfcl/errors.hpp"
#include "kfcl/model.hpp"

namespace kfcl {

// Geometric per-layer learning rates: eta_l = eta_0 * gamma^l with layer 0
// the layer nearest the output. gamma == 1 gives every layer the base rate.
struct LrSchedule {
    double base_rate = 0.05;
    double decay = 1.0;  // gamma

    void validate() const {
        if (base_rate <= 0.0) throw ConfigError("learning rate must be positive");
        if (decay <= 0.0) throw ConfigError("lr decay gamma must be positive");
    }
};

// depth_from_output counts 0 at the layer nearest the output.
inline double lr_for_layer(const LrSchedule& s, std::size_t depth_from_output) {
    return s.base_rate * std::pow(s.decay, static_cast<double>(depth_from_output));
}

// Per-slot rates for a model. A shared slot takes the rate of its use
// nearest the output.
inline std::vector<double> slot_rates(const Model& m, const LrSchedule& s) {
    const std::size_t L = m.layer_count();
    std::vector<double> rates(m.slot_count(), 0.0);
    std::vector<bool> seen(m.slot_count(), false);
    for (std::size_t l = L; l-- > 0;) {
        const std::size_t slot = m.slot_of_layer[l];
        if (slot == static_cast<std::size_t>(-1)) continue;
        const std::size_t depth = L - 1 - l;
        if (!seen[slot]) {
            rates[slot] = lr_for_layer(s, depth);
            seen[slot] = true;
        }
    }
    return rates;
}

inline double gradient_norm(const GradientSet& grads) {
    double sq = 0.0;
    for (const auto& g : grads)
        for (double v : g.values()) sq += v * v;
    return std::sqrt(sq);
}

// Scales gradients in place so the global norm is at most max_norm.
// max_norm <= 0 disables clipping.
inline void clip_gradients(GradientSet& grads, double max_norm) {
    if (max_norm <= 0.0) return;
    const double norm = gradient_norm(grads);
    if (norm <= max_norm) return;
    const double s = max_norm / norm;
    for (auto& g : grads) g.scale(s);
}

// In-place SGD update: theta <- theta - eta_slot * g. Gradients for shared
// layers were already summed over uses during backward, so one update per
// slot applies the summed gradient.
inline void sgd_step(Model& m, const GradientSet& grads, const LrSchedule& schedule) {
    schedule.validate();
    if (grads.size() != m.params.size()) throw ConfigError("gradient set does not match model");
    const std::vector<double> rates = slot_rates(m, schedule);
    for (std::size_t s = 0; s < m.params.size(); ++s) {
        if (!grads[s].same_shape(m.params[s]))
            throw ConfigError("gradient shape mismatch at slot " + std::to_string(s));
        if (!grads[s].all_finite())
            throw DivergenceError("non-finite gradient at slot " + std::to_string(s));
        m.params[s].add_scaled(grads[s], -rates[s]);
    }
}

} // namespace kfcl
