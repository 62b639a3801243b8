#pragma once

#include <vector>

#include "kfcl/autodiff.hpp"
#include "kfcl/data.hpp"
#include "kfcl/errors.hpp"
#include "kfcl/model.hpp"

namespace kfcl {

// Fraction of instances whose positive candidate attains the strict maximum
// score. Ties count as incorrect, which keeps the metric deterministic.
inline double accuracy(const Model& m, const std::vector<RankingInstance>& split) {
    if (split.empty()) throw UsageError("accuracy: empty split");
    Workspace ws;
    std::size_t correct = 0;
    for (const auto& inst : split) {
        const auto scores = forward(m, inst, ws);
        const double pos = scores[inst.positive];
        bool strict = true;
        for (std::size_t c = 0; c < scores.size(); ++c) {
            if (c == inst.positive) continue;
            if (scores[c] >= pos) {
                strict = false;
                break;
            }
        }
        if (strict) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(split.size());
}

// (after - before) / before * 100; the forgetting measure between a task's
// accuracy when it was trained and its accuracy now.
inline double percentage_change(double before, double after) {
    if (before <= 0.0) throw UsageError("percentage_change: baseline must be positive");
    return (after - before) / before * 100.0;
}

} // namespace kfcl
