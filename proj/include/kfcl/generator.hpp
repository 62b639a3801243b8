#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "kfcl/data.hpp"
#include "kfcl/errors.hpp"
#include "kfcl/rng.hpp"
#include "kfcl/tensor.hpp"

namespace kfcl {

namespace detail {

// Latent state of one task: concept prototypes in candidate-feature space,
// an offset direction separating positives from distractors, and per-concept
// token pools.
struct TaskLatents {
    std::vector<std::vector<double>> prototypes;  // concept -> unit vector
    std::vector<double> positive_offset;          // unit vector, rotated with the prototypes
    std::vector<std::vector<std::uint32_t>> token_pools;
};

inline void rotate_pairwise(std::vector<double>& v, double angle, std::size_t plane_count) {
    const double c = std::cos(angle), s = std::sin(angle);
    std::size_t planes = 0;
    for (std::size_t i = 0; i + 1 < v.size() && planes < plane_count; i += 2, ++planes) {
        const double a = v[i], b = v[i + 1];
        v[i] = c * a - s * b;
        v[i + 1] = s * a + c * b;
    }
}

inline void normalize(std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n > 0.0)
        for (double& x : v) x /= n;
}

inline TaskLatents base_latents(const GeneratorSpec& spec) {
    TaskLatents lat;
    const std::size_t d = spec.candidate_dim;

    // Lower-triangular mixing so feature dimensions are correlated rather
    // than axis-aligned.
    Rng mix_rng(derive_seed(spec.family_seed, 11));
    std::vector<double> mix(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        mix[i * d + i] = 1.0;
        for (std::size_t j = 0; j < i; ++j) mix[i * d + j] = 0.45 * mix_rng.normal();
    }

    Rng proto_rng(derive_seed(spec.family_seed, 12));
    lat.prototypes.resize(spec.concept_count);
    for (auto& proto : lat.prototypes) {
        std::vector<double> raw(d);
        for (auto& x : raw) x = proto_rng.normal();
        proto.assign(d, 0.0);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j <= i; ++j) proto[i] += mix[i * d + j] * raw[j];
        normalize(proto);
    }

    lat.positive_offset.resize(d);
    for (auto& x : lat.positive_offset) x = proto_rng.normal();
    normalize(lat.positive_offset);

    // Disjoint token pools over ids [1, vocab), id 0 reserved for padding.
    Rng tok_rng(derive_seed(spec.family_seed, 13));
    std::vector<std::uint32_t> ids(spec.vocab_size - 1);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::uint32_t>(i + 1);
    for (std::size_t i = ids.size(); i > 1; --i)
        std::swap(ids[i - 1], ids[tok_rng.uniform_index(i)]);
    lat.token_pools.resize(spec.concept_count);
    std::size_t next = 0;
    for (auto& pool : lat.token_pools) {
        pool.assign(ids.begin() + next, ids.begin() + next + spec.tokens_per_concept);
        next += spec.tokens_per_concept;
    }
    return lat;
}

// Applies one task-to-task shift step: prototype rotation plus partial
// token-pool replacement.
inline void shift_latents(TaskLatents& lat, const GeneratorSpec& spec, std::size_t step) {
    for (auto& proto : lat.prototypes)
        rotate_pairwise(proto, spec.rotation_angle, spec.rotation_planes);
    rotate_pairwise(lat.positive_offset, spec.rotation_angle, spec.rotation_planes);

    Rng rng(derive_seed(spec.family_seed, 100 + step));
    for (auto& pool : lat.token_pools) {
        for (auto& tok : pool) {
            if (rng.uniform() < spec.vocab_overlap) continue;
            tok = static_cast<std::uint32_t>(1 + rng.uniform_index(spec.vocab_size - 1));
        }
    }
}

inline RankingInstance make_instance(const TaskLatents& lat, const GeneratorSpec& spec, Rng& rng) {
    const std::size_t d = spec.candidate_dim;
    const std::size_t k = spec.candidate_count;
    RankingInstance inst;

    const std::size_t concept_id = rng.uniform_index(lat.prototypes.size());
    const auto& proto = lat.prototypes[concept_id];
    const auto& pool = lat.token_pools[concept_id];

    inst.context.resize(spec.context_window);
    for (auto& tok : inst.context) {
        if (rng.uniform() < spec.context_noise)
            tok = static_cast<std::uint32_t>(1 + rng.uniform_index(spec.vocab_size - 1));
        else
            tok = pool[rng.uniform_index(pool.size())];
    }

    inst.candidates = Tensor::matrix(k, d);
    inst.positive = rng.uniform_index(k);
    for (std::size_t c = 0; c < k; ++c) {
        double* row = inst.candidates.row(c);
        if (c == inst.positive) {
            for (std::size_t j = 0; j < d; ++j)
                row[j] = proto[j] + 0.30 * lat.positive_offset[j] +
                         spec.positive_spread * rng.normal();
        } else if (rng.uniform() < 0.5) {
            // Hard negative near the positive's concept.
            for (std::size_t j = 0; j < d; ++j)
                row[j] = proto[j] + spec.negative_spread * rng.normal();
        } else {
            const auto& other =
                lat.prototypes[rng.uniform_index(lat.prototypes.size())];
            for (std::size_t j = 0; j < d; ++j)
                row[j] = other[j] + spec.positive_spread * rng.normal();
        }
    }

    if (spec.label_noise > 0.0 && rng.uniform() < spec.label_noise) {
        std::size_t wrong = rng.uniform_index(k - 1);
        if (wrong >= inst.positive) ++wrong;
        inst.positive = wrong;
    }
    return inst;
}

} // namespace detail

// Deterministically generates a synthetic candidate-ranking task. The
// positive candidate correlates with a latent concept expressed by the
// context tokens; distractors are sampled near the positive (hard
// negatives) or near other concepts.
inline RankingTask generate_task(const GeneratorSpec& spec) {
    spec.validate();
    detail::TaskLatents lat = detail::base_latents(spec);
    for (std::size_t step = 1; step <= spec.task_index; ++step)
        detail::shift_latents(lat, spec, step);

    RankingTask task;
    task.task_id = "synthetic-" + std::to_string(spec.family_seed) + "-" +
                   std::to_string(spec.task_index);
    task.candidate_count = spec.candidate_count;
    task.candidate_dim = spec.candidate_dim;
    task.context_window = spec.context_window;
    task.has_generator = true;
    task.generator = spec;

    struct SplitPlan {
        std::vector<RankingInstance>* out;
        std::size_t size;
        std::uint64_t tag;
    };
    const SplitPlan plans[3] = {{&task.train, spec.train_size, 1},
                                {&task.dev, spec.dev_size, 2},
                                {&task.test, spec.test_size, 3}};
    for (const auto& plan : plans) {
        Rng rng(derive_seed(spec.family_seed, 1000 + 10 * spec.task_index + plan.tag));
        plan.out->reserve(plan.size);
        for (std::size_t i = 0; i < plan.size; ++i)
            plan.out->push_back(detail::make_instance(lat, spec, rng));
    }
    task.validate();
    return task;
}

// A family of tasks with the given shift between consecutive members.
inline std::vector<RankingTask> generate_task_family(GeneratorSpec base, std::size_t count,
                                                     const ShiftSpec& shift) {
    shift.validate();
    base.rotation_angle = shift.rotation_angle;
    base.vocab_overlap = shift.vocab_overlap;
    base.label_noise = shift.label_noise;
    std::vector<RankingTask> tasks;
    for (std::size_t i = 0; i < count; ++i) {
        GeneratorSpec spec = base;
        spec.task_index = i;
        tasks.push_back(generate_task(spec));
        tasks.back().task_id = std::string(1, static_cast<char>('A' + i));
    }
    return tasks;
}

// One task whose train split is the seeded shuffle of all train splits.
// Dev and test are concatenated in task order so per-source evaluation
// stays possible through the original tasks. Contexts are right-padded to
// the widest window.
inline RankingTask shuffle_combined(const std::vector<RankingTask>& tasks, std::uint64_t seed) {
    if (tasks.empty()) throw UsageError("shuffle_combined: no tasks");
    std::size_t window = 0;
    for (const auto& t : tasks) {
        if (t.candidate_count != tasks[0].candidate_count)
            throw ConfigError("shuffle_combined: tasks disagree on candidate count");
        if (t.candidate_dim != tasks[0].candidate_dim)
            throw ConfigError("shuffle_combined: tasks disagree on candidate dim");
        window = std::max(window, t.context_window);
    }

    RankingTask combined;
    combined.task_id = "combined";
    combined.candidate_count = tasks[0].candidate_count;
    combined.candidate_dim = tasks[0].candidate_dim;
    combined.context_window = window;

    auto pad = [window](RankingInstance inst) {
        inst.context.resize(window, kPadToken);
        return inst;
    };
    for (const auto& t : tasks) {
        for (const auto& inst : t.train) combined.train.push_back(pad(inst));
        for (const auto& inst : t.dev) combined.dev.push_back(pad(inst));
        for (const auto& inst : t.test) combined.test.push_back(pad(inst));
    }
    Rng rng(derive_seed(seed, 77));
    for (std::size_t i = combined.train.size(); i > 1; --i)
        std::swap(combined.train[i - 1], combined.train[rng.uniform_index(i)]);
    combined.validate();
    return combined;
}

} // namespace kfcl
