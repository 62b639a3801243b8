#pragma once

// Shared helpers for the test suites: random instances, independent
// finite-difference oracles, and small reference models.

#include <algorithm>
#include <cmath>
#include <vector>

#include "kfcl/autodiff.hpp"
#include "kfcl/data.hpp"
#include "kfcl/generator.hpp"
#include "kfcl/model.hpp"
#include "kfcl/rng.hpp"

namespace test_support {

using namespace kfcl;

inline RankingInstance random_instance(const Model& m, std::size_t window, Rng& rng) {
    RankingInstance inst;
    std::size_t vocab = 2;
    for (const auto& spec : m.layers)
        if (spec.kind == LayerKind::Embedding) vocab = spec.input_dim;
    inst.context.resize(window);
    for (auto& t : inst.context)
        t = static_cast<std::uint32_t>(rng.uniform_index(vocab));
    inst.candidates = Tensor::matrix(m.candidate_count, m.candidate_dim);
    for (auto& v : inst.candidates.values()) v = rng.normal();
    inst.positive = rng.uniform_index(m.candidate_count);
    return inst;
}

inline std::vector<RankingInstance> random_batch(const Model& m, std::size_t window,
                                                 std::size_t count, Rng& rng) {
    std::vector<RankingInstance> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(random_instance(m, window, rng));
    return out;
}

// Mean cross-entropy via the forward pass only; the loss oracle for
// finite-difference checks.
inline double forward_loss(const Model& m, const std::vector<RankingInstance>& batch) {
    Workspace ws;
    double loss = 0.0;
    for (const auto& inst : batch) {
        const auto scores = forward(m, inst, ws);
        loss += softmax_cross_entropy(scores, inst.positive);
    }
    return loss / static_cast<double>(batch.size());
}

// Max relative error between reverse-mode gradients and central finite
// differences over every parameter.
inline double gradcheck(Model m, const std::vector<RankingInstance>& batch, double h = 1e-5) {
    const auto [loss, grads] = loss_and_backward(m, batch);
    (void)loss;
    double worst = 0.0;
    for (std::size_t s = 0; s < m.params.size(); ++s) {
        for (std::size_t i = 0; i < m.params[s].size(); ++i) {
            const double saved = m.params[s][i];
            m.params[s][i] = saved + h;
            const double up = forward_loss(m, batch);
            m.params[s][i] = saved - h;
            const double down = forward_loss(m, batch);
            m.params[s][i] = saved;
            const double fd = (up - down) / (2.0 * h);
            const double an = grads[s][i];
            const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-6});
            worst = std::max(worst, std::fabs(fd - an) / denom);
        }
    }
    return worst;
}

// Small variants of the shipped architectures, sized for dense oracles.
inline Model tiny_cnn(std::uint64_t seed, std::size_t vocab = 12, std::size_t hidden = 5,
                      std::size_t k = 3, std::size_t cand_dim = 4) {
    RankerConfig cfg;
    cfg.vocab_size = vocab;
    cfg.hidden = hidden;
    cfg.kernel_width = 2;
    cfg.candidate_count = k;
    cfg.candidate_dim = cand_dim;
    return make_cnn_ranker(cfg, seed);
}

inline Model tiny_transformer(std::uint64_t seed, std::size_t vocab = 10, std::size_t hidden = 4,
                              std::size_t k = 3, std::size_t cand_dim = 3) {
    RankerConfig cfg;
    cfg.vocab_size = vocab;
    cfg.hidden = hidden;
    cfg.candidate_count = k;
    cfg.candidate_dim = cand_dim;
    return make_transformer_ranker(cfg, seed);
}

// Small synthetic task family for fast harness tests (not the shipped
// benchmark scale).
inline GeneratorSpec small_spec(std::uint64_t family_seed) {
    GeneratorSpec spec;
    spec.family_seed = family_seed;
    spec.vocab_size = 120;
    spec.concept_count = 6;
    spec.tokens_per_concept = 12;
    spec.candidate_count = 5;
    spec.candidate_dim = 8;
    spec.context_window = 6;
    spec.train_size = 300;
    spec.dev_size = 80;
    spec.test_size = 120;
    return spec;
}

inline std::vector<RankingTask> small_family(std::uint64_t family_seed, std::size_t count,
                                             double rotation = 0.7853981633974483,
                                             double overlap = 0.5) {
    ShiftSpec shift;
    shift.rotation_angle = rotation;
    shift.vocab_overlap = overlap;
    return generate_task_family(small_spec(family_seed), count, shift);
}

// Context-free scorer: candidates only through a linear chain.
inline Model tiny_scorer(std::uint64_t seed, std::size_t k = 4, std::size_t cand_dim = 4,
                         bool hidden_layer = false, ActivationKind act = ActivationKind::Tanh) {
    Model m;
    if (hidden_layer) {
        m.layers = {LayerSpec::linear(cand_dim, 3, true), LayerSpec::activation(act, 3),
                    LayerSpec::linear(3, 1, true)};
    } else {
        m.layers = {LayerSpec::linear(cand_dim, 1, false)};
    }
    m.scoring_start = 0;
    m.candidate_count = k;
    m.candidate_dim = cand_dim;
    assign_slots(m);
    init_params(m, seed);
    m.validate();
    return m;
}

} // namespace test_support
