#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kfcl/errors.hpp"
#include "kfcl/tensor.hpp"

namespace kfcl {

// Token id 0 is reserved as padding when tasks with different context
// windows are combined.
inline constexpr std::uint32_t kPadToken = 0;

// One ranking query: a mention context (token ids, fixed window) and k
// candidate feature vectors of which exactly one is the correct link.
struct RankingInstance {
    std::vector<std::uint32_t> context;  // length == task window
    Tensor candidates;                   // k x candidate_dim
    std::size_t positive = 0;            // index of the correct candidate

    std::size_t candidate_count() const { return candidates.rows(); }
    std::size_t candidate_dim() const { return candidates.cols(); }

    void validate() const {
        if (candidates.rank() != 2 || candidates.rows() < 2)
            throw ConfigError("instance needs at least 2 candidates");
        if (positive >= candidates.rows())
            throw ConfigError("positive index out of range");
    }
};

// Parameters of the synthetic task generator. Tasks in one family share
// base latent concepts derived from family_seed; task_index applies the
// cumulative distribution shift.
struct GeneratorSpec {
    std::uint64_t family_seed = 1;
    std::size_t task_index = 0;

    std::size_t vocab_size = 1400;   // includes the pad id 0
    std::size_t concept_count = 20;
    std::size_t tokens_per_concept = 30;
    std::size_t candidate_count = 10;  // k
    std::size_t candidate_dim = 16;
    std::size_t context_window = 10;

    std::size_t train_size = 4000;
    std::size_t dev_size = 500;
    std::size_t test_size = 1000;

    // Shift applied between consecutive task indices.
    double rotation_angle = 0.0;     // radians, rotation of concept prototypes
    std::size_t rotation_planes = 3; // coordinate plane pairs the rotation acts on
    double vocab_overlap = 1.0;      // fraction of concept tokens kept, in [0,1]
    double label_noise = 0.0;        // fraction of mislabeled instances, in [0,0.5)

    double context_noise = 0.25;     // fraction of off-concept context tokens
    double positive_spread = 0.25;   // noise radius of the positive candidate
    double negative_spread = 0.60;   // noise radius of hard negatives

    void validate() const {
        if (candidate_count < 2) throw ConfigError("generator: k must be >= 2");
        if (vocab_size < 2) throw ConfigError("generator: vocabulary too small");
        if (concept_count < 2) throw ConfigError("generator: need >= 2 concepts");
        if (candidate_dim < 2) throw ConfigError("generator: candidate dim too small");
        if (context_window < 1) throw ConfigError("generator: empty context window");
        if (vocab_overlap < 0.0 || vocab_overlap > 1.0)
            throw ConfigError("generator: vocab_overlap outside [0,1]");
        if (label_noise < 0.0 || label_noise >= 0.5)
            throw ConfigError("generator: label_noise outside [0,0.5)");
        if (concept_count * tokens_per_concept > vocab_size - 1)
            throw ConfigError("generator: vocabulary too small for concept token pools");
    }
};

// A candidate-ranking task with disjoint train/dev/test splits. k and the
// context window are uniform across splits.
struct RankingTask {
    std::string task_id;
    std::vector<RankingInstance> train;
    std::vector<RankingInstance> dev;
    std::vector<RankingInstance> test;
    std::size_t candidate_count = 0;
    std::size_t candidate_dim = 0;
    std::size_t context_window = 0;
    bool has_generator = false;
    GeneratorSpec generator;

    void validate() const {
        for (const auto* split : {&train, &dev, &test}) {
            for (const auto& inst : *split) {
                inst.validate();
                if (inst.candidate_count() != candidate_count)
                    throw ConfigError("task " + task_id + ": inconsistent candidate count");
                if (inst.candidate_dim() != candidate_dim)
                    throw ConfigError("task " + task_id + ": inconsistent candidate dim");
                if (inst.context.size() != context_window)
                    throw ConfigError("task " + task_id + ": inconsistent context window");
            }
        }
    }
};

// Distribution-shift knobs between consecutive tasks of a family.
struct ShiftSpec {
    double rotation_angle = 0.0;
    double vocab_overlap = 1.0;
    double label_noise = 0.0;

    void validate() const {
        if (vocab_overlap < 0.0 || vocab_overlap > 1.0)
            throw ConfigError("shift: overlap outside [0,1]");
        if (label_noise < 0.0 || label_noise >= 0.5)
            throw ConfigError("shift: label noise outside [0,0.5)");
    }
};

} // namespace kfcl
