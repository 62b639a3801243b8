#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "kfcl/data.hpp"
#include "kfcl/errors.hpp"
#include "kfcl/penalties.hpp"
#include "kfcl/snapshot.hpp"

namespace kfcl {

// Method configuration for one training run. lambdas holds one penalty
// strength per prior task, in task order; a single value is broadcast.
struct StrategyConfig {
    Method method = Method::None;
    std::vector<double> lambdas;
    double lr_decay_gamma = 1.0;   // lr-control only
    std::size_t replay_period = 2; // m: replay after every m task batches
    std::size_t replay_count = 1;  // n: batches replayed each time
    std::size_t replay_store_batches = 32;  // batches kept per finished task

    bool uses_penalty() const {
        return method == Method::L2 || method == Method::EwcDiag || method == Method::EwcKfc;
    }

    double lambda_for(std::size_t prior_index) const {
        if (lambdas.empty()) return 0.0;
        if (lambdas.size() == 1) return lambdas[0];
        if (prior_index >= lambdas.size())
            throw ConfigError("no lambda configured for prior task " +
                              std::to_string(prior_index));
        return lambdas[prior_index];
    }

    void validate() const {
        for (double l : lambdas)
            if (l < 0.0) throw ConfigError("lambda must be >= 0");
        if (method == Method::LrControl && lr_decay_gamma <= 0.0)
            throw ConfigError("lr-control gamma must be positive");
        if (method == Method::Replay && replay_period < 1)
            throw ConfigError("replay period m must be >= 1");
    }
};

// Task loss plus the penalty terms of every prior-task snapshot. Methods
// without a penalty contribute zero.
inline double total_loss(double task_loss, const Model& current,
                         const std::vector<TaskSnapshot>& snapshots,
                         const StrategyConfig& config) {
    if (!config.uses_penalty()) return task_loss;
    double loss = task_loss;
    for (std::size_t i = 0; i < snapshots.size(); ++i)
        loss += snapshot_penalty(current, snapshots[i], config.lambda_for(i));
    return loss;
}

// Adds the penalty gradients for every snapshot onto `grads`.
inline void add_total_penalty_gradient(const Model& current,
                                       const std::vector<TaskSnapshot>& snapshots,
                                       const StrategyConfig& config, GradientSet& grads) {
    if (!config.uses_penalty()) return;
    for (std::size_t i = 0; i < snapshots.size(); ++i) {
        const double lambda = config.lambda_for(i);
        if (lambda > 0.0) add_penalty_gradient(current, snapshots[i], lambda, grads);
    }
}

// Stored batches from finished tasks, replayed while training later ones.
// Replay walks prior tasks round-robin and each task's stored batches
// sequentially, wrapping around; cursors persist across epochs of a run.
class ReplayBuffer {
public:
    void add_task(const std::string& task_id, std::vector<std::vector<RankingInstance>> batches) {
        tasks_.push_back({task_id, std::move(batches), 0});
    }

    bool empty() const { return tasks_.empty(); }
    std::size_t task_count() const { return tasks_.size(); }

    // Next replay batch: round-robin over tasks, sequential within a task.
    std::pair<std::string, const std::vector<RankingInstance>*> next() {
        if (tasks_.empty()) throw ConfigError("replay requested with an empty buffer");
        PerTask& t = tasks_[next_task_];
        next_task_ = (next_task_ + 1) % tasks_.size();
        const auto* batch = &t.batches[t.cursor];
        t.cursor = (t.cursor + 1) % t.batches.size();
        return {t.task_id, batch};
    }

private:
    struct PerTask {
        std::string task_id;
        std::vector<std::vector<RankingInstance>> batches;
        std::size_t cursor = 0;
    };
    std::vector<PerTask> tasks_;
    std::size_t next_task_ = 0;
};

// One scheduled batch: either the next current-task batch (origin empty) or
// a replayed batch tagged with its source task.
struct ScheduledBatch {
    const std::vector<RankingInstance>* batch = nullptr;
    std::string origin;  // empty = current task

    bool is_replay() const { return !origin.empty(); }
};

// Emits the task batches in order, inserting `n` buffer batches after every
// `m` task batches. Requesting replay (n > 0) with an empty buffer is a
// configuration error: there is no prior task to replay on the first task.
inline std::vector<ScheduledBatch> replay_interleave(
    const std::vector<std::vector<RankingInstance>>& task_batches, ReplayBuffer& buffer,
    std::size_t m, std::size_t n) {
    if (m < 1) throw ConfigError("replay period m must be >= 1");
    if (n > 0 && buffer.empty())
        throw ConfigError("replay requested on the first task: the buffer is empty");
    std::vector<ScheduledBatch> out;
    out.reserve(task_batches.size() + (task_batches.size() / m) * n);
    std::size_t since_replay = 0;
    for (const auto& batch : task_batches) {
        out.push_back({&batch, ""});
        if (++since_replay == m) {
            since_replay = 0;
            for (std::size_t r = 0; r < n; ++r) {
                auto [origin, replay] = buffer.next();
                out.push_back({replay, origin});
            }
        }
    }
    return out;
}

} // namespace kfcl
