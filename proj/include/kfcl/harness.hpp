#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "kfcl/autodiff.hpp"
#include "kfcl/data.hpp"
#include "kfcl/errors.hpp"
#include "kfcl/generator.hpp"
#include "kfcl/metrics.hpp"
#include "kfcl/model.hpp"
#include "kfcl/penalties.hpp"
#include "kfcl/sgd.hpp"
#include "kfcl/snapshot.hpp"
#include "kfcl/strategies.hpp"

namespace kfcl {

// Appendix-style default search grid for the penalty strength.
inline const std::vector<double>& default_lambda_grid() {
    static const std::vector<double> grid{1e1, 1e3, 1e5, 1e7, 1e9};
    return grid;
}

// ---------------------------------------------------------------------------
// Instrumented task access. Every split read is counted per (tier, task,
// split) so the protocol-integrity property — no prior-task training data is
// touched after its tier — is checkable rather than assumed.

class AccessLog {
public:
    void set_tier(std::size_t tier) { tier_ = tier; }
    std::size_t tier() const { return tier_; }

    void record(const std::string& task_id, const char* split) {
        counts_[key(tier_, task_id, split)] += 1;
    }

    std::size_t reads(std::size_t tier, const std::string& task_id, const char* split) const {
        const auto it = counts_.find(key(tier, task_id, split));
        return it == counts_.end() ? 0 : it->second;
    }

    // Train-split reads of `task_id` in any tier after `trained_tier`.
    std::size_t train_reads_after(const std::string& task_id, std::size_t trained_tier,
                                  std::size_t last_tier) const {
        std::size_t total = 0;
        for (std::size_t t = trained_tier + 1; t <= last_tier; ++t)
            total += reads(t, task_id, "train");
        return total;
    }

private:
    static std::string key(std::size_t tier, const std::string& task, const char* split) {
        return std::to_string(tier) + "|" + task + "|" + split;
    }
    std::size_t tier_ = 0;
    std::map<std::string, std::size_t> counts_;
};

// Read handle on one task; all split access flows through the log.
class TaskAccessor {
public:
    TaskAccessor(const RankingTask& task, AccessLog* log) : task_(&task), log_(log) {}

    const std::string& id() const { return task_->task_id; }
    const RankingTask& raw() const { return *task_; }

    const std::vector<RankingInstance>& train() const {
        if (log_) log_->record(task_->task_id, "train");
        return task_->train;
    }
    const std::vector<RankingInstance>& dev() const {
        if (log_) log_->record(task_->task_id, "dev");
        return task_->dev;
    }
    const std::vector<RankingInstance>& test() const {
        if (log_) log_->record(task_->task_id, "test");
        return task_->test;
    }

private:
    const RankingTask* task_;
    AccessLog* log_;
};

// ---------------------------------------------------------------------------
// Plans and results.

enum class RankerArch { Cnn, Transformer };

inline const char* to_string(RankerArch a) {
    return a == RankerArch::Cnn ? "cnn" : "transformer";
}

struct ExperimentPlan {
    std::vector<std::string> task_ids;  // permutation over the task set
    StrategyConfig strategy;
    RankerArch arch = RankerArch::Cnn;
    RankerConfig ranker;
    std::size_t epochs_per_task = 10;
    std::size_t batch_size = 32;
    LrSchedule lr{0.05, 1.0};
    double clip_norm = 5.0;  // global gradient-norm cap; keeps extreme-lambda runs finite
    std::uint64_t seed = 1;

    void validate() const {
        if (task_ids.empty()) throw ConfigError("plan has no tasks");
        for (std::size_t i = 0; i < task_ids.size(); ++i)
            for (std::size_t j = i + 1; j < task_ids.size(); ++j)
                if (task_ids[i] == task_ids[j]) throw ConfigError("plan repeats a task id");
        if (epochs_per_task < 1) throw ConfigError("epochs per task must be >= 1");
        if (batch_size < 1) throw ConfigError("batch size must be >= 1");
        strategy.validate();
        lr.validate();
    }
};

struct TierResult {
    std::size_t tier = 0;  // 1-based
    std::string trained_task;
    std::vector<std::string> evaluated_tasks;       // in plan order
    std::map<std::string, double> test_accuracy;    // per evaluated task
    std::map<std::string, double> pct_change;       // tasks trained in earlier tiers only
    std::vector<double> lambdas;                    // penalty strengths used this tier
    double wall_seconds = 0.0;
};

struct SequenceOutcome {
    std::vector<TierResult> tiers;
    Model model;
    std::vector<TaskSnapshot> snapshots;
    AccessLog log;
};

// ---------------------------------------------------------------------------
// Single-task training under a strategy.

namespace detail {

inline std::vector<std::vector<RankingInstance>> make_batches(
    const std::vector<RankingInstance>& split, std::size_t batch_size, Rng& rng) {
    std::vector<std::size_t> order(split.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.uniform_index(i)]);
    std::vector<std::vector<RankingInstance>> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t end = std::min(order.size(), start + batch_size);
        std::vector<RankingInstance> batch;
        batch.reserve(end - start);
        for (std::size_t i = start; i < end; ++i) batch.push_back(split[order[i]]);
        batches.push_back(std::move(batch));
    }
    return batches;
}

} // namespace detail

// Trains epochs_per_task epochs of minibatch SGD on the task loss plus the
// snapshot penalties (or with replay interleaving), then captures the new
// task's snapshot: final parameters plus the Fisher representation the
// method needs. `tier` seeds the shuffle stream and tags diagnostics.
inline TaskSnapshot train_task(Model& model, const TaskAccessor& task,
                               const std::vector<TaskSnapshot>& snapshots,
                               const StrategyConfig& config, const ExperimentPlan& plan,
                               std::size_t tier = 1, ReplayBuffer* replay = nullptr) {
    config.validate();
    for (const auto& snap : snapshots) verify_snapshot(snap);
    const std::vector<RankingInstance>& train_split = task.train();
    if (train_split.empty()) throw ConfigError("task '" + task.id() + "' has no training data");

    LrSchedule schedule = plan.lr;
    if (config.method == Method::LrControl) schedule.decay = config.lr_decay_gamma;

    const bool do_replay =
        config.method == Method::Replay && replay && !replay->empty() && config.replay_count > 0;

    Workspace ws;
    for (std::size_t epoch = 0; epoch < plan.epochs_per_task; ++epoch) {
        Rng shuffle_rng(derive_seed(plan.seed, 0xB0000 + 1000 * tier + epoch));
        auto batches = detail::make_batches(train_split, plan.batch_size, shuffle_rng);

        std::vector<ScheduledBatch> schedule_order;
        if (do_replay) {
            schedule_order =
                replay_interleave(batches, *replay, config.replay_period, config.replay_count);
        } else {
            schedule_order.reserve(batches.size());
            for (const auto& b : batches) schedule_order.push_back({&b, ""});
        }

        for (std::size_t bi = 0; bi < schedule_order.size(); ++bi) {
            const auto& sched = schedule_order[bi];
            try {
                auto [task_loss, grads] = loss_and_backward(model, *sched.batch, ws);
                if (!sched.is_replay())
                    add_total_penalty_gradient(model, snapshots, config, grads);
                const double loss = sched.is_replay()
                                        ? task_loss
                                        : total_loss(task_loss, model, snapshots, config);
                if (!std::isfinite(loss)) throw DivergenceError("non-finite loss");
                clip_gradients(grads, plan.clip_norm);
                sgd_step(model, grads, schedule);
            } catch (const DivergenceError& e) {
                throw DivergenceError(std::string(e.what()) + " on task '" + task.id() +
                                      "' at epoch " + std::to_string(epoch) + " batch " +
                                      std::to_string(bi));
            }
        }
    }

    TaskSnapshot snap;
    snap.task_id = task.id();
    snap.method = config.method;
    snap.mean = model.params;
    if (config.method == Method::EwcDiag) {
        snap.fisher = estimate_diag_fim(model, task.train());
    } else if (config.method == Method::EwcKfc) {
        snap.fisher = estimate_kfac(model, task.train());
    }
    seal_snapshot(snap);
    return snap;
}

// Convenience wrapper without instrumentation.
inline TaskSnapshot train_task(Model& model, const RankingTask& task,
                               const std::vector<TaskSnapshot>& snapshots,
                               const StrategyConfig& config, const ExperimentPlan& plan) {
    return train_task(model, TaskAccessor(task, nullptr), snapshots, config, plan);
}

// ---------------------------------------------------------------------------
// Sequential protocol.

namespace detail {

inline const RankingTask& resolve_task(const std::vector<RankingTask>& tasks,
                                       const std::string& id) {
    for (const auto& t : tasks)
        if (t.task_id == id) return t;
    throw ConfigError("plan references unknown task '" + id + "'");
}

inline Model build_ranker(const ExperimentPlan& plan, const RankingTask& first) {
    RankerConfig cfg = plan.ranker;
    cfg.candidate_count = first.candidate_count;
    cfg.candidate_dim = first.candidate_dim;
    return plan.arch == RankerArch::Cnn ? make_cnn_ranker(cfg, plan.seed)
                                        : make_transformer_ranker(cfg, plan.seed);
}

} // namespace detail

// Runs the tiered protocol: tier t trains the tier t-1 model on task t with
// penalties for all prior tasks, then evaluates test accuracy on every task
// seen so far. Percentage changes compare a task's accuracy now against its
// accuracy right after the tier that trained it.
inline SequenceOutcome run_sequence(const ExperimentPlan& plan,
                                    const std::vector<RankingTask>& tasks) {
    plan.validate();
    SequenceOutcome out;

    std::vector<const RankingTask*> ordered;
    for (const auto& id : plan.task_ids) ordered.push_back(&detail::resolve_task(tasks, id));

    out.model = detail::build_ranker(plan, *ordered[0]);
    ReplayBuffer replay;
    std::map<std::string, double> fresh_accuracy;

    for (std::size_t t = 0; t < ordered.size(); ++t) {
        const std::size_t tier = t + 1;
        out.log.set_tier(tier);
        TaskAccessor accessor(*ordered[t], &out.log);

        StrategyConfig cfg = plan.strategy;
        cfg.lambdas.clear();
        for (std::size_t i = 0; i < t; ++i) cfg.lambdas.push_back(plan.strategy.lambda_for(i));

        const auto start = std::chrono::steady_clock::now();
        TaskSnapshot snap =
            train_task(out.model, accessor, out.snapshots, cfg, plan, tier, &replay);

        TierResult result;
        result.tier = tier;
        result.trained_task = ordered[t]->task_id;
        result.lambdas = cfg.lambdas;
        for (std::size_t i = 0; i <= t; ++i) {
            TaskAccessor eval(*ordered[i], &out.log);
            const double acc = accuracy(out.model, eval.test());
            result.evaluated_tasks.push_back(eval.id());
            result.test_accuracy[eval.id()] = acc;
            if (i == t) fresh_accuracy[eval.id()] = acc;
            else
                result.pct_change[eval.id()] =
                    percentage_change(fresh_accuracy.at(eval.id()) * 100.0, acc * 100.0);
        }
        result.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

        if (plan.strategy.method == Method::Replay) {
            std::vector<std::vector<RankingInstance>> stored;
            Rng rng(derive_seed(plan.seed, 0xC0000 + tier));
            auto batches = detail::make_batches(accessor.train(), plan.batch_size, rng);
            const std::size_t keep = std::min(batches.size(), plan.strategy.replay_store_batches);
            stored.assign(batches.begin(), batches.begin() + keep);
            replay.add_task(ordered[t]->task_id, std::move(stored));
        }

        out.snapshots.push_back(std::move(snap));
        out.tiers.push_back(std::move(result));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Lambda search (second tier).

struct LambdaSweepRow {
    double lambda = 0.0;
    double dev_first = 0.0;   // dev accuracy on the prior task
    double dev_second = 0.0;  // dev accuracy on the newly trained task
    double test_first = 0.0;
    double test_second = 0.0;
    double distance_to_prior = 0.0;  // ||theta - mu_prior|| after training
};

struct LambdaSweepResult {
    double chosen = 0.0;
    std::vector<LambdaSweepRow> rows;
    double none_dev_second = 0.0;  // unregularized reference point
    double none_dev_first = 0.0;
    double delta_points = 2.0;     // tolerance used by the selection rule
};

inline double parameter_distance(const Model& m, const std::vector<Tensor>& mean) {
    double sq = 0.0;
    for (std::size_t s = 0; s < m.params.size(); ++s)
        for (std::size_t i = 0; i < m.params[s].size(); ++i) {
            const double d = m.params[s][i] - mean[s][i];
            sq += d * d;
        }
    return std::sqrt(sq);
}

// Selection rule: among grid values whose own-task dev accuracy stays
// within delta accuracy points of the unregularized run, pick the one
// preserving the prior task best; if none qualifies, pick the best mean of
// the two dev accuracies. Ties resolve to the smaller lambda.
inline double select_lambda(const LambdaSweepResult& sweep) {
    double best = -1.0, best_acc = -1.0;
    for (const auto& row : sweep.rows) {
        if (row.dev_second * 100.0 + sweep.delta_points < sweep.none_dev_second * 100.0) continue;
        if (row.dev_first > best_acc + 1e-12) {
            best_acc = row.dev_first;
            best = row.lambda;
        }
    }
    if (best > 0.0) return best;
    for (const auto& row : sweep.rows) {
        const double mean = 0.5 * (row.dev_first + row.dev_second);
        if (mean > best_acc + 1e-12) {
            best_acc = mean;
            best = row.lambda;
        }
    }
    return best;
}

// Grid search over the penalty strength for the second tier of a two-task
// plan: one tier-2 run per grid value (plus an unregularized reference),
// selected on dev-split accuracies.
inline LambdaSweepResult grid_search_lambda(const ExperimentPlan& plan,
                                            const std::vector<RankingTask>& tasks,
                                            const std::vector<double>& grid,
                                            double delta_points = 2.0) {
    if (grid.empty()) throw UsageError("grid search needs a non-empty grid");
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (grid[i] <= 0.0) throw UsageError("grid lambdas must be positive");
        if (i > 0 && grid[i] <= grid[i - 1]) throw UsageError("grid must be sorted ascending");
    }
    if (plan.task_ids.size() < 2) throw ConfigError("lambda search needs at least two tasks");
    if (!plan.strategy.uses_penalty())
        throw ConfigError("lambda search requires a penalty-based method");

    const RankingTask& task_a = detail::resolve_task(tasks, plan.task_ids[0]);
    const RankingTask& task_b = detail::resolve_task(tasks, plan.task_ids[1]);

    // Tier 1 once; its trajectory does not depend on lambda.
    Model tier1 = detail::build_ranker(plan, task_a);
    StrategyConfig cfg1 = plan.strategy;
    cfg1.lambdas.clear();
    ExperimentPlan p1 = plan;
    TaskSnapshot snap_a = train_task(tier1, TaskAccessor(task_a, nullptr), {}, cfg1, p1, 1);

    LambdaSweepResult sweep;
    sweep.delta_points = delta_points;

    auto tier2_run = [&](Method method, double lambda) {
        Model m = tier1;
        StrategyConfig cfg = plan.strategy;
        cfg.method = method;
        cfg.lambdas = {lambda};
        std::vector<TaskSnapshot> snaps{snap_a};
        train_task(m, TaskAccessor(task_b, nullptr), snaps, cfg, plan, 2);
        return m;
    };

    {
        const Model none_model = tier2_run(Method::None, 0.0);
        sweep.none_dev_first = accuracy(none_model, task_a.dev);
        sweep.none_dev_second = accuracy(none_model, task_b.dev);
    }
    for (double lambda : grid) {
        const Model m = tier2_run(plan.strategy.method, lambda);
        LambdaSweepRow row;
        row.lambda = lambda;
        row.dev_first = accuracy(m, task_a.dev);
        row.dev_second = accuracy(m, task_b.dev);
        row.test_first = accuracy(m, task_a.test);
        row.test_second = accuracy(m, task_b.test);
        row.distance_to_prior = parameter_distance(m, snap_a.mean);
        sweep.rows.push_back(row);
    }
    sweep.chosen = select_lambda(sweep);
    return sweep;
}

// ---------------------------------------------------------------------------
// Third-tier lambda estimation.

struct SweepHistoryEntry {
    std::string first_task;  // the task the swept permutation started with
    double best_lambda = 0.0;
};

// The second prior task's strength was never tuned directly. Estimate it as
// the geometric mean of the best lambdas from second-tier sweeps that
// *started* with that task (the grid is log-spaced), and bracket the
// estimate two orders of magnitude each way.
inline std::array<double, 3> tier3_lambda_estimate(const std::vector<SweepHistoryEntry>& history,
                                                   const std::string& second_task_id) {
    double log_sum = 0.0;
    std::size_t n = 0;
    for (const auto& entry : history) {
        if (entry.first_task != second_task_id) continue;
        if (entry.best_lambda <= 0.0)
            throw ConfigError("history has a non-positive best lambda");
        log_sum += std::log10(entry.best_lambda);
        ++n;
    }
    if (n == 0)
        throw ConfigError("no second-tier sweeps started with task '" + second_task_id + "'");
    const double estimate = std::pow(10.0, log_sum / static_cast<double>(n));
    return {estimate / 100.0, estimate, estimate * 100.0};
}

} // namespace kfcl
