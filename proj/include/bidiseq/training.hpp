#pragma once

// Adam, the inverse-square-root learning-rate schedule, and the training loop
// with periodic dev exact-match evaluation and early stopping.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bidiseq/checkpoint.hpp"
#include "bidiseq/core.hpp"
#include "bidiseq/losses.hpp"
#include "bidiseq/model.hpp"

namespace bidiseq::training {

// Linear warmup from `initial` at step 1 to `peak` at step `warmup`, then
// peak * sqrt(warmup / step).
struct LrSchedule {
    double initial = 1e-7;
    double peak = 0.005;
    std::size_t warmup = 4000;

    void validate() const;
    double at(std::size_t step) const;  // step is 1-based
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
};

class Adam {
public:
    Adam(const model::Transformer<float>& model, AdamConfig config = {});
    Adam(const model::Transformer<float>& model, model::OptimizerState state, AdamConfig config = {});

    // One bias-corrected update with learning rate `lr`.
    void step(model::Transformer<float>& model, const std::vector<Matrix<float>>& grads, double lr);

    const model::OptimizerState& state() const { return state_; }

private:
    AdamConfig config_;
    model::OptimizerState state_;
};

struct TrainOptions {
    losses::Objective objective = losses::Objective::xh;
    losses::ContextMode context_mode = losses::ContextMode::full;
    // Order temperature schedule, MML only.
    bool temper = true;
    losses::TemperSchedule temper_schedule;

    std::size_t batch_size = 800;
    std::size_t max_steps = 100000;
    std::size_t warmup_steps = 4000;
    double initial_lr = 1e-7;
    AdamConfig adam;

    std::size_t eval_every = 500;
    // Stop when the dev accuracy has not improved for this many steps.
    std::size_t patience = 7500;
    // Stop as soon as the dev accuracy reaches this value.
    std::optional<double> stop_at_accuracy;
    std::size_t eval_width = 5;
    // Dev decoding stops at |lemma| + this many tokens.
    std::size_t max_len_margin = 10;
    // 0 means the whole dev set.
    std::size_t dev_limit = 0;
    std::uint64_t seed = 1;
};

struct EvalPoint {
    std::size_t step = 0;
    double train_loss = 0.0;  // mean over the steps since the previous evaluation
    double dev_accuracy = 0.0;
    double lr = 0.0;
    double seconds = 0.0;
};

struct TrainResult {
    model::Checkpoint best;
    double best_accuracy = 0.0;
    std::size_t best_step = 0;
    std::size_t steps = 0;
    std::vector<EvalPoint> history;
};

using TrainLog = std::function<void(const EvalPoint&)>;

// Exact match of width-`width` beam search (order head per objective) over `dev`.
double dev_accuracy(const model::Transformer<float>& model, losses::Objective objective,
                    std::span<const Example> dev, std::size_t width, std::size_t max_len_margin);

// Trains from `init`. Deterministic for a fixed seed and thread count 1.
TrainResult train(model::Transformer<float> init, const Vocabulary& vocab, std::span<const Example> train_set,
                  std::span<const Example> dev_set, const TrainOptions& options, const TrainLog& log = {});

}  // namespace bidiseq::training
