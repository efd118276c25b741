#include "bidiseq/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "bidiseq/decoder.hpp"
#include "bidiseq/error.hpp"
#include "bidiseq/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace bidiseq::training {

void LrSchedule::validate() const {
    if (!(initial > 0.0) || !(peak > 0.0)) throw Error("learning rates must be positive");
    if (warmup < 2) throw Error("warmup must be at least 2 steps");
}

double LrSchedule::at(std::size_t step) const {
    if (step == 0) throw Error("learning-rate steps are 1-based");
    if (step <= warmup) {
        return initial + (peak - initial) * static_cast<double>(step - 1) / static_cast<double>(warmup - 1);
    }
    return peak * std::sqrt(static_cast<double>(warmup) / static_cast<double>(step));
}

Adam::Adam(const model::Transformer<float>& model, AdamConfig config) : config_(config) {
    state_.first_moment = model::zeros_like(model);
    state_.second_moment = model::zeros_like(model);
}

Adam::Adam(const model::Transformer<float>& model, model::OptimizerState state, AdamConfig config)
    : config_(config), state_(std::move(state)) {
    const auto& tensors = model.tensors();
    if (state_.first_moment.size() != tensors.size() || state_.second_moment.size() != tensors.size()) {
        throw Error("optimizer state does not match the model");
    }
    for (std::size_t k = 0; k < tensors.size(); ++k) {
        if (!state_.first_moment[k].same_shape(tensors[k].value) ||
            !state_.second_moment[k].same_shape(tensors[k].value)) {
            throw Error("optimizer state shape mismatch for " + tensors[k].name);
        }
    }
}

void Adam::step(model::Transformer<float>& model, const std::vector<Matrix<float>>& grads, double lr) {
    auto& tensors = model.tensors();
    if (grads.size() != tensors.size()) throw Error("gradient count does not match the model");
    ++state_.step;
    const double t = static_cast<double>(state_.step);
    const auto b1 = static_cast<float>(config_.beta1);
    const auto b2 = static_cast<float>(config_.beta2);
    const auto c1 = static_cast<float>(1.0 / (1.0 - std::pow(config_.beta1, t)));
    const auto c2 = static_cast<float>(1.0 / (1.0 - std::pow(config_.beta2, t)));
    const auto rate = static_cast<float>(lr);
    const auto eps = static_cast<float>(config_.eps);
    for (std::size_t k = 0; k < tensors.size(); ++k) {
        auto& w = tensors[k].value.data;
        const auto& g = grads[k].data;
        auto& m = state_.first_moment[k].data;
        auto& v = state_.second_moment[k].data;
        for (std::size_t q = 0; q < w.size(); ++q) {
            m[q] = b1 * m[q] + (1.0f - b1) * g[q];
            v[q] = b2 * v[q] + (1.0f - b2) * g[q] * g[q];
            w[q] -= rate * (m[q] * c1) / (std::sqrt(v[q] * c2) + eps);
        }
    }
}

double dev_accuracy(const model::Transformer<float>& model, losses::Objective objective,
                    std::span<const Example> dev, std::size_t width, std::size_t max_len_margin) {
    if (dev.empty()) throw Error("empty dev set");
    const auto head = model::default_order_head(objective);
    std::vector<char> correct(dev.size(), 0);
    auto run = [&](std::size_t e) {
        const auto& ex = dev[e];
        model::ModelScorer<float> scorer(model, ex.source(), head);
        try {
            const auto result = decoder::beam_search(
                scorer, width, decoder::default_max_len(ex.lemma_tokens.size(), max_len_margin));
            correct[e] = result.candidates.front().tokens == ex.form_tokens;
        } catch (const Error&) {
            correct[e] = 0;
        }
    };
    const int threads = kernels::thread_count();
#ifdef _OPENMP
    if (threads > 1 && !omp_in_parallel()) {
        const auto n = static_cast<std::ptrdiff_t>(dev.size());
#pragma omp parallel for schedule(dynamic) num_threads(threads)
        for (std::ptrdiff_t e = 0; e < n; ++e) run(static_cast<std::size_t>(e));
    } else {
        for (std::size_t e = 0; e < dev.size(); ++e) run(e);
    }
#else
    (void)threads;
    for (std::size_t e = 0; e < dev.size(); ++e) run(e);
#endif
    const auto hits = std::accumulate(correct.begin(), correct.end(), std::size_t{0});
    return static_cast<double>(hits) / static_cast<double>(dev.size());
}

TrainResult train(model::Transformer<float> init, const Vocabulary& vocab, std::span<const Example> train_set,
                  std::span<const Example> dev_set, const TrainOptions& options, const TrainLog& log) {
    kernels::tune_allocator();
    if (train_set.empty()) throw Error("empty training set");
    if (options.batch_size == 0) throw Error("batch size must be positive");
    if (options.max_steps == 0) throw Error("max_steps must be positive");
    if (options.eval_every == 0) throw Error("eval_every must be positive");
    if (options.eval_width == 0) throw Error("eval_width must be positive");
    if (options.stop_at_accuracy && !(*options.stop_at_accuracy > 0.0 && *options.stop_at_accuracy <= 1.0)) {
        throw Error("stop_at_accuracy must lie in (0, 1]");
    }
    if (init.vocab_size() != vocab.size()) throw Error("model and vocabulary sizes differ");
    const bool tempered = options.objective == losses::Objective::mml && options.temper;
    if (tempered) options.temper_schedule.validate();
    const LrSchedule schedule{options.initial_lr, init.config().learning_rate, options.warmup_steps};
    schedule.validate();

    const std::span<const Example> dev =
        options.dev_limit > 0 && options.dev_limit < dev_set.size() ? dev_set.first(options.dev_limit) : dev_set;

    model::Transformer<float> model = std::move(init);
    Adam adam(model, options.adam);
    std::mt19937_64 shuffle_rng(model::mix_seed(options.seed, 0, 0, 2));
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::size_t cursor = 0;

    auto snapshot = [&](std::size_t step) {
        auto c = model::make_checkpoint(model, vocab);
        c.optimizer = adam.state();
        c.seed = options.seed;
        c.step = step;
        c.metadata["objective"] = std::string(losses::objective_name(options.objective));
        return c;
    };

    TrainResult result;
    result.best = snapshot(0);
    result.best_accuracy = -1.0;
    const auto start = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    std::vector<Matrix<float>> grads;
    std::vector<Example> batch;

    for (std::size_t step = 1; step <= options.max_steps; ++step) {
        batch.clear();
        for (std::size_t b = 0; b < options.batch_size; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), shuffle_rng);
                cursor = 0;
            }
            batch.push_back(train_set[order[cursor++]]);
        }
        model::BatchObjective objective;
        objective.objective = options.objective;
        objective.context_mode = options.context_mode;
        objective.order_head = model::default_order_head(options.objective);
        objective.order_temperature = tempered ? options.temper_schedule.tau(static_cast<double>(step - 1)) : 1.0;

        double loss = 0.0;
        try {
            loss = model::loss_and_gradients(model, std::span<const Example>(batch), objective, step, options.seed,
                                             true, grads);
        } catch (const Error& e) {
            throw Error("training aborted at step " + std::to_string(step) + ": " + e.what());
        }
        const double lr = schedule.at(step);
        adam.step(model, grads, lr);
        loss_sum += loss;
        ++loss_count;
        result.steps = step;

        if (step % options.eval_every != 0 && step != options.max_steps) continue;
        EvalPoint point;
        point.step = step;
        point.train_loss = loss_sum / static_cast<double>(loss_count);
        point.lr = lr;
        loss_sum = 0.0;
        loss_count = 0;
        point.dev_accuracy =
            dev.empty() ? 0.0 : dev_accuracy(model, options.objective, dev, options.eval_width, options.max_len_margin);
        point.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        result.history.push_back(point);
        if (log) log(point);
        if (point.dev_accuracy > result.best_accuracy || dev.empty()) {
            result.best_accuracy = point.dev_accuracy;
            result.best_step = step;
            result.best = snapshot(step);
        }
        if (options.stop_at_accuracy && point.dev_accuracy >= *options.stop_at_accuracy) break;
        if (step - result.best_step >= options.patience) break;
    }
    if (result.best_accuracy < 0.0) result.best_accuracy = 0.0;
    return result;
}

}  // namespace bidiseq::training
