#include "bidiseq/losses.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "bidiseq/dp.hpp"
#include "bidiseq/error.hpp"
#include "bidiseq/logmath.hpp"

namespace bidiseq::losses {
namespace {

template <class Lookup>
double xh_from_lookup(Lookup&& scores_at, std::span<const TokenId> form, const ContextSet& contexts) {
    const std::size_t n = form.size();
    double left = 0.0;
    double right = 0.0;
    for (auto [p, s] : contexts.token_pairs) {
        const LocalScores& sc = scores_at(p, s);
        left -= sc.left_token_logp.at(static_cast<std::size_t>(form[p]));
        right -= sc.right_token_logp.at(static_cast<std::size_t>(form[n - 1 - s]));
    }
    double join = 0.0;
    for (auto [i, j] : contexts.join_pairs) {
        const LocalScores& sc = scores_at(i, j);
        join -= i + j == n ? sc.join_logp : sc.not_join_logp;
    }
    const double tokens = static_cast<double>(contexts.token_pairs.size());
    const double joins = static_cast<double>(contexts.join_pairs.size());
    const double mean_left = tokens > 0 ? left / tokens : 0.0;
    const double mean_right = tokens > 0 ? right / tokens : 0.0;
    const double mean_join = joins > 0 ? join / joins : 0.0;
    return (mean_left + mean_right + mean_join) / 3.0;
}

void validate_contexts(std::size_t n, const ContextSet& contexts) {
    for (auto [p, s] : contexts.token_pairs) {
        if (p + s + 1 > n) throw Error("token context outside the target");
    }
    for (auto [i, j] : contexts.join_pairs) {
        if (i + j > n) throw Error("join context outside the target");
    }
}

}  // namespace

Objective parse_objective(std::string_view name) {
    if (name == "xh") return Objective::xh;
    if (name == "xh-rand") return Objective::xh_rand;
    if (name == "mml") return Objective::mml;
    throw Error("unknown objective '" + std::string(name) + "' (expected xh, xh-rand or mml)");
}

std::string_view objective_name(Objective objective) {
    switch (objective) {
        case Objective::xh: return "xh";
        case Objective::xh_rand: return "xh-rand";
        case Objective::mml: return "mml";
    }
    return "?";
}

ContextMode parse_context_mode(std::string_view name) {
    if (name == "full") return ContextMode::full;
    if (name == "strict") return ContextMode::strict;
    throw Error("unknown context mode '" + std::string(name) + "' (expected full or strict)");
}

std::string_view context_mode_name(ContextMode mode) { return mode == ContextMode::full ? "full" : "strict"; }

std::vector<LengthPair> ContextSet::cells() const {
    std::set<LengthPair> unique(token_pairs.begin(), token_pairs.end());
    unique.insert(join_pairs.begin(), join_pairs.end());
    return {unique.begin(), unique.end()};
}

ContextSet full_context_set(std::size_t n, ContextMode mode) {
    if (n == 0) throw Error("context set needs a non-empty target");
    ContextSet out;
    if (mode == ContextMode::full) {
        for (std::size_t t = 0; t + 1 <= n; ++t) {
            for (std::size_t s = 0; s <= t; ++s) out.token_pairs.emplace_back(t - s, s);
        }
        for (std::size_t t = 0; t <= n; ++t) {
            for (std::size_t j = 0; j <= t; ++j) out.join_pairs.emplace_back(t - j, j);
        }
        return out;
    }
    // One-based (i, j) with i, j >= 1: token contexts are the lengths before
    // generating y_i / y_j, join contexts the completed lengths.
    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; i + j <= n; ++j) {
            out.token_pairs.emplace_back(i - 1, j - 1);
            out.join_pairs.emplace_back(i, j);
        }
    }
    return out;
}

ContextSet xh_rand_context_set(std::size_t n, std::mt19937_64& rng) {
    if (n == 0) throw Error("context set needs a non-empty target");
    ContextSet out;
    out.join_pairs.emplace_back(0, 0);
    for (std::size_t k = 1; k <= n; ++k) {
        std::uniform_int_distribution<std::size_t> token_pick(0, k - 1);
        const std::size_t s = token_pick(rng);
        out.token_pairs.emplace_back(k - 1 - s, s);
        std::uniform_int_distribution<std::size_t> join_pick(0, k);
        const std::size_t j = join_pick(rng);
        out.join_pairs.emplace_back(k - j, j);
    }
    return out;
}

double xh_loss(const Scorer& scorer, std::span<const TokenId> form, const ContextSet& contexts) {
    if (form.empty()) throw Error("target must contain at least one token");
    validate_contexts(form.size(), contexts);
    const auto cells = contexts.cells();
    std::vector<DecodeState> states;
    states.reserve(cells.size());
    for (auto [i, j] : cells) states.push_back(lattice_state(form, i, j));
    const auto scores = scorer.score_batch(states);
    auto lookup = [&](std::size_t i, std::size_t j) -> const LocalScores& {
        auto it = std::lower_bound(cells.begin(), cells.end(), LengthPair{i, j});
        return scores[static_cast<std::size_t>(it - cells.begin())];
    };
    return xh_from_lookup(lookup, form, contexts);
}

double xh_loss_from_scores(std::span<const LocalScores> lattice, std::span<const TokenId> form,
                           const ContextSet& contexts) {
    validate_contexts(form.size(), contexts);
    if (lattice.size() != dp::cell_count(form.size())) throw Error("lattice scores do not cover the target");
    auto lookup = [&](std::size_t i, std::size_t j) -> const LocalScores& { return lattice[dp::cell_index(i, j)]; };
    return xh_from_lookup(lookup, form, contexts);
}

double mml_loss(const Scorer& scorer, std::span<const TokenId> form) {
    return -dp::marginal_log_likelihood(scorer, form);
}

void TemperSchedule::validate() const {
    if (warmup < 1.0) throw Error("tempering warmup must be >= 1");
    if (tau0 < 1.0) throw Error("initial temperature must be >= 1");
    if (exponent <= 0.0) throw Error("tempering exponent must be > 0");
}

double TemperSchedule::tau(double step) const {
    if (step >= warmup) return 1.0;
    const double remaining = warmup - std::max(step, 0.0);
    // (tau0-1)/W^a * (W-n)^a written as (tau0-1) * ((W-n)/W)^a so both
    // endpoints are exact in floating point.
    return (tau0 - 1.0) * std::pow(remaining / warmup, exponent) + 1.0;
}

std::array<double, 2> temper(double tau, std::array<double, 2> order_logits) {
    if (!(tau >= 1.0)) throw Error("temperature must be >= 1");
    const double a = order_logits[0] / tau;
    const double b = order_logits[1] / tau;
    const double z = log_add_exp(a, b);
    return {a - z, b - z};
}

}  // namespace bidiseq::losses
