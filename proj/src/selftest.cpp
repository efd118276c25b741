#include "bidiseq/selftest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "bidiseq/decoder.hpp"
#include "bidiseq/error.hpp"
#include "bidiseq/losses.hpp"
#include "bidiseq/model.hpp"

namespace bidiseq::selftest {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<TokenId> random_form(std::mt19937_64& rng, std::size_t vocab, std::size_t n) {
    std::uniform_int_distribution<TokenId> pick(0, static_cast<TokenId>(vocab) - 1);
    std::vector<TokenId> out(n);
    for (auto& t : out) t = pick(rng);
    return out;
}

// Every token sequence of length n over `vocab` symbols, in lexicographic order.
bool next_sequence(std::vector<TokenId>& seq, std::size_t vocab) {
    for (std::size_t k = seq.size(); k-- > 0;) {
        if (static_cast<std::size_t>(++seq[k]) < vocab) return true;
        seq[k] = 0;
    }
    return false;
}

std::string fmt(double x) {
    std::ostringstream os;
    os.precision(3);
    os << x;
    return os.str();
}

}  // namespace

LocalScores random_local_scores(std::mt19937_64& rng, std::size_t vocab, double spread) {
    std::normal_distribution<double> logit(0.0, spread);
    std::uniform_real_distribution<double> unit(0.02, 0.98);
    std::vector<double> left(vocab), right(vocab);
    for (auto& v : left) v = logit(rng);
    for (auto& v : right) v = logit(rng);
    const double p_left = unit(rng);
    const double p_join = unit(rng);
    return make_local_scores(left, right, p_left, p_join);
}

TabularScorer random_lattice_scorer(std::mt19937_64& rng, std::size_t vocab, std::span<const TokenId> form) {
    TabularScorer scorer(vocab, random_local_scores(rng, vocab));
    for (const auto& state : dp::lattice_states(form)) scorer.set(state, random_local_scores(rng, vocab));
    return scorer;
}

TabularScorer random_complete_scorer(std::mt19937_64& rng, std::size_t vocab, std::size_t max_len) {
    TabularScorer scorer(vocab, random_local_scores(rng, vocab));
    for (std::size_t total = 0; total <= max_len; ++total) {
        for (std::size_t p = 0; p <= total; ++p) {
            DecodeState state{std::vector<TokenId>(p, 0), std::vector<TokenId>(total - p, 0)};
            std::vector<TokenId> both(total, 0);
            do {
                std::copy(both.begin(), both.begin() + static_cast<std::ptrdiff_t>(p), state.prefix.begin());
                std::copy(both.begin() + static_cast<std::ptrdiff_t>(p), both.end(), state.suffix.begin());
                scorer.set(state, random_local_scores(rng, vocab));
            } while (next_sequence(both, vocab));
        }
    }
    return scorer;
}

JointBest brute_force_best(const Scorer& scorer, std::size_t max_len) {
    const std::size_t vocab = scorer.vocab_size();
    JointBest best;
    for (std::size_t n = 1; n <= max_len; ++n) {
        std::vector<TokenId> form(n, 0);
        do {
            dp::OrderingPath ordering(n);
            for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
                for (std::size_t k = 0; k < n; ++k) ordering[k] = (mask >> k) & 1 ? Side::R : Side::L;
                const double v = dp::joint_log_prob(scorer, form, ordering);
                if (v > best.log_joint) best = {form, ordering, v};
            }
        } while (next_sequence(form, vocab));
    }
    return best;
}

Check check_dp_vs_bruteforce(std::size_t fixtures, std::uint64_t seed) {
    const auto start = Clock::now();
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> length(1, 8);
    double worst = 0.0;
    for (std::size_t f = 0; f < fixtures; ++f) {
        const std::size_t vocab = 2 + f % 5;
        const auto form = random_form(rng, vocab, length(rng));
        const auto scorer = random_lattice_scorer(rng, vocab, form);
        worst = std::max(worst, std::abs(dp::marginal_log_likelihood(scorer, form) -
                                         dp::brute_force_log_likelihood(scorer, form)));
    }
    return {"dp_vs_bruteforce", worst <= 1e-9, "max |diff| " + fmt(worst) + " over " + std::to_string(fixtures),
            seconds_since(start)};
}

Check check_map_ordering(std::size_t fixtures, std::uint64_t seed) {
    const auto start = Clock::now();
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> length(1, 8);
    double worst_value = 0.0, worst_replay = 0.0;
    for (std::size_t f = 0; f < fixtures; ++f) {
        const std::size_t vocab = 2 + f % 5;
        const auto form = random_form(rng, vocab, length(rng));
        const auto scorer = random_lattice_scorer(rng, vocab, form);
        const auto map = dp::map_ordering(scorer, form);
        const std::size_t n = form.size();
        double best = kNegInf;
        dp::OrderingPath ordering(n);
        for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
            for (std::size_t k = 0; k < n; ++k) ordering[k] = (mask >> k) & 1 ? Side::R : Side::L;
            best = std::max(best, dp::joint_log_prob(scorer, form, ordering));
        }
        worst_value = std::max(worst_value, std::abs(map.log_prob - best));
        worst_replay = std::max(worst_replay, std::abs(map.log_prob - dp::joint_log_prob(scorer, form, map.path)));
    }
    return {"map_ordering", worst_value <= 1e-9 && worst_replay <= 1e-12,
            "max |value diff| " + fmt(worst_value) + ", max |replay diff| " + fmt(worst_replay),
            seconds_since(start)};
}

Check check_beam_exhaustive(std::size_t fixtures, std::uint64_t seed) {
    const auto start = Clock::now();
    std::mt19937_64 rng(seed);
    std::size_t mismatches = 0;
    for (std::size_t f = 0; f < fixtures; ++f) {
        const std::size_t vocab = 2 + f % 2;
        const std::size_t max_len = 3;
        const auto scorer = random_complete_scorer(rng, vocab, max_len);
        const auto truth = brute_force_best(scorer, max_len);
        // Wide enough to never prune: every (string, ordering) pair fits.
        const auto result = decoder::beam_search(scorer, 1024, max_len);
        const auto& top = result.candidates.front();
        if (top.tokens != truth.tokens || top.ordering != truth.ordering) ++mismatches;
    }
    return {"beam_exhaustive", mismatches == 0,
            std::to_string(mismatches) + " mismatches over " + std::to_string(fixtures), seconds_since(start)};
}

Check check_tempering() {
    const auto start = Clock::now();
    const losses::TemperSchedule schedule{4000.0, 50.0, 2.0};
    bool ok = schedule.tau(0.0) == 50.0 && schedule.tau(4000.0) == 1.0;
    for (int s = 0; s < 4000 && ok; ++s) ok = schedule.tau(s + 1.0) < schedule.tau(s);
    return {"tempering", ok, "tau(0)=" + fmt(schedule.tau(0.0)) + " tau(W)=" + fmt(schedule.tau(4000.0)),
            seconds_since(start)};
}

Check check_gradients(std::uint64_t seed) {
    const auto start = Clock::now();
    const std::vector<RawExample> corpus{{"abc", "V;PST", "abced"}, {"ca", "V;PTCP", "acab"}};
    const auto vocab = build_vocab(corpus, false);
    std::vector<Example> batch;
    for (const auto& raw : corpus) batch.push_back(apply_unk_policy(raw, vocab, {}, false).example);

    model::ModelConfig config;
    config.preset = model::SizePreset::custom;
    config.embed_dim = 8;
    config.ffn_dim = 12;
    config.n_layers = 1;
    config.n_heads = 2;
    config.dropout = 0.0;
    config.max_len = 16;
    auto model = model::Transformer<float>(config, vocab.size(), seed).cast<double>();

    std::vector<model::BatchObjective> objectives(3);
    objectives[0].objective = losses::Objective::xh;
    objectives[1].objective = losses::Objective::xh_rand;
    objectives[2].objective = losses::Objective::mml;
    objectives[2].order_head = model::OrderHead::learned;
    objectives[2].order_temperature = 3.0;

    constexpr std::uint64_t kStep = 7;
    constexpr double kStepSize = 1e-5;
    // Relative error denominators are floored: below 1e-5 the differences'
    // own rounding noise (about 1e-10) would dominate, so tiny and zero
    // gradients compare in absolute terms.
    constexpr double kFloor = 1e-5;
    std::vector<std::vector<Matrix<double>>> analytic(objectives.size());
    for (std::size_t o = 0; o < objectives.size(); ++o) {
        model::loss_and_gradients(model, std::span<const Example>(batch), objectives[o], kStep, seed, false,
                                  analytic[o]);
    }
    double worst = 0.0;
    std::string where;
    auto& tensors = model.tensors();
    for (std::size_t k = 0; k < tensors.size(); ++k) {
        auto& data = tensors[k].value.data;
        for (std::size_t q = 0; q < data.size(); ++q) {
            const double saved = data[q];
            data[q] = saved + kStepSize;
            const auto up = model::batch_losses(model, std::span<const Example>(batch),
                                                std::span<const model::BatchObjective>(objectives), kStep, seed);
            data[q] = saved - kStepSize;
            const auto down = model::batch_losses(model, std::span<const Example>(batch),
                                                  std::span<const model::BatchObjective>(objectives), kStep, seed);
            data[q] = saved;
            for (std::size_t o = 0; o < objectives.size(); ++o) {
                const double numeric = (up[o] - down[o]) / (2.0 * kStepSize);
                const double exact = analytic[o][k].data[q];
                const double rel =
                    std::abs(numeric - exact) / std::max({std::abs(numeric), std::abs(exact), kFloor});
                if (rel > worst) {
                    worst = rel;
                    where = tensors[k].name + "[" + std::to_string(q) + "] " +
                            std::string(losses::objective_name(objectives[o].objective));
                }
            }
        }
    }
    return {"gradients", worst <= 1e-4,
            "max rel err " + fmt(worst) + (where.empty() ? "" : " at " + where) + ", " +
                std::to_string(model.parameter_count()) + " params",
            seconds_since(start)};
}

std::vector<Check> run_all(std::uint64_t seed) {
    std::vector<Check> out;
    out.push_back(check_dp_vs_bruteforce(200, seed));
    out.push_back(check_map_ordering(200, seed + 1));
    out.push_back(check_beam_exhaustive(50, seed + 2));
    out.push_back(check_tempering());
    out.push_back(check_gradients(seed + 3));
    return out;
}

}  // namespace bidiseq::selftest
