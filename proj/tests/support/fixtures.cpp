#include "fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fixtures {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::vector<double> log_normalize(std::vector<double> logits) {
    const double hi = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) z += std::exp(v - hi);
    const double lz = hi + std::log(z);
    for (double& v : logits) v -= lz;
    return logits;
}

double lse(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    const double hi = std::max(a, b);
    return hi + std::log(std::exp(a - hi) + std::exp(b - hi));
}

bool advance(std::vector<TokenId>& seq, std::size_t vocab) {
    for (std::size_t k = seq.size(); k-- > 0;) {
        if (static_cast<std::size_t>(++seq[k]) < vocab) return true;
        seq[k] = 0;
    }
    return false;
}

std::string random_stem(std::mt19937_64& rng) {
    std::uniform_int_distribution<int> len(3, 8);
    std::uniform_int_distribution<int> letter(0, 25);
    std::string s(static_cast<std::size_t>(len(rng)), 'a');
    for (char& c : s) c = static_cast<char>('a' + letter(rng));
    return s;
}

}  // namespace

LocalScores random_scores(std::mt19937_64& rng, std::size_t vocab, double spread) {
    std::normal_distribution<double> logit(0.0, spread);
    std::uniform_real_distribution<double> unit(0.02, 0.98);
    LocalScores s;
    std::vector<double> left(vocab), right(vocab);
    for (auto& v : left) v = logit(rng);
    for (auto& v : right) v = logit(rng);
    s.left_token_logp = log_normalize(left);
    s.right_token_logp = log_normalize(right);
    const double pl = unit(rng);
    const double pj = unit(rng);
    s.order_logp_left = std::log(pl);
    s.order_logp_right = std::log1p(-pl);
    s.join_logp = std::log(pj);
    s.not_join_logp = std::log1p(-pj);
    return s;
}

std::vector<TokenId> random_tokens(std::mt19937_64& rng, std::size_t vocab, std::size_t n) {
    std::uniform_int_distribution<TokenId> pick(0, static_cast<TokenId>(vocab) - 1);
    std::vector<TokenId> out(n);
    for (auto& t : out) t = pick(rng);
    return out;
}

TabularScorer scorer_for_form(std::mt19937_64& rng, std::size_t vocab, std::span<const TokenId> form) {
    TabularScorer scorer(vocab, random_scores(rng, vocab));
    const std::size_t n = form.size();
    for (std::size_t i = 0; i <= n; ++i) {
        for (std::size_t j = 0; i + j <= n; ++j) {
            bidiseq::DecodeState st{{form.begin(), form.begin() + static_cast<std::ptrdiff_t>(i)},
                                    {form.end() - static_cast<std::ptrdiff_t>(j), form.end()}};
            scorer.set(st, random_scores(rng, vocab));
        }
    }
    return scorer;
}

TabularScorer scorer_for_all_states(std::mt19937_64& rng, std::size_t vocab, std::size_t max_len) {
    TabularScorer scorer(vocab, random_scores(rng, vocab));
    for (std::size_t total = 0; total <= max_len; ++total) {
        std::vector<TokenId> seq(total, 0);
        do {
            for (std::size_t p = 0; p <= total; ++p) {
                bidiseq::DecodeState st{{seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(p)},
                                        {seq.begin() + static_cast<std::ptrdiff_t>(p), seq.end()}};
                scorer.set(st, random_scores(rng, vocab));
            }
        } while (advance(seq, vocab));
    }
    return scorer;
}

TabularScorer join_at_end_scorer(std::mt19937_64& rng, std::size_t vocab, std::size_t length) {
    auto scorer = scorer_for_all_states(rng, vocab, length);
    for (std::size_t total = 0; total <= length; ++total) {
        std::vector<TokenId> seq(total, 0);
        do {
            for (std::size_t p = 0; p <= total; ++p) {
                bidiseq::DecodeState st{{seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(p)},
                                        {seq.begin() + static_cast<std::ptrdiff_t>(p), seq.end()}};
                auto s = scorer.score(st);
                s.join_logp = total == length ? 0.0 : kNegInf;
                s.not_join_logp = total == length ? kNegInf : 0.0;
                scorer.set(st, s);
            }
        } while (advance(seq, vocab));
    }
    return scorer;
}

double story_log_prob(const bidiseq::Scorer& scorer, std::span<const TokenId> form, std::span<const Side> ordering) {
    const std::size_t n = form.size();
    bidiseq::DecodeState st;
    std::size_t left = 0, right = 0;
    double total = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        const auto s = scorer.score(st);
        if (ordering[k] == Side::L) {
            const TokenId t = form[left++];
            total += s.order_logp_left + s.left_token_logp[static_cast<std::size_t>(t)];
            st.prefix.push_back(t);
        } else {
            const TokenId t = form[n - 1 - right++];
            total += s.order_logp_right + s.right_token_logp[static_cast<std::size_t>(t)];
            st.suffix.insert(st.suffix.begin(), t);
        }
        const auto after = scorer.score(st);
        total += k + 1 == n ? after.join_logp : after.not_join_logp;
    }
    return total;
}

std::vector<Side> ordering_from_mask(std::size_t mask, std::size_t n) {
    std::vector<Side> o(n);
    for (std::size_t k = 0; k < n; ++k) o[k] = (mask >> k) & 1 ? Side::R : Side::L;
    return o;
}

double story_marginal(const bidiseq::Scorer& scorer, std::span<const TokenId> form) {
    double acc = kNegInf;
    for (std::size_t mask = 0; mask < (std::size_t{1} << form.size()); ++mask) {
        acc = lse(acc, story_log_prob(scorer, form, ordering_from_mask(mask, form.size())));
    }
    return acc;
}

Argmax story_argmax(const bidiseq::Scorer& scorer, std::size_t max_len) {
    Argmax best{{}, {}, kNegInf};
    for (std::size_t n = 1; n <= max_len; ++n) {
        std::vector<TokenId> seq(n, 0);
        do {
            for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
                const auto o = ordering_from_mask(mask, n);
                const double v = story_log_prob(scorer, seq, o);
                if (v > best.log_prob) best = {seq, o, v};
            }
        } while (advance(seq, scorer.vocab_size()));
    }
    return best;
}

std::vector<bidiseq::RawExample> suffix_language(std::mt19937_64& rng, std::size_t count) {
    std::vector<bidiseq::RawExample> out;
    std::bernoulli_distribution coin(0.5);
    for (std::size_t k = 0; k < count; ++k) {
        const auto stem = random_stem(rng);
        const bool a = coin(rng);
        out.push_back({stem, a ? "A" : "B", stem + (a ? "ed" : "ing")});
    }
    return out;
}

std::vector<bidiseq::RawExample> affix_language(std::mt19937_64& rng, std::size_t count) {
    std::vector<bidiseq::RawExample> out;
    std::uniform_int_distribution<int> tag(0, 3);
    for (std::size_t k = 0; k < count; ++k) {
        const auto stem = random_stem(rng);
        switch (tag(rng)) {
            case 0: out.push_back({stem, "P1", "un" + stem}); break;
            case 1: out.push_back({stem, "P2", "re" + stem}); break;
            case 2: out.push_back({stem, "S1", stem + "ed"}); break;
            default: out.push_back({stem, "S2", stem + "ing"}); break;
        }
    }
    return out;
}

std::vector<bidiseq::Example> encode(std::span<const bidiseq::RawExample> raw, const bidiseq::Vocabulary& vocab) {
    std::vector<bidiseq::Example> out;
    for (const auto& r : raw) out.push_back(bidiseq::apply_unk_policy(r, vocab, {}, false).example);
    return out;
}

GradientReport gradient_check(const bidiseq::model::Transformer<double>& model,
                              std::span<const bidiseq::Example> batch,
                              std::span<const bidiseq::model::BatchObjective> objectives, double step_size,
                              double floor, std::uint64_t seed) {
    constexpr std::uint64_t kStep = 3;
    std::vector<std::vector<bidiseq::Matrix<double>>> analytic(objectives.size());
    for (std::size_t o = 0; o < objectives.size(); ++o) {
        bidiseq::model::loss_and_gradients(model, batch, objectives[o], kStep, seed, false, analytic[o]);
    }
    // Flattened (tensor, entry) index.
    std::vector<std::pair<std::size_t, std::size_t>> params;
    for (std::size_t k = 0; k < model.tensors().size(); ++k) {
        for (std::size_t q = 0; q < model.tensors()[k].value.size(); ++q) params.emplace_back(k, q);
    }
    GradientReport report;
    report.parameters = params.size();
    const auto total = static_cast<std::ptrdiff_t>(params.size());
#pragma omp parallel
    {
        auto local = model;
        double worst = 0.0;
        std::string where;
#pragma omp for schedule(dynamic, 64)
        for (std::ptrdiff_t p = 0; p < total; ++p) {
            const auto [k, q] = params[static_cast<std::size_t>(p)];
            double& w = local.tensors()[k].value.data[q];
            const double saved = w;
            w = saved + step_size;
            const auto up = bidiseq::model::batch_losses(local, batch, objectives, kStep, seed);
            w = saved - step_size;
            const auto down = bidiseq::model::batch_losses(local, batch, objectives, kStep, seed);
            w = saved;
            for (std::size_t o = 0; o < objectives.size(); ++o) {
                const double numeric = (up[o] - down[o]) / (2.0 * step_size);
                const double exact = analytic[o][k].data[q];
                const double rel = std::abs(numeric - exact) / std::max({std::abs(numeric), std::abs(exact), floor});
                if (rel > worst) {
                    worst = rel;
                    char buf[128];
                    std::snprintf(buf, sizeof buf, "] objective %zu analytic %.6e numeric %.6e", o, exact, numeric);
                    where = model.tensors()[k].name + "[" + std::to_string(q) + buf;
                }
            }
        }
#pragma omp critical
        if (worst > report.max_rel_error) {
            report.max_rel_error = worst;
            report.worst = where;
        }
    }
    return report;
}

}  // namespace fixtures
