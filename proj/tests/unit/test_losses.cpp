#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "bidiseq/dp.hpp"
#include "bidiseq/error.hpp"
#include "bidiseq/losses.hpp"
#include "fixtures.hpp"

using namespace bidiseq;
using losses::ContextMode;
using losses::LengthPair;

namespace {

// Cross-entropy written straight from its definition: average negative log
// probability of each supervised token and join decision.
double xh_oracle(const Scorer& scorer, std::span<const TokenId> form, const losses::ContextSet& c) {
    const std::size_t n = form.size();
    double left = 0, right = 0, join = 0;
    for (auto [p, s] : c.token_pairs) {
        const auto sc = scorer.score(lattice_state(form, p, s));
        left += -sc.left_token_logp[static_cast<std::size_t>(form[p])];
        right += -sc.right_token_logp[static_cast<std::size_t>(form[n - 1 - s])];
    }
    for (auto [i, j] : c.join_pairs) {
        const auto sc = scorer.score(lattice_state(form, i, j));
        join += -(i + j == n ? sc.join_logp : sc.not_join_logp);
    }
    const double t = static_cast<double>(c.token_pairs.size());
    const double q = static_cast<double>(c.join_pairs.size());
    return ((t ? left / t : 0) + (t ? right / t : 0) + (q ? join / q : 0)) / 3.0;
}

}  // namespace

TEST_CASE("objective and mode names round-trip") {
    for (auto o : {losses::Objective::xh, losses::Objective::xh_rand, losses::Objective::mml}) {
        CHECK(losses::parse_objective(losses::objective_name(o)) == o);
    }
    CHECK_THROWS_AS(losses::parse_objective("xent"), Error);
    CHECK(losses::parse_context_mode("strict") == ContextMode::strict);
    CHECK(losses::context_mode_name(ContextMode::full) == "full");
    CHECK_THROWS_AS(losses::parse_context_mode("partial"), Error);
}

TEST_CASE("full context set covers every reachable context once") {
    for (std::size_t n = 1; n <= 8; ++n) {
        const auto c = losses::full_context_set(n);
        CHECK(c.token_pairs.size() == n * (n + 1) / 2);
        CHECK(c.join_pairs.size() == (n + 1) * (n + 2) / 2);
        std::set<LengthPair> tokens(c.token_pairs.begin(), c.token_pairs.end());
        CHECK(tokens.size() == c.token_pairs.size());
        for (auto [p, s] : c.token_pairs) CHECK(p + s <= n - 1);
        CHECK(c.cells().size() == dp::cell_count(n));
    }
    CHECK_THROWS_AS(losses::full_context_set(0), Error);
}

TEST_CASE("strict context set keeps both sides non-empty") {
    const auto c = losses::full_context_set(4, ContextMode::strict);
    // (i, j) with i, j >= 1 and i + j <= 4: six pairs.
    CHECK(c.join_pairs.size() == 6);
    CHECK(c.token_pairs.size() == 6);
    for (auto [i, j] : c.join_pairs) CHECK((i >= 1 && j >= 1 && i + j <= 4));
    CHECK(losses::full_context_set(1, ContextMode::strict).join_pairs.empty());
}

TEST_CASE("xh-rand draws one context per diagonal") {
    std::mt19937_64 rng(9);
    for (std::size_t n = 1; n <= 10; ++n) {
        const auto c = losses::xh_rand_context_set(n, rng);
        REQUIRE(c.token_pairs.size() == n);
        REQUIRE(c.join_pairs.size() == n + 1);
        CHECK(c.join_pairs[0] == LengthPair{0, 0});
        for (std::size_t k = 1; k <= n; ++k) {
            CHECK(c.token_pairs[k - 1].first + c.token_pairs[k - 1].second == k - 1);
            CHECK(c.join_pairs[k].first + c.join_pairs[k].second == k);
        }
    }
    // Each diagonal position is reachable.
    std::set<LengthPair> seen;
    for (int k = 0; k < 400; ++k) {
        const auto c = losses::xh_rand_context_set(3, rng);
        seen.insert(c.join_pairs[3]);
    }
    CHECK(seen.size() == 4);
}

TEST_CASE("xh loss by hand for a one-token target") {
    std::mt19937_64 rng(4);
    const std::vector<TokenId> form{1};
    const auto scorer = fixtures::scorer_for_form(rng, 2, form);
    const auto s0 = scorer.score({});
    const auto sl = scorer.score({{1}, {}});
    const auto sr = scorer.score({{}, {1}});
    const double left = -s0.left_token_logp[1];
    const double right = -s0.right_token_logp[1];
    const double join = -(s0.not_join_logp + sl.join_logp + sr.join_logp) / 3.0;
    const double expected = (left + right + join) / 3.0;
    CHECK(losses::xh_loss(scorer, form, losses::full_context_set(1)) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("xh loss matches the definition (property)") {
    std::mt19937_64 rng(55);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t n = 1 + trial % 7;
        const auto form = fixtures::random_tokens(rng, 3, n);
        const auto scorer = fixtures::scorer_for_form(rng, 3, form);
        const auto lattice = dp::score_lattice(scorer, form);
        for (const auto& c : {losses::full_context_set(n), losses::full_context_set(n, ContextMode::strict),
                              losses::xh_rand_context_set(n, rng)}) {
            const double expected = xh_oracle(scorer, form, c);
            CHECK(losses::xh_loss(scorer, form, c) == doctest::Approx(expected).epsilon(1e-12));
            CHECK(losses::xh_loss_from_scores(lattice, form, c) == doctest::Approx(expected).epsilon(1e-12));
        }
    }
}

TEST_CASE("xh loss validates its contexts") {
    UniformScorer scorer(2);
    const std::vector<TokenId> form{0, 1};
    losses::ContextSet bad;
    bad.token_pairs.emplace_back(1, 1);
    CHECK_THROWS_AS(losses::xh_loss(scorer, form, bad), Error);
    bad = {};
    bad.join_pairs.emplace_back(2, 1);
    CHECK_THROWS_AS(losses::xh_loss(scorer, form, bad), Error);
    CHECK_THROWS_AS(losses::xh_loss(scorer, std::vector<TokenId>{}, bad), Error);
    CHECK(losses::xh_loss(scorer, form, {}) == 0.0);
}

TEST_CASE("mml loss is the negative marginal") {
    std::mt19937_64 rng(12);
    const auto form = fixtures::random_tokens(rng, 4, 6);
    const auto scorer = fixtures::scorer_for_form(rng, 4, form);
    CHECK(losses::mml_loss(scorer, form) == doctest::Approx(-fixtures::story_marginal(scorer, form)).epsilon(1e-12));
}

TEST_CASE("temperature schedule") {
    const losses::TemperSchedule s{4000.0, 50.0, 2.0};
    CHECK(s.tau(0) == 50.0);
    CHECK(s.tau(4000) == 1.0);
    CHECK(s.tau(10000) == 1.0);
    CHECK(s.tau(2000) == doctest::Approx(49.0 * 0.25 + 1.0));
    for (int k = 0; k < 4000; ++k) CHECK(s.tau(k + 1) < s.tau(k));
    CHECK_NOTHROW(s.validate());
    CHECK_THROWS_AS((losses::TemperSchedule{0.5, 50.0, 2.0}.validate()), Error);
    CHECK_THROWS_AS((losses::TemperSchedule{10.0, 0.5, 2.0}.validate()), Error);
    CHECK_THROWS_AS((losses::TemperSchedule{10.0, 5.0, 0.0}.validate()), Error);
}

TEST_CASE("tempering flattens the order distribution") {
    const std::array<double, 2> logits{2.0, -1.0};
    const auto t1 = losses::temper(1.0, logits);
    CHECK(std::exp(t1[0]) + std::exp(t1[1]) == doctest::Approx(1.0));
    CHECK(t1[0] - t1[1] == doctest::Approx(3.0));
    const auto t50 = losses::temper(50.0, logits);
    CHECK(t50[0] - t50[1] == doctest::Approx(3.0 / 50.0));
    CHECK(std::exp(t50[0]) < std::exp(t1[0]));
    CHECK(std::exp(t50[0]) > 0.5);
    CHECK_THROWS_AS(losses::temper(0.5, logits), Error);
}
