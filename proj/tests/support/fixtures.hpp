#pragma once

// Test fixtures and oracles written independently of the library's DP,
// decoder and analysis code.

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bidiseq/core.hpp"
#include "bidiseq/model.hpp"
#include "bidiseq/scorer.hpp"

namespace fixtures {

using bidiseq::LocalScores;
using bidiseq::Side;
using bidiseq::TabularScorer;
using bidiseq::TokenId;

LocalScores random_scores(std::mt19937_64& rng, std::size_t vocab, double spread = 2.0);

// Random entries for each state the lattice of `form` visits.
TabularScorer scorer_for_form(std::mt19937_64& rng, std::size_t vocab, std::span<const TokenId> form);
// Random entries for every prefix/suffix pair of total length <= max_len.
TabularScorer scorer_for_all_states(std::mt19937_64& rng, std::size_t vocab, std::size_t max_len);
// Every state up to `length`; stops with probability 1 exactly when prefix+suffix
// reaches `length`, never before. Tokens and order are random.
TabularScorer join_at_end_scorer(std::mt19937_64& rng, std::size_t vocab, std::size_t length);

std::vector<TokenId> random_tokens(std::mt19937_64& rng, std::size_t vocab, std::size_t n);

// Walks the generative story one decision at a time: pick a side, emit a
// token there, then decide whether to stop.
double story_log_prob(const bidiseq::Scorer& scorer, std::span<const TokenId> form, std::span<const Side> ordering);
double story_marginal(const bidiseq::Scorer& scorer, std::span<const TokenId> form);
std::vector<Side> ordering_from_mask(std::size_t mask, std::size_t n);

struct Argmax {
    std::vector<TokenId> tokens;
    std::vector<Side> ordering;
    double log_prob;
};
// Over every string of length 1..max_len and every ordering.
Argmax story_argmax(const bidiseq::Scorer& scorer, std::size_t max_len);

// Stems of 3-8 letters; tag A appends "ed", tag B appends "ing".
std::vector<bidiseq::RawExample> suffix_language(std::mt19937_64& rng, std::size_t count);
// Tags P1/P2 prepend "un"/"re", tags S1/S2 append "ed"/"ing".
std::vector<bidiseq::RawExample> affix_language(std::mt19937_64& rng, std::size_t count);

std::vector<bidiseq::Example> encode(std::span<const bidiseq::RawExample> raw, const bidiseq::Vocabulary& vocab);

struct GradientReport {
    double max_rel_error = 0.0;
    std::string worst;
    std::size_t parameters = 0;
};

// Central differences over every parameter against loss_and_gradients, for
// each objective. Relative error is |a - n| / max(|a|, |n|, floor).
GradientReport gradient_check(const bidiseq::model::Transformer<double>& model,
                              std::span<const bidiseq::Example> batch,
                              std::span<const bidiseq::model::BatchObjective> objectives, double step_size,
                              double floor, std::uint64_t seed);

}  // namespace fixtures
