#pragma once

// Prefix/suffix beam search over P(y, o | x), reranking by the marginal
// P(y | x), and the two-direction baselines.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bidiseq/core.hpp"
#include "bidiseq/dp.hpp"
#include "bidiseq/scorer.hpp"

namespace bidiseq::decoder {

struct Candidate {
    std::vector<TokenId> tokens;  // prefix followed by suffix
    dp::OrderingPath ordering;
    double log_joint = 0.0;
    std::optional<double> log_marginal;
    std::string surface;  // filled by render_surfaces
};

struct DecodeResult {
    std::vector<Candidate> candidates;  // best first
};

// Beam search from the empty hypothesis. Each child of a live hypothesis adds
// one token on one side; it yields a finished candidate (times the join
// probability) and, below max_len, a live hypothesis (times its complement).
// Stops once the k-th finished candidate is at least as good as every live
// hypothesis, or nothing is live. Returns the k best finished candidates.
// Throws if nothing finishes.
DecodeResult beam_search(const Scorer& scorer, std::size_t width, std::size_t max_len);

// Lemma length plus a margin.
std::size_t default_max_len(std::size_t lemma_length, std::size_t margin = 10);

// Attaches log P(y | x) to every candidate, keeps the first (best joint)
// candidate per distinct string, and sorts by marginal; ties keep joint rank.
DecodeResult rerank_marginal(const Scorer& scorer, DecodeResult result);

struct Bl2Choice {
    Direction direction = Direction::L2R;
    Candidate candidate;
};

// The better top candidate of two unidirectional decodes by log_joint; ties
// prefer L2R.
Bl2Choice bl2_select(const DecodeResult& l2r, const DecodeResult& r2l);

// The candidate with the higher marginal under a bidirectional scorer; ties
// prefer L2R. Identical strings are scored once.
Bl2Choice bl2_discriminate(const Scorer& scorer, const Candidate& l2r_best, const Candidate& r2l_best);

void render_surfaces(DecodeResult& result, const Vocabulary& vocab, const UnkMap& unk_map);

}  // namespace bidiseq::decoder
