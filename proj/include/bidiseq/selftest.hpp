#pragma once

// Built-in release checks run by `bidiseq selftest`: the DP against brute-force
// enumeration, analytic gradients against finite differences, and exhaustive
// beam search against brute-force argmax, all on generated fixtures.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bidiseq/dp.hpp"
#include "bidiseq/scorer.hpp"

namespace bidiseq::selftest {

struct Check {
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

// Random distributions over `vocab` tokens; logits are N(0, spread^2).
LocalScores random_local_scores(std::mt19937_64& rng, std::size_t vocab, double spread = 2.0);

// Random entries for every lattice state of `form`.
TabularScorer random_lattice_scorer(std::mt19937_64& rng, std::size_t vocab, std::span<const TokenId> form);

// Random entries for every state with prefix+suffix length <= max_len.
TabularScorer random_complete_scorer(std::mt19937_64& rng, std::size_t vocab, std::size_t max_len);

struct JointBest {
    std::vector<TokenId> tokens;
    dp::OrderingPath ordering;
    double log_joint = kNegInf;
};

// argmax over every output of length 1..max_len and every ordering.
JointBest brute_force_best(const Scorer& scorer, std::size_t max_len);

Check check_dp_vs_bruteforce(std::size_t fixtures, std::uint64_t seed);
Check check_map_ordering(std::size_t fixtures, std::uint64_t seed);
Check check_beam_exhaustive(std::size_t fixtures, std::uint64_t seed);
Check check_tempering();
// Every parameter of a small model, all three objectives, 64-bit floats.
Check check_gradients(std::uint64_t seed);

std::vector<Check> run_all(std::uint64_t seed);

}  // namespace bidiseq::selftest
