#pragma once

// Training objectives over a local scorer: cross-entropy over prefix/suffix
// contexts (xH and its sampled xH-Rand variant), maximum marginal likelihood
// (MML), and the order-temperature schedule used while warming up MML.

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bidiseq/core.hpp"
#include "bidiseq/scorer.hpp"

namespace bidiseq::losses {

enum class Objective { xh, xh_rand, mml };

Objective parse_objective(std::string_view name);
std::string_view objective_name(Objective objective);

// Which contexts the cross-entropy objective supervises.
//  full:   every reachable context (token pairs p+s <= n-1, join pairs i+j <= n)
//  strict: only contexts with both sides non-empty in the one-based indexing
//          {(i,j) : i,j >= 1, i+j <= n}
enum class ContextMode { full, strict };

ContextMode parse_context_mode(std::string_view name);
std::string_view context_mode_name(ContextMode mode);

using LengthPair = std::pair<std::size_t, std::size_t>;

// token_pairs: (p, s) context lengths; the supervised tokens are form[p] on
// the left and form[n-1-s] on the right. join_pairs: (i, j) completed lengths
// whose join decision is supervised.
struct ContextSet {
    std::vector<LengthPair> token_pairs;
    std::vector<LengthPair> join_pairs;

    // Every lattice cell a loss over this set needs scored.
    std::vector<LengthPair> cells() const;
};

ContextSet full_context_set(std::size_t n, ContextMode mode = ContextMode::full);

// One token pair per diagonal p+s = k-1 and one join pair per diagonal i+j = k
// for k = 1..n, each uniform over its diagonal, plus the (0,0) join pair.
ContextSet xh_rand_context_set(std::size_t n, std::mt19937_64& rng);

// (1/3)(mean left xent + mean right xent + mean join xent). The order head is
// not used. Empty sub-averages contribute 0.
double xh_loss(const Scorer& scorer, std::span<const TokenId> form, const ContextSet& contexts);

// Same objective from precomputed scores keyed by lattice storage order.
double xh_loss_from_scores(std::span<const LocalScores> lattice, std::span<const TokenId> form,
                           const ContextSet& contexts);

// -log P(y | x) via the exact DP.
double mml_loss(const Scorer& scorer, std::span<const TokenId> form);

struct TemperSchedule {
    double warmup = 4000.0;
    double tau0 = 50.0;
    double exponent = 2.0;

    void validate() const;
    // (tau0 - 1) / W^a * (W - step)^a + 1 while step < W, then 1.
    double tau(double step) const;
};

// softmax(logits / tau) over the two order outcomes, in log space.
std::array<double, 2> temper(double tau, std::array<double, 2> order_logits);

}  // namespace bidiseq::losses
