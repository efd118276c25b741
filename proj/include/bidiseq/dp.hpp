#pragma once

// Exact marginalization over left/right generation orderings.
//
// Cell (i, j) of the lattice holds the log joint probability f[i,j] of having
// generated the first i target tokens on the left and the last j on the right.
// Moving from (i,j) to (i+1,j) costs log P(L|i,j) + log P(y_i | L, i, j);
// moving to (i,j+1) costs log P(R|i,j) + log P(y_{n-1-j} | R, i, j). Entering
// any cell (i,j) other than (0,0) multiplies in the join term Q_ij: the join
// probability on the diagonal i+j = n and its complement elsewhere.

#include <span>
#include <utility>
#include <vector>

#include "bidiseq/core.hpp"
#include "bidiseq/logmath.hpp"
#include "bidiseq/scorer.hpp"

namespace bidiseq::dp {

using OrderingPath = std::vector<Side>;

inline std::size_t cell_count(std::size_t n) { return (n + 1) * (n + 2) / 2; }

// Cells are stored by diagonal t = i + j, and within a diagonal by decreasing i.
inline std::size_t cell_index(std::size_t i, std::size_t j) {
    const std::size_t t = i + j;
    return t * (t + 1) / 2 + j;
}

// All (i, j) with i + j <= n, in storage order.
std::vector<std::pair<std::size_t, std::size_t>> lattice_cells(std::size_t n);
std::vector<DecodeState> lattice_states(std::span<const TokenId> form);

struct DPTable {
    std::size_t n = 0;
    std::vector<double> cells;

    double at(std::size_t i, std::size_t j) const { return cells.at(cell_index(i, j)); }
};

struct LogSemiring {
    using Value = double;
    Value one() const { return 0.0; }
    Value times(Value a, Value b) const { return a + b; }
    Value plus(Value a, Value b) const { return log_add_exp(a, b); }
};

// The forward recurrence over any log-domain semiring. step(side, i, j)
// returns the log factor for extending cell (i, j) on the given side;
// join(i, j) returns log Q_ij. Returns the sum over the final diagonal and
// fills `table` (storage order) when non-null.
template <class Semiring, class StepFn, class JoinFn>
typename Semiring::Value forward_recurrence(std::size_t n, const Semiring& sr, StepFn&& step, JoinFn&& join,
                                            std::vector<typename Semiring::Value>* table = nullptr) {
    using Value = typename Semiring::Value;
    std::vector<Value> f(cell_count(n));
    f[cell_index(0, 0)] = sr.one();
    for (std::size_t t = 1; t <= n; ++t) {
        for (std::size_t j = 0; j <= t; ++j) {
            const std::size_t i = t - j;
            Value acc{};
            if (i > 0) acc = sr.times(f[cell_index(i - 1, j)], step(Side::L, i - 1, j));
            if (j > 0) {
                Value right = sr.times(f[cell_index(i, j - 1)], step(Side::R, i, j - 1));
                acc = i > 0 ? sr.plus(acc, right) : right;
            }
            f[cell_index(i, j)] = sr.times(acc, join(i, j));
        }
    }
    Value total = f[cell_index(n, 0)];
    for (std::size_t j = 1; j <= n; ++j) total = sr.plus(total, f[cell_index(n - j, j)]);
    if (table) *table = std::move(f);
    return total;
}

// Scores of every lattice state, in storage order, from one batched call.
std::vector<LocalScores> score_lattice(const Scorer& scorer, std::span<const TokenId> form);

double joint_log_prob(const Scorer& scorer, std::span<const TokenId> form, std::span<const Side> ordering);

double marginal_log_likelihood(const Scorer& scorer, std::span<const TokenId> form);
DPTable marginal_table(const Scorer& scorer, std::span<const TokenId> form);
// The same recurrence over precomputed lattice scores.
double marginal_from_scores(std::span<const LocalScores> lattice, std::span<const TokenId> form,
                            DPTable* table = nullptr);

struct MapResult {
    OrderingPath path;
    double log_prob = kNegInf;
};

// Max-product recurrence with backpointers. Ties prefer the L predecessor.
MapResult map_ordering(const Scorer& scorer, std::span<const TokenId> form);

inline constexpr std::size_t kBruteForceMaxLength = 12;

// Log-sum-exp of joint_log_prob over all 2^n orderings.
double brute_force_log_likelihood(const Scorer& scorer, std::span<const TokenId> form);

}  // namespace bidiseq::dp
