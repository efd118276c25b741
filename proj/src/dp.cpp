#include "bidiseq/dp.hpp"

#include <string>

#include "bidiseq/error.hpp"

namespace bidiseq::dp {
namespace {

void require_non_empty(std::span<const TokenId> form) {
    if (form.empty()) throw Error("target must contain at least one token");
}

double step_factor(const LocalScores& s, Side side, TokenId target) {
    return s.order_logp(side) + s.token_logp(side).at(static_cast<std::size_t>(target));
}

}  // namespace

std::vector<std::pair<std::size_t, std::size_t>> lattice_cells(std::size_t n) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    out.reserve(cell_count(n));
    for (std::size_t t = 0; t <= n; ++t) {
        for (std::size_t j = 0; j <= t; ++j) out.emplace_back(t - j, j);
    }
    return out;
}

std::vector<DecodeState> lattice_states(std::span<const TokenId> form) {
    std::vector<DecodeState> out;
    for (auto [i, j] : lattice_cells(form.size())) out.push_back(lattice_state(form, i, j));
    return out;
}

std::vector<LocalScores> score_lattice(const Scorer& scorer, std::span<const TokenId> form) {
    const auto states = lattice_states(form);
    return scorer.score_batch(states);
}

double joint_log_prob(const Scorer& scorer, std::span<const TokenId> form, std::span<const Side> ordering) {
    const std::size_t n = form.size();
    if (ordering.size() != n) {
        throw Error("ordering length " + std::to_string(ordering.size()) + " does not match target length " +
                    std::to_string(n));
    }
    require_non_empty(form);
    std::size_t i = 0;
    std::size_t j = 0;
    double total = 0.0;
    auto current = scorer.score(lattice_state(form, 0, 0));
    for (std::size_t t = 0; t < n; ++t) {
        const Side side = ordering[t];
        if (side == Side::L) {
            total += step_factor(current, side, form[i]);
            ++i;
        } else {
            total += step_factor(current, side, form[n - 1 - j]);
            ++j;
        }
        current = scorer.score(lattice_state(form, i, j));
        total += t + 1 == n ? current.join_logp : current.not_join_logp;
    }
    return total;
}

double marginal_from_scores(std::span<const LocalScores> lattice, std::span<const TokenId> form, DPTable* table) {
    require_non_empty(form);
    const std::size_t n = form.size();
    if (lattice.size() != cell_count(n)) throw Error("lattice scores do not cover the target");
    auto step = [&](Side side, std::size_t i, std::size_t j) {
        const TokenId target = side == Side::L ? form[i] : form[n - 1 - j];
        return step_factor(lattice[cell_index(i, j)], side, target);
    };
    auto join = [&](std::size_t i, std::size_t j) {
        const auto& s = lattice[cell_index(i, j)];
        return i + j == n ? s.join_logp : s.not_join_logp;
    };
    std::vector<double> cells;
    const double total = forward_recurrence(n, LogSemiring{}, step, join, table ? &cells : nullptr);
    if (table) {
        table->n = n;
        table->cells = std::move(cells);
    }
    return total;
}

double marginal_log_likelihood(const Scorer& scorer, std::span<const TokenId> form) {
    require_non_empty(form);
    const auto lattice = score_lattice(scorer, form);
    return marginal_from_scores(lattice, form);
}

DPTable marginal_table(const Scorer& scorer, std::span<const TokenId> form) {
    require_non_empty(form);
    const auto lattice = score_lattice(scorer, form);
    DPTable table;
    marginal_from_scores(lattice, form, &table);
    return table;
}

MapResult map_ordering(const Scorer& scorer, std::span<const TokenId> form) {
    require_non_empty(form);
    const std::size_t n = form.size();
    const auto lattice = score_lattice(scorer, form);

    std::vector<double> best(cell_count(n), kNegInf);
    std::vector<Side> back(cell_count(n), Side::L);
    best[cell_index(0, 0)] = 0.0;
    for (std::size_t t = 1; t <= n; ++t) {
        for (std::size_t j = 0; j <= t; ++j) {
            const std::size_t i = t - j;
            double from_left = kNegInf;
            double from_right = kNegInf;
            if (i > 0) {
                from_left = best[cell_index(i - 1, j)] + step_factor(lattice[cell_index(i - 1, j)], Side::L, form[i - 1]);
            }
            if (j > 0) {
                from_right =
                    best[cell_index(i, j - 1)] + step_factor(lattice[cell_index(i, j - 1)], Side::R, form[n - j]);
            }
            const bool take_left = i > 0 && (j == 0 || from_left >= from_right);
            const auto& s = lattice[cell_index(i, j)];
            best[cell_index(i, j)] = (take_left ? from_left : from_right) + (t == n ? s.join_logp : s.not_join_logp);
            back[cell_index(i, j)] = take_left ? Side::L : Side::R;
        }
    }

    // Final cell: prefer the largest i among ties (the all-L end of the diagonal).
    std::size_t end_j = 0;
    for (std::size_t j = 1; j <= n; ++j) {
        if (best[cell_index(n - j, j)] > best[cell_index(n - end_j, end_j)]) end_j = j;
    }
    MapResult out;
    out.log_prob = best[cell_index(n - end_j, end_j)];
    out.path.resize(n);
    std::size_t i = n - end_j;
    std::size_t j = end_j;
    for (std::size_t t = n; t > 0; --t) {
        const Side side = back[cell_index(i, j)];
        out.path[t - 1] = side;
        if (side == Side::L) {
            --i;
        } else {
            --j;
        }
    }
    return out;
}

double brute_force_log_likelihood(const Scorer& scorer, std::span<const TokenId> form) {
    require_non_empty(form);
    const std::size_t n = form.size();
    if (n > kBruteForceMaxLength) {
        throw Error("brute force enumeration is limited to targets of length " +
                    std::to_string(kBruteForceMaxLength));
    }
    std::vector<double> joints;
    joints.reserve(std::size_t{1} << n);
    OrderingPath path(n);
    for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
        for (std::size_t t = 0; t < n; ++t) path[t] = (mask >> t) & 1 ? Side::R : Side::L;
        joints.push_back(joint_log_prob(scorer, form, path));
    }
    return log_sum_exp(joints);
}

}  // namespace bidiseq::dp
