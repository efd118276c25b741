#include "bidiseq/scorer.hpp"

#include <cmath>

#include "bidiseq/error.hpp"
#include "bidiseq/logmath.hpp"

namespace bidiseq {
namespace {

std::vector<double> log_softmax(std::span<const double> logits) {
    const double z = log_sum_exp(logits);
    std::vector<double> out(logits.begin(), logits.end());
    for (double& v : out) v -= z;
    return out;
}

double sum_exp(const std::vector<double>& xs) {
    double acc = 0.0;
    for (double x : xs) acc += std::exp(x);
    return acc;
}

}  // namespace

LocalScores make_local_scores(std::span<const double> left_logits, std::span<const double> right_logits,
                              double p_left, double p_join) {
    LocalScores s;
    s.left_token_logp = log_softmax(left_logits);
    s.right_token_logp = log_softmax(right_logits);
    s.order_logp_left = std::log(p_left);
    s.order_logp_right = std::log1p(-p_left);
    s.join_logp = std::log(p_join);
    s.not_join_logp = std::log1p(-p_join);
    return s;
}

void check_normalized(const LocalScores& s) {
    if (std::abs(sum_exp(s.left_token_logp) - 1.0) > 1e-6) throw Error("left token distribution not normalized");
    if (std::abs(sum_exp(s.right_token_logp) - 1.0) > 1e-6) throw Error("right token distribution not normalized");
    if (std::abs(std::exp(s.order_logp_left) + std::exp(s.order_logp_right) - 1.0) > 1e-9) {
        throw Error("order distribution not normalized");
    }
    if (std::abs(std::exp(s.join_logp) + std::exp(s.not_join_logp) - 1.0) > 1e-9) {
        throw Error("join distribution not normalized");
    }
}

std::vector<LocalScores> Scorer::score_batch(std::span<const DecodeState> states) const {
    std::vector<LocalScores> out;
    out.reserve(states.size());
    for (const auto& s : states) out.push_back(score(s));
    return out;
}

void Scorer::check_length(const DecodeState& state) const {
    if (state.length() > max_length()) {
        throw Error("state length " + std::to_string(state.length()) + " exceeds scorer maximum " +
                    std::to_string(max_length()));
    }
}

UniformScorer::UniformScorer(std::size_t vocab_size, std::size_t max_length)
    : vocab_(vocab_size), max_length_(max_length) {
    if (vocab_size == 0) throw Error("uniform scorer needs a non-empty vocabulary");
}

LocalScores UniformScorer::score(const DecodeState& state) const {
    check_length(state);
    const std::vector<double> zeros(vocab_, 0.0);
    return make_local_scores(zeros, zeros, 0.5, 0.5);
}

TabularScorer::TabularScorer(std::size_t vocab_size, LocalScores fallback)
    : vocab_(vocab_size), fallback_(std::move(fallback)) {
    if (fallback_.left_token_logp.size() != vocab_ || fallback_.right_token_logp.size() != vocab_) {
        throw Error("fallback scores do not match vocabulary size");
    }
}

void TabularScorer::set(const DecodeState& state, LocalScores scores) {
    if (scores.left_token_logp.size() != vocab_ || scores.right_token_logp.size() != vocab_) {
        throw Error("scores do not match vocabulary size");
    }
    check_normalized(scores);
    table_.insert_or_assign(state, std::move(scores));
}

LocalScores TabularScorer::score(const DecodeState& state) const {
    check_length(state);
    auto it = table_.find(state);
    return it == table_.end() ? fallback_ : it->second;
}

void ForcedOrderScorer::clamp(LocalScores& s) const {
    s.order_logp_left = direction_ == Direction::L2R ? 0.0 : kNegInf;
    s.order_logp_right = direction_ == Direction::L2R ? kNegInf : 0.0;
}

LocalScores ForcedOrderScorer::score(const DecodeState& state) const {
    auto s = inner_.score(state);
    clamp(s);
    return s;
}

std::vector<LocalScores> ForcedOrderScorer::score_batch(std::span<const DecodeState> states) const {
    auto out = inner_.score_batch(states);
    for (auto& s : out) clamp(s);
    return out;
}

LocalScores UniformOrderScorer::score(const DecodeState& state) const {
    auto s = inner_.score(state);
    s.order_logp_left = s.order_logp_right = -std::log(2.0);
    return s;
}

std::vector<LocalScores> UniformOrderScorer::score_batch(std::span<const DecodeState> states) const {
    auto out = inner_.score_batch(states);
    for (auto& s : out) s.order_logp_left = s.order_logp_right = -std::log(2.0);
    return out;
}

LocalScores CountingScorer::score(const DecodeState& state) const {
    ++calls_;
    return inner_.score(state);
}

std::vector<LocalScores> CountingScorer::score_batch(std::span<const DecodeState> states) const {
    calls_ += states.size();
    return inner_.score_batch(states);
}

DecodeState lattice_state(std::span<const TokenId> form, std::size_t i, std::size_t j) {
    const std::size_t n = form.size();
    if (i + j > n) throw Error("lattice cell outside the target");
    DecodeState s;
    s.prefix.assign(form.begin(), form.begin() + static_cast<std::ptrdiff_t>(i));
    s.suffix.assign(form.begin() + static_cast<std::ptrdiff_t>(n - j), form.end());
    return s;
}

std::string format_ordering(std::span<const Side> ordering) {
    std::string out;
    out.reserve(ordering.size());
    for (Side s : ordering) out += s == Side::L ? 'L' : 'R';
    return out;
}

std::vector<Side> parse_ordering(std::string_view text) {
    std::vector<Side> out;
    for (char c : text) {
        if (c == 'L') {
            out.push_back(Side::L);
        } else if (c == 'R') {
            out.push_back(Side::R);
        } else {
            throw Error("ordering may only contain L and R");
        }
    }
    return out;
}

}  // namespace bidiseq
