#pragma once

// The local-probability interface consumed by the DP, the losses and the beam
// decoder, plus reference scorers used as test oracles.

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bidiseq/core.hpp"

namespace bidiseq {

enum class Side : std::uint8_t { L = 0, R = 1 };

// A prefix/suffix pair. The suffix is stored in surface order, so the token
// most recently generated on the right is suffix.front() and the first token
// generated on the right is suffix.back(). Neither side holds BOS/EOS.
struct DecodeState {
    std::vector<TokenId> prefix;
    std::vector<TokenId> suffix;

    std::size_t length() const { return prefix.size() + suffix.size(); }
    auto operator<=>(const DecodeState&) const = default;
};

// The four conditional distributions for one state, in log space. Probability
// zero is -inf. Complements are stored explicitly so that both branches are
// computed without cancellation.
struct LocalScores {
    std::vector<double> left_token_logp;
    std::vector<double> right_token_logp;
    double order_logp_left = 0.0;
    double order_logp_right = 0.0;
    double join_logp = 0.0;
    double not_join_logp = 0.0;

    double order_logp(Side s) const { return s == Side::L ? order_logp_left : order_logp_right; }
    const std::vector<double>& token_logp(Side s) const {
        return s == Side::L ? left_token_logp : right_token_logp;
    }
};

// Builds LocalScores from a left/right order probability split and a join
// probability, normalizing the token logits with a log-softmax.
LocalScores make_local_scores(std::span<const double> left_logits, std::span<const double> right_logits,
                              double p_left, double p_join);

// Throws if a distribution is not normalized (tokens within 1e-6, binary heads
// within 1e-9).
void check_normalized(const LocalScores& scores);

// Any model of the local probabilities. Implementations must be pure: the
// result depends only on the (bound) source and the state, never on which
// states were scored before. score() may be called concurrently.
class Scorer {
public:
    virtual ~Scorer() = default;

    virtual std::size_t vocab_size() const = 0;
    virtual LocalScores score(const DecodeState& state) const = 0;
    virtual std::vector<LocalScores> score_batch(std::span<const DecodeState> states) const;

    // Longest prefix+suffix the scorer accepts.
    virtual std::size_t max_length() const { return 1u << 20; }
    // Tokens the decoder may generate (reserved tokens are excluded by models).
    virtual bool can_emit(TokenId) const { return true; }

protected:
    void check_length(const DecodeState& state) const;
};

class UniformScorer final : public Scorer {
public:
    explicit UniformScorer(std::size_t vocab_size, std::size_t max_length = 1u << 20);
    std::size_t vocab_size() const override { return vocab_; }
    std::size_t max_length() const override { return max_length_; }
    LocalScores score(const DecodeState& state) const override;

private:
    std::size_t vocab_;
    std::size_t max_length_;
};

// Explicit state -> scores table with a fallback for unlisted states.
class TabularScorer final : public Scorer {
public:
    TabularScorer(std::size_t vocab_size, LocalScores fallback);

    void set(const DecodeState& state, LocalScores scores);
    bool contains(const DecodeState& state) const { return table_.contains(state); }
    std::size_t entries() const { return table_.size(); }

    std::size_t vocab_size() const override { return vocab_; }
    LocalScores score(const DecodeState& state) const override;

private:
    std::size_t vocab_;
    LocalScores fallback_;
    std::map<DecodeState, LocalScores> table_;
};

enum class Direction { L2R, R2L };

// Clamps the order head to one side; token and join heads pass through.
class ForcedOrderScorer final : public Scorer {
public:
    ForcedOrderScorer(const Scorer& inner, Direction direction) : inner_(inner), direction_(direction) {}

    std::size_t vocab_size() const override { return inner_.vocab_size(); }
    std::size_t max_length() const override { return inner_.max_length(); }
    bool can_emit(TokenId t) const override { return inner_.can_emit(t); }
    LocalScores score(const DecodeState& state) const override;
    std::vector<LocalScores> score_batch(std::span<const DecodeState> states) const override;

private:
    void clamp(LocalScores& s) const;
    const Scorer& inner_;
    Direction direction_;
};

// Replaces the order head by 1/2 on both sides (the cross-entropy models'
// decode-time convention).
class UniformOrderScorer final : public Scorer {
public:
    explicit UniformOrderScorer(const Scorer& inner) : inner_(inner) {}

    std::size_t vocab_size() const override { return inner_.vocab_size(); }
    std::size_t max_length() const override { return inner_.max_length(); }
    bool can_emit(TokenId t) const override { return inner_.can_emit(t); }
    LocalScores score(const DecodeState& state) const override;
    std::vector<LocalScores> score_batch(std::span<const DecodeState> states) const override;

private:
    const Scorer& inner_;
};

// Counts how many states are scored (single or batched).
class CountingScorer final : public Scorer {
public:
    explicit CountingScorer(const Scorer& inner) : inner_(inner) {}

    std::size_t vocab_size() const override { return inner_.vocab_size(); }
    std::size_t max_length() const override { return inner_.max_length(); }
    bool can_emit(TokenId t) const override { return inner_.can_emit(t); }
    LocalScores score(const DecodeState& state) const override;
    std::vector<LocalScores> score_batch(std::span<const DecodeState> states) const override;

    std::size_t calls() const { return calls_.load(); }
    void reset() { calls_ = 0; }

private:
    const Scorer& inner_;
    mutable std::atomic<std::size_t> calls_{0};
};

// State (prefix = form[0:i], suffix = form[n-j:n]) of the lattice cell (i, j).
DecodeState lattice_state(std::span<const TokenId> form, std::size_t i, std::size_t j);

std::string format_ordering(std::span<const Side> ordering);
std::vector<Side> parse_ordering(std::string_view text);

}  // namespace bidiseq
