#include "bidiseq/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <queue>

#include "bidiseq/error.hpp"

namespace bidiseq::decoder {
namespace {

constexpr std::size_t kScoreChunk = 32;

struct Live {
    DecodeState state;
    double score = 0.0;
    dp::OrderingPath ordering;
    LocalScores scores;
    std::size_t seq = 0;
};

struct Finished {
    Candidate candidate;
    std::size_t seq = 0;
};

struct Proposal {
    double base;
    std::size_t parent;
    Side side;
    TokenId token;
};

// Scores of the k best entries seen so far; threshold() is -inf until k arrive.
class TopK {
public:
    explicit TopK(std::size_t k) : k_(k) {}
    void push(double v) {
        if (k_ == 0) return;
        if (heap_.size() < k_) {
            heap_.push(v);
        } else if (v > heap_.top()) {
            heap_.pop();
            heap_.push(v);
        }
    }
    bool full() const { return heap_.size() >= k_; }
    double threshold() const { return full() ? heap_.top() : kNegInf; }

private:
    std::size_t k_;
    std::priority_queue<double, std::vector<double>, std::greater<double>> heap_;
};

template <class T>
void keep_best(std::vector<T>& items, std::size_t k, auto score) {
    std::sort(items.begin(), items.end(), [&](const T& a, const T& b) {
        if (score(a) != score(b)) return score(a) > score(b);
        return a.seq < b.seq;
    });
    if (items.size() > k) items.resize(k);
}

DecodeState child_state(const DecodeState& parent, Side side, TokenId token) {
    DecodeState s;
    if (side == Side::L) {
        s.prefix = parent.prefix;
        s.prefix.push_back(token);
        s.suffix = parent.suffix;
    } else {
        s.prefix = parent.prefix;
        s.suffix.reserve(parent.suffix.size() + 1);
        s.suffix.push_back(token);
        s.suffix.insert(s.suffix.end(), parent.suffix.begin(), parent.suffix.end());
    }
    return s;
}

std::string describe(const DecodeState& s) {
    std::string out = "[";
    for (auto t : s.prefix) out += std::to_string(t) + " ";
    out += "|";
    for (auto t : s.suffix) out += " " + std::to_string(t);
    return out + "]";
}

}  // namespace

std::size_t default_max_len(std::size_t lemma_length, std::size_t margin) { return lemma_length + margin; }

DecodeResult beam_search(const Scorer& scorer, std::size_t width, std::size_t max_len) {
    if (width == 0) throw Error("beam width must be at least 1");
    if (max_len == 0) throw Error("max_len must be at least 1");
    max_len = std::min(max_len, scorer.max_length());
    const std::size_t vocab = scorer.vocab_size();
    std::vector<TokenId> emit;
    for (std::size_t t = 0; t < vocab; ++t) {
        if (scorer.can_emit(static_cast<TokenId>(t))) emit.push_back(static_cast<TokenId>(t));
    }

    std::size_t seq = 0;
    std::vector<Live> live(1);
    live[0].scores = scorer.score(live[0].state);
    std::vector<Finished> finished;
    TopK finished_top(width);
    Live best_partial = live[0];

    while (!live.empty()) {
        std::vector<Proposal> proposals;
        for (std::size_t p = 0; p < live.size(); ++p) {
            const auto& h = live[p];
            for (Side side : {Side::L, Side::R}) {
                const double o = h.scores.order_logp(side);
                if (o == kNegInf) continue;
                const auto& tok = h.scores.token_logp(side);
                for (TokenId t : emit) {
                    const double lp = tok[static_cast<std::size_t>(t)];
                    if (lp == kNegInf) continue;
                    proposals.push_back({h.score + o + lp, p, side, t});
                }
            }
        }
        std::sort(proposals.begin(), proposals.end(), [](const Proposal& a, const Proposal& b) {
            if (a.base != b.base) return a.base > b.base;
            if (a.parent != b.parent) return a.parent < b.parent;
            if (a.side != b.side) return a.side < b.side;
            return a.token < b.token;
        });

        std::vector<Live> next;
        TopK live_top(width);
        std::size_t cursor = 0;
        bool pruned = false;
        while (cursor < proposals.size() && !pruned) {
            std::vector<const Proposal*> chunk;
            std::vector<DecodeState> states;
            while (cursor < proposals.size() && chunk.size() < kScoreChunk) {
                const Proposal& pr = proposals[cursor];
                // Both children score at most `base`; equal scores lose ties to earlier entries.
                if (pr.base <= live_top.threshold() && pr.base <= finished_top.threshold()) {
                    pruned = true;
                    break;
                }
                chunk.push_back(&pr);
                states.push_back(child_state(live[pr.parent].state, pr.side, pr.token));
                ++cursor;
            }
            if (chunk.empty()) break;
            auto scores = scorer.score_batch(states);
            for (std::size_t c = 0; c < chunk.size(); ++c) {
                const Proposal& pr = *chunk[c];
                const auto& parent = live[pr.parent];
                auto ordering = parent.ordering;
                ordering.push_back(pr.side);
                const double done = pr.base + scores[c].join_logp;
                if (done != kNegInf) {
                    Finished f;
                    f.candidate.tokens = states[c].prefix;
                    f.candidate.tokens.insert(f.candidate.tokens.end(), states[c].suffix.begin(),
                                              states[c].suffix.end());
                    f.candidate.ordering = ordering;
                    f.candidate.log_joint = done;
                    f.seq = seq++;
                    finished_top.push(done);
                    finished.push_back(std::move(f));
                }
                const double cont = pr.base + scores[c].not_join_logp;
                if (states[c].length() < max_len && cont != kNegInf) {
                    Live h;
                    h.state = std::move(states[c]);
                    h.score = cont;
                    h.ordering = std::move(ordering);
                    h.scores = std::move(scores[c]);
                    h.seq = seq++;
                    live_top.push(cont);
                    next.push_back(std::move(h));
                }
            }
        }

        keep_best(next, width, [](const Live& h) { return h.score; });
        keep_best(finished, width, [](const Finished& f) { return f.candidate.log_joint; });
        live = std::move(next);
        if (!live.empty()) {
            if (live.front().state.length() >= best_partial.state.length()) best_partial = live.front();
            if (finished_top.full() && finished_top.threshold() >= live.front().score) break;
        }
    }

    if (finished.empty()) {
        throw Error("no hypothesis completed within max_len " + std::to_string(max_len) + "; best partial " +
                    describe(best_partial.state) + " at log-probability " + std::to_string(best_partial.score));
    }
    DecodeResult result;
    for (auto& f : finished) result.candidates.push_back(std::move(f.candidate));
    return result;
}

DecodeResult rerank_marginal(const Scorer& scorer, DecodeResult result) {
    if (result.candidates.empty()) throw Error("no candidates to rerank");
    std::map<std::vector<TokenId>, bool> seen;
    std::vector<Candidate> unique;
    for (auto& c : result.candidates) {
        if (!seen.emplace(c.tokens, true).second) continue;
        c.log_marginal = dp::marginal_log_likelihood(scorer, c.tokens);
        unique.push_back(std::move(c));
    }
    std::stable_sort(unique.begin(), unique.end(),
                     [](const Candidate& a, const Candidate& b) { return *a.log_marginal > *b.log_marginal; });
    result.candidates = std::move(unique);
    return result;
}

Bl2Choice bl2_select(const DecodeResult& l2r, const DecodeResult& r2l) {
    if (l2r.candidates.empty() || r2l.candidates.empty()) throw Error("bl2_select needs two non-empty results");
    const auto& a = l2r.candidates.front();
    const auto& b = r2l.candidates.front();
    if (b.log_joint > a.log_joint) return {Direction::R2L, b};
    return {Direction::L2R, a};
}

Bl2Choice bl2_discriminate(const Scorer& scorer, const Candidate& l2r_best, const Candidate& r2l_best) {
    if (l2r_best.tokens.empty() || r2l_best.tokens.empty()) throw Error("bl2_discriminate needs non-empty candidates");
    Bl2Choice left{Direction::L2R, l2r_best};
    left.candidate.log_marginal = dp::marginal_log_likelihood(scorer, l2r_best.tokens);
    if (l2r_best.tokens == r2l_best.tokens) return left;
    Bl2Choice right{Direction::R2L, r2l_best};
    right.candidate.log_marginal = dp::marginal_log_likelihood(scorer, r2l_best.tokens);
    return *right.candidate.log_marginal > *left.candidate.log_marginal ? right : left;
}

void render_surfaces(DecodeResult& result, const Vocabulary& vocab, const UnkMap& unk_map) {
    for (auto& c : result.candidates) c.surface = resolve_unk_in_output(c.tokens, vocab, unk_map);
}

}  // namespace bidiseq::decoder
