#include "bidiseq/model.hpp"

#include <cmath>
#include <exception>
#include <string>

#include "bidiseq/dp.hpp"
#include "bidiseq/error.hpp"
#include "bidiseq/kernels.hpp"
#include "bidiseq/logmath.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace bidiseq::model {
namespace {

// Side-embedding rows.
constexpr std::int32_t kPrefixStream = 0;
constexpr std::int32_t kSuffixStream = 1;
constexpr std::int32_t kClsStream = 2;

// Class-token rows follow the vocabulary in the decoder embedding table.
enum ClsToken : std::size_t { kJoinCls = 0, kOrderCls = 1, kLeftCls = 2, kRightCls = 3, kClsCount = 4 };

constexpr std::size_t kNoPosition = static_cast<std::size_t>(-1);
constexpr std::size_t kScoreChunk = 32;

template <class Real>
Matrix<Real> sinusoid_table(std::size_t positions, std::size_t dim) {
    Matrix<Real> pe(positions, dim);
    for (std::size_t p = 0; p < positions; ++p) {
        for (std::size_t k = 0; k < dim; k += 2) {
            const double rate = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(dim));
            pe(p, k) = static_cast<Real>(std::sin(static_cast<double>(p) * rate));
            if (k + 1 < dim) pe(p, k + 1) = static_cast<Real>(std::cos(static_cast<double>(p) * rate));
        }
    }
    return pe;
}

template <class Real>
Matrix<Real> positions_matrix(std::span<const std::size_t> positions, std::size_t dim) {
    std::size_t top = 0;
    for (auto p : positions) {
        if (p != kNoPosition) top = std::max(top, p + 1);
    }
    const auto table = sinusoid_table<Real>(top, dim);
    Matrix<Real> out(positions.size(), dim);
    for (std::size_t r = 0; r < positions.size(); ++r) {
        if (positions[r] == kNoPosition) continue;
        std::copy(table.row(positions[r]), table.row(positions[r]) + dim, out.row(r));
    }
    return out;
}

void log_softmax_row(const double* logits, std::size_t n, std::vector<double>& out) {
    out.assign(logits, logits + n);
    const double z = log_sum_exp(out);
    for (double& v : out) v -= z;
}

std::pair<double, double> log_softmax2(double a, double b) {
    const double z = log_add_exp(a, b);
    return {a - z, b - z};
}

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

SizePreset parse_preset(std::string_view name) {
    if (name == "S") return SizePreset::S;
    if (name == "M") return SizePreset::M;
    if (name == "L") return SizePreset::L;
    if (name == "custom") return SizePreset::custom;
    throw Error("unknown size preset '" + std::string(name) + "' (expected S, M, L or custom)");
}

std::string_view preset_name(SizePreset preset) {
    switch (preset) {
        case SizePreset::S: return "S";
        case SizePreset::M: return "M";
        case SizePreset::L: return "L";
        case SizePreset::custom: return "custom";
    }
    return "?";
}

ModelConfig ModelConfig::from_preset(SizePreset preset) {
    ModelConfig c;
    c.preset = preset;
    switch (preset) {
        case SizePreset::S:
        case SizePreset::custom:
            break;
        case SizePreset::M:
            c.embed_dim = 128;
            c.ffn_dim = 512;
            c.n_layers = 3;
            c.n_heads = 4;
            c.learning_rate = 0.001;
            break;
        case SizePreset::L:
            c.embed_dim = 256;
            c.ffn_dim = 1024;
            c.n_layers = 4;
            c.n_heads = 8;
            c.learning_rate = 0.001;
            break;
    }
    return c;
}

void ModelConfig::validate() const {
    if (embed_dim == 0 || ffn_dim == 0 || n_layers == 0 || n_heads == 0) {
        throw Error("model dimensions must be positive");
    }
    if (embed_dim % n_heads != 0) throw Error("embed_dim must be divisible by n_heads");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("dropout must lie in [0, 1)");
    if (!(learning_rate > 0.0)) throw Error("learning rate must be positive");
    if (max_len == 0) throw Error("max_len must be positive");
    if (preset != SizePreset::custom) {
        const auto ref = from_preset(preset);
        if (ref.embed_dim != embed_dim || ref.ffn_dim != ffn_dim || ref.n_layers != n_layers ||
            ref.n_heads != n_heads) {
            throw Error("dimensions do not match preset " + std::string(preset_name(preset)) +
                        "; use preset custom");
        }
    }
}

OrderHead default_order_head(losses::Objective objective) {
    return objective == losses::Objective::mml ? OrderHead::learned : OrderHead::uniform;
}

// ---------------------------------------------------------------------------
// Transformer

template <class Real>
std::size_t Transformer<Real>::add_tensor(const std::string& name, std::size_t rows, std::size_t cols) {
    layout_.push_back({name, {rows, cols}});
    return layout_.size() - 1;
}

template <class Real>
void Transformer<Real>::build_layout() {
    config_.validate();
    if (vocab_ <= static_cast<std::size_t>(kUnk)) throw Error("vocabulary is missing reserved tokens");
    const std::size_t d = config_.embed_dim;
    const std::size_t f = config_.ffn_dim;
    auto attention = [&](const std::string& p) {
        Attention a{};
        a.wq = add_tensor(p + ".wq", d, d);
        a.bq = add_tensor(p + ".bq", 1, d);
        a.wk = add_tensor(p + ".wk", d, d);
        a.bk = add_tensor(p + ".bk", 1, d);
        a.wv = add_tensor(p + ".wv", d, d);
        a.bv = add_tensor(p + ".bv", 1, d);
        a.wo = add_tensor(p + ".wo", d, d);
        a.bo = add_tensor(p + ".bo", 1, d);
        return a;
    };
    auto norm = [&](const std::string& p) { return Norm{add_tensor(p + ".gain", 1, d), add_tensor(p + ".bias", 1, d)}; };
    auto ffn = [&](const std::string& p) {
        return Ffn{add_tensor(p + ".w1", d, f), add_tensor(p + ".b1", 1, f), add_tensor(p + ".w2", f, d),
                   add_tensor(p + ".b2", 1, d)};
    };

    src_embed_ = add_tensor("encoder.embed", vocab_, d);
    tgt_embed_ = add_tensor("decoder.embed", vocab_ + kClsCount, d);
    side_embed_ = add_tensor("decoder.side_embed", 3, d);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        const std::string p = "encoder.layer" + std::to_string(l);
        EncoderLayer layer;
        layer.ln1 = norm(p + ".ln1");
        layer.self = attention(p + ".self");
        layer.ln2 = norm(p + ".ln2");
        layer.ffn = ffn(p + ".ffn");
        encoder_.push_back(layer);
    }
    encoder_norm_ = norm("encoder.ln");
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        const std::string p = "decoder.layer" + std::to_string(l);
        DecoderLayer layer;
        layer.ln1 = norm(p + ".ln1");
        layer.self = attention(p + ".self");
        layer.ln2 = norm(p + ".ln2");
        layer.cross = attention(p + ".cross");
        layer.ln3 = norm(p + ".ln3");
        layer.ffn = ffn(p + ".ffn");
        decoder_.push_back(layer);
    }
    decoder_norm_ = norm("decoder.ln");
    left_w_ = add_tensor("head.left.w", d, vocab_);
    left_b_ = add_tensor("head.left.b", 1, vocab_);
    right_w_ = add_tensor("head.right.w", d, vocab_);
    right_b_ = add_tensor("head.right.b", 1, vocab_);
    order_w_ = add_tensor("head.order.w", d, 2);
    order_b_ = add_tensor("head.order.b", 1, 2);
    join_w_ = add_tensor("head.join.w", d, 2);
    join_b_ = add_tensor("head.join.b", 1, 2);
}

template <class Real>
void Transformer<Real>::initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    tensors_.clear();
    tensors_.reserve(layout_.size());
    for (const auto& [name, shape] : layout_) {
        const auto [rows, cols] = shape;
        Matrix<Real> m(rows, cols);
        const bool is_gain = name.ends_with(".gain");
        const bool is_bias = name.ends_with(".bias") || name.ends_with(".b") || name.ends_with(".bq") ||
                             name.ends_with(".bk") || name.ends_with(".bv") || name.ends_with(".bo") ||
                             name.ends_with(".b1") || name.ends_with(".b2");
        if (is_gain) {
            std::fill(m.data.begin(), m.data.end(), Real(1));
        } else if (!is_bias) {
            // Embedding tables get unit-variance rows after the sqrt(d) scaling.
            const bool is_embed = name.ends_with("embed");
            const double limit = is_embed ? std::sqrt(3.0 / static_cast<double>(cols))
                                          : std::sqrt(6.0 / static_cast<double>(rows + cols));
            std::uniform_real_distribution<double> dist(-limit, limit);
            for (auto& v : m.data) v = static_cast<Real>(dist(rng));
        }
        tensors_.push_back({name, std::move(m)});
    }
}

template <class Real>
Transformer<Real>::Transformer(const ModelConfig& config, std::size_t vocab_size, std::uint64_t seed)
    : config_(config), vocab_(vocab_size) {
    build_layout();
    initialize(seed);
}

template <class Real>
Transformer<Real>::Transformer(const ModelConfig& config, std::size_t vocab_size,
                               std::vector<NamedTensor<Real>> tensors)
    : config_(config), vocab_(vocab_size) {
    build_layout();
    if (tensors.size() != layout_.size()) {
        throw Error("expected " + std::to_string(layout_.size()) + " tensors, got " + std::to_string(tensors.size()));
    }
    for (std::size_t k = 0; k < layout_.size(); ++k) {
        const auto& [name, shape] = layout_[k];
        const auto& t = tensors[k];
        if (t.name != name) throw Error("tensor " + std::to_string(k) + " is '" + t.name + "', expected '" + name + "'");
        if (t.value.rows != shape.first || t.value.cols != shape.second ||
            t.value.data.size() != shape.first * shape.second) {
            throw Error("shape mismatch for tensor '" + name + "'");
        }
    }
    tensors_ = std::move(tensors);
}

template <class Real>
std::size_t Transformer<Real>::parameter_count() const {
    std::size_t total = 0;
    for (const auto& t : tensors_) total += t.value.size();
    return total;
}

template <class Real>
typename Transformer<Real>::Bound Transformer<Real>::bind(Tape<Real>& tape, std::vector<Matrix<Real>>* grads,
                                                          std::mt19937_64* dropout_rng) const {
    if (grads && grads->size() != tensors_.size()) throw Error("gradient buffers do not match the model");
    Bound b;
    b.tape = &tape;
    b.dropout_rng = config_.dropout > 0.0 ? dropout_rng : nullptr;
    b.params.reserve(tensors_.size());
    for (std::size_t k = 0; k < tensors_.size(); ++k) {
        b.params.push_back(tape.parameter(tensors_[k].value, grads ? &(*grads)[k] : nullptr));
    }
    return b;
}

template <class Real>
Var Transformer<Real>::dropout(Bound& b, Var x) const {
    if (!b.dropout_rng) return x;
    const auto& v = b.tape->value(x);
    const double p = config_.dropout;
    const Real keep = static_cast<Real>(1.0 / (1.0 - p));
    Matrix<Real> m(v.rows, v.cols);
    // Two 32-bit uniforms per draw; an element drops when its uniform is
    // below p * 2^32.
    const auto threshold = static_cast<std::uint64_t>(std::ldexp(p, 32));
    std::uint64_t bits = 0;
    for (std::size_t q = 0; q < m.size(); ++q) {
        if (q % 2 == 0) bits = (*b.dropout_rng)();
        const std::uint64_t u = q % 2 == 0 ? bits & 0xffffffffu : bits >> 32;
        m.data[q] = u < threshold ? Real(0) : keep;
    }
    return ag::mask(*b.tape, x, std::move(m));
}

template <class Real>
Var Transformer<Real>::norm(Bound& b, const Norm& n, Var x) const {
    return ag::layer_norm(*b.tape, x, b.params[n.gain], b.params[n.bias]);
}

template <class Real>
Var Transformer<Real>::attention_block(Bound& b, const Attention& a, Var x, Var memory,
                                       const std::vector<AttentionSegment>& segments) const {
    auto& t = *b.tape;
    const auto& p = b.params;
    const Var q = ag::linear(t, x, p[a.wq], p[a.bq]);
    const Var k = ag::linear(t, memory, p[a.wk], p[a.bk]);
    const Var v = ag::linear(t, memory, p[a.wv], p[a.bv]);
    const Var o = ag::attention(t, q, k, v, config_.n_heads, segments);
    return ag::linear(t, o, p[a.wo], p[a.bo]);
}

template <class Real>
Var Transformer<Real>::ffn_block(Bound& b, const Ffn& f, Var x) const {
    auto& t = *b.tape;
    const auto& p = b.params;
    const Var h = ag::relu(t, ag::linear(t, x, p[f.w1], p[f.b1]));
    return ag::linear(t, h, p[f.w2], p[f.b2]);
}

template <class Real>
Var Transformer<Real>::encode(Bound& b, std::span<const TokenId> source) const {
    const std::vector<TokenId> one(source.begin(), source.end());
    std::vector<std::size_t> offsets;
    return encode(b, std::span<const std::vector<TokenId>>(&one, 1), offsets);
}

template <class Real>
Var Transformer<Real>::encode(Bound& b, std::span<const std::vector<TokenId>> sources,
                              std::vector<std::size_t>& offsets) const {
    if (sources.empty()) throw Error("no source sequences");
    std::vector<TokenId> ids;
    std::vector<std::size_t> pos;
    std::vector<AttentionSegment> segments;
    offsets.assign(1, 0);
    for (const auto& source : sources) {
        if (source.empty()) throw Error("empty source sequence");
        if (source.size() > config_.max_len) {
            throw Error("source length " + std::to_string(source.size()) + " exceeds max_len " +
                        std::to_string(config_.max_len));
        }
        const std::size_t begin = ids.size();
        for (std::size_t k = 0; k < source.size(); ++k) {
            if (source[k] < 0 || static_cast<std::size_t>(source[k]) >= vocab_) {
                throw Error("source token id out of range");
            }
            ids.push_back(source[k]);
            pos.push_back(k);
        }
        segments.push_back({begin, ids.size(), begin, ids.size()});
        offsets.push_back(ids.size());
    }
    auto& t = *b.tape;
    const Real scale = static_cast<Real>(std::sqrt(static_cast<double>(config_.embed_dim)));
    Var x = ag::scale(t, ag::embed(t, b.params[src_embed_], std::span<const TokenId>(ids)), scale);
    x = ag::add(t, x, t.constant(positions_matrix<Real>(pos, config_.embed_dim)));
    x = dropout(b, x);
    for (const auto& layer : encoder_) {
        const Var h = norm(b, layer.ln1, x);
        x = ag::add(t, x, dropout(b, attention_block(b, layer.self, h, h, segments)));
        const Var g = norm(b, layer.ln2, x);
        x = ag::add(t, x, dropout(b, ffn_block(b, layer.ffn, g)));
    }
    return norm(b, encoder_norm_, x);
}

template <class Real>
typename Transformer<Real>::Heads Transformer<Real>::decode(Bound& b, Var memory,
                                                            std::span<const DecodeState> states) const {
    const std::vector<std::pair<std::size_t, std::size_t>> rows(states.size(), {0, b.tape->value(memory).rows});
    return decode(b, memory, states, rows);
}

template <class Real>
typename Transformer<Real>::Heads Transformer<Real>::decode(
    Bound& b, Var memory, std::span<const DecodeState> states,
    std::span<const std::pair<std::size_t, std::size_t>> memory_rows) const {
    if (states.empty()) throw Error("no states to decode");
    if (memory_rows.size() != states.size()) throw Error("one memory range per state is required");
    auto& t = *b.tape;
    const std::size_t src_len = t.value(memory).rows;
    const auto cls = [&](ClsToken c) { return static_cast<TokenId>(vocab_ + c); };

    std::vector<TokenId> ids;
    std::vector<std::int32_t> sides;
    std::vector<std::size_t> pos;
    std::vector<AttentionSegment> self_segments;
    std::vector<AttentionSegment> cross_segments;
    std::vector<std::size_t> join_rows, order_rows, left_rows, right_rows;
    auto push = [&](TokenId id, std::int32_t side, std::size_t p) {
        ids.push_back(id);
        sides.push_back(side);
        pos.push_back(p);
    };
    auto check_token = [&](TokenId id) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab_) throw Error("target token id out of range");
    };
    for (std::size_t k = 0; k < states.size(); ++k) {
        const auto& s = states[k];
        const auto [mem_begin, mem_end] = memory_rows[k];
        if (mem_begin >= mem_end || mem_end > src_len) throw Error("memory range out of bounds");
        if (s.length() > config_.max_len) {
            throw Error("state length " + std::to_string(s.length()) + " exceeds max_len " +
                        std::to_string(config_.max_len));
        }
        const std::size_t begin = ids.size();
        join_rows.push_back(ids.size());
        push(cls(kJoinCls), kClsStream, kNoPosition);
        order_rows.push_back(ids.size());
        push(cls(kOrderCls), kClsStream, kNoPosition);
        push(kBos, kPrefixStream, 0);
        for (std::size_t k = 0; k < s.prefix.size(); ++k) {
            check_token(s.prefix[k]);
            push(s.prefix[k], kPrefixStream, k + 1);
        }
        left_rows.push_back(ids.size());
        push(cls(kLeftCls), kClsStream, s.prefix.size() + 1);
        right_rows.push_back(ids.size());
        push(cls(kRightCls), kClsStream, s.suffix.size() + 1);
        const std::size_t j = s.suffix.size();
        for (std::size_t q = 0; q < j; ++q) {
            check_token(s.suffix[q]);
            push(s.suffix[q], kSuffixStream, j - q);
        }
        push(kEos, kSuffixStream, 0);
        self_segments.push_back({begin, ids.size(), begin, ids.size()});
        cross_segments.push_back({begin, ids.size(), mem_begin, mem_end});
    }

    const Real scale = static_cast<Real>(std::sqrt(static_cast<double>(config_.embed_dim)));
    Var x = ag::scale(t, ag::embed(t, b.params[tgt_embed_], std::span<const TokenId>(ids)), scale);
    x = ag::add(t, x, ag::embed(t, b.params[side_embed_], std::span<const std::int32_t>(sides)));
    x = ag::add(t, x, t.constant(positions_matrix<Real>(pos, config_.embed_dim)));
    x = dropout(b, x);
    // Only the class rows reach the heads, so the last layer computes just
    // those rows (as queries; keys still span the whole state).
    std::vector<std::size_t> cls_rows;
    std::vector<AttentionSegment> last_self, last_cross;
    for (std::size_t k = 0; k < states.size(); ++k) {
        cls_rows.insert(cls_rows.end(), {join_rows[k], order_rows[k], left_rows[k], right_rows[k]});
        last_self.push_back({4 * k, 4 * k + 4, self_segments[k].k_begin, self_segments[k].k_end});
        last_cross.push_back({4 * k, 4 * k + 4, cross_segments[k].k_begin, cross_segments[k].k_end});
    }
    for (std::size_t l = 0; l < decoder_.size(); ++l) {
        const auto& layer = decoder_[l];
        const bool last = l + 1 == decoder_.size();
        const Var h = norm(b, layer.ln1, x);
        const Var q = last ? ag::select_rows(t, h, cls_rows) : h;
        if (last) x = ag::select_rows(t, x, cls_rows);
        x = ag::add(t, x, dropout(b, attention_block(b, layer.self, q, h, last ? last_self : self_segments)));
        const Var c = norm(b, layer.ln2, x);
        x = ag::add(t, x, dropout(b, attention_block(b, layer.cross, c, memory, last ? last_cross : cross_segments)));
        const Var g = norm(b, layer.ln3, x);
        x = ag::add(t, x, dropout(b, ffn_block(b, layer.ffn, g)));
    }
    x = norm(b, decoder_norm_, x);
    auto every_fourth = [&](std::size_t offset) {
        std::vector<std::size_t> rows(states.size());
        for (std::size_t k = 0; k < rows.size(); ++k) rows[k] = 4 * k + offset;
        return rows;
    };
    const auto& p = b.params;
    Heads heads;
    heads.join = ag::linear(t, ag::select_rows(t, x, every_fourth(0)), p[join_w_], p[join_b_]);
    heads.order = ag::linear(t, ag::select_rows(t, x, every_fourth(1)), p[order_w_], p[order_b_]);
    heads.left = ag::linear(t, ag::select_rows(t, x, every_fourth(2)), p[left_w_], p[left_b_]);
    heads.right = ag::linear(t, ag::select_rows(t, x, every_fourth(3)), p[right_w_], p[right_b_]);
    return heads;
}

template class Transformer<float>;
template class Transformer<double>;

// ---------------------------------------------------------------------------
// ModelScorer

template <class Real>
ModelScorer<Real>::ModelScorer(const Transformer<Real>& model, std::span<const TokenId> source, OrderHead order_head,
                               double order_temperature)
    : model_(model), order_head_(order_head), temperature_(order_temperature) {
    if (!(order_temperature >= 1.0)) throw Error("order temperature must be >= 1");
    Tape<Real> tape(false);
    auto bound = model_.bind(tape);
    memory_ = tape.value(model_.encode(bound, source));
}

template <class Real>
bool ModelScorer<Real>::can_emit(TokenId t) const {
    return t > kSep && static_cast<std::size_t>(t) < model_.vocab_size();
}

template <class Real>
std::vector<LocalScores> ModelScorer<Real>::score_chunk(std::span<const DecodeState> states) const {
    Tape<Real> tape(false);
    auto bound = model_.bind(tape);
    const Var memory = tape.parameter(memory_, nullptr);
    const auto heads = model_.decode(bound, memory, states);
    const auto& left = tape.value(heads.left);
    const auto& right = tape.value(heads.right);
    const auto& order = tape.value(heads.order);
    const auto& join = tape.value(heads.join);
    const std::size_t v = model_.vocab_size();

    std::vector<LocalScores> out(states.size());
    std::vector<double> row(v);
    for (std::size_t s = 0; s < states.size(); ++s) {
        auto& sc = out[s];
        for (std::size_t c = 0; c < v; ++c) row[c] = static_cast<double>(left(s, c));
        log_softmax_row(row.data(), v, sc.left_token_logp);
        for (std::size_t c = 0; c < v; ++c) row[c] = static_cast<double>(right(s, c));
        log_softmax_row(row.data(), v, sc.right_token_logp);
        if (order_head_ == OrderHead::learned) {
            std::tie(sc.order_logp_left, sc.order_logp_right) =
                log_softmax2(static_cast<double>(order(s, 0)) / temperature_,
                             static_cast<double>(order(s, 1)) / temperature_);
        } else {
            sc.order_logp_left = sc.order_logp_right = std::log(0.5);
        }
        std::tie(sc.join_logp, sc.not_join_logp) =
            log_softmax2(static_cast<double>(join(s, 0)), static_cast<double>(join(s, 1)));
    }
    return out;
}

template <class Real>
LocalScores ModelScorer<Real>::score(const DecodeState& state) const {
    check_length(state);
    return score_chunk(std::span<const DecodeState>(&state, 1)).front();
}

template <class Real>
std::vector<LocalScores> ModelScorer<Real>::score_batch(std::span<const DecodeState> states) const {
    for (const auto& s : states) check_length(s);
    std::vector<LocalScores> out(states.size());
    const std::size_t chunks = (states.size() + kScoreChunk - 1) / kScoreChunk;
    std::vector<std::exception_ptr> errors(chunks);
    auto run = [&](std::size_t c) {
        try {
            const std::size_t begin = c * kScoreChunk;
            const std::size_t end = std::min(states.size(), begin + kScoreChunk);
            auto part = score_chunk(states.subspan(begin, end - begin));
            std::move(part.begin(), part.end(), out.begin() + static_cast<std::ptrdiff_t>(begin));
        } catch (...) {
            errors[c] = std::current_exception();
        }
    };
    const int threads = kernels::thread_count();
#ifdef _OPENMP
    if (threads > 1 && chunks > 1 && !omp_in_parallel()) {
        const auto n = static_cast<std::ptrdiff_t>(chunks);
#pragma omp parallel for schedule(dynamic) num_threads(threads)
        for (std::ptrdiff_t c = 0; c < n; ++c) run(static_cast<std::size_t>(c));
    } else {
        for (std::size_t c = 0; c < chunks; ++c) run(c);
    }
#else
    (void)threads;
    for (std::size_t c = 0; c < chunks; ++c) run(c);
#endif
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return out;
}

template class ModelScorer<float>;
template class ModelScorer<double>;

// ---------------------------------------------------------------------------
// Losses

template <class Real>
std::vector<std::vector<Var>> example_losses(const Transformer<Real>& model, typename Transformer<Real>::Bound& bound,
                                             std::span<const Example> examples,
                                             std::span<const std::vector<LossSpec>> specs) {
    using losses::Objective;
    if (examples.size() != specs.size()) throw Error("one spec list per example is required");
    if (examples.empty()) return {};

    std::vector<std::vector<TokenId>> sources;
    std::vector<DecodeState> states;
    std::vector<std::size_t> state_source;
    // row_of[e][cell] is the decoder row of lattice cell `cell` of example e.
    std::vector<std::vector<std::ptrdiff_t>> row_of(examples.size());
    for (std::size_t e = 0; e < examples.size(); ++e) {
        const auto& form = examples[e].form_tokens;
        const std::size_t n = form.size();
        if (n == 0) throw Error("target must contain at least one token");
        sources.push_back(examples[e].source());
        auto& rows = row_of[e];
        rows.assign(dp::cell_count(n), -1);
        auto want = [&](std::size_t i, std::size_t j) {
            auto& r = rows[dp::cell_index(i, j)];
            if (r < 0) {
                r = static_cast<std::ptrdiff_t>(states.size());
                states.push_back(lattice_state(form, i, j));
                state_source.push_back(e);
            }
        };
        bool need_lattice = false;
        for (const auto& s : specs[e]) need_lattice = need_lattice || s.objective == Objective::mml;
        if (need_lattice) {
            for (auto [i, j] : dp::lattice_cells(n)) want(i, j);
        }
        for (const auto& s : specs[e]) {
            if (s.objective == Objective::mml) continue;
            for (auto [p, q] : s.contexts.token_pairs) {
                if (p + q + 1 > n) throw Error("token context outside the target");
            }
            for (auto [i, j] : s.contexts.cells()) {
                if (i + j > n) throw Error("context outside the target");
                want(i, j);
            }
        }
    }

    auto& t = *bound.tape;
    std::vector<std::size_t> offsets;
    const Var memory = model.encode(bound, sources, offsets);
    std::vector<std::pair<std::size_t, std::size_t>> memory_rows;
    memory_rows.reserve(states.size());
    for (std::size_t e : state_source) memory_rows.emplace_back(offsets[e], offsets[e + 1]);
    const auto heads = model.decode(bound, memory, states, memory_rows);
    const Var left = ag::log_softmax(t, heads.left);
    const Var right = ag::log_softmax(t, heads.right);
    const Var join = ag::log_softmax(t, heads.join);
    Var order_learned;
    double order_learned_temperature = 0.0;

    std::vector<std::vector<Var>> out(examples.size());
    for (std::size_t e = 0; e < examples.size(); ++e) {
        const auto& form = examples[e].form_tokens;
        const std::size_t n = form.size();
        auto row = [&](std::size_t i, std::size_t j) {
            return static_cast<std::size_t>(row_of[e][dp::cell_index(i, j)]);
        };
        for (const auto& spec : specs[e]) {
            if (spec.objective != Objective::mml) {
                const auto& c = spec.contexts;
                const Real tw = c.token_pairs.empty() ? Real(0) : Real(-1) / Real(3 * c.token_pairs.size());
                const Real jw = c.join_pairs.empty() ? Real(0) : Real(-1) / Real(3 * c.join_pairs.size());
                std::vector<Pick<Real>> lp, rp, jp;
                for (auto [p, q] : c.token_pairs) {
                    lp.push_back({row(p, q), static_cast<std::size_t>(form[p]), tw});
                    rp.push_back({row(p, q), static_cast<std::size_t>(form[n - 1 - q]), tw});
                }
                for (auto [i, j] : c.join_pairs) jp.push_back({row(i, j), i + j == n ? 0u : 1u, jw});
                const Var tokens =
                    ag::add(t, ag::pick_sum(t, left, std::move(lp)), ag::pick_sum(t, right, std::move(rp)));
                out[e].push_back(ag::add(t, tokens, ag::pick_sum(t, join, std::move(jp))));
                continue;
            }
            Var order;
            if (spec.order_head == OrderHead::learned) {
                // Shared across examples that use the same temperature.
                if (!order_learned.valid() || order_learned_temperature != spec.order_temperature) {
                    Var logits = heads.order;
                    if (spec.order_temperature != 1.0) {
                        logits = ag::scale(t, logits, static_cast<Real>(1.0 / spec.order_temperature));
                    }
                    order_learned = ag::log_softmax(t, logits);
                    order_learned_temperature = spec.order_temperature;
                }
                order = order_learned;
            } else {
                order = t.constant(Matrix<Real>(states.size(), 2, static_cast<Real>(std::log(0.5))));
            }
            const TapeLogSemiring<Real> sr{&t, t.constant(Matrix<Real>(1, 1))};
            auto step = [&](Side side, std::size_t i, std::size_t j) {
                const std::size_t r = row(i, j);
                const bool is_left = side == Side::L;
                const TokenId target = is_left ? form[i] : form[n - 1 - j];
                const Var o = ag::pick(t, order, r, is_left ? 0u : 1u);
                const Var tok = ag::pick(t, is_left ? left : right, r, static_cast<std::size_t>(target));
                return ag::add(t, o, tok);
            };
            auto join_term = [&](std::size_t i, std::size_t j) {
                return ag::pick(t, join, row(i, j), i + j == n ? 0u : 1u);
            };
            const Var total = dp::forward_recurrence(n, sr, step, join_term);
            out[e].push_back(ag::scale(t, total, Real(-1)));
        }
    }
    return out;
}

template std::vector<std::vector<Var>> example_losses<float>(const Transformer<float>&, Transformer<float>::Bound&,
                                                             std::span<const Example>,
                                                             std::span<const std::vector<LossSpec>>);
template std::vector<std::vector<Var>> example_losses<double>(const Transformer<double>&,
                                                              Transformer<double>::Bound&, std::span<const Example>,
                                                              std::span<const std::vector<LossSpec>>);

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t step, std::uint64_t index, std::uint64_t stream) {
    std::uint64_t h = splitmix(seed);
    h = splitmix(h ^ step);
    h = splitmix(h ^ index);
    return splitmix(h ^ stream);
}

LossSpec make_loss_spec(const BatchObjective& objective, const Example& example, std::uint64_t seed,
                        std::uint64_t step, std::size_t index) {
    LossSpec spec;
    spec.objective = objective.objective;
    spec.order_head = objective.order_head;
    spec.order_temperature = objective.order_temperature;
    const std::size_t n = example.form_tokens.size();
    switch (objective.objective) {
        case losses::Objective::xh:
            spec.contexts = losses::full_context_set(n, objective.context_mode);
            break;
        case losses::Objective::xh_rand: {
            std::mt19937_64 rng(mix_seed(seed, step, index, 1));
            spec.contexts = losses::xh_rand_context_set(n, rng);
            break;
        }
        case losses::Objective::mml:
            break;
    }
    return spec;
}

template <class Real>
std::vector<Matrix<Real>> zeros_like(const Transformer<Real>& model) {
    std::vector<Matrix<Real>> out;
    out.reserve(model.tensors().size());
    for (const auto& t : model.tensors()) out.emplace_back(t.value.rows, t.value.cols);
    return out;
}

template std::vector<Matrix<float>> zeros_like<float>(const Transformer<float>&);
template std::vector<Matrix<double>> zeros_like<double>(const Transformer<double>&);

template <class Real>
double loss_and_gradients(const Transformer<Real>& model, std::span<const Example> batch,
                          const BatchObjective& objective, std::uint64_t step, std::uint64_t seed, bool train_mode,
                          std::vector<Matrix<Real>>& grads) {
    if (batch.empty()) throw Error("empty batch");
    grads = zeros_like(model);
    const std::size_t count = batch.size();
    const std::size_t groups = (count + kExamplesPerTape - 1) / kExamplesPerTape;
    const int threads = kernels::thread_count();
    // Groups in flight at once; each needs its own gradient buffers.
    const std::size_t wave = static_cast<std::size_t>(std::max(1, threads));
    const Real weight = Real(1) / static_cast<Real>(count);
    std::vector<double> values(count, 0.0);
    std::vector<std::exception_ptr> errors(groups);
    std::vector<std::vector<Matrix<Real>>> local(std::min(wave, groups));

    auto run = [&](std::size_t g, std::vector<Matrix<Real>>& buf) {
        try {
            for (auto& m : buf) std::fill(m.data.begin(), m.data.end(), Real(0));
            const std::size_t begin = g * kExamplesPerTape;
            const std::size_t end = std::min(count, begin + kExamplesPerTape);
            const auto examples = batch.subspan(begin, end - begin);
            std::vector<std::vector<LossSpec>> specs;
            for (std::size_t e = begin; e < end; ++e) specs.push_back({make_loss_spec(objective, batch[e], seed, step, e)});
            Tape<Real> tape(true);
            std::mt19937_64 rng(mix_seed(seed, step, g, 0));
            auto bound = model.bind(tape, &buf, train_mode ? &rng : nullptr);
            const auto vars = example_losses(model, bound, examples, specs);
            std::vector<Var> roots;
            for (std::size_t k = 0; k < vars.size(); ++k) {
                const double v = static_cast<double>(tape.scalar(vars[k][0]));
                if (!std::isfinite(v)) throw Error("non-finite loss for batch example " + std::to_string(begin + k));
                values[begin + k] = v;
                roots.push_back(vars[k][0]);
            }
            const std::vector<Real> weights(roots.size(), weight);
            tape.backward(ag::weighted_sum(tape, std::span<const Var>(roots), std::span<const Real>(weights)));
        } catch (...) {
            errors[g] = std::current_exception();
        }
    };

    for (std::size_t first = 0; first < groups; first += wave) {
        const std::size_t last = std::min(groups, first + wave);
        for (std::size_t g = first; g < last; ++g) {
            auto& buf = local[g - first];
            if (buf.empty()) buf = zeros_like(model);
        }
#ifdef _OPENMP
        if (threads > 1 && last - first > 1 && !omp_in_parallel()) {
            const auto lo = static_cast<std::ptrdiff_t>(first);
            const auto hi = static_cast<std::ptrdiff_t>(last);
#pragma omp parallel for schedule(dynamic) num_threads(threads)
            for (std::ptrdiff_t g = lo; g < hi; ++g) {
                run(static_cast<std::size_t>(g), local[static_cast<std::size_t>(g) - first]);
            }
        } else {
            for (std::size_t g = first; g < last; ++g) run(g, local[g - first]);
        }
#else
        for (std::size_t g = first; g < last; ++g) run(g, local[g - first]);
#endif
        for (std::size_t g = first; g < last; ++g) {
            if (errors[g]) std::rethrow_exception(errors[g]);
            const auto& buf = local[g - first];
            for (std::size_t k = 0; k < grads.size(); ++k) {
                auto& dst = grads[k].data;
                const auto& src = buf[k].data;
                for (std::size_t q = 0; q < dst.size(); ++q) dst[q] += src[q];
            }
        }
    }
    double total = 0.0;
    for (double v : values) total += v;
    return total / static_cast<double>(count);
}

template double loss_and_gradients<float>(const Transformer<float>&, std::span<const Example>,
                                          const BatchObjective&, std::uint64_t, std::uint64_t, bool,
                                          std::vector<Matrix<float>>&);
template double loss_and_gradients<double>(const Transformer<double>&, std::span<const Example>,
                                           const BatchObjective&, std::uint64_t, std::uint64_t, bool,
                                           std::vector<Matrix<double>>&);

template <class Real>
std::vector<double> batch_losses(const Transformer<Real>& model, std::span<const Example> batch,
                                 std::span<const BatchObjective> objectives, std::uint64_t step,
                                 std::uint64_t seed) {
    if (batch.empty()) throw Error("empty batch");
    std::vector<std::vector<LossSpec>> specs(batch.size());
    for (std::size_t e = 0; e < batch.size(); ++e) {
        for (const auto& o : objectives) specs[e].push_back(make_loss_spec(o, batch[e], seed, step, e));
    }
    Tape<Real> tape(false);
    auto bound = model.bind(tape);
    const auto vars = example_losses(model, bound, batch, specs);
    std::vector<double> totals(objectives.size(), 0.0);
    for (const auto& per_example : vars) {
        for (std::size_t k = 0; k < per_example.size(); ++k) totals[k] += static_cast<double>(tape.scalar(per_example[k]));
    }
    for (double& v : totals) v /= static_cast<double>(batch.size());
    return totals;
}

template std::vector<double> batch_losses<float>(const Transformer<float>&, std::span<const Example>,
                                                 std::span<const BatchObjective>, std::uint64_t, std::uint64_t);
template std::vector<double> batch_losses<double>(const Transformer<double>&, std::span<const Example>,
                                                  std::span<const BatchObjective>, std::uint64_t, std::uint64_t);

}  // namespace bidiseq::model
