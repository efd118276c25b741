#pragma once

// Character-level encoder-decoder transformer used as a local scorer.
//
// The decoder input for a state with prefix y_1..y_i and suffix s_1..s_j is
//   cJ, cO, $, y_1..y_i, cL2R, cR2L, s_1..s_j, #
// with full self-attention inside the state and cross-attention to the
// encoded source. Join and order heads read the cJ and cO rows; the left and
// right token heads read cL2R and cR2L.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bidiseq/autodiff.hpp"
#include "bidiseq/core.hpp"
#include "bidiseq/losses.hpp"
#include "bidiseq/scorer.hpp"

namespace bidiseq::model {

enum class SizePreset { S, M, L, custom };

SizePreset parse_preset(std::string_view name);
std::string_view preset_name(SizePreset preset);

struct ModelConfig {
    SizePreset preset = SizePreset::S;
    std::size_t embed_dim = 64;
    std::size_t ffn_dim = 256;
    std::size_t n_layers = 2;
    std::size_t n_heads = 2;
    double learning_rate = 0.005;
    double dropout = 0.3;
    // Longest source sequence and longest prefix+suffix the model accepts.
    std::size_t max_len = 64;

    static ModelConfig from_preset(SizePreset preset);
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// Whether the order distribution comes from the order head or is fixed at 1/2
// (the cross-entropy models ignore their order head).
enum class OrderHead { learned, uniform };

OrderHead default_order_head(losses::Objective objective);

template <class Real>
struct NamedTensor {
    std::string name;
    Matrix<Real> value;
};

template <class Real>
class Transformer {
public:
    // Glorot-uniform weights, zero biases, unit layer-norm gains.
    Transformer(const ModelConfig& config, std::size_t vocab_size, std::uint64_t seed);
    // Adopts existing tensors; names and shapes must match the layout exactly.
    Transformer(const ModelConfig& config, std::size_t vocab_size, std::vector<NamedTensor<Real>> tensors);

    const ModelConfig& config() const { return config_; }
    std::size_t vocab_size() const { return vocab_; }
    std::size_t parameter_count() const;

    const std::vector<NamedTensor<Real>>& tensors() const { return tensors_; }
    std::vector<NamedTensor<Real>>& tensors() { return tensors_; }

    template <class Other>
    Transformer<Other> cast() const {
        std::vector<NamedTensor<Other>> out;
        out.reserve(tensors_.size());
        for (const auto& t : tensors_) {
            Matrix<Other> m(t.value.rows, t.value.cols);
            for (std::size_t k = 0; k < m.size(); ++k) m.data[k] = static_cast<Other>(t.value.data[k]);
            out.push_back({t.name, std::move(m)});
        }
        return Transformer<Other>(config_, vocab_, std::move(out));
    }

    // Parameters placed on one tape. With `grads` each parameter's gradient
    // accumulates into the matching buffer; with `dropout_rng` dropout is on.
    struct Bound {
        Tape<Real>* tape = nullptr;
        std::vector<Var> params;
        std::mt19937_64* dropout_rng = nullptr;
    };
    Bound bind(Tape<Real>& tape, std::vector<Matrix<Real>>* grads = nullptr,
               std::mt19937_64* dropout_rng = nullptr) const;

    // One row per source token.
    Var encode(Bound& b, std::span<const TokenId> source) const;
    // Several sources in one pass; source k occupies rows [offsets[k], offsets[k+1]).
    Var encode(Bound& b, std::span<const std::vector<TokenId>> sources, std::vector<std::size_t>& offsets) const;

    // Raw logits, one row per state: left/right are (states x vocab), order
    // and join are (states x 2). Column 0 is L for order and "join" for join.
    struct Heads {
        Var left;
        Var right;
        Var order;
        Var join;
    };
    Heads decode(Bound& b, Var memory, std::span<const DecodeState> states) const;
    // State k cross-attends to memory rows [memory_rows[k].first, memory_rows[k].second).
    Heads decode(Bound& b, Var memory, std::span<const DecodeState> states,
                 std::span<const std::pair<std::size_t, std::size_t>> memory_rows) const;

private:
    struct Attention {
        std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
    };
    struct Norm {
        std::size_t gain, bias;
    };
    struct Ffn {
        std::size_t w1, b1, w2, b2;
    };
    struct EncoderLayer {
        Norm ln1;
        Attention self;
        Norm ln2;
        Ffn ffn;
    };
    struct DecoderLayer {
        Norm ln1;
        Attention self;
        Norm ln2;
        Attention cross;
        Norm ln3;
        Ffn ffn;
    };

    void build_layout();
    std::size_t add_tensor(const std::string& name, std::size_t rows, std::size_t cols);
    void initialize(std::uint64_t seed);

    Var dropout(Bound& b, Var x) const;
    Var attention_block(Bound& b, const Attention& a, Var x, Var memory,
                        const std::vector<AttentionSegment>& segments) const;
    Var ffn_block(Bound& b, const Ffn& f, Var x) const;
    Var norm(Bound& b, const Norm& n, Var x) const;

    ModelConfig config_;
    std::size_t vocab_;
    std::vector<NamedTensor<Real>> tensors_;
    std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> layout_;

    std::size_t src_embed_ = 0, tgt_embed_ = 0, side_embed_ = 0;
    std::vector<EncoderLayer> encoder_;
    Norm encoder_norm_{};
    std::vector<DecoderLayer> decoder_;
    Norm decoder_norm_{};
    std::size_t left_w_ = 0, left_b_ = 0, right_w_ = 0, right_b_ = 0;
    std::size_t order_w_ = 0, order_b_ = 0, join_w_ = 0, join_b_ = 0;
};

// A transformer bound to one source sequence. The source is encoded once at
// construction; every score() call reruns the full decoder for its state.
template <class Real>
class ModelScorer final : public Scorer {
public:
    ModelScorer(const Transformer<Real>& model, std::span<const TokenId> source, OrderHead order_head,
                double order_temperature = 1.0);

    std::size_t vocab_size() const override { return model_.vocab_size(); }
    std::size_t max_length() const override { return model_.config().max_len; }
    // PAD, BOS, EOS and SEP are never generated.
    bool can_emit(TokenId t) const override;
    LocalScores score(const DecodeState& state) const override;
    std::vector<LocalScores> score_batch(std::span<const DecodeState> states) const override;

    const Matrix<Real>& memory() const { return memory_; }

private:
    std::vector<LocalScores> score_chunk(std::span<const DecodeState> states) const;

    const Transformer<Real>& model_;
    Matrix<Real> memory_;
    OrderHead order_head_;
    double temperature_;
};

// What one loss evaluation computes. `contexts` is used by the cross-entropy
// objectives and ignored by MML.
struct LossSpec {
    losses::Objective objective = losses::Objective::xh;
    losses::ContextSet contexts;
    OrderHead order_head = OrderHead::learned;
    double order_temperature = 1.0;
};

// Loss nodes for several examples (out[e][k] is specs[e][k] on example e),
// computed by one encoder pass and one decoder pass over the union of the
// states the specs need.
template <class Real>
std::vector<std::vector<Var>> example_losses(const Transformer<Real>& model, typename Transformer<Real>::Bound& bound,
                                             std::span<const Example> examples,
                                             std::span<const std::vector<LossSpec>> specs);

// Examples sharing one tape in loss_and_gradients. Fixed, so results do not
// depend on the thread count.
inline constexpr std::size_t kExamplesPerTape = 4;

// Settings shared by every example of a batch.
struct BatchObjective {
    losses::Objective objective = losses::Objective::xh;
    losses::ContextMode context_mode = losses::ContextMode::full;
    OrderHead order_head = OrderHead::uniform;
    double order_temperature = 1.0;
};

// Deterministic per-(seed, step, example, stream) generator seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t step, std::uint64_t index, std::uint64_t stream);

// The loss spec example `index` uses at `step` (xH-Rand draws its contexts
// from mix_seed(seed, step, index, 1)).
LossSpec make_loss_spec(const BatchObjective& objective, const Example& example, std::uint64_t seed,
                        std::uint64_t step, std::size_t index);

// Mean batch loss and its gradient (written to `grads`, shaped like the
// model tensors). Dropout masks come from mix_seed(seed, step, group, 0) when
// `train_mode`. Groups of kExamplesPerTape examples are differentiated
// independently and reduced in order, so the result does not depend on the
// thread count.
template <class Real>
double loss_and_gradients(const Transformer<Real>& model, std::span<const Example> batch,
                          const BatchObjective& objective, std::uint64_t step, std::uint64_t seed,
                          bool train_mode, std::vector<Matrix<Real>>& grads);

// Mean batch loss for several objectives at once, without gradients or
// dropout. Used by finite-difference checks.
template <class Real>
std::vector<double> batch_losses(const Transformer<Real>& model, std::span<const Example> batch,
                                 std::span<const BatchObjective> objectives, std::uint64_t step,
                                 std::uint64_t seed);

template <class Real>
std::vector<Matrix<Real>> zeros_like(const Transformer<Real>& model);

}  // namespace bidiseq::model
