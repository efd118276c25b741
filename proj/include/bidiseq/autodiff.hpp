#pragma once

// Tensor-level reverse-mode automatic differentiation.
//
// A Tape records every operation in creation order; since an operation can
// only consume earlier nodes, walking the tape backwards is a reverse
// topological order and each node's backward step runs exactly once.
// Parameter leaves write their gradients straight into caller-owned buffers.

#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

namespace bidiseq {

template <class Real>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<Real> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, Real fill = Real(0)) : rows(r), cols(c), data(r * c, fill) {}

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
    Real& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    Real operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    Real* row(std::size_t r) { return data.data() + r * cols; }
    const Real* row(std::size_t r) const { return data.data() + r * cols; }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

struct Var {
    std::uint32_t id = UINT32_MAX;
    bool valid() const { return id != UINT32_MAX; }
};

template <class Real>
class Tape {
public:
    explicit Tape(bool record_gradients = true) : record_(record_gradients) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return record_; }

    // A parameter leaf viewing `value` (which must outlive the tape). Its
    // gradient accumulates into `grad_sink` when recording.
    Var parameter(const Matrix<Real>& value, Matrix<Real>* grad_sink);
    Var constant(Matrix<Real> value);

    const Matrix<Real>& value(Var v) const;
    Real scalar(Var v) const { return value(v).data.at(0); }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
    // Gradient buffer of a node, allocated (zeroed) on first use.
    Matrix<Real>& grad(Var v);

    // Runs the backward pass from a 1x1 root seeded with `seed`.
    void backward(Var root, Real seed = Real(1));

    std::size_t size() const { return nodes_.size(); }

    using BackwardFn = std::function<void(Tape&, Var self)>;
    // Records a computed value. `backward` is dropped when nothing upstream
    // needs gradients or recording is off.
    Var record(Matrix<Real> value, bool requires_grad, BackwardFn backward);

private:
    struct Node {
        Matrix<Real> own;
        const Matrix<Real>* view = nullptr;
        Matrix<Real> grad;
        Matrix<Real>* sink = nullptr;
        bool requires_grad = false;
        BackwardFn backward;
    };

    bool record_;
    std::vector<Node> nodes_;
};

// Row ranges of one attention block: queries [q_begin, q_end) attend to keys
// [k_begin, k_end). Blocks never interact.
struct AttentionSegment {
    std::size_t q_begin, q_end, k_begin, k_end;
};

// (row, col, weight) for weighted element sums.
template <class Real>
struct Pick {
    std::size_t row;
    std::size_t col;
    Real weight;
};

namespace ag {

template <class Real> Var matmul(Tape<Real>& t, Var a, Var b);
// x * w + b (b is 1 x n, broadcast over rows)
template <class Real> Var linear(Tape<Real>& t, Var x, Var w, Var b);
template <class Real> Var add(Tape<Real>& t, Var a, Var b);
template <class Real> Var scale(Tape<Real>& t, Var a, Real factor);
// Rows of `table` selected by ids.
template <class Real> Var embed(Tape<Real>& t, Var table, std::span<const std::int32_t> ids);
template <class Real> Var layer_norm(Tape<Real>& t, Var x, Var gain, Var bias, Real eps = Real(1e-5));
template <class Real> Var relu(Tape<Real>& t, Var x);
// Elementwise product with a constant mask (dropout).
template <class Real> Var mask(Tape<Real>& t, Var x, Matrix<Real> mask);
// Multi-head scaled dot-product attention restricted to segments.
template <class Real>
Var attention(Tape<Real>& t, Var q, Var k, Var v, std::size_t heads, std::vector<AttentionSegment> segments);
template <class Real> Var select_rows(Tape<Real>& t, Var x, std::vector<std::size_t> rows);
template <class Real> Var log_softmax(Tape<Real>& t, Var x);
// 1x1 sum of weight * x[row, col].
template <class Real> Var pick_sum(Tape<Real>& t, Var x, std::vector<Pick<Real>> picks);
template <class Real> Var pick(Tape<Real>& t, Var x, std::size_t row, std::size_t col);
// 1x1 log(exp(a) + exp(b)).
template <class Real> Var log_add_exp(Tape<Real>& t, Var a, Var b);
// 1x1 sum of weight * scalar node.
template <class Real> Var weighted_sum(Tape<Real>& t, std::span<const Var> xs, std::span<const Real> weights);

}  // namespace ag

// Log-domain semiring over tape scalars, for differentiating the DP.
template <class Real>
struct TapeLogSemiring {
    using Value = Var;
    Tape<Real>* tape;
    Var one_node;

    Value one() const { return one_node; }
    Value times(Value a, Value b) const { return ag::add(*tape, a, b); }
    Value plus(Value a, Value b) const { return ag::log_add_exp(*tape, a, b); }
};

}  // namespace bidiseq
