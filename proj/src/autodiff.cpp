#include "bidiseq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "bidiseq/error.hpp"
#include "bidiseq/kernels.hpp"

namespace bidiseq {

template <class Real>
Var Tape<Real>::parameter(const Matrix<Real>& value, Matrix<Real>* grad_sink) {
    Node node;
    node.view = &value;
    node.requires_grad = record_ && grad_sink != nullptr;
    node.sink = node.requires_grad ? grad_sink : nullptr;
    nodes_.push_back(std::move(node));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class Real>
Var Tape<Real>::constant(Matrix<Real> value) {
    Node node;
    node.own = std::move(value);
    nodes_.push_back(std::move(node));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class Real>
Var Tape<Real>::record(Matrix<Real> value, bool requires_grad, BackwardFn backward) {
    Node node;
    node.own = std::move(value);
    node.requires_grad = record_ && requires_grad;
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class Real>
const Matrix<Real>& Tape<Real>::value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.view ? *n.view : n.own;
}

template <class Real>
Matrix<Real>& Tape<Real>::grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.sink) return *n.sink;
    if (n.grad.empty()) {
        const auto& val = n.view ? *n.view : n.own;
        n.grad = Matrix<Real>(val.rows, val.cols);
    }
    return n.grad;
}

template <class Real>
void Tape<Real>::backward(Var root, Real seed) {
    if (!record_) throw Error("backward on a tape that does not record gradients");
    const auto& rv = value(root);
    if (rv.rows != 1 || rv.cols != 1) throw Error("backward root must be a scalar");
    if (!nodes_[root.id].requires_grad) return;
    grad(root).data[0] += seed;
    for (std::size_t i = root.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.backward && !n.grad.empty()) n.backward(*this, Var{static_cast<std::uint32_t>(i)});
    }
}

namespace ag {
namespace {

template <class Real>
void check(bool ok, const char* op, const std::string& what) {
    if (!ok) throw Error(std::string(op) + ": " + what);
}

}  // namespace

template <class Real>
Var matmul(Tape<Real>& t, Var a, Var b) {
    const auto& A = t.value(a);
    const auto& B = t.value(b);
    check<Real>(A.cols == B.rows, "matmul", "inner dimensions differ");
    Matrix<Real> C(A.rows, B.cols);
    kernels::gemm(A.data.data(), B.data.data(), C.data.data(), A.rows, A.cols, B.cols, false);
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.record(std::move(C), rg, [a, b](Tape<Real>& tp, Var self) {
        const auto& A = tp.value(a);
        const auto& B = tp.value(b);
        const auto& G = tp.grad(self);
        if (tp.requires_grad(a)) {
            Matrix<Real> bt(B.cols, B.rows);
            kernels::transpose(B.data.data(), bt.data.data(), B.rows, B.cols);
            kernels::gemm(G.data.data(), bt.data.data(), tp.grad(a).data.data(), G.rows, G.cols, A.cols, true);
        }
        if (tp.requires_grad(b)) {
            kernels::gemm_tn(A.data.data(), G.data.data(), tp.grad(b).data.data(), A.rows, A.cols, G.cols);
        }
    });
}

template <class Real>
Var linear(Tape<Real>& t, Var x, Var w, Var b) {
    const auto& X = t.value(x);
    const auto& W = t.value(w);
    const auto& Bv = t.value(b);
    check<Real>(X.cols == W.rows, "linear", "inner dimensions differ");
    check<Real>(Bv.rows == 1 && Bv.cols == W.cols, "linear", "bias shape");
    Matrix<Real> Y(X.rows, W.cols);
    for (std::size_t r = 0; r < Y.rows; ++r) std::copy(Bv.data.begin(), Bv.data.end(), Y.row(r));
    kernels::gemm(X.data.data(), W.data.data(), Y.data.data(), X.rows, X.cols, W.cols, true);
    const bool rg = t.requires_grad(x) || t.requires_grad(w) || t.requires_grad(b);
    return t.record(std::move(Y), rg, [x, w, b](Tape<Real>& tp, Var self) {
        const auto& X = tp.value(x);
        const auto& W = tp.value(w);
        const auto& G = tp.grad(self);
        if (tp.requires_grad(x)) {
            Matrix<Real> wt(W.cols, W.rows);
            kernels::transpose(W.data.data(), wt.data.data(), W.rows, W.cols);
            kernels::gemm(G.data.data(), wt.data.data(), tp.grad(x).data.data(), G.rows, G.cols, X.cols, true);
        }
        if (tp.requires_grad(w)) {
            kernels::gemm_tn(X.data.data(), G.data.data(), tp.grad(w).data.data(), X.rows, X.cols, G.cols);
        }
        if (tp.requires_grad(b)) {
            auto& gb = tp.grad(b);
            for (std::size_t r = 0; r < G.rows; ++r) {
                const Real* g = G.row(r);
                for (std::size_t c = 0; c < G.cols; ++c) gb.data[c] += g[c];
            }
        }
    });
}

template <class Real>
Var add(Tape<Real>& t, Var a, Var b) {
    const auto& A = t.value(a);
    const auto& B = t.value(b);
    check<Real>(A.same_shape(B), "add", "shape mismatch");
    Matrix<Real> C = A;
    for (std::size_t i = 0; i < C.size(); ++i) C.data[i] += B.data[i];
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.record(std::move(C), rg, [a, b](Tape<Real>& tp, Var self) {
        const auto& G = tp.grad(self);
        for (Var in : {a, b}) {
            if (!tp.requires_grad(in)) continue;
            auto& g = tp.grad(in);
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += G.data[i];
        }
    });
}

template <class Real>
Var scale(Tape<Real>& t, Var a, Real factor) {
    Matrix<Real> C = t.value(a);
    for (auto& v : C.data) v *= factor;
    return t.record(std::move(C), t.requires_grad(a), [a, factor](Tape<Real>& tp, Var self) {
        const auto& G = tp.grad(self);
        auto& g = tp.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += factor * G.data[i];
    });
}

template <class Real>
Var embed(Tape<Real>& t, Var table, std::span<const std::int32_t> ids) {
    const auto& E = t.value(table);
    Matrix<Real> Y(ids.size(), E.cols);
    for (std::size_t r = 0; r < ids.size(); ++r) {
        const auto id = static_cast<std::size_t>(ids[r]);
        check<Real>(ids[r] >= 0 && id < E.rows, "embed", "id out of range");
        std::copy(E.row(id), E.row(id) + E.cols, Y.row(r));
    }
    std::vector<std::int32_t> kept(ids.begin(), ids.end());
    return t.record(std::move(Y), t.requires_grad(table), [table, kept = std::move(kept)](Tape<Real>& tp, Var self) {
        const auto& G = tp.grad(self);
        auto& gE = tp.grad(table);
        for (std::size_t r = 0; r < kept.size(); ++r) {
            Real* dst = gE.row(static_cast<std::size_t>(kept[r]));
            const Real* src = G.row(r);
            for (std::size_t c = 0; c < G.cols; ++c) dst[c] += src[c];
        }
    });
}

template <class Real>
Var layer_norm(Tape<Real>& t, Var x, Var gain, Var bias, Real eps) {
    const auto& X = t.value(x);
    const auto& Gn = t.value(gain);
    const auto& Bs = t.value(bias);
    check<Real>(Gn.size() == X.cols && Bs.size() == X.cols, "layer_norm", "parameter shape");
    const std::size_t d = X.cols;
    const bool rg = t.requires_grad(x) || t.requires_grad(gain) || t.requires_grad(bias);
    Matrix<Real> Y(X.rows, d);
    Matrix<Real> xhat(rg ? X.rows : 0, rg ? d : 0);
    std::vector<Real> inv_std(rg ? X.rows : 0);
    const Real* g = Gn.data.data();
    const Real* bs = Bs.data.data();
    for (std::size_t r = 0; r < X.rows; ++r) {
        const Real* xr = X.row(r);
        Real mean = 0;
#pragma omp simd reduction(+ : mean)
        for (std::size_t c = 0; c < d; ++c) mean += xr[c];
        mean /= static_cast<Real>(d);
        Real var = 0;
#pragma omp simd reduction(+ : var)
        for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var /= static_cast<Real>(d);
        const Real is = Real(1) / std::sqrt(var + eps);
        Real* yr = Y.row(r);
#pragma omp simd
        for (std::size_t c = 0; c < d; ++c) yr[c] = (xr[c] - mean) * is * g[c] + bs[c];
        if (rg) {
            inv_std[r] = is;
            Real* hr = xhat.row(r);
#pragma omp simd
            for (std::size_t c = 0; c < d; ++c) hr[c] = (xr[c] - mean) * is;
        }
    }
    return t.record(std::move(Y), rg,
                    [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<Real>& tp, Var self) {
                        const auto& G = tp.grad(self);
                        const auto& Gn = tp.value(gain);
                        const std::size_t d = G.cols;
                        if (tp.requires_grad(gain) || tp.requires_grad(bias)) {
                            auto* gg = tp.requires_grad(gain) ? &tp.grad(gain) : nullptr;
                            auto* gb = tp.requires_grad(bias) ? &tp.grad(bias) : nullptr;
                            for (std::size_t r = 0; r < G.rows; ++r) {
                                for (std::size_t c = 0; c < d; ++c) {
                                    if (gg) gg->data[c] += G(r, c) * xhat(r, c);
                                    if (gb) gb->data[c] += G(r, c);
                                }
                            }
                        }
                        if (!tp.requires_grad(x)) return;
                        auto& gx = tp.grad(x);
                        std::vector<Real> dh(d);
                        for (std::size_t r = 0; r < G.rows; ++r) {
                            Real mean_dh = 0;
                            Real mean_dh_h = 0;
                            for (std::size_t c = 0; c < d; ++c) {
                                dh[c] = G(r, c) * Gn.data[c];
                                mean_dh += dh[c];
                                mean_dh_h += dh[c] * xhat(r, c);
                            }
                            mean_dh /= static_cast<Real>(d);
                            mean_dh_h /= static_cast<Real>(d);
                            for (std::size_t c = 0; c < d; ++c) {
                                gx(r, c) += inv_std[r] * (dh[c] - mean_dh - xhat(r, c) * mean_dh_h);
                            }
                        }
                    });
}

template <class Real>
Var relu(Tape<Real>& t, Var x) {
    Matrix<Real> Y = t.value(x);
    for (auto& v : Y.data) v = v > 0 ? v : Real(0);
    return t.record(std::move(Y), t.requires_grad(x), [x](Tape<Real>& tp, Var self) {
        const auto& X = tp.value(x);
        const auto& G = tp.grad(self);
        auto& gx = tp.grad(x);
        for (std::size_t i = 0; i < G.size(); ++i) {
            if (X.data[i] > 0) gx.data[i] += G.data[i];
        }
    });
}

template <class Real>
Var mask(Tape<Real>& t, Var x, Matrix<Real> m) {
    const auto& X = t.value(x);
    check<Real>(X.same_shape(m), "mask", "shape mismatch");
    Matrix<Real> Y = X;
    for (std::size_t i = 0; i < Y.size(); ++i) Y.data[i] *= m.data[i];
    return t.record(std::move(Y), t.requires_grad(x), [x, m = std::move(m)](Tape<Real>& tp, Var self) {
        const auto& G = tp.grad(self);
        auto& gx = tp.grad(x);
        for (std::size_t i = 0; i < G.size(); ++i) gx.data[i] += G.data[i] * m.data[i];
    });
}

template <class Real>
Var attention(Tape<Real>& t, Var q, Var k, Var v, std::size_t heads, std::vector<AttentionSegment> segments) {
    const auto& Q = t.value(q);
    const auto& K = t.value(k);
    const auto& V = t.value(v);
    check<Real>(Q.cols == K.cols && K.cols == V.cols && K.rows == V.rows, "attention", "shape mismatch");
    check<Real>(heads > 0 && Q.cols % heads == 0, "attention", "width not divisible by heads");
    const std::size_t d = Q.cols;
    const std::size_t dh = d / heads;
    const Real sc = Real(1) / std::sqrt(static_cast<Real>(dh));

    std::size_t prob_count = 0;
    for (const auto& s : segments) {
        check<Real>(s.q_begin <= s.q_end && s.q_end <= Q.rows && s.k_begin < s.k_end && s.k_end <= K.rows,
                    "attention", "segment out of range");
        prob_count += heads * (s.q_end - s.q_begin) * (s.k_end - s.k_begin);
    }
    std::vector<Real> probs(prob_count);
    Matrix<Real> O(Q.rows, d);

    std::size_t offset = 0;
    for (const auto& s : segments) {
        const std::size_t nk = s.k_end - s.k_begin;
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * dh;
            for (std::size_t r = s.q_begin; r < s.q_end; ++r) {
                Real* p = probs.data() + offset;
                offset += nk;
                const Real* qr = Q.row(r) + c0;
                Real hi = -std::numeric_limits<Real>::infinity();
                for (std::size_t c = 0; c < nk; ++c) {
                    const Real* kr = K.row(s.k_begin + c) + c0;
                    Real dot = 0;
#pragma omp simd reduction(+ : dot)
                    for (std::size_t e = 0; e < dh; ++e) dot += qr[e] * kr[e];
                    p[c] = dot * sc;
                    hi = std::max(hi, p[c]);
                }
                Real z = 0;
                for (std::size_t c = 0; c < nk; ++c) {
                    p[c] = std::exp(p[c] - hi);
                    z += p[c];
                }
                Real* orow = O.row(r) + c0;
                for (std::size_t c = 0; c < nk; ++c) {
                    p[c] /= z;
                    const Real* vr = V.row(s.k_begin + c) + c0;
                    for (std::size_t e = 0; e < dh; ++e) orow[e] += p[c] * vr[e];
                }
            }
        }
    }

    const bool rg = t.requires_grad(q) || t.requires_grad(k) || t.requires_grad(v);
    return t.record(std::move(O), rg,
                    [q, k, v, heads, sc, segments = std::move(segments), probs = std::move(probs)](Tape<Real>& tp,
                                                                                                    Var self) {
                        const auto& Q = tp.value(q);
                        const auto& K = tp.value(k);
                        const auto& V = tp.value(v);
                        const auto& G = tp.grad(self);
                        auto* gq = tp.requires_grad(q) ? &tp.grad(q) : nullptr;
                        auto* gk = tp.requires_grad(k) ? &tp.grad(k) : nullptr;
                        auto* gv = tp.requires_grad(v) ? &tp.grad(v) : nullptr;
                        const std::size_t dh = Q.cols / heads;
                        std::vector<Real> dp;
                        std::size_t offset = 0;
                        for (const auto& s : segments) {
                            const std::size_t nk = s.k_end - s.k_begin;
                            dp.resize(nk);
                            for (std::size_t h = 0; h < heads; ++h) {
                                const std::size_t c0 = h * dh;
                                for (std::size_t r = s.q_begin; r < s.q_end; ++r) {
                                    const Real* p = probs.data() + offset;
                                    offset += nk;
                                    const Real* gr = G.row(r) + c0;
                                    Real weighted = 0;
                                    for (std::size_t c = 0; c < nk; ++c) {
                                        const std::size_t kr = s.k_begin + c;
                                        const Real* vr = V.row(kr) + c0;
                                        Real acc = 0;
                                        for (std::size_t e = 0; e < dh; ++e) acc += gr[e] * vr[e];
                                        dp[c] = acc;
                                        weighted += acc * p[c];
                                        if (gv) {
                                            Real* gvr = gv->row(kr) + c0;
                                            for (std::size_t e = 0; e < dh; ++e) gvr[e] += p[c] * gr[e];
                                        }
                                    }
                                    const Real* qr = Q.row(r) + c0;
                                    Real* gqr = gq ? gq->row(r) + c0 : nullptr;
                                    for (std::size_t c = 0; c < nk; ++c) {
                                        const Real ds = p[c] * (dp[c] - weighted) * sc;
                                        const std::size_t kr = s.k_begin + c;
                                        const Real* krow = K.row(kr) + c0;
                                        if (gqr) {
                                            for (std::size_t e = 0; e < dh; ++e) gqr[e] += ds * krow[e];
                                        }
                                        if (gk) {
                                            Real* gkr = gk->row(kr) + c0;
                                            for (std::size_t e = 0; e < dh; ++e) gkr[e] += ds * qr[e];
                                        }
                                    }
                                }
                            }
                        }
                    });
}

template <class Real>
Var select_rows(Tape<Real>& t, Var x, std::vector<std::size_t> rows) {
    const auto& X = t.value(x);
    Matrix<Real> Y(rows.size(), X.cols);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        check<Real>(rows[r] < X.rows, "select_rows", "row out of range");
        std::copy(X.row(rows[r]), X.row(rows[r]) + X.cols, Y.row(r));
    }
    return t.record(std::move(Y), t.requires_grad(x), [x, rows = std::move(rows)](Tape<Real>& tp, Var self) {
        const auto& G = tp.grad(self);
        auto& gx = tp.grad(x);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            Real* dst = gx.row(rows[r]);
            const Real* src = G.row(r);
            for (std::size_t c = 0; c < G.cols; ++c) dst[c] += src[c];
        }
    });
}

template <class Real>
Var log_softmax(Tape<Real>& t, Var x) {
    Matrix<Real> Y = t.value(x);
    for (std::size_t r = 0; r < Y.rows; ++r) {
        Real* y = Y.row(r);
        Real hi = -std::numeric_limits<Real>::infinity();
        for (std::size_t c = 0; c < Y.cols; ++c) hi = std::max(hi, y[c]);
        Real z = 0;
        for (std::size_t c = 0; c < Y.cols; ++c) z += std::exp(y[c] - hi);
        const Real lse = hi + std::log(z);
        for (std::size_t c = 0; c < Y.cols; ++c) y[c] -= lse;
    }
    return t.record(std::move(Y), t.requires_grad(x), [x](Tape<Real>& tp, Var self) {
        const auto& Y = tp.value(self);
        const auto& G = tp.grad(self);
        auto& gx = tp.grad(x);
        for (std::size_t r = 0; r < Y.rows; ++r) {
            Real total = 0;
            for (std::size_t c = 0; c < Y.cols; ++c) total += G(r, c);
            if (total == Real(0)) {
                bool any = false;
                for (std::size_t c = 0; c < Y.cols && !any; ++c) any = G(r, c) != Real(0);
                if (!any) continue;
            }
            for (std::size_t c = 0; c < Y.cols; ++c) gx(r, c) += G(r, c) - std::exp(Y(r, c)) * total;
        }
    });
}

template <class Real>
Var pick_sum(Tape<Real>& t, Var x, std::vector<Pick<Real>> picks) {
    const auto& X = t.value(x);
    Real acc = 0;
    for (const auto& p : picks) {
        check<Real>(p.row < X.rows && p.col < X.cols, "pick_sum", "index out of range");
        acc += p.weight * X(p.row, p.col);
    }
    Matrix<Real> Y(1, 1, acc);
    return t.record(std::move(Y), t.requires_grad(x), [x, picks = std::move(picks)](Tape<Real>& tp, Var self) {
        const Real g = tp.grad(self).data[0];
        auto& gx = tp.grad(x);
        for (const auto& p : picks) gx(p.row, p.col) += p.weight * g;
    });
}

template <class Real>
Var pick(Tape<Real>& t, Var x, std::size_t row, std::size_t col) {
    return pick_sum(t, x, std::vector<Pick<Real>>{Pick<Real>{row, col, Real(1)}});
}

template <class Real>
Var log_add_exp(Tape<Real>& t, Var a, Var b) {
    const Real av = t.scalar(a);
    const Real bv = t.scalar(b);
    const Real ninf = -std::numeric_limits<Real>::infinity();
    Real out;
    if (av == ninf) {
        out = bv;
    } else if (bv == ninf) {
        out = av;
    } else {
        out = std::max(av, bv) + std::log1p(std::exp(-std::abs(av - bv)));
    }
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.record(Matrix<Real>(1, 1, out), rg, [a, b, ninf](Tape<Real>& tp, Var self) {
        const Real g = tp.grad(self).data[0];
        const Real y = tp.scalar(self);
        if (y == ninf) return;
        if (tp.requires_grad(a)) tp.grad(a).data[0] += g * std::exp(tp.scalar(a) - y);
        if (tp.requires_grad(b)) tp.grad(b).data[0] += g * std::exp(tp.scalar(b) - y);
    });
}

template <class Real>
Var weighted_sum(Tape<Real>& t, std::span<const Var> xs, std::span<const Real> weights) {
    check<Real>(xs.size() == weights.size(), "weighted_sum", "size mismatch");
    Real acc = 0;
    bool rg = false;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        acc += weights[i] * t.scalar(xs[i]);
        rg = rg || t.requires_grad(xs[i]);
    }
    std::vector<Var> kept(xs.begin(), xs.end());
    std::vector<Real> w(weights.begin(), weights.end());
    return t.record(Matrix<Real>(1, 1, acc), rg,
                    [kept = std::move(kept), w = std::move(w)](Tape<Real>& tp, Var self) {
                        const Real g = tp.grad(self).data[0];
                        for (std::size_t i = 0; i < kept.size(); ++i) {
                            if (tp.requires_grad(kept[i])) tp.grad(kept[i]).data[0] += w[i] * g;
                        }
                    });
}

#define BIDISEQ_INSTANTIATE_OPS(Real)                                                                        \
    template Var matmul<Real>(Tape<Real>&, Var, Var);                                                        \
    template Var linear<Real>(Tape<Real>&, Var, Var, Var);                                                   \
    template Var add<Real>(Tape<Real>&, Var, Var);                                                           \
    template Var scale<Real>(Tape<Real>&, Var, Real);                                                        \
    template Var embed<Real>(Tape<Real>&, Var, std::span<const std::int32_t>);                               \
    template Var layer_norm<Real>(Tape<Real>&, Var, Var, Var, Real);                                         \
    template Var relu<Real>(Tape<Real>&, Var);                                                               \
    template Var mask<Real>(Tape<Real>&, Var, Matrix<Real>);                                                 \
    template Var attention<Real>(Tape<Real>&, Var, Var, Var, std::size_t, std::vector<AttentionSegment>);    \
    template Var select_rows<Real>(Tape<Real>&, Var, std::vector<std::size_t>);                              \
    template Var log_softmax<Real>(Tape<Real>&, Var);                                                        \
    template Var pick_sum<Real>(Tape<Real>&, Var, std::vector<Pick<Real>>);                                  \
    template Var pick<Real>(Tape<Real>&, Var, std::size_t, std::size_t);                                     \
    template Var log_add_exp<Real>(Tape<Real>&, Var, Var);                                                   \
    template Var weighted_sum<Real>(Tape<Real>&, std::span<const Var>, std::span<const Real>);

BIDISEQ_INSTANTIATE_OPS(float)
BIDISEQ_INSTANTIATE_OPS(double)
#undef BIDISEQ_INSTANTIATE_OPS

}  // namespace ag

template class Tape<float>;
template class Tape<double>;

}  // namespace bidiseq
