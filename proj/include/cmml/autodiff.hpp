#pragma once

// Reverse-mode autodiff on a per-step tape. Nodes are created in topological
// order by construction; backward() walks the tape in reverse from the root.
// Gradients of leaves bound to Parameters are accumulated into Parameter::grad.

#include <array>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cmml/kernels.hpp"
#include "cmml/rng.hpp"
#include "cmml/tensor.hpp"

namespace cmml {

enum class Init { Normal, Zeros, Ones };

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    void zero_grad() {
        if (!grad.same_shape(value)) grad = Tensor(value.shape());
        grad.fill(0.0);
    }
};

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Tape {
public:
    struct Node {
        Tensor val;
        Tensor grad;  // allocated lazily during backward
        bool needs_grad = false;
        std::function<void(Tape&)> back;
        Parameter* bound = nullptr;
    };

    Var input(Tensor v, bool needs_grad = false) {
        return push(std::move(v), needs_grad, nullptr);
    }

    Var param(Parameter& p) {
        Var v = push(p.value, true, nullptr);
        nodes_[static_cast<size_t>(v.id)].bound = &p;
        return v;
    }

    const Tensor& val(Var v) const { return node(v).val; }
    bool needs_grad(Var v) const { return node(v).needs_grad; }

    // Gradient accumulator for a node; zero-initialized on first touch.
    Tensor& grad_acc(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.grad.same_shape(n.val)) {
            n.grad = Tensor(n.val.shape());
        }
        return n.grad;
    }

    // Gradient read-back after backward(); zeros if the node was never reached.
    Tensor grad_of(Var v) const {
        const Node& n = node(v);
        if (n.grad.same_shape(n.val)) return n.grad;
        return Tensor(n.val.shape());
    }

    void backward(Var root) {
        CMML_CHECK(root.valid() && node(root).val.numel() == 1,
                   "backward: root must be a scalar node");
        for (Node& n : nodes_) n.grad = Tensor();
        grad_acc(root.id).fill(1.0);
        for (int i = root.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.needs_grad || !n.grad.same_shape(n.val)) continue;
            if (n.back) n.back(*this);
            if (n.bound) {
                CMML_CHECK(n.bound->grad.same_shape(n.val),
                           "backward: parameter grad buffer not initialized");
                n.bound->grad.add_inplace(n.grad);
            }
        }
    }

    size_t size() const { return nodes_.size(); }

    void reset() { nodes_.clear(); }

    Var push(Tensor val, bool needs_grad, std::function<void(Tape&)> back) {
        Node n;
        n.val = std::move(val);
        n.needs_grad = needs_grad;
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    void set_back(Var v, std::function<void(Tape&)> back) {
        nodes_[static_cast<size_t>(v.id)].back = std::move(back);
    }

    Node& node(Var v) {
        CMML_CHECK(v.valid() && v.id < static_cast<int>(nodes_.size()), "invalid Var");
        return nodes_[static_cast<size_t>(v.id)];
    }
    const Node& node(Var v) const {
        CMML_CHECK(v.valid() && v.id < static_cast<int>(nodes_.size()), "invalid Var");
        return nodes_[static_cast<size_t>(v.id)];
    }

private:
    // deque: node references stay valid while new ops are pushed
    std::deque<Node> nodes_;
};

namespace ops {

// ---- shape helpers ----

inline std::vector<int> replace_last(const std::vector<int>& s, int n) {
    std::vector<int> r = s;
    CMML_CHECK(!r.empty(), "replace_last: scalar shape");
    r.back() = n;
    return r;
}

inline std::vector<int> drop_last(const std::vector<int>& s) {
    std::vector<int> r(s.begin(), s.end() - 1);
    if (r.empty()) r = {1};
    return r;
}

// ---- core ops ----

// a: [..., k] (leading axes flattened to rows), b: [k, n] strictly 2-D.
inline Var matmul(Tape& t, Var a, Var b) {
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    CMML_CHECK(B.ndim() == 2, "matmul: rhs must be 2-D");
    CMML_CHECK(A.last() == B.dim(0),
               "matmul: inner dimensions mismatch " + A.shape_str() + " vs " + B.shape_str());
    Tensor Y(replace_last(A.shape(), B.dim(1)));
    mat(Y).noalias() = mat(A) * mat(B);
    bool ng = t.needs_grad(a) || t.needs_grad(b);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    bool na = t.needs_grad(a), nb = t.needs_grad(b);
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        if (na) mat(tp.grad_acc(a.id)).noalias() += mat(gy) * mat(tp.val(b)).transpose();
        if (nb) mat(tp.grad_acc(b.id)).noalias() += mat(tp.val(a)).transpose() * mat(gy);
    });
    return out;
}

// y = x @ W + b with x: [..., din]; b optional (pass invalid Var to skip).
inline Var linear(Tape& t, Var x, Var W, Var b) {
    const Tensor& X = t.val(x);
    const Tensor& Wv = t.val(W);
    CMML_CHECK(Wv.ndim() == 2 && X.last() == Wv.dim(0), "linear: shape mismatch");
    Tensor Y(replace_last(X.shape(), Wv.dim(1)));
    mat(Y).noalias() = mat(X) * mat(Wv);
    if (b.valid()) {
        const Tensor& bv = t.val(b);
        CMML_CHECK(bv.numel() == Wv.dim(1), "linear: bias length mismatch");
        mat(Y).rowwise() += CMatMap(bv.data(), 1, bv.numel()).row(0);
    }
    bool ng = t.needs_grad(x) || t.needs_grad(W) || (b.valid() && t.needs_grad(b));
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    bool nx = t.needs_grad(x), nw = t.needs_grad(W), nb = b.valid() && t.needs_grad(b);
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        if (nx) mat(tp.grad_acc(x.id)).noalias() += mat(gy) * mat(tp.val(W)).transpose();
        if (nw) mat(tp.grad_acc(W.id)).noalias() += mat(tp.val(x)).transpose() * mat(gy);
        if (nb) {
            Tensor& gb = tp.grad_acc(b.id);
            MatMap(gb.data(), 1, gb.numel()).row(0) += mat(gy).colwise().sum();
        }
    });
    return out;
}

inline Var add(Tape& t, Var a, Var b) {
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    CMML_CHECK(A.same_shape(B), "add: shape mismatch");
    Tensor Y = A;
    Y.add_inplace(B);
    bool ng = t.needs_grad(a) || t.needs_grad(b);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    bool na = t.needs_grad(a), nb = t.needs_grad(b);
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        if (na) tp.grad_acc(a.id).add_inplace(gy);
        if (nb) tp.grad_acc(b.id).add_inplace(gy);
    });
    return out;
}

inline Var sub(Tape& t, Var a, Var b) {
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    CMML_CHECK(A.same_shape(B), "sub: shape mismatch");
    Tensor Y = A;
    for (long long i = 0; i < Y.numel(); ++i) Y[i] -= B[i];
    bool ng = t.needs_grad(a) || t.needs_grad(b);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    bool na = t.needs_grad(a), nb = t.needs_grad(b);
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        if (na) tp.grad_acc(a.id).add_inplace(gy);
        if (nb) {
            Tensor& gb = tp.grad_acc(b.id);
            for (long long i = 0; i < gb.numel(); ++i) gb[i] -= gy[i];
        }
    });
    return out;
}

inline Var mul(Tape& t, Var a, Var b) {
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    CMML_CHECK(A.same_shape(B), "mul: shape mismatch");
    Tensor Y = A;
    for (long long i = 0; i < Y.numel(); ++i) Y[i] *= B[i];
    bool ng = t.needs_grad(a) || t.needs_grad(b);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    bool na = t.needs_grad(a), nb = t.needs_grad(b);
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        if (na) {
            Tensor& ga = tp.grad_acc(a.id);
            const Tensor& Bv = tp.val(b);
            for (long long i = 0; i < ga.numel(); ++i) ga[i] += gy[i] * Bv[i];
        }
        if (nb) {
            Tensor& gb = tp.grad_acc(b.id);
            const Tensor& Av = tp.val(a);
            for (long long i = 0; i < gb.numel(); ++i) gb[i] += gy[i] * Av[i];
        }
    });
    return out;
}

inline Var scale(Tape& t, Var x, double c) {
    Tensor Y = t.val(x);
    for (long long i = 0; i < Y.numel(); ++i) Y[i] *= c;
    bool ng = t.needs_grad(x);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        Tensor& gx = tp.grad_acc(x.id);
        for (long long i = 0; i < gx.numel(); ++i) gx[i] += c * gy[i];
    });
    return out;
}

// y = x + tile(e): e broadcast over x's extra leading axes.
inline Var add_rows(Tape& t, Var x, Var e) {
    const Tensor& X = t.val(x);
    const Tensor& E = t.val(e);
    CMML_CHECK(E.numel() > 0 && X.numel() % E.numel() == 0, "add_rows: incompatible shapes");
    Tensor Y = X;
    long long en = E.numel(), blocks = X.numel() / en;
    for (long long blk = 0; blk < blocks; ++blk)
        for (long long j = 0; j < en; ++j) Y[blk * en + j] += E[j];
    bool ng = t.needs_grad(x) || t.needs_grad(e);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    bool nx = t.needs_grad(x), ne = t.needs_grad(e);
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        if (nx) tp.grad_acc(x.id).add_inplace(gy);
        if (ne) {
            Tensor& ge = tp.grad_acc(e.id);
            for (long long blk = 0; blk < blocks; ++blk)
                for (long long j = 0; j < en; ++j) ge[j] += gy[blk * en + j];
        }
    });
    return out;
}

// e [...] -> [B, ...]
inline Var broadcast0(Tape& t, Var e, int B) {
    const Tensor& E = t.val(e);
    std::vector<int> shape;
    shape.push_back(B);
    for (int i = 0; i < E.ndim(); ++i) shape.push_back(E.dim(i));
    Tensor Y(shape);
    long long en = E.numel();
    for (int b = 0; b < B; ++b)
        for (long long j = 0; j < en; ++j) Y[b * en + j] = E[j];
    bool ng = t.needs_grad(e);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        Tensor& ge = tp.grad_acc(e.id);
        for (int b = 0; b < B; ++b)
            for (long long j = 0; j < en; ++j) ge[j] += gy[b * en + j];
    });
    return out;
}

inline Var relu(Tape& t, Var x) {
    Tensor Y = t.val(x);
    for (long long i = 0; i < Y.numel(); ++i) Y[i] = Y[i] > 0.0 ? Y[i] : 0.0;
    bool ng = t.needs_grad(x);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        const Tensor& yv = tp.node(out).val;
        Tensor& gx = tp.grad_acc(x.id);
        for (long long i = 0; i < gx.numel(); ++i)
            if (yv[i] > 0.0) gx[i] += gy[i];
    });
    return out;
}

inline Var exp(Tape& t, Var x) {
    Tensor Y = t.val(x);
    for (long long i = 0; i < Y.numel(); ++i) Y[i] = std::exp(Y[i]);
    bool ng = t.needs_grad(x);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        const Tensor& yv = tp.node(out).val;
        Tensor& gx = tp.grad_acc(x.id);
        for (long long i = 0; i < gx.numel(); ++i) gx[i] += gy[i] * yv[i];
    });
    return out;
}

inline Var log(Tape& t, Var x) {
    const Tensor& X = t.val(x);
    Tensor Y = X;
    for (long long i = 0; i < Y.numel(); ++i) Y[i] = std::log(Y[i]);
    bool ng = t.needs_grad(x);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        const Tensor& Xv = tp.val(x);
        Tensor& gx = tp.grad_acc(x.id);
        for (long long i = 0; i < gx.numel(); ++i) gx[i] += gy[i] / Xv[i];
    });
    return out;
}

// Stable softmax along an arbitrary axis (negative axes count from the back).
inline Var softmax(Tape& t, Var x, int axis = -1) {
    const Tensor& X = t.val(x);
    int nd = X.ndim();
    if (axis < 0) axis += nd;
    CMML_CHECK(axis >= 0 && axis < nd, "softmax: axis out of range");
    long long outer = 1, inner = 1;
    int n = X.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= X.dim(i);
    for (int i = axis + 1; i < nd; ++i) inner *= X.dim(i);
    Tensor Y = X;
    for (long long o = 0; o < outer; ++o) {
        for (long long in = 0; in < inner; ++in) {
            double* base = Y.data() + o * n * inner + in;
            double m = base[0];
            for (int i = 1; i < n; ++i) m = std::max(m, base[i * inner]);
            double s = 0.0;
            for (int i = 0; i < n; ++i) {
                double e = std::exp(base[i * inner] - m);
                base[i * inner] = e;
                s += e;
            }
            for (int i = 0; i < n; ++i) base[i * inner] /= s;
        }
    }
    bool ng = t.needs_grad(x);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        const Tensor& yv = tp.node(out).val;
        Tensor& gx = tp.grad_acc(x.id);
        for (long long o = 0; o < outer; ++o) {
            for (long long in = 0; in < inner; ++in) {
                long long base = o * n * inner + in;
                double s = 0.0;
                for (int i = 0; i < n; ++i) s += gy[base + i * inner] * yv[base + i * inner];
                for (int i = 0; i < n; ++i) {
                    long long k = base + i * inner;
                    gx[k] += yv[k] * (gy[k] - s);
                }
            }
        }
    });
    return out;
}

// Pre-activation layer norm over the last axis.
inline Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5) {
    const Tensor& X = t.val(x);
    const Tensor& G = t.val(gain);
    const Tensor& Bv = t.val(bias);
    int n = X.last();
    CMML_CHECK(G.numel() == n && Bv.numel() == n, "layer_norm: gain/bias length mismatch");
    long long rows = X.rows();
    auto xhat = std::make_shared<Tensor>(X.shape());
    auto inv = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    Tensor Y(X.shape());
    for (long long r = 0; r < rows; ++r) {
        const double* xp = X.data() + r * n;
        double mu = 0.0;
        for (int i = 0; i < n; ++i) mu += xp[i];
        mu /= n;
        double var = 0.0;
        for (int i = 0; i < n; ++i) var += (xp[i] - mu) * (xp[i] - mu);
        var /= n;
        double iv = 1.0 / std::sqrt(var + eps);
        (*inv)[static_cast<size_t>(r)] = iv;
        double* hp = xhat->data() + r * n;
        double* yp = Y.data() + r * n;
        for (int i = 0; i < n; ++i) {
            hp[i] = (xp[i] - mu) * iv;
            yp[i] = G[i] * hp[i] + Bv[i];
        }
    }
    bool ng = t.needs_grad(x) || t.needs_grad(gain) || t.needs_grad(bias);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    bool nx = t.needs_grad(x), ngain = t.needs_grad(gain), nbias = t.needs_grad(bias);
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        const Tensor& G2 = tp.val(gain);
        for (long long r = 0; r < rows; ++r) {
            const double* gp = gy.data() + r * n;
            const double* hp = xhat->data() + r * n;
            if (ngain) {
                Tensor& gg = tp.grad_acc(gain.id);
                for (int i = 0; i < n; ++i) gg[i] += gp[i] * hp[i];
            }
            if (nbias) {
                Tensor& gb = tp.grad_acc(bias.id);
                for (int i = 0; i < n; ++i) gb[i] += gp[i];
            }
            if (nx) {
                Tensor& gx = tp.grad_acc(x.id);
                double m1 = 0.0, m2 = 0.0;
                for (int i = 0; i < n; ++i) {
                    double dh = gp[i] * G2[i];
                    m1 += dh;
                    m2 += dh * hp[i];
                }
                m1 /= n;
                m2 /= n;
                double iv = (*inv)[static_cast<size_t>(r)];
                double* gxp = gx.data() + r * n;
                for (int i = 0; i < n; ++i) {
                    double dh = gp[i] * G2[i];
                    gxp[i] += iv * (dh - m1 - hp[i] * m2);
                }
            }
        }
    });
    return out;
}

// Scaled dot-product attention over heads. q: [..., Sq, d], k/v: [..., Skv, d]
// with identical leading axes. Per-head attention rows sum to one.
inline Var sdpa(Tape& t, Var q, Var k, Var v, int heads) {
    const Tensor& Q = t.val(q);
    const Tensor& K = t.val(k);
    const Tensor& V = t.val(v);
    int d = Q.last();
    CMML_CHECK(K.last() == d && V.last() == d, "sdpa: feature dims differ");
    CMML_CHECK(heads > 0 && d % heads == 0, "sdpa: d must be divisible by heads");
    int Sq = Q.dim(-2), Skv = K.dim(-2);
    CMML_CHECK(V.dim(-2) == Skv, "sdpa: k/v token counts differ");
    long long B = Q.numel() / (static_cast<long long>(Sq) * d);
    CMML_CHECK(K.numel() / (static_cast<long long>(Skv) * d) == B, "sdpa: leading dims differ");
    int dh = d / heads;
    double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    auto attn = std::make_shared<Tensor>(
        Tensor({static_cast<int>(B) * heads, Sq, Skv}));
    Tensor Y(Q.shape());
    for (long long b = 0; b < B; ++b) {
        for (int h = 0; h < heads; ++h) {
            CStridedMap Qb(Q.data() + (b * Sq) * d + h * dh, Sq, dh, Eigen::OuterStride<>(d));
            CStridedMap Kb(K.data() + (b * Skv) * d + h * dh, Skv, dh, Eigen::OuterStride<>(d));
            CStridedMap Vb(V.data() + (b * Skv) * d + h * dh, Skv, dh, Eigen::OuterStride<>(d));
            MatMap Ab(attn->data() + (b * heads + h) * Sq * Skv, Sq, Skv);
            Ab.noalias() = sc * (Qb * Kb.transpose());
            softmax_rows_inplace(Ab.data(), Sq, Skv);
            StridedMap Yb(Y.data() + (b * Sq) * d + h * dh, Sq, dh, Eigen::OuterStride<>(d));
            Yb.noalias() = Ab * Vb;
        }
    }
    bool ng = t.needs_grad(q) || t.needs_grad(k) || t.needs_grad(v);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    bool nq = t.needs_grad(q), nk = t.needs_grad(k), nv = t.needs_grad(v);
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        const Tensor& Qv = tp.val(q);
        const Tensor& Kv = tp.val(k);
        const Tensor& Vv = tp.val(v);
        Tensor* gq = nq ? &tp.grad_acc(q.id) : nullptr;
        Tensor* gk = nk ? &tp.grad_acc(k.id) : nullptr;
        Tensor* gv = nv ? &tp.grad_acc(v.id) : nullptr;
        RowMat dA(Sq, Skv), dS(Sq, Skv);
        for (long long b = 0; b < B; ++b) {
            for (int h = 0; h < heads; ++h) {
                CStridedMap Qb(Qv.data() + (b * Sq) * d + h * dh, Sq, dh, Eigen::OuterStride<>(d));
                CStridedMap Kb(Kv.data() + (b * Skv) * d + h * dh, Skv, dh,
                               Eigen::OuterStride<>(d));
                CStridedMap Vb(Vv.data() + (b * Skv) * d + h * dh, Skv, dh,
                               Eigen::OuterStride<>(d));
                CMatMap Ab(attn->data() + (b * heads + h) * Sq * Skv, Sq, Skv);
                CStridedMap dY(gy.data() + (b * Sq) * d + h * dh, Sq, dh, Eigen::OuterStride<>(d));
                if (nv) {
                    StridedMap gVb(gv->data() + (b * Skv) * d + h * dh, Skv, dh,
                                   Eigen::OuterStride<>(d));
                    gVb.noalias() += Ab.transpose() * dY;
                }
                dA.noalias() = dY * Vb.transpose();
                Eigen::VectorXd rs = (dA.array() * Ab.array()).rowwise().sum();
                dS = Ab.array() * (dA.colwise() - rs).array();
                if (nq) {
                    StridedMap gQb(gq->data() + (b * Sq) * d + h * dh, Sq, dh,
                                   Eigen::OuterStride<>(d));
                    gQb.noalias() += sc * (dS * Kb);
                }
                if (nk) {
                    StridedMap gKb(gk->data() + (b * Skv) * d + h * dh, Skv, dh,
                                   Eigen::OuterStride<>(d));
                    gKb.noalias() += sc * (dS.transpose() * Qb);
                }
            }
        }
    });
    return out;
}

// Concatenation along the token axis (-2). All pieces share leading axes and
// the feature axis.
inline Var concat_tokens(Tape& t, const std::vector<Var>& pieces) {
    CMML_CHECK(!pieces.empty(), "concat_tokens: no pieces");
    if (pieces.size() == 1) return pieces[0];
    const Tensor& first = t.val(pieces[0]);
    int nd = first.ndim();
    CMML_CHECK(nd >= 2, "concat_tokens: pieces must have >= 2 axes");
    int d = first.last();
    long long lead = first.numel() / (static_cast<long long>(first.dim(-2)) * d);
    int Stotal = 0;
    std::vector<int> spans;
    for (Var p : pieces) {
        const Tensor& pv = t.val(p);
        CMML_CHECK(pv.ndim() == nd && pv.last() == d, "concat_tokens: incompatible piece");
        CMML_CHECK(pv.numel() / (static_cast<long long>(pv.dim(-2)) * d) == lead,
                   "concat_tokens: leading dims differ");
        spans.push_back(pv.dim(-2));
        Stotal += pv.dim(-2);
    }
    std::vector<int> shape = first.shape();
    shape[static_cast<size_t>(nd - 2)] = Stotal;
    Tensor Y(shape);
    for (long long l = 0; l < lead; ++l) {
        long long off = l * Stotal * d;
        for (size_t pi = 0; pi < pieces.size(); ++pi) {
            const Tensor& pv = t.val(pieces[pi]);
            long long cnt = static_cast<long long>(spans[pi]) * d;
            const double* src = pv.data() + l * cnt;
            std::copy(src, src + cnt, Y.data() + off);
            off += cnt;
        }
    }
    bool ng = false;
    for (Var p : pieces) ng = ng || t.needs_grad(p);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    std::vector<Var> ps = pieces;
    std::vector<int> sp = spans;
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        long long off0 = 0;
        for (size_t pi = 0; pi < ps.size(); ++pi) {
            long long cnt = static_cast<long long>(sp[pi]) * d;
            if (tp.needs_grad(ps[pi])) {
                Tensor& gp = tp.grad_acc(ps[pi].id);
                for (long long l = 0; l < lead; ++l) {
                    const double* src = gy.data() + l * Stotal * d + off0;
                    double* dst = gp.data() + l * cnt;
                    for (long long i = 0; i < cnt; ++i) dst[i] += src[i];
                }
            }
            off0 += cnt;
        }
    });
    return out;
}

// Token-axis slice: rows [start, start+len) of axis -2.
inline Var slice_tokens(Tape& t, Var x, int start, int len) {
    const Tensor& X = t.val(x);
    int nd = X.ndim();
    CMML_CHECK(nd >= 2, "slice_tokens: need >= 2 axes");
    int S = X.dim(-2), d = X.last();
    CMML_CHECK(start >= 0 && len >= 1 && start + len <= S, "slice_tokens: range out of bounds");
    long long lead = X.numel() / (static_cast<long long>(S) * d);
    std::vector<int> shape = X.shape();
    shape[static_cast<size_t>(nd - 2)] = len;
    Tensor Y(shape);
    for (long long l = 0; l < lead; ++l) {
        const double* src = X.data() + (l * S + start) * d;
        std::copy(src, src + static_cast<long long>(len) * d, Y.data() + l * len * d);
    }
    bool ng = t.needs_grad(x);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        Tensor& gx = tp.grad_acc(x.id);
        for (long long l = 0; l < lead; ++l) {
            const double* src = gy.data() + l * len * d;
            double* dst = gx.data() + (l * S + start) * d;
            for (long long i = 0; i < static_cast<long long>(len) * d; ++i) dst[i] += src[i];
        }
    });
    return out;
}

// Select batch rows (axis 0) by index.
inline Var gather_batch(Tape& t, Var x, const std::vector<int>& idx) {
    const Tensor& X = t.val(x);
    CMML_CHECK(X.ndim() >= 1, "gather_batch: need batch axis");
    int B = X.dim(0);
    long long block = X.numel() / B;
    std::vector<int> shape = X.shape();
    shape[0] = static_cast<int>(idx.size());
    Tensor Y(shape);
    for (size_t g = 0; g < idx.size(); ++g) {
        CMML_CHECK(idx[g] >= 0 && idx[g] < B, "gather_batch: index out of range");
        std::copy(X.data() + idx[g] * block, X.data() + (idx[g] + 1) * block,
                  Y.data() + static_cast<long long>(g) * block);
    }
    bool ng = t.needs_grad(x);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    std::vector<int> ix = idx;
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        Tensor& gx = tp.grad_acc(x.id);
        for (size_t g = 0; g < ix.size(); ++g) {
            const double* src = gy.data() + static_cast<long long>(g) * block;
            double* dst = gx.data() + ix[g] * block;
            for (long long i = 0; i < block; ++i) dst[i] += src[i];
        }
    });
    return out;
}

// Reassemble a batch from disjoint index groups (the inverse of gather_batch
// over a partition of [0, B)).
inline Var scatter_batch(Tape& t, int B, const std::vector<std::vector<int>>& groups,
                         const std::vector<Var>& pieces) {
    CMML_CHECK(groups.size() == pieces.size() && !pieces.empty(),
               "scatter_batch: group/piece count mismatch");
    const Tensor& first = t.val(pieces[0]);
    long long block = first.numel() / first.dim(0);
    std::vector<int> shape = first.shape();
    shape[0] = B;
    Tensor Y(shape);
    std::vector<char> seen(static_cast<size_t>(B), 0);
    for (size_t pi = 0; pi < pieces.size(); ++pi) {
        const Tensor& pv = t.val(pieces[pi]);
        CMML_CHECK(pv.dim(0) == static_cast<int>(groups[pi].size()) &&
                       pv.numel() / pv.dim(0) == block,
                   "scatter_batch: piece shape mismatch");
        for (size_t g = 0; g < groups[pi].size(); ++g) {
            int b = groups[pi][g];
            CMML_CHECK(b >= 0 && b < B && !seen[static_cast<size_t>(b)],
                       "scatter_batch: indices must partition the batch");
            seen[static_cast<size_t>(b)] = 1;
            std::copy(pv.data() + static_cast<long long>(g) * block,
                      pv.data() + static_cast<long long>(g + 1) * block, Y.data() + b * block);
        }
    }
    for (int b = 0; b < B; ++b)
        CMML_CHECK(seen[static_cast<size_t>(b)], "scatter_batch: batch index not covered");
    bool ng = false;
    for (Var p : pieces) ng = ng || t.needs_grad(p);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    std::vector<std::vector<int>> gs = groups;
    std::vector<Var> ps = pieces;
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        for (size_t pi = 0; pi < ps.size(); ++pi) {
            if (!tp.needs_grad(ps[pi])) continue;
            Tensor& gp = tp.grad_acc(ps[pi].id);
            for (size_t g = 0; g < gs[pi].size(); ++g) {
                const double* src = gy.data() + gs[pi][g] * block;
                double* dst = gp.data() + static_cast<long long>(g) * block;
                for (long long i = 0; i < block; ++i) dst[i] += src[i];
            }
        }
    });
    return out;
}

// Mean over the token axis (-2): [..., S, d] -> [..., d].
inline Var mean_tokens(Tape& t, Var x) {
    const Tensor& X = t.val(x);
    CMML_CHECK(X.ndim() >= 2, "mean_tokens: need >= 2 axes");
    int S = X.dim(-2), d = X.last();
    long long lead = X.numel() / (static_cast<long long>(S) * d);
    std::vector<int> shape = X.shape();
    shape.erase(shape.end() - 2);
    Tensor Y(shape);
    for (long long l = 0; l < lead; ++l) {
        double* yp = Y.data() + l * d;
        for (int s = 0; s < S; ++s) {
            const double* xp = X.data() + (l * S + s) * d;
            for (int i = 0; i < d; ++i) yp[i] += xp[i];
        }
        for (int i = 0; i < d; ++i) yp[i] /= S;
    }
    bool ng = t.needs_grad(x);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        Tensor& gx = tp.grad_acc(x.id);
        for (long long l = 0; l < lead; ++l) {
            const double* gp = gy.data() + l * d;
            for (int s = 0; s < S; ++s) {
                double* dst = gx.data() + (l * S + s) * d;
                for (int i = 0; i < d; ++i) dst[i] += gp[i] / S;
            }
        }
    });
    return out;
}

enum class Reduce { Sum, Mean };

// [..., n] -> [...]
inline Var reduce_last(Tape& t, Var x, Reduce mode) {
    const Tensor& X = t.val(x);
    int n = X.last();
    long long rows = X.rows();
    Tensor Y(drop_last(X.shape()));
    double w = mode == Reduce::Mean ? 1.0 / n : 1.0;
    for (long long r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += X[r * n + i];
        Y[r] = s * w;
    }
    bool ng = t.needs_grad(x);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        Tensor& gx = tp.grad_acc(x.id);
        for (long long r = 0; r < rows; ++r)
            for (int i = 0; i < n; ++i) gx[r * n + i] += gy[r] * w;
    });
    return out;
}

inline Var reduce_all(Tape& t, Var x, Reduce mode) {
    const Tensor& X = t.val(x);
    long long N = X.numel();
    double w = mode == Reduce::Mean ? 1.0 / static_cast<double>(N) : 1.0;
    double s = 0.0;
    for (long long i = 0; i < N; ++i) s += X[i];
    Var out = t.push(Tensor::scalar(s * w), t.needs_grad(x), nullptr);
    if (!t.needs_grad(x)) return out;
    t.set_back(out, [=](Tape& tp) {
        double g = tp.node(out).grad[0] * w;
        Tensor& gx = tp.grad_acc(x.id);
        for (long long i = 0; i < N; ++i) gx[i] += g;
    });
    return out;
}

inline Var sum_all(Tape& t, Var x) { return reduce_all(t, x, Reduce::Sum); }
inline Var mean_all(Tape& t, Var x) { return reduce_all(t, x, Reduce::Mean); }

namespace detail {
// d cos / d u for one pair, shared by the cosine ops. Zero-norm inputs give a
// zero gradient (matching the both-zero forward convention).
inline void cosine_row_backward(const double* u, const double* v, double nu, double nv, double c,
                                double gy, int d, double* gu, double* gv) {
    double den = nu * nv + kCosineEps;
    if (gu && nu > 1e-12) {
        double a2 = c * nv / (den * nu);
        for (int i = 0; i < d; ++i) gu[i] += gy * (v[i] / den - a2 * u[i]);
    }
    if (gv && nv > 1e-12) {
        double b2 = c * nu / (den * nv);
        for (int i = 0; i < d; ++i) gv[i] += gy * (u[i] / den - b2 * v[i]);
    }
}
}  // namespace detail

// Row-paired cosine similarity: a, b [..., d] -> [...]; both sides differentiable.
inline Var cosine_rows(Tape& t, Var a, Var b) {
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    CMML_CHECK(A.same_shape(B), "cosine_rows: shape mismatch");
    int d = A.last();
    long long rows = A.rows();
    auto na = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    auto nb = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    Tensor Y(drop_last(A.shape()));
    for (long long r = 0; r < rows; ++r) {
        const double* u = A.data() + r * d;
        const double* v = B.data() + r * d;
        double su = 0.0, sv = 0.0, dot = 0.0;
        for (int i = 0; i < d; ++i) {
            su += u[i] * u[i];
            sv += v[i] * v[i];
            dot += u[i] * v[i];
        }
        (*na)[static_cast<size_t>(r)] = std::sqrt(su);
        (*nb)[static_cast<size_t>(r)] = std::sqrt(sv);
        double c = dot / ((*na)[static_cast<size_t>(r)] * (*nb)[static_cast<size_t>(r)] + kCosineEps);
        Y[r] = c > 1.0 ? 1.0 : (c < -1.0 ? -1.0 : c);
    }
    bool ng = t.needs_grad(a) || t.needs_grad(b);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    bool da = t.needs_grad(a), db = t.needs_grad(b);
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        const Tensor& yv = tp.node(out).val;
        const Tensor& Av = tp.val(a);
        const Tensor& Bv = tp.val(b);
        Tensor* ga = da ? &tp.grad_acc(a.id) : nullptr;
        Tensor* gb = db ? &tp.grad_acc(b.id) : nullptr;
        for (long long r = 0; r < rows; ++r) {
            detail::cosine_row_backward(Av.data() + r * d, Bv.data() + r * d,
                                        (*na)[static_cast<size_t>(r)],
                                        (*nb)[static_cast<size_t>(r)], yv[r], gy[r], d,
                                        ga ? ga->data() + r * d : nullptr,
                                        gb ? gb->data() + r * d : nullptr);
        }
    });
    return out;
}

// All-pairs cosine similarity: a [m, d], b [n, d] -> [m, n].
inline Var cosine_matrix(Tape& t, Var a, Var b) {
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    CMML_CHECK(A.ndim() == 2 && B.ndim() == 2 && A.last() == B.last(),
               "cosine_matrix: need [m,d] and [n,d]");
    int m = A.dim(0), n = B.dim(0), d = A.last();
    auto na = std::make_shared<std::vector<double>>(static_cast<size_t>(m));
    auto nb = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
    for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (int k = 0; k < d; ++k) s += A.at2(i, k) * A.at2(i, k);
        (*na)[static_cast<size_t>(i)] = std::sqrt(s);
    }
    for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int k = 0; k < d; ++k) s += B.at2(j, k) * B.at2(j, k);
        (*nb)[static_cast<size_t>(j)] = std::sqrt(s);
    }
    Tensor Y({m, n});
    mat(Y).noalias() = mat(A) * mat(B).transpose();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double c = Y.at2(i, j) /
                       ((*na)[static_cast<size_t>(i)] * (*nb)[static_cast<size_t>(j)] + kCosineEps);
            Y.at2(i, j) = c > 1.0 ? 1.0 : (c < -1.0 ? -1.0 : c);
        }
    bool ng = t.needs_grad(a) || t.needs_grad(b);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    bool da = t.needs_grad(a), db = t.needs_grad(b);
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        const Tensor& cv = tp.node(out).val;
        const Tensor& Av = tp.val(a);
        const Tensor& Bv = tp.val(b);
        // P = gy / D, T = gy * c / D with D_ij = na_i*nb_j + eps
        RowMat P(m, n), T(m, n);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                double D = (*na)[static_cast<size_t>(i)] * (*nb)[static_cast<size_t>(j)] +
                           kCosineEps;
                P(i, j) = gy.at2(i, j) / D;
                T(i, j) = gy.at2(i, j) * cv.at2(i, j) / D;
            }
        if (da) {
            Tensor& ga = tp.grad_acc(a.id);
            mat(ga).noalias() += P * mat(Bv);
            for (int i = 0; i < m; ++i) {
                double ni = (*na)[static_cast<size_t>(i)];
                if (ni <= 1e-12) continue;
                double qi = 0.0;
                for (int j = 0; j < n; ++j) qi += T(i, j) * (*nb)[static_cast<size_t>(j)];
                qi /= ni;
                for (int k = 0; k < d; ++k) ga.at2(i, k) -= qi * Av.at2(i, k);
            }
        }
        if (db) {
            Tensor& gb = tp.grad_acc(b.id);
            mat(gb).noalias() += P.transpose() * mat(Av);
            for (int j = 0; j < n; ++j) {
                double nj = (*nb)[static_cast<size_t>(j)];
                if (nj <= 1e-12) continue;
                double rj = 0.0;
                for (int i = 0; i < m; ++i) rj += T(i, j) * (*na)[static_cast<size_t>(i)];
                rj /= nj;
                for (int k = 0; k < d; ++k) gb.at2(j, k) -= rj * Bv.at2(j, k);
            }
        }
    });
    return out;
}

// Mean softmax cross-entropy: logits [B, C], integer labels.
inline Var cross_entropy(Tape& t, Var logits, const std::vector<int>& labels) {
    const Tensor& L = t.val(logits);
    CMML_CHECK(L.ndim() == 2, "cross_entropy: logits must be [B, C]");
    int B = L.dim(0), C = L.dim(1);
    CMML_CHECK(static_cast<int>(labels.size()) == B, "cross_entropy: label count mismatch");
    auto probs = std::make_shared<Tensor>(L);
    softmax_rows_inplace(probs->data(), B, C);
    double loss = 0.0;
    for (int i = 0; i < B; ++i) {
        CMML_CHECK(labels[static_cast<size_t>(i)] >= 0 && labels[static_cast<size_t>(i)] < C,
                   "cross_entropy: label out of range");
        loss -= std::log(std::max(probs->at2(i, labels[static_cast<size_t>(i)]), 1e-300));
    }
    loss /= B;
    bool ng = t.needs_grad(logits);
    Var out = t.push(Tensor::scalar(loss), ng, nullptr);
    if (!ng) return out;
    std::vector<int> ls = labels;
    t.set_back(out, [=](Tape& tp) {
        double g = tp.node(out).grad[0] / B;
        Tensor& gl = tp.grad_acc(logits.id);
        for (int i = 0; i < B; ++i)
            for (int c = 0; c < C; ++c) {
                double p = probs->at2(i, c);
                gl.at2(i, c) += g * (p - (c == ls[static_cast<size_t>(i)] ? 1.0 : 0.0));
            }
    });
    return out;
}

inline Var reshape(Tape& t, Var x, std::vector<int> shape) {
    Tensor Y = t.val(x).reshaped(shape);
    bool ng = t.needs_grad(x);
    Var out = t.push(std::move(Y), ng, nullptr);
    if (!ng) return out;
    t.set_back(out, [=](Tape& tp) {
        const Tensor& gy = tp.node(out).grad;
        Tensor& gx = tp.grad_acc(x.id);
        for (long long i = 0; i < gx.numel(); ++i) gx[i] += gy[i];
    });
    return out;
}

}  // namespace ops
}  // namespace cmml
