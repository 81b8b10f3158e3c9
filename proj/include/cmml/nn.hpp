#pragma once

#include <functional>
#include <memory>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "cmml/autodiff.hpp"

namespace cmml {

// Owns all trainable parameters of one model instance. Names are unique.
class ParamSet {
public:
    Parameter& add(const std::string& name, std::vector<int> shape, Init init, Rng& rng,
                   double stddev = 0.02) {
        CMML_CHECK(by_name_.find(name) == by_name_.end(),
                   "ParamSet: duplicate parameter name " + name);
        auto p = std::make_unique<Parameter>();
        p->name = name;
        p->value = Tensor(std::move(shape));
        switch (init) {
            case Init::Normal: rng.fill_normal(p->value, stddev); break;
            case Init::Zeros: break;
            case Init::Ones: p->value.fill(1.0); break;
        }
        p->zero_grad();
        Parameter* raw = p.get();
        by_name_[name] = raw;
        items_.push_back(std::move(p));
        return *raw;
    }

    Parameter* find(const std::string& name) const {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : it->second;
    }

    const std::vector<std::unique_ptr<Parameter>>& items() const { return items_; }

    long long scalar_count() const {
        long long n = 0;
        for (const auto& p : items_) n += p->value.numel();
        return n;
    }

    void zero_grads() {
        for (auto& p : items_) p->zero_grad();
    }

    // Copy values by name; shapes must match exactly.
    void copy_values_from(const ParamSet& other) {
        CMML_CHECK(items_.size() == other.items_.size(), "copy_values_from: parameter set differs");
        for (auto& p : items_) {
            Parameter* q = other.find(p->name);
            CMML_CHECK(q && q->value.same_shape(p->value),
                       "copy_values_from: missing or mismatched " + p->name);
            p->value = q->value;
        }
    }

private:
    std::vector<std::unique_ptr<Parameter>> items_;
    std::unordered_map<std::string, Parameter*> by_name_;
};

// Per-forward context: the tape, train/eval mode, dropout stream, and a cache
// ensuring each Parameter appears as exactly one leaf per tape.
struct ForwardCtx {
    Tape& t;
    bool training = false;
    double dropout_rate = 0.5;
    Rng* drop_rng = nullptr;

    ForwardCtx(Tape& tape, bool train = false, Rng* rng = nullptr, double p_drop = 0.5)
        : t(tape), training(train), dropout_rate(p_drop), drop_rng(rng) {}

    Var P(Parameter& p) {
        auto it = cache_.find(&p);
        if (it != cache_.end()) return it->second;
        Var v = t.param(p);
        cache_[&p] = v;
        return v;
    }

    Var C(Tensor v, bool needs_grad = false) { return t.input(std::move(v), needs_grad); }

private:
    std::unordered_map<const Parameter*, Var> cache_;
};

// Inverted dropout; identity in eval mode.
inline Var dropout(ForwardCtx& cx, Var x) {
    if (!cx.training || cx.dropout_rate <= 0.0) return x;
    CMML_CHECK(cx.drop_rng != nullptr, "dropout: no rng in training mode");
    double keep = 1.0 - cx.dropout_rate;
    Tensor mask(cx.t.val(x).shape());
    for (long long i = 0; i < mask.numel(); ++i)
        mask[i] = cx.drop_rng->uniform() < keep ? 1.0 / keep : 0.0;
    return ops::mul(cx.t, x, cx.C(std::move(mask)));
}

// Multi-head cross-attention with learned Q/K/V/output projections.
// q: [..., Sq, d], kv: [..., Skv, d] -> [..., Sq, d].
struct Mhca {
    int heads = 4;
    Parameter *Wq = nullptr, *bq = nullptr, *Wk = nullptr, *bk = nullptr;
    Parameter *Wv = nullptr, *bv = nullptr, *Wo = nullptr, *bo = nullptr;

    static Mhca create(ParamSet& ps, const std::string& prefix, int d, int heads, Rng& rng) {
        CMML_CHECK(heads > 0 && d % heads == 0, "mhca: d must be divisible by heads");
        Mhca m;
        m.heads = heads;
        m.Wq = &ps.add(prefix + ".wq", {d, d}, Init::Normal, rng);
        m.bq = &ps.add(prefix + ".bq", {d}, Init::Zeros, rng);
        m.Wk = &ps.add(prefix + ".wk", {d, d}, Init::Normal, rng);
        m.bk = &ps.add(prefix + ".bk", {d}, Init::Zeros, rng);
        m.Wv = &ps.add(prefix + ".wv", {d, d}, Init::Normal, rng);
        m.bv = &ps.add(prefix + ".bv", {d}, Init::Zeros, rng);
        m.Wo = &ps.add(prefix + ".wo", {d, d}, Init::Normal, rng);
        m.bo = &ps.add(prefix + ".bo", {d}, Init::Zeros, rng);
        return m;
    }

    Var forward(ForwardCtx& cx, Var q, Var kv) const {
        Tape& t = cx.t;
        Var Q = ops::linear(t, q, cx.P(*Wq), cx.P(*bq));
        Var K = ops::linear(t, kv, cx.P(*Wk), cx.P(*bk));
        Var V = ops::linear(t, kv, cx.P(*Wv), cx.P(*bv));
        Var ctx = ops::sdpa(t, Q, K, V, heads);
        return ops::linear(t, ctx, cx.P(*Wo), cx.P(*bo));
    }
};

// Pre-norm transformer block mapping [..., S, d_in] -> [..., S, d_out].
// The Q/K/V projections realize the width change; when d_in != d_out the
// residual path goes through a bias-free linear shortcut. Dropout sits after
// the attention output projection and after the FFN activation.
struct TransformerBlock {
    int d_in = 0, d_out = 0, heads = 4;
    Parameter *ln1_g = nullptr, *ln1_b = nullptr;
    Parameter *Wq = nullptr, *bq = nullptr, *Wk = nullptr, *bk = nullptr;
    Parameter *Wv = nullptr, *bv = nullptr, *Wo = nullptr, *bo = nullptr;
    Parameter *Ws = nullptr;  // only when d_in != d_out
    Parameter *ln2_g = nullptr, *ln2_b = nullptr;
    Parameter *W1 = nullptr, *b1 = nullptr, *W2 = nullptr, *b2 = nullptr;

    static TransformerBlock create(ParamSet& ps, const std::string& prefix, int d_in, int d_out,
                                   int heads, Rng& rng) {
        CMML_CHECK(heads > 0 && d_out % heads == 0,
                   "transformer_block: d_out must be divisible by heads");
        TransformerBlock b;
        b.d_in = d_in;
        b.d_out = d_out;
        b.heads = heads;
        b.ln1_g = &ps.add(prefix + ".ln1.g", {d_in}, Init::Ones, rng);
        b.ln1_b = &ps.add(prefix + ".ln1.b", {d_in}, Init::Zeros, rng);
        b.Wq = &ps.add(prefix + ".wq", {d_in, d_out}, Init::Normal, rng);
        b.bq = &ps.add(prefix + ".bq", {d_out}, Init::Zeros, rng);
        b.Wk = &ps.add(prefix + ".wk", {d_in, d_out}, Init::Normal, rng);
        b.bk = &ps.add(prefix + ".bk", {d_out}, Init::Zeros, rng);
        b.Wv = &ps.add(prefix + ".wv", {d_in, d_out}, Init::Normal, rng);
        b.bv = &ps.add(prefix + ".bv", {d_out}, Init::Zeros, rng);
        b.Wo = &ps.add(prefix + ".wo", {d_out, d_out}, Init::Normal, rng);
        b.bo = &ps.add(prefix + ".bo", {d_out}, Init::Zeros, rng);
        if (d_in != d_out) b.Ws = &ps.add(prefix + ".ws", {d_in, d_out}, Init::Normal, rng);
        b.ln2_g = &ps.add(prefix + ".ln2.g", {d_out}, Init::Ones, rng);
        b.ln2_b = &ps.add(prefix + ".ln2.b", {d_out}, Init::Zeros, rng);
        b.W1 = &ps.add(prefix + ".ffn.w1", {d_out, 4 * d_out}, Init::Normal, rng);
        b.b1 = &ps.add(prefix + ".ffn.b1", {4 * d_out}, Init::Zeros, rng);
        b.W2 = &ps.add(prefix + ".ffn.w2", {4 * d_out, d_out}, Init::Normal, rng);
        b.b2 = &ps.add(prefix + ".ffn.b2", {d_out}, Init::Zeros, rng);
        return b;
    }

    Var forward(ForwardCtx& cx, Var x) const {
        Tape& t = cx.t;
        Var tn = ops::layer_norm(t, x, cx.P(*ln1_g), cx.P(*ln1_b));
        Var Q = ops::linear(t, tn, cx.P(*Wq), cx.P(*bq));
        Var K = ops::linear(t, tn, cx.P(*Wk), cx.P(*bk));
        Var V = ops::linear(t, tn, cx.P(*Wv), cx.P(*bv));
        Var a = ops::sdpa(t, Q, K, V, heads);
        a = ops::linear(t, a, cx.P(*Wo), cx.P(*bo));
        a = dropout(cx, a);
        Var shortcut = Ws ? ops::linear(t, x, cx.P(*Ws), Var{}) : x;
        Var y = ops::add(t, shortcut, a);
        Var un = ops::layer_norm(t, y, cx.P(*ln2_g), cx.P(*ln2_b));
        Var hmid = ops::relu(t, ops::linear(t, un, cx.P(*W1), cx.P(*b1)));
        hmid = dropout(cx, hmid);
        Var f = ops::linear(t, hmid, cx.P(*W2), cx.P(*b2));
        return ops::add(t, y, f);
    }
};

// ---- finite-difference gradient checking ----

// A scalar loss as a function of a parameter vector, rebuilt per evaluation.
class GradProbe {
public:
    virtual ~GradProbe() = default;
    virtual long long size() const = 0;
    virtual double get(long long i) const = 0;
    virtual void set(long long i, double v) = 0;
    virtual double eval() = 0;
    virtual std::vector<double> analytic() = 0;
};

// Probe over a list of Parameters with a graph builder. The builder must be
// deterministic (re-seed any dropout stream internally on every call).
class ParamProbe : public GradProbe {
public:
    ParamProbe(std::vector<Parameter*> params, std::function<Var(Tape&)> build)
        : params_(std::move(params)), build_(std::move(build)) {
        offsets_.reserve(params_.size());
        long long off = 0;
        for (Parameter* p : params_) {
            offsets_.push_back(off);
            off += p->value.numel();
        }
        total_ = off;
    }

    long long size() const override { return total_; }

    double get(long long i) const override {
        auto [p, j] = locate(i);
        return p->value[j];
    }

    void set(long long i, double v) override {
        auto [p, j] = locate(i);
        p->value[j] = v;
    }

    double eval() override {
        Tape t;
        Var loss = build_(t);
        double v = t.val(loss)[0];
        if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss value");
        return v;
    }

    std::vector<double> analytic() override {
        for (Parameter* p : params_) p->zero_grad();
        Tape t;
        Var loss = build_(t);
        if (!std::isfinite(t.val(loss)[0]))
            throw NumericError("grad_check: non-finite loss value");
        t.backward(loss);
        std::vector<double> g;
        g.reserve(static_cast<size_t>(total_));
        for (Parameter* p : params_)
            for (long long j = 0; j < p->grad.numel(); ++j) g.push_back(p->grad[j]);
        return g;
    }

private:
    std::pair<Parameter*, long long> locate(long long i) const {
        CMML_CHECK(i >= 0 && i < total_, "ParamProbe: index out of range");
        size_t lo = 0, hi = params_.size();
        while (hi - lo > 1) {
            size_t mid = (lo + hi) / 2;
            if (offsets_[mid] <= i)
                lo = mid;
            else
                hi = mid;
        }
        return {params_[lo], i - offsets_[lo]};
    }

    std::vector<Parameter*> params_;
    std::function<Var(Tape&)> build_;
    std::vector<long long> offsets_;
    long long total_ = 0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    long long worst_index = -1;
    double worst_analytic = 0.0;
    double worst_central = 0.0;
};

// max over components of |analytic - central| / (|central| + 1e-8).
inline GradCheckReport grad_check_range(GradProbe& probe, double h, long long lo, long long hi,
                                        const std::vector<double>& g) {
    GradCheckReport rep;
    for (long long i = lo; i < hi; ++i) {
        double x0 = probe.get(i);
        probe.set(i, x0 + h);
        double fp = probe.eval();
        probe.set(i, x0 - h);
        double fm = probe.eval();
        probe.set(i, x0);
        double cd = (fp - fm) / (2.0 * h);
        double rel = std::abs(g[static_cast<size_t>(i)] - cd) / (std::abs(cd) + 1e-8);
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_index = i;
            rep.worst_analytic = g[static_cast<size_t>(i)];
            rep.worst_central = cd;
        }
    }
    return rep;
}

inline double grad_check(GradProbe& probe, double h) {
    std::vector<double> g = probe.analytic();
    return grad_check_range(probe, h, 0, probe.size(), g).max_rel_err;
}

// Shards the component sweep over threads; each thread gets its own probe from
// the factory (a distinct model instance), so no state is shared. The merged
// result is order-independent (max), hence deterministic.
inline GradCheckReport grad_check_parallel(
    const std::function<std::unique_ptr<GradProbe>()>& factory, double h, int threads) {
    auto first = factory();
    long long n = first->size();
    std::vector<double> g = first->analytic();
    if (threads < 1) threads = 1;
    std::vector<GradCheckReport> reports(static_cast<size_t>(threads));
    std::vector<std::thread> pool;
    long long chunk = (n + threads - 1) / threads;
    for (int ti = 0; ti < threads; ++ti) {
        long long lo = ti * chunk, hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&, ti, lo, hi]() {
            auto probe = ti == 0 ? std::move(first) : factory();
            reports[static_cast<size_t>(ti)] = grad_check_range(*probe, h, lo, hi, g);
        });
    }
    for (auto& th : pool) th.join();
    GradCheckReport best;
    for (const auto& r : reports)
        if (r.max_rel_err >= best.max_rel_err && r.worst_index >= 0) best = r;
    return best;
}

}  // namespace cmml
