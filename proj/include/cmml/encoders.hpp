#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "cmml/data.hpp"
#include "cmml/nn.hpp"

namespace cmml {

// Deterministic stand-in for a frozen language model: whitespace tokens, each
// hashed to a fixed pseudo-random vector in d_r, truncated/padded to S_M rows.
// Owns no trainable parameters; identical across runs and platforms.
inline Tensor embed_text(const std::string& text, int S_M, int d_r) {
    CMML_CHECK(S_M >= 1 && d_r >= 1, "embed_text: bad dimensions");
    Tensor out({S_M, d_r});
    std::istringstream is(text);
    std::string tok;
    int row = 0;
    while (row < S_M && (is >> tok)) {
        uint64_t state = fnv1a64(tok);
        for (int i = 0; i < d_r; ++i) {
            uint64_t u = splitmix64(state);
            // uniform in [-1, 1]
            out.at2(row, i) = static_cast<double>(u >> 11) * (2.0 / 9007199254740992.0) - 1.0;
        }
        ++row;
    }
    return out;
}

// Toy per-modality image encoder: a two-layer perceptron producing S_m tokens
// of width c, then a modality-specific linear + ReLU projection to d.
struct ImageEncoder {
    int in_dim = 0, S = 0, c = 0, d = 0;
    Parameter *W1 = nullptr, *b1 = nullptr, *W2 = nullptr, *b2 = nullptr;
    Parameter *Wp = nullptr, *bp = nullptr;

    static ImageEncoder create(ParamSet& ps, const std::string& prefix, int in_dim, int hidden,
                               int S, int c, int d, Rng& rng) {
        ImageEncoder e;
        e.in_dim = in_dim;
        e.S = S;
        e.c = c;
        e.d = d;
        e.W1 = &ps.add(prefix + ".w1", {in_dim, hidden}, Init::Normal, rng);
        e.b1 = &ps.add(prefix + ".b1", {hidden}, Init::Zeros, rng);
        e.W2 = &ps.add(prefix + ".w2", {hidden, S * c}, Init::Normal, rng);
        e.b2 = &ps.add(prefix + ".b2", {S * c}, Init::Zeros, rng);
        e.Wp = &ps.add(prefix + ".proj.w", {c, d}, Init::Normal, rng);
        e.bp = &ps.add(prefix + ".proj.b", {d}, Init::Zeros, rng);
        return e;
    }

    // x: [B, in_dim] -> [B, S, d], elementwise nonnegative.
    Var forward(ForwardCtx& cx, Var x) const {
        Tape& t = cx.t;
        const Tensor& xv = t.val(x);
        CMML_CHECK(xv.last() == in_dim, "image encoder: feature length mismatch");
        int B = static_cast<int>(xv.rows());
        Var h = ops::relu(t, ops::linear(t, x, cx.P(*W1), cx.P(*b1)));
        Var flat = ops::linear(t, h, cx.P(*W2), cx.P(*b2));
        Var toks = ops::reshape(t, flat, {B, S, c});
        return ops::relu(t, ops::linear(t, toks, cx.P(*Wp), cx.P(*bp)));
    }
};

// Trainable projection behind the frozen text embedder.
struct TabularEncoder {
    int d_r = 0, S = 0, d = 0;
    Parameter *Wp = nullptr, *bp = nullptr;

    static TabularEncoder create(ParamSet& ps, const std::string& prefix, int d_r, int S, int d,
                                 Rng& rng) {
        TabularEncoder e;
        e.d_r = d_r;
        e.S = S;
        e.d = d;
        e.Wp = &ps.add(prefix + ".proj.w", {d_r, d}, Init::Normal, rng);
        e.bp = &ps.add(prefix + ".proj.b", {d}, Init::Zeros, rng);
        return e;
    }

    // embedded: [B, S, d_r] (frozen constants) -> [B, S, d]
    Var forward(ForwardCtx& cx, Var embedded) const {
        CMML_CHECK(cx.t.val(embedded).last() == d_r, "tabular encoder: d_r mismatch");
        return ops::relu(cx.t, ops::linear(cx.t, embedded, cx.P(*Wp), cx.P(*bp)));
    }

    Var encode(ForwardCtx& cx, const std::vector<std::pair<std::string, std::string>>& attributes,
               const TemplateSchema& schema) const {
        Tensor emb = embed_text(render_attributes(attributes, schema), S, d_r);
        return forward(cx, cx.C(emb.reshaped({1, S, d_r})));
    }
};

}  // namespace cmml
