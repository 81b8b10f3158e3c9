#pragma once

#include <vector>

#include "cmml/nn.hpp"

namespace cmml {

// Modality-specific token store. Non-differentiable state: written only by the
// moving-average rule, read as a constant during retrieval.
class MemoryBank {
public:
    MemoryBank() = default;

    MemoryBank(int n_tokens, int d, double lambda, Rng& rng) : lambda_(lambda) {
        CMML_CHECK(n_tokens >= 1 && d >= 1, "memory bank: bad dimensions");
        CMML_CHECK(lambda >= 0.0 && lambda <= 1.0, "memory bank: lambda must be in [0,1]");
        bank_ = Tensor({n_tokens, d});
        rng.fill_normal(bank_, 0.02);
    }

    int n_tokens() const { return bank_.dim(0); }
    int dim() const { return bank_.dim(1); }
    double decay() const { return lambda_; }
    bool frozen() const { return frozen_; }
    void freeze() { frozen_ = true; }

    const Tensor& contents() const { return bank_; }
    Tensor& contents_mut() { return bank_; }

    // Nearest-slot moving average: each input token updates exactly the slot
    // with the highest cosine similarity, in ascending token order (later
    // tokens see earlier updates). Returns false when skipped because frozen.
    bool update(const Tensor& tokens) {
        CMML_CHECK(tokens.last() == dim(), "memory update: token width mismatch");
        if (frozen_) return false;
        long long S = tokens.rows();
        int N = n_tokens(), d = dim();
        for (long long k = 0; k < S; ++k) {
            const double* x = tokens.data() + k * d;
            int best = 0;
            double best_cs = cosine_value(x, bank_.data(), d);
            for (int b = 1; b < N; ++b) {
                double cs = cosine_value(x, bank_.data() + static_cast<long long>(b) * d, d);
                if (cs > best_cs) {
                    best_cs = cs;
                    best = b;
                }
            }
            double* slot = bank_.data() + static_cast<long long>(best) * d;
            for (int i = 0; i < d; ++i) slot[i] = (1.0 - lambda_) * slot[i] + lambda_ * x[i];
        }
        return true;
    }

private:
    Tensor bank_;
    double lambda_ = 0.2;
    bool frozen_ = false;
};

namespace memory {

// Soft-attention retrieval weights: softmax over slots of the cosine scores.
// z_flat: [m, d] synthesized tokens, bank enters as a constant.
inline Var retrieval_weights(Tape& t, Var z_flat, const MemoryBank& bank) {
    Var b = t.input(bank.contents());
    return ops::softmax(t, ops::cosine_matrix(t, z_flat, b), -1);
}

// Convex blend of bank rows under the retrieval weights.
inline Var retrieved_blend(Tape& t, Var weights, const MemoryBank& bank) {
    return ops::matmul(t, weights, t.input(bank.contents()));
}

// Full retrieval: Z + MHCA(Z, G) with G gathered from the bank.
// z: [..., S, d]; enrich holds the modality's cross-attention parameters.
inline Var retrieve(ForwardCtx& cx, Var z, const MemoryBank& bank, const Mhca& enrich) {
    Tape& t = cx.t;
    const Tensor& zv = t.val(z);
    int d = zv.last();
    long long m = zv.rows();
    Var flat = ops::reshape(t, z, {static_cast<int>(m), d});
    Var w = retrieval_weights(t, flat, bank);
    Var g = retrieved_blend(t, w, bank);
    Var g_shaped = ops::reshape(t, g, zv.shape());
    return ops::add(t, z, enrich.forward(cx, z, g_shaped));
}

// Per-token cosine fidelity between originals and completions, averaged over
// the token axis: [..., S, d] x 2 -> [...].
inline Var token_fidelity(Tape& t, Var originals, Var completed) {
    return ops::reduce_last(t, ops::cosine_rows(t, originals, completed), ops::Reduce::Mean);
}

// 1 - mean_k CS(x_k, z_k) for one modality; the model averages over the
// missing modalities of each sample.
inline Var similarity_loss_term(Tape& t, Var originals, Var completed) {
    Var fid = token_fidelity(t, originals, completed);
    Var ones = t.input(Tensor::full(t.val(fid).shape(), 1.0));
    return ops::sub(t, ones, fid);
}

}  // namespace memory
}  // namespace cmml
