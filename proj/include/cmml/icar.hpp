#pragma once

#include <vector>

#include "cmml/nn.hpp"

namespace cmml {
namespace icar {

struct Prototypes {
    Var P;                       // [n_present, d]
    std::vector<int> class_ids;  // label of each prototype row
    std::vector<int> row_of;     // class -> row index, -1 when absent
};

// Batch-local class prototypes: mean of fused features per class present in
// the batch. Differentiable through the fused features (the group-by matrix
// is constant).
inline Prototypes compute_prototypes(Tape& t, Var fused, const std::vector<int>& labels, int C) {
    const Tensor& F = t.val(fused);
    CMML_CHECK(F.ndim() == 2 && static_cast<int>(labels.size()) == F.dim(0),
               "compute_prototypes: fused must be [B, d] with one label per row");
    int B = F.dim(0);
    std::vector<int> counts(static_cast<size_t>(C), 0);
    for (int y : labels) {
        CMML_CHECK(y >= 0 && y < C, "compute_prototypes: label out of range");
        counts[static_cast<size_t>(y)]++;
    }
    Prototypes out;
    out.row_of.assign(static_cast<size_t>(C), -1);
    for (int c = 0; c < C; ++c) {
        if (counts[static_cast<size_t>(c)] == 0) continue;
        out.row_of[static_cast<size_t>(c)] = static_cast<int>(out.class_ids.size());
        out.class_ids.push_back(c);
    }
    int n = static_cast<int>(out.class_ids.size());
    Tensor sel({n, B});
    for (int i = 0; i < B; ++i) {
        int row = out.row_of[static_cast<size_t>(labels[static_cast<size_t>(i)])];
        sel.at2(row, i) = 1.0 / counts[static_cast<size_t>(labels[static_cast<size_t>(i)])];
    }
    out.P = ops::matmul(t, t.input(std::move(sel)), fused);
    return out;
}

// Generalized contrastive loss over an anchor set with per-anchor positive and
// candidate masks (candidates = S+ u S-). Anchors with an empty positive set
// are excluded from the average; if none remain the loss is zero.
inline Var contrastive_loss(Tape& t, Var anchors, Var candidates, const Tensor& pos_mask,
                            const Tensor& set_mask, double tau) {
    CMML_CHECK(tau > 0.0, "contrastive_loss: tau must be positive");
    const Tensor& A = t.val(anchors);
    const Tensor& Cc = t.val(candidates);
    int Na = A.dim(0), Nc = Cc.dim(0);
    CMML_CHECK(pos_mask.dim(0) == Na && pos_mask.dim(1) == Nc && set_mask.same_shape(pos_mask),
               "contrastive_loss: mask shape mismatch");
    std::vector<int> valid;
    for (int i = 0; i < Na; ++i) {
        bool has_pos = false;
        for (int j = 0; j < Nc; ++j)
            if (pos_mask.at2(i, j) != 0.0) has_pos = true;
        if (has_pos) valid.push_back(i);
    }
    if (valid.empty()) return t.input(Tensor::scalar(0.0), true);

    Var sim = ops::cosine_matrix(t, anchors, candidates);
    Var e = ops::exp(t, ops::scale(t, sim, 1.0 / tau));
    Var num = ops::reduce_last(t, ops::mul(t, e, t.input(pos_mask)), ops::Reduce::Sum);
    Var den = ops::reduce_last(t, ops::mul(t, e, t.input(set_mask)), ops::Reduce::Sum);
    if (static_cast<int>(valid.size()) < Na) {
        // drop excluded anchors before the logs (their numerators are zero)
        num = ops::gather_batch(t, num, valid);
        den = ops::gather_batch(t, den, valid);
    }
    Var per_anchor = ops::sub(t, ops::log(t, den), ops::log(t, num));  // -log(num/den)
    return ops::mean_all(t, per_anchor);
}

// Sample-anchored contrastive loss: each sample against its own prototype
// (positive) and the other present prototypes (negatives).
inline Var sample_cl(Tape& t, Var fused, const std::vector<int>& labels, const Prototypes& protos,
                     double tau) {
    int B = t.val(fused).dim(0);
    int n = static_cast<int>(protos.class_ids.size());
    Tensor pos({B, n}), set({B, n});
    for (int i = 0; i < B; ++i) {
        for (int p = 0; p < n; ++p) {
            bool own = protos.class_ids[static_cast<size_t>(p)] == labels[static_cast<size_t>(i)];
            pos.at2(i, p) = own ? 1.0 : 0.0;
            set.at2(i, p) = 1.0;
        }
    }
    return contrastive_loss(t, fused, protos.P, pos, set, tau);
}

// Prototype-anchored contrastive loss: each present prototype against its
// same-label samples (positives) and the remaining prototypes (negatives).
// Other-label samples are not part of the candidate set.
inline Var proto_cl(Tape& t, Var fused, const std::vector<int>& labels, const Prototypes& protos,
                    double tau) {
    int B = t.val(fused).dim(0);
    int n = static_cast<int>(protos.class_ids.size());
    Var cands = ops::concat_tokens(t, {fused, protos.P});
    Tensor pos({n, B + n}), set({n, B + n});
    for (int p = 0; p < n; ++p) {
        int cls = protos.class_ids[static_cast<size_t>(p)];
        for (int i = 0; i < B; ++i) {
            if (labels[static_cast<size_t>(i)] == cls) {
                pos.at2(p, i) = 1.0;
                set.at2(p, i) = 1.0;
            }
        }
        for (int q = 0; q < n; ++q)
            if (q != p) set.at2(p, B + q) = 1.0;
    }
    return contrastive_loss(t, protos.P, cands, pos, set, tau);
}

// L = L_ce + alpha * L_sim + beta * L_sam + gamma * L_proto
inline Var total_loss(Tape& t, Var ce, Var sim, Var sam, Var proto, double alpha, double beta,
                      double gamma) {
    Var l = ce;
    l = ops::add(t, l, ops::scale(t, sim, alpha));
    l = ops::add(t, l, ops::scale(t, sam, beta));
    l = ops::add(t, l, ops::scale(t, proto, gamma));
    return l;
}

}  // namespace icar
}  // namespace cmml
