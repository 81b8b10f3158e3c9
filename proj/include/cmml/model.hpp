#pragma once

#include <map>
#include <string>
#include <vector>

#include "cmml/data.hpp"
#include "cmml/encoders.hpp"
#include "cmml/icar.hpp"
#include "cmml/memory_bank.hpp"

namespace cmml {

struct ModelConfig {
    int M = 3;
    int C = 3;
    std::vector<int> S = {8, 8, 8};
    std::vector<int> feature_lens = {16, 16};
    int d = 64;
    int d_r = 128;
    int enc_hidden = 64;
    int enc_c = 32;
    int L = 5;
    int r = 4;
    int heads = 4;
    int N_t = 64;
    double lambda = 0.2;
    int N_e = 25;
    double tau = 0.07;
    double alpha = 1.0, beta = 1.0, gamma = 1.0;
    double dropout = 0.5;

    // variant switches
    bool no_memory = false;
    bool no_context = false;
    bool no_icma = false;
    bool no_instance_adaptive = false;
    bool no_cdr = false;
    bool zero_imputation = false;  // zeros for missing tokens, completion/alignment disabled

    int n_ct() const {
        if (no_context || zero_imputation) return 0;
        double mean = 0;
        for (int s : S) mean += s;
        return static_cast<int>(std::llround(mean / S.size()));
    }

    int bottleneck() const { return d / r; }

    void validate() const {
        if (M < 2) throw ConfigError("config: M must be >= 2");
        if (C < 2) throw ConfigError("config: C must be >= 2");
        if (static_cast<int>(S.size()) != M) throw ConfigError("config: S must list M token counts");
        for (int s : S)
            if (s < 1) throw ConfigError("config: token counts must be >= 1");
        if (static_cast<int>(feature_lens.size()) != M - 1)
            throw ConfigError("config: feature_lens must list M-1 lengths");
        if (d < 1 || d_r < 1 || enc_hidden < 1 || enc_c < 1)
            throw ConfigError("config: dimensions must be positive");
        if (heads < 1 || d % heads != 0)
            throw ConfigError("config: d must be divisible by the head count");
        if (r < 1 || d % r != 0) throw ConfigError("config: d must be divisible by r");
        if (bottleneck() % heads != 0)
            throw ConfigError("config: d/r must be divisible by the head count");
        if (L < 1) throw ConfigError("config: L must be >= 1");
        if (N_t < 1) throw ConfigError("config: N_t must be >= 1");
        if (lambda < 0.0 || lambda > 1.0) throw ConfigError("config: lambda must be in [0,1]");
        if (N_e < 0) throw ConfigError("config: N_e must be >= 0");
        if (tau <= 0.0) throw ConfigError("config: tau must be positive");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("config: dropout must be in [0,1)");
    }

    bool has_completion() const { return !zero_imputation; }
    bool has_memory() const { return !zero_imputation && !no_memory; }
    bool has_alignment() const { return !zero_imputation && !no_icma; }
    bool has_reference_ca() const {
        return has_alignment() && !no_context && !no_instance_adaptive;
    }
};

// One prepared mini-batch: raw image payloads, frozen text embeddings, labels
// and availability masks.
struct Batch {
    int B = 0;
    std::vector<Tensor> image_feats;  // per image modality: [B, feature_len]
    Tensor text_emb;                  // [B, S_M, d_r]
    std::vector<int> labels;
    std::vector<AvailabilityMask> masks;
};

inline std::vector<Tensor> embed_dataset_texts(const Dataset& ds, int S_M, int d_r) {
    std::vector<Tensor> out;
    out.reserve(ds.samples.size());
    for (const RawSample& s : ds.samples)
        out.push_back(embed_text(render_attributes(s.attributes, ds.manifest.schema), S_M, d_r));
    return out;
}

inline Batch make_batch(const Dataset& ds, const std::vector<int>& indices,
                        const std::vector<AvailabilityMask>& masks,
                        const std::vector<Tensor>& text_cache, int S_M, int d_r) {
    CMML_CHECK(indices.size() == masks.size(), "make_batch: one mask per sample");
    Batch b;
    b.B = static_cast<int>(indices.size());
    int n_img = ds.manifest.M - 1;
    for (int j = 0; j < n_img; ++j) {
        int len = ds.manifest.feature_lens[static_cast<size_t>(j)];
        Tensor m({b.B, len});
        for (int i = 0; i < b.B; ++i) {
            const auto& src = ds.samples[static_cast<size_t>(indices[static_cast<size_t>(i)])]
                                  .image_features[static_cast<size_t>(j)];
            CMML_CHECK(static_cast<int>(src.size()) == len, "make_batch: payload length mismatch");
            std::copy(src.begin(), src.end(), m.data() + static_cast<long long>(i) * len);
        }
        b.image_feats.push_back(std::move(m));
    }
    b.text_emb = Tensor({b.B, S_M, d_r});
    long long block = static_cast<long long>(S_M) * d_r;
    for (int i = 0; i < b.B; ++i) {
        const Tensor& e = text_cache[static_cast<size_t>(indices[static_cast<size_t>(i)])];
        CMML_CHECK(e.numel() == block, "make_batch: text cache dimension mismatch");
        std::copy(e.data(), e.data() + block, b.text_emb.data() + i * block);
    }
    for (int i = 0; i < b.B; ++i) {
        int idx = indices[static_cast<size_t>(i)];
        b.labels.push_back(ds.samples[static_cast<size_t>(idx)].label);
        b.masks.push_back(masks[static_cast<size_t>(i)]);
    }
    return b;
}

// ---- completion: dynamic missing-token init, additive embeddings, CRTA ----

struct CompletionModule {
    int M = 0, d = 0, N_ct = 0, L = 0, heads = 4;
    std::vector<int> S;
    std::vector<Parameter*> seeds;        // e_o, one per modality
    std::vector<Parameter*> e_pos, e_mt;  // [S_j, d]
    std::vector<Parameter*> e_ms;         // [2*S_j, d]; rows [0,S) = missing, [S,2S) = available
    Parameter* e_c = nullptr;             // [N_ct, d]
    Mhca init_ca;
    std::vector<std::pair<TransformerBlock, TransformerBlock>> rtas;  // encoder, decoder

    static CompletionModule create(ParamSet& ps, const ModelConfig& cfg, Rng& rng) {
        CompletionModule m;
        m.M = cfg.M;
        m.d = cfg.d;
        m.N_ct = cfg.n_ct();
        m.L = cfg.L;
        m.heads = cfg.heads;
        m.S = cfg.S;
        for (int j = 0; j < cfg.M; ++j) {
            std::string pj = "completion.mod" + std::to_string(j);
            int Sj = cfg.S[static_cast<size_t>(j)];
            m.seeds.push_back(&ps.add(pj + ".seed", {Sj, cfg.d}, Init::Normal, rng));
            m.e_pos.push_back(&ps.add(pj + ".e_pos", {Sj, cfg.d}, Init::Normal, rng));
            m.e_mt.push_back(&ps.add(pj + ".e_mt", {Sj, cfg.d}, Init::Normal, rng));
            m.e_ms.push_back(&ps.add(pj + ".e_ms", {2 * Sj, cfg.d}, Init::Normal, rng));
        }
        if (m.N_ct > 0)
            m.e_c = &ps.add("completion.context", {m.N_ct, cfg.d}, Init::Normal, rng);
        m.init_ca = Mhca::create(ps, "completion.init_ca", cfg.d, cfg.heads, rng);
        for (int l = 0; l < cfg.L; ++l) {
            std::string pl = "crta.rta" + std::to_string(l);
            m.rtas.push_back(
                {TransformerBlock::create(ps, pl + ".enc", cfg.d, cfg.bottleneck(), cfg.heads, rng),
                 TransformerBlock::create(ps, pl + ".dec", cfg.bottleneck(), cfg.d, cfg.heads, rng)});
        }
        return m;
    }

    // Missing-token initialization: the modality seed queries the concatenation
    // of the available modalities' tokens (no residual from the seed).
    Var init_missing_tokens(ForwardCtx& cx, int o, const std::vector<Var>& available_tokens,
                            int group_size) const {
        CMML_CHECK(!available_tokens.empty(),
                   "init_missing_tokens: needs at least one available modality");
        Var kv = ops::concat_tokens(cx.t, available_tokens);
        Var q = ops::broadcast0(cx.t, cx.P(*seeds[static_cast<size_t>(o)]), group_size);
        return init_ca.forward(cx, q, kv);
    }

    // f_j = x_tilde + e_pos + e_mt + e_ms[delta_j]
    Var assemble_modality(ForwardCtx& cx, Var x_tilde, int j, bool available) const {
        Tape& t = cx.t;
        int Sj = S[static_cast<size_t>(j)];
        Var e = ops::add(t, cx.P(*e_pos[static_cast<size_t>(j)]),
                         cx.P(*e_mt[static_cast<size_t>(j)]));
        Var ms = ops::slice_tokens(t, cx.P(*e_ms[static_cast<size_t>(j)]), available ? Sj : 0, Sj);
        e = ops::add(t, e, ms);
        return ops::add_rows(t, x_tilde, e);
    }

    // f = [e_c; f_1; ...; f_M]
    Var assemble_input(ForwardCtx& cx, const std::vector<Var>& f_js, int B) const {
        std::vector<Var> pieces;
        if (N_ct > 0) pieces.push_back(ops::broadcast0(cx.t, cx.P(*e_c), B));
        for (Var f : f_js) pieces.push_back(f);
        return ops::concat_tokens(cx.t, pieces);
    }

    struct CrtaTrace {
        Var Z;  // accumulated output: sum of all stage outputs
        std::vector<Var> stage_inputs;
        std::vector<Var> stage_outputs;
    };

    // z_1 = Phi_1(f); z_l = Phi_l(f + sum_{k<l} z_k); Z = sum_l z_l
    CrtaTrace crta_forward(ForwardCtx& cx, Var f) const {
        Tape& t = cx.t;
        CrtaTrace tr;
        Var running;  // sum of stage outputs so far
        for (int l = 0; l < L; ++l) {
            Var in = l == 0 ? f : ops::add(t, f, running);
            tr.stage_inputs.push_back(in);
            Var z = rtas[static_cast<size_t>(l)].second.forward(
                cx, rtas[static_cast<size_t>(l)].first.forward(cx, in));
            tr.stage_outputs.push_back(z);
            running = l == 0 ? z : ops::add(t, running, z);
        }
        tr.Z = running;
        return tr;
    }

    Var context_prior(Tape& t, Var Z) const {
        CMML_CHECK(N_ct > 0, "context_prior: no context tokens configured");
        return ops::slice_tokens(t, Z, 0, N_ct);
    }

    Var modal_slice(Tape& t, Var Z, int j) const {
        int start = N_ct;
        for (int k = 0; k < j; ++k) start += S[static_cast<size_t>(k)];
        return ops::slice_tokens(t, Z, start, S[static_cast<size_t>(j)]);
    }
};

// ---- instance-adaptive alignment ----

struct IcarModule {
    bool has_ref_ca = false;
    Mhca ref_ca;
    std::vector<Mhca> align_mhca;  // modality-specific

    static IcarModule create(ParamSet& ps, const ModelConfig& cfg, Rng& rng) {
        IcarModule m;
        m.has_ref_ca = cfg.has_reference_ca();
        if (m.has_ref_ca) m.ref_ca = Mhca::create(ps, "icar.ref_ca", cfg.d, cfg.heads, rng);
        if (cfg.has_alignment())
            for (int j = 0; j < cfg.M; ++j)
                m.align_mhca.push_back(
                    Mhca::create(ps, "icar.align.mod" + std::to_string(j), cfg.d, cfg.heads, rng));
        return m;
    }

    // e_inst = e_prior + CA(e_prior, Cat(Z_1..Z_M))
    Var formulate_reference(ForwardCtx& cx, Var e_prior, Var z_cat) const {
        CMML_CHECK(has_ref_ca, "formulate_reference: reference attention not configured");
        return ops::add(cx.t, e_prior, ref_ca.forward(cx, e_prior, z_cat));
    }

    // F_j = F_j + MHCA_j(F_j, reference)
    Var align(ForwardCtx& cx, int j, Var Fj, Var reference) const {
        return ops::add(cx.t, Fj,
                        align_mhca[static_cast<size_t>(j)].forward(cx, Fj, reference));
    }
};

struct Classifier {
    Parameter *W1 = nullptr, *b1 = nullptr, *W2 = nullptr, *b2 = nullptr;

    static Classifier create(ParamSet& ps, int d, int C, Rng& rng) {
        Classifier c;
        c.W1 = &ps.add("classifier.w1", {d, d}, Init::Normal, rng);
        c.b1 = &ps.add("classifier.b1", {d}, Init::Zeros, rng);
        c.W2 = &ps.add("classifier.w2", {d, C}, Init::Normal, rng);
        c.b2 = &ps.add("classifier.b2", {C}, Init::Zeros, rng);
        return c;
    }

    Var forward(ForwardCtx& cx, Var fused) const {
        Tape& t = cx.t;
        Var h = ops::relu(t, ops::linear(t, fused, cx.P(*W1), cx.P(*b1)));
        h = dropout(cx, h);
        return ops::linear(t, h, cx.P(*W2), cx.P(*b2));
    }
};

// GAP over the token axis of the token-wise concatenation.
inline Var fuse_features(Tape& t, const std::vector<Var>& F) {
    return ops::mean_tokens(t, ops::concat_tokens(t, F));
}

struct ForwardOptions {
    bool losses = false;   // compute L_ce/L_sim/contrastive terms
    bool dropout = false;  // training-time dropout (needs rng)
    Rng* rng = nullptr;
    bool encode_all = false;  // also encode modalities that are missing everywhere
};

struct ForwardResult {
    int B = 0;
    Var logits, fused;
    Var loss_ce, loss_sim, loss_sam, loss_proto, loss_total;
    Var f_input, Z, e_prior, reference;
    std::vector<Var> stage_inputs, stage_outputs;
    std::vector<Var> x_tokens;   // encoder outputs per modality (may be invalid)
    std::vector<Var> z_modal;    // CRTA modal slices
    std::vector<Var> F_set;      // completed feature set (originals / enriched)
    std::vector<Var> F_aligned;  // after alignment
    std::vector<std::vector<int>> groups;          // batch indices per pattern group
    std::vector<AvailabilityMask> group_masks;
    std::map<std::pair<int, int>, Var> completed;  // (group, modality) -> Z_bar
};

class Model {
public:
    Model(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)), seed_(seed) {
        cfg_.validate();
        Rng rng(seed);
        for (int j = 0; j < cfg_.M - 1; ++j)
            img_enc_.push_back(ImageEncoder::create(
                params_, "encoder.mod" + std::to_string(j),
                cfg_.feature_lens[static_cast<size_t>(j)], cfg_.enc_hidden,
                cfg_.S[static_cast<size_t>(j)], cfg_.enc_c, cfg_.d, rng));
        tab_enc_ = TabularEncoder::create(params_, "encoder.tabular", cfg_.d_r,
                                          cfg_.S[static_cast<size_t>(cfg_.M - 1)], cfg_.d, rng);
        if (cfg_.has_completion()) comp_ = CompletionModule::create(params_, cfg_, rng);
        if (cfg_.has_memory()) {
            for (int j = 0; j < cfg_.M; ++j) {
                banks_.emplace_back(cfg_.N_t, cfg_.d, cfg_.lambda, rng);
                enrich_.push_back(
                    Mhca::create(params_, "memory.enrich.mod" + std::to_string(j), cfg_.d,
                                 cfg_.heads, rng));
            }
        }
        icar_ = IcarModule::create(params_, cfg_, rng);
        cls_ = Classifier::create(params_, cfg_.d, cfg_.C, rng);
    }

    const ModelConfig& config() const { return cfg_; }
    uint64_t seed() const { return seed_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }
    std::vector<MemoryBank>& banks() { return banks_; }
    const std::vector<MemoryBank>& banks() const { return banks_; }
    const CompletionModule& completion() const { return comp_; }
    const IcarModule& icar() const { return icar_; }
    long long parameter_count() const { return params_.scalar_count(); }

    ForwardResult forward(Tape& t, const Batch& batch, const ForwardOptions& opt) {
        validate_batch(batch);
        ForwardCtx cx(t, opt.dropout, opt.rng, cfg_.dropout);
        ForwardResult res;
        res.B = batch.B;

        group_by_pattern(batch, res.groups, res.group_masks);
        int n_groups = static_cast<int>(res.groups.size());
        bool single_group = n_groups == 1;

        // 1) encoders. A modality missing in every sample is only encoded when
        // the caller needs the originals (training losses, fidelity probes).
        std::vector<char> used(static_cast<size_t>(cfg_.M), 0);
        for (const AvailabilityMask& m : batch.masks)
            for (int j = 0; j < cfg_.M; ++j)
                if (m.available(j)) used[static_cast<size_t>(j)] = 1;
        res.x_tokens.assign(static_cast<size_t>(cfg_.M), Var{});
        for (int j = 0; j < cfg_.M; ++j) {
            if (!used[static_cast<size_t>(j)] && !opt.losses && !opt.encode_all) continue;
            if (j < cfg_.M - 1)
                res.x_tokens[static_cast<size_t>(j)] = img_enc_[static_cast<size_t>(j)].forward(
                    cx, cx.C(batch.image_feats[static_cast<size_t>(j)]));
            else
                res.x_tokens[static_cast<size_t>(j)] = tab_enc_.forward(cx, cx.C(batch.text_emb));
        }

        // gathered original tokens per (group, modality), filled lazily
        std::vector<std::vector<Var>> gathered(static_cast<size_t>(n_groups),
                                               std::vector<Var>(static_cast<size_t>(cfg_.M)));
        auto group_tokens = [&](int g, int j) -> Var {
            Var& slot = gathered[static_cast<size_t>(g)][static_cast<size_t>(j)];
            if (!slot.valid()) {
                Var src = res.x_tokens[static_cast<size_t>(j)];
                CMML_CHECK(src.valid(), "forward: modality tokens not encoded");
                slot = single_group ? src
                                    : ops::gather_batch(t, src, res.groups[static_cast<size_t>(g)]);
            }
            return slot;
        };

        if (!cfg_.has_completion()) {
            forward_zero_imputation(cx, batch, res, group_tokens);
        } else {
            forward_completion(cx, batch, res, group_tokens);
        }

        // classification head
        res.fused = fuse_features(t, res.F_aligned);
        res.logits = cls_.forward(cx, res.fused);

        if (opt.losses) compute_losses(cx, batch, res);
        return res;
    }

    // Moving-average bank updates from this batch's extracted tokens, applied
    // per sample in batch order and per modality in ascending index order.
    // Only available modalities feed their banks. Returns the number of
    // updates skipped because the banks are frozen.
    int update_banks(Tape& t, const ForwardResult& res, const Batch& batch) {
        if (!cfg_.has_memory()) return 0;
        int skipped = 0;
        for (int i = 0; i < batch.B; ++i) {
            for (int j = 0; j < cfg_.M; ++j) {
                if (!batch.masks[static_cast<size_t>(i)].available(j)) continue;
                Var xt = res.x_tokens[static_cast<size_t>(j)];
                CMML_CHECK(xt.valid(), "update_banks: missing encoder output");
                const Tensor& all = t.val(xt);
                int Sj = cfg_.S[static_cast<size_t>(j)];
                Tensor rows({Sj, cfg_.d});
                std::copy(all.data() + static_cast<long long>(i) * Sj * cfg_.d,
                          all.data() + static_cast<long long>(i + 1) * Sj * cfg_.d, rows.data());
                if (!banks_[static_cast<size_t>(j)].update(rows)) ++skipped;
            }
        }
        return skipped;
    }

    void freeze_banks() {
        for (MemoryBank& b : banks_) b.freeze();
    }

    // Eval-style completion probe: per missing modality, the completed tokens
    // and their mean cosine fidelity against the originals.
    struct CompletionProbe {
        std::map<int, Tensor> completed;   // modality -> [S_o, d]
        std::map<int, double> fidelity;    // modality -> mean token cosine
    };

    CompletionProbe complete_features(const Dataset& ds, int sample_index,
                                      const AvailabilityMask& mask,
                                      const std::vector<Tensor>& text_cache) {
        Batch b = make_batch(ds, {sample_index}, {mask}, text_cache,
                             cfg_.S[static_cast<size_t>(cfg_.M - 1)], cfg_.d_r);
        Tape t;
        ForwardOptions opt;
        opt.encode_all = true;  // originals are needed for the fidelity readout
        ForwardResult res = forward(t, b, opt);
        CompletionProbe probe;
        for (int o : mask.missing_indices()) {
            auto it = res.completed.find({0, o});
            CMML_CHECK(it != res.completed.end(), "complete_features: missing completion");
            const Tensor& zbar = t.val(it->second);
            Tensor flat = zbar.reshaped({cfg_.S[static_cast<size_t>(o)], cfg_.d});
            probe.completed[o] = flat;
            const Tensor& orig = t.val(res.x_tokens[static_cast<size_t>(o)]);
            double fid = 0;
            int Sj = cfg_.S[static_cast<size_t>(o)];
            for (int k = 0; k < Sj; ++k)
                fid += cosine_value(orig.data() + static_cast<long long>(k) * cfg_.d,
                                    flat.data() + static_cast<long long>(k) * cfg_.d, cfg_.d);
            probe.fidelity[o] = fid / Sj;
        }
        return probe;
    }

private:
    void validate_batch(const Batch& batch) const {
        CMML_CHECK(batch.B > 0, "forward: empty batch");
        CMML_CHECK(static_cast<int>(batch.masks.size()) == batch.B, "forward: one mask per sample");
        for (const AvailabilityMask& m : batch.masks) {
            CMML_CHECK(m.M() == cfg_.M, "forward: mask length mismatch");
            CMML_CHECK(m.n_available() >= 1, "forward: mask needs >= 1 available modality");
        }
    }

    void group_by_pattern(const Batch& batch, std::vector<std::vector<int>>& groups,
                          std::vector<AvailabilityMask>& group_masks) const {
        for (int i = 0; i < batch.B; ++i) {
            const AvailabilityMask& m = batch.masks[static_cast<size_t>(i)];
            int g = -1;
            for (size_t k = 0; k < group_masks.size(); ++k)
                if (group_masks[k] == m) g = static_cast<int>(k);
            if (g < 0) {
                g = static_cast<int>(group_masks.size());
                group_masks.push_back(m);
                groups.emplace_back();
            }
            groups[static_cast<size_t>(g)].push_back(i);
        }
    }

    template <typename GroupTokens>
    void forward_zero_imputation(ForwardCtx& cx, const Batch& batch, ForwardResult& res,
                                 GroupTokens&& group_tokens) {
        Tape& t = cx.t;
        int n_groups = static_cast<int>(res.groups.size());
        bool single_group = n_groups == 1;
        for (int j = 0; j < cfg_.M; ++j) {
            std::vector<Var> pieces;
            for (int g = 0; g < n_groups; ++g) {
                int G = static_cast<int>(res.groups[static_cast<size_t>(g)].size());
                if (res.group_masks[static_cast<size_t>(g)].available(j))
                    pieces.push_back(group_tokens(g, j));
                else
                    pieces.push_back(cx.C(Tensor({G, cfg_.S[static_cast<size_t>(j)], cfg_.d})));
            }
            res.F_set.push_back(single_group ? pieces[0]
                                             : ops::scatter_batch(t, batch.B, res.groups, pieces));
        }
        res.F_aligned = res.F_set;
    }

    template <typename GroupTokens>
    void forward_completion(ForwardCtx& cx, const Batch& batch, ForwardResult& res,
                            GroupTokens&& group_tokens) {
        Tape& t = cx.t;
        int n_groups = static_cast<int>(res.groups.size());
        bool single_group = n_groups == 1;

        // 2) per-group missing-token init and additive embeddings
        std::vector<Var> f_js;
        for (int j = 0; j < cfg_.M; ++j) {
            std::vector<Var> pieces;
            for (int g = 0; g < n_groups; ++g) {
                const AvailabilityMask& gm = res.group_masks[static_cast<size_t>(g)];
                int G = static_cast<int>(res.groups[static_cast<size_t>(g)].size());
                Var xt;
                if (gm.available(j)) {
                    xt = group_tokens(g, j);
                } else {
                    std::vector<Var> avail;
                    for (int a : gm.available_indices()) avail.push_back(group_tokens(g, a));
                    xt = comp_.init_missing_tokens(cx, j, avail, G);
                }
                pieces.push_back(comp_.assemble_modality(cx, xt, j, gm.available(j)));
            }
            f_js.push_back(single_group ? pieces[0]
                                        : ops::scatter_batch(t, batch.B, res.groups, pieces));
        }

        // 3) CRTA cascade
        res.f_input = comp_.assemble_input(cx, f_js, batch.B);
        CompletionModule::CrtaTrace tr = comp_.crta_forward(cx, res.f_input);
        res.Z = tr.Z;
        res.stage_inputs = std::move(tr.stage_inputs);
        res.stage_outputs = std::move(tr.stage_outputs);
        if (comp_.N_ct > 0) res.e_prior = comp_.context_prior(t, res.Z);
        for (int j = 0; j < cfg_.M; ++j) res.z_modal.push_back(comp_.modal_slice(t, res.Z, j));

        // 4) memory enrichment of the synthesized slices
        for (int g = 0; g < n_groups; ++g) {
            const AvailabilityMask& gm = res.group_masks[static_cast<size_t>(g)];
            for (int o : gm.missing_indices()) {
                Var zo = single_group
                             ? res.z_modal[static_cast<size_t>(o)]
                             : ops::gather_batch(t, res.z_modal[static_cast<size_t>(o)],
                                                 res.groups[static_cast<size_t>(g)]);
                Var zbar = cfg_.has_memory()
                               ? memory::retrieve(cx, zo, banks_[static_cast<size_t>(o)],
                                                  enrich_[static_cast<size_t>(o)])
                               : zo;
                res.completed[{g, o}] = zbar;
            }
        }

        // 5) completed feature set: originals where available, enriched tokens
        // where missing
        for (int j = 0; j < cfg_.M; ++j) {
            std::vector<Var> pieces;
            bool everywhere = true;
            for (int g = 0; g < n_groups; ++g) {
                const AvailabilityMask& gm = res.group_masks[static_cast<size_t>(g)];
                if (gm.available(j))
                    pieces.push_back(group_tokens(g, j));
                else {
                    pieces.push_back(res.completed.at({g, j}));
                    everywhere = false;
                }
            }
            (void)everywhere;
            res.F_set.push_back(single_group ? pieces[0]
                                             : ops::scatter_batch(t, batch.B, res.groups, pieces));
        }

        // 6) instance-adaptive alignment
        if (cfg_.has_alignment()) {
            Var zcat = ops::concat_tokens(t, res.z_modal);
            if (cfg_.no_context)
                res.reference = zcat;
            else if (cfg_.no_instance_adaptive)
                res.reference = res.e_prior;
            else
                res.reference = icar_.formulate_reference(cx, res.e_prior, zcat);
            for (int j = 0; j < cfg_.M; ++j)
                res.F_aligned.push_back(
                    icar_.align(cx, j, res.F_set[static_cast<size_t>(j)], res.reference));
        } else {
            res.F_aligned = res.F_set;
        }
    }

    void compute_losses(ForwardCtx& cx, const Batch& batch, ForwardResult& res) {
        Tape& t = cx.t;
        res.loss_ce = ops::cross_entropy(t, res.logits, batch.labels);

        // L_sim: per sample, mean over its missing modalities of
        // 1 - mean_k CS(x_o, Z_bar_o); zero when nothing is missing.
        Var sim_sum;  // running scalar sum over samples
        bool any_missing = false;
        int n_groups = static_cast<int>(res.groups.size());
        for (int g = 0; g < n_groups; ++g) {
            const AvailabilityMask& gm = res.group_masks[static_cast<size_t>(g)];
            auto missing = gm.missing_indices();
            if (missing.empty() || !cfg_.has_completion()) continue;
            bool single_group = n_groups == 1;
            Var acc;  // [G]
            for (int o : missing) {
                Var orig = single_group
                               ? res.x_tokens[static_cast<size_t>(o)]
                               : ops::gather_batch(t, res.x_tokens[static_cast<size_t>(o)],
                                                   res.groups[static_cast<size_t>(g)]);
                Var term = memory::similarity_loss_term(t, orig, res.completed.at({g, o}));
                acc = acc.valid() ? ops::add(t, acc, term) : term;
            }
            Var group_sum =
                ops::sum_all(t, ops::scale(t, acc, 1.0 / static_cast<double>(missing.size())));
            sim_sum = sim_sum.valid() ? ops::add(t, sim_sum, group_sum) : group_sum;
            any_missing = true;
        }
        res.loss_sim = any_missing
                           ? ops::scale(t, sim_sum, 1.0 / static_cast<double>(batch.B))
                           : cx.C(Tensor::scalar(0.0), true);

        // CDR losses over fused features and batch-local prototypes
        if (!cfg_.no_cdr && !cfg_.zero_imputation) {
            icar::Prototypes protos = icar::compute_prototypes(t, res.fused, batch.labels, cfg_.C);
            res.loss_sam = icar::sample_cl(t, res.fused, batch.labels, protos, cfg_.tau);
            res.loss_proto = icar::proto_cl(t, res.fused, batch.labels, protos, cfg_.tau);
        } else {
            res.loss_sam = cx.C(Tensor::scalar(0.0), true);
            res.loss_proto = cx.C(Tensor::scalar(0.0), true);
        }
        double beta = cfg_.no_cdr ? 0.0 : cfg_.beta;
        double gamma = cfg_.no_cdr ? 0.0 : cfg_.gamma;
        res.loss_total = icar::total_loss(t, res.loss_ce, res.loss_sim, res.loss_sam,
                                          res.loss_proto, cfg_.alpha, beta, gamma);
    }

    ModelConfig cfg_;
    uint64_t seed_ = 0;
    ParamSet params_;
    std::vector<ImageEncoder> img_enc_;
    TabularEncoder tab_enc_;
    CompletionModule comp_;
    std::vector<MemoryBank> banks_;
    std::vector<Mhca> enrich_;
    IcarModule icar_;
    Classifier cls_;
};

// Spec'd ablation switches; unknown names are configuration errors.
inline ModelConfig apply_switches(ModelConfig cfg, const std::vector<std::string>& switches) {
    for (const std::string& s : switches) {
        if (s == "no_memory")
            cfg.no_memory = true;
        else if (s == "no_context_tokens")
            cfg.no_context = true;
        else if (s == "no_icma")
            cfg.no_icma = true;
        else if (s == "no_instance_adaptive")
            cfg.no_instance_adaptive = true;
        else if (s == "no_cdr")
            cfg.no_cdr = true;
        else
            throw ConfigError("unknown ablation switch: " + s);
    }
    return cfg;
}

}  // namespace cmml
