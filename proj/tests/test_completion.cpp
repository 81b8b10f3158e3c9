#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"

using namespace cmml;
using cmml::testing::Fixture;
using cmml::testing::tiny_config;
using cmml::testing::zero_param;

TEST_CASE("missing-token init over a single one-token key is the value projection") {
    ModelConfig cfg = tiny_config();
    cfg.S = {1, 1, 1};
    Model model(cfg, 3);
    const CompletionModule& comp = model.completion();

    Rng rng(7);
    Tensor key({2, 1, cfg.d});  // two group samples, one available token each
    rng.fill_normal(key, 1.0);
    Tape t;
    ForwardCtx cx(t);
    Var kv = cx.C(key);
    Var out = comp.init_missing_tokens(cx, 2, {kv}, 2);
    CHECK(t.val(out).shape() == std::vector<int>{2, 1, cfg.d});

    // with one key the attention distribution is exactly 1, so each sample's
    // synthesized token is (key Wv + bv) Wo + bo regardless of the seed query
    const Mhca& ca = comp.init_ca;
    for (int g = 0; g < 2; ++g) {
        Tape t2;
        Var row = t2.input(Tensor::from({1, cfg.d},
                                        std::vector<double>(key.data() + g * cfg.d,
                                                            key.data() + (g + 1) * cfg.d)));
        Var v = ops::linear(t2, row, t2.input(ca.Wv->value), t2.input(ca.bv->value));
        Var expect = ops::linear(t2, v, t2.input(ca.Wo->value), t2.input(ca.bo->value));
        for (int c = 0; c < cfg.d; ++c)
            CHECK(t.val(out)[g * cfg.d + c] ==
                  Catch::Approx(t2.val(expect)[c]).margin(1e-12));
    }
}

TEST_CASE("missing-token init is invariant to the concatenation order of available modalities") {
    ModelConfig cfg = tiny_config();
    Model model(cfg, 4);
    const CompletionModule& comp = model.completion();
    Rng rng(9);
    Tensor a({3, 2, cfg.d}), b({3, 2, cfg.d});
    rng.fill_normal(a, 1.0);
    rng.fill_normal(b, 1.0);

    Tape t1;
    ForwardCtx cx1(t1);
    Var o1 = comp.init_missing_tokens(cx1, 2, {cx1.C(a), cx1.C(b)}, 3);
    Tape t2;
    ForwardCtx cx2(t2);
    Var o2 = comp.init_missing_tokens(cx2, 2, {cx2.C(b), cx2.C(a)}, 3);
    for (long long i = 0; i < t1.val(o1).numel(); ++i)
        CHECK(t1.val(o1)[i] == Catch::Approx(t2.val(o2)[i]).margin(1e-10));
}

TEST_CASE("assemble_modality adds exactly the three embeddings") {
    ModelConfig cfg = tiny_config();
    Model model(cfg, 5);
    const CompletionModule& comp = model.completion();
    ParamSet& ps = model.params();
    Rng rng(13);
    Tensor x({4, 2, cfg.d});
    rng.fill_normal(x, 1.0);

    SECTION("all embeddings zero leaves the tokens unchanged") {
        for (int j = 0; j < cfg.M; ++j) {
            std::string pj = "completion.mod" + std::to_string(j);
            zero_param(ps, pj + ".e_pos");
            zero_param(ps, pj + ".e_mt");
            zero_param(ps, pj + ".e_ms");
        }
        Tape t;
        ForwardCtx cx(t);
        Var f = comp.assemble_modality(cx, cx.C(x), 1, true);
        for (long long i = 0; i < x.numel(); ++i) CHECK(t.val(f)[i] == x[i]);
    }

    SECTION("toggling the availability flag swaps exactly the missing-state slice") {
        Tape t;
        ForwardCtx cx(t);
        Var fa = comp.assemble_modality(cx, cx.C(x), 1, true);
        Var fm = comp.assemble_modality(cx, cx.C(x), 1, false);
        const Tensor& ems = ps.find("completion.mod1.e_ms")->value;
        int Sj = cfg.S[1];
        for (int b = 0; b < 4; ++b)
            for (int s = 0; s < Sj; ++s)
                for (int c = 0; c < cfg.d; ++c) {
                    long long i = (b * Sj + s) * cfg.d + c;
                    double swap = ems.at2(Sj + s, c) - ems.at2(s, c);  // available - missing
                    CHECK(t.val(fa)[i] - t.val(fm)[i] == Catch::Approx(swap).margin(1e-12));
                }
    }
}

TEST_CASE("assembled input has N_ct plus sum of token counts rows") {
    Fixture fx;
    Model model(fx.cfg, 6);
    Batch b = fx.batch({0, 1, 2}, AvailabilityMask::all_available(3));
    Tape t;
    ForwardResult res = model.forward(t, b, ForwardOptions{});
    int expected = fx.cfg.n_ct();
    for (int s : fx.cfg.S) expected += s;
    CHECK(t.val(res.f_input).shape() == std::vector<int>{3, expected, fx.cfg.d});
}

TEST_CASE("a one-stage cascade is a single autoencoder pass") {
    ModelConfig cfg = tiny_config();
    cfg.L = 1;
    Model model(cfg, 7);
    Fixture fx;
    Batch b = fx.batch({0, 1}, AvailabilityMask::all_available(3));
    Tape t;
    ForwardResult res = model.forward(t, b, ForwardOptions{});
    REQUIRE(res.stage_outputs.size() == 1);
    CHECK(t.val(res.Z).values() == t.val(res.stage_outputs[0]).values());
    CHECK(t.val(res.stage_inputs[0]).values() == t.val(res.f_input).values());
}

TEST_CASE("two-stage cascade with zeroed residual branches matches a hand unroll") {
    ModelConfig cfg = tiny_config();
    cfg.L = 2;
    Model model(cfg, 8);
    ParamSet& ps = model.params();
    for (int l = 0; l < 2; ++l)
        for (const char* half : {".enc", ".dec"}) {
            std::string p = "crta.rta" + std::to_string(l) + half;
            zero_param(ps, p + ".wo");
            zero_param(ps, p + ".bo");
            zero_param(ps, p + ".ffn.w2");
            zero_param(ps, p + ".ffn.b2");
        }

    Fixture fx;
    Batch b = fx.batch({0, 1}, AvailabilityMask::all_available(3));
    Tape t;
    ForwardResult res = model.forward(t, b, ForwardOptions{});

    // each stage reduces to the two linear shortcuts: z = x Ws_enc Ws_dec
    auto stage_map = [&](int l) {
        Tape tm;
        Var w1 = tm.input(ps.find("crta.rta" + std::to_string(l) + ".enc.ws")->value);
        Var w2 = tm.input(ps.find("crta.rta" + std::to_string(l) + ".dec.ws")->value);
        return tm.val(ops::matmul(tm, w1, w2));  // [d, d] composite
    };
    Tensor P0 = stage_map(0), P1 = stage_map(1);
    const Tensor& f = t.val(res.f_input);
    Tape th;
    Var fv = th.input(f);
    Var z1 = ops::matmul(th, fv, th.input(P0));
    Var in2 = ops::add(th, fv, z1);
    Var z2 = ops::matmul(th, in2, th.input(P1));
    Var Z = ops::add(th, z1, z2);
    for (long long i = 0; i < f.numel(); ++i)
        CHECK(t.val(res.Z)[i] == Catch::Approx(th.val(Z)[i]).margin(1e-9));
}

TEST_CASE("cascade additivity: stage l input is f plus the running sum of earlier outputs") {
    ModelConfig cfg = tiny_config();
    cfg.L = 5;
    Model model(cfg, 9);
    Fixture fx;
    Batch b = fx.batch({0, 1, 2, 3}, AvailabilityMask::from_pattern_string("02", 3));
    Tape t;
    ForwardResult res = model.forward(t, b, ForwardOptions{});
    REQUIRE(res.stage_inputs.size() == 5);
    const Tensor& f = t.val(res.f_input);
    Tensor running(f.shape());
    for (int l = 0; l < 5; ++l) {
        // independently accumulated sum, same addition order as the model
        Tensor expect = f;
        expect.add_inplace(running);
        if (l == 0) expect = f;
        const Tensor& got = t.val(res.stage_inputs[static_cast<size_t>(l)]);
        for (long long i = 0; i < f.numel(); ++i) CHECK(got[i] == expect[i]);
        running.add_inplace(t.val(res.stage_outputs[static_cast<size_t>(l)]));
    }

    SECTION("slice reassembly reconstitutes Z exactly") {
        std::vector<Var> pieces;
        pieces.push_back(res.e_prior);
        for (Var zj : res.z_modal) pieces.push_back(zj);
        Var recon = ops::concat_tokens(t, pieces);
        CHECK(t.val(recon).values() == t.val(res.Z).values());
    }
}

TEST_CASE("context prior is the leading slice of Z and departs from the raw context tokens") {
    Fixture fx;
    Model model(fx.cfg, 10);
    Batch b = fx.batch({0, 1}, AvailabilityMask::all_available(3));
    {
        Tape t;
        ForwardResult res = model.forward(t, b, ForwardOptions{});
        const Tensor& prior = t.val(res.e_prior);
        CHECK(prior.shape() == std::vector<int>{2, fx.cfg.n_ct(), fx.cfg.d});
        const Tensor& Z = t.val(res.Z);
        for (int i = 0; i < 2; ++i)
            for (int s = 0; s < fx.cfg.n_ct(); ++s)
                for (int c = 0; c < fx.cfg.d; ++c)
                    CHECK(prior[(i * fx.cfg.n_ct() + s) * fx.cfg.d + c] ==
                          Z[(i * t.val(res.Z).dim(1) + s) * fx.cfg.d + c]);
    }

    // one optimizer step later the prior is an output, not the parameter
    TrainConfig tc;
    tc.epochs = 1;
    tc.warmup_epochs = 1;
    tc.batch_size = 8;
    tc.seed = 3;
    Trainer trainer(model, tc);
    trainer.run(fx.ds);
    Tape t;
    ForwardResult res = model.forward(t, b, ForwardOptions{});
    const Tensor& prior = t.val(res.e_prior);
    const Tensor& ec = model.params().find("completion.context")->value;
    bool differs = false;
    for (int s = 0; s < fx.cfg.n_ct() && !differs; ++s)
        for (int c = 0; c < fx.cfg.d && !differs; ++c)
            if (prior[s * fx.cfg.d + c] != ec.at2(s, c)) differs = true;
    CHECK(differs);
}

TEST_CASE("masking invariance: dropped payloads never influence the forward pass") {
    Fixture fx;
    Model model(fx.cfg, 11);
    Rng rng(23);
    for (const AvailabilityMask& pattern : enumerate_patterns(3)) {
        if (pattern.n_available() == 3) continue;
        for (int trial = 0; trial < 5; ++trial) {
            std::vector<int> idx = {0, 1, 2};
            Batch clean = fx.batch(idx, pattern);
            Batch dirty = clean;
            for (int o : pattern.missing_indices()) {
                if (o < fx.cfg.M - 1) {
                    for (long long i = 0; i < dirty.image_feats[o].numel(); ++i)
                        dirty.image_feats[o][i] += rng.normal() * 10.0;
                } else {
                    for (long long i = 0; i < dirty.text_emb.numel(); ++i)
                        dirty.text_emb[i] = rng.normal() * 10.0;
                }
            }
            Tape t1, t2;
            ForwardResult r1 = model.forward(t1, clean, ForwardOptions{});
            ForwardResult r2 = model.forward(t2, dirty, ForwardOptions{});
            REQUIRE(t1.val(r1.logits).values() == t2.val(r2.logits).values());
            REQUIRE(t1.val(r1.fused).values() == t2.val(r2.fused).values());
            REQUIRE(t1.val(r1.Z).values() == t2.val(r2.Z).values());
            for (int j = 0; j < fx.cfg.M; ++j)
                REQUIRE(t1.val(r1.F_aligned[j]).values() == t2.val(r2.F_aligned[j]).values());
        }
    }
}

TEST_CASE("in training mode dropped payloads reach only the similarity target") {
    Fixture fx;
    ModelConfig cfg = fx.cfg;
    cfg.dropout = 0.0;  // keep the comparison deterministic
    Model model(cfg, 12);
    AvailabilityMask pattern = AvailabilityMask::from_pattern_string("12", 3);
    Batch clean = fx.batch({0, 1, 2, 3}, pattern);
    Batch dirty = clean;
    Rng rng(31);
    for (long long i = 0; i < dirty.image_feats[0].numel(); ++i)
        dirty.image_feats[0][i] += rng.normal();

    ForwardOptions opt;
    opt.losses = true;
    Tape t1, t2;
    ForwardResult r1 = model.forward(t1, clean, opt);
    ForwardResult r2 = model.forward(t2, dirty, opt);
    CHECK(t1.val(r1.logits).values() == t2.val(r2.logits).values());
    CHECK(t1.val(r1.loss_ce)[0] == t2.val(r2.loss_ce)[0]);
    // the similarity loss compares completions against the (perturbed) originals
    CHECK(t1.val(r1.loss_sim)[0] != t2.val(r2.loss_sim)[0]);
}

TEST_CASE("context tokens attend over every input token position") {
    Fixture fx;
    Model model(fx.cfg, 13);
    Batch b = fx.batch({0, 1}, AvailabilityMask::all_available(3));
    Tape t;
    ForwardResult res = model.forward(t, b, ForwardOptions{});
    t.backward(ops::sum_all(t, res.e_prior));
    Tensor gf = t.grad_of(res.f_input);
    int Stotal = t.val(res.f_input).dim(1);
    for (int i = 0; i < 2; ++i)
        for (int s = 0; s < Stotal; ++s) {
            double norm = 0;
            for (int c = 0; c < fx.cfg.d; ++c)
                norm += std::abs(gf[(i * Stotal + s) * fx.cfg.d + c]);
            INFO("sample " << i << " token " << s);
            CHECK(norm > 0.0);
        }
}

TEST_CASE("full-batch mixed masks split into pattern groups that partition the batch") {
    Fixture fx(40);
    Model model(fx.cfg, 14);
    std::vector<AvailabilityMask> masks;
    Rng rng(5);
    std::vector<int> idx;
    for (int i = 0; i < 12; ++i) {
        idx.push_back(i);
        masks.push_back(sample_dropout_mask(3, rng));
    }
    Batch b = fx.batch(idx, masks);
    Tape t;
    ForwardOptions opt;
    opt.losses = true;
    ForwardResult res = model.forward(t, b, opt);
    std::vector<char> seen(12, 0);
    for (size_t g = 0; g < res.groups.size(); ++g)
        for (int i : res.groups[g]) {
            CHECK(!seen[static_cast<size_t>(i)]);
            seen[static_cast<size_t>(i)] = 1;
            CHECK(b.masks[static_cast<size_t>(i)] == res.group_masks[g]);
        }
    for (char s : seen) CHECK(s == 1);
    CHECK(std::isfinite(t.val(res.loss_total)[0]));
    CHECK(t.val(res.logits).dim(0) == 12);
}
