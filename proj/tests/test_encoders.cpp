#include <catch2/catch_amalgamated.hpp>

#include "cmml/encoders.hpp"

using namespace cmml;

TEST_CASE("embed_text is deterministic and padding is zero") {
    Tensor a = embed_text("The sex of patient is male", 6, 16);
    Tensor b = embed_text("The sex of patient is male", 6, 16);
    CHECK(a.values() == b.values());

    Tensor empty = embed_text("", 4, 8);
    for (long long i = 0; i < empty.numel(); ++i) CHECK(empty[i] == 0.0);

    // the 6-word sentence fills all 6 rows; a 5-word one leaves the last row zero
    Tensor five = embed_text("one two three four five", 6, 16);
    double tail = 0;
    for (int i = 0; i < 16; ++i) tail += std::abs(five.at2(5, i));
    CHECK(tail == 0.0);
}

TEST_CASE("texts differing in one attribute value embed differently") {
    TemplateSchema schema;
    schema.entries.push_back({"attr_0", "The {} is {}"});
    schema.entries.push_back({"attr_1", "The {} is {}"});
    std::string ta = render_attributes({{"attr_0", "3"}, {"attr_1", "5"}}, schema);
    std::string tb = render_attributes({{"attr_0", "4"}, {"attr_1", "5"}}, schema);
    Tensor ea = embed_text(ta, 10, 12);
    Tensor eb = embed_text(tb, 10, 12);
    int differing_rows = 0;
    for (int r = 0; r < 10; ++r) {
        for (int i = 0; i < 12; ++i)
            if (ea.at2(r, i) != eb.at2(r, i)) {
                ++differing_rows;
                break;
            }
    }
    CHECK(differing_rows >= 1);
}

TEST_CASE("image encoder maps zero input to zero tokens and stays nonnegative") {
    Rng rng(3);
    ParamSet ps;
    ImageEncoder enc = ImageEncoder::create(ps, "enc0", 10, 16, 4, 6, 8, rng);

    Tape t;
    ForwardCtx cx(t);
    Var y = enc.forward(cx, cx.C(Tensor({2, 10})));
    for (long long i = 0; i < t.val(y).numel(); ++i) CHECK(t.val(y)[i] == 0.0);

    Tensor x({3, 10});
    rng.fill_normal(x, 2.0);
    Tape t2;
    ForwardCtx cx2(t2);
    Var y2 = enc.forward(cx2, cx2.C(x));
    CHECK(t2.val(y2).shape() == std::vector<int>{3, 4, 8});
    for (long long i = 0; i < t2.val(y2).numel(); ++i) {
        CHECK(t2.val(y2)[i] >= 0.0);
        CHECK(std::isfinite(t2.val(y2)[i]));
    }
}

TEST_CASE("image encoder gradients match finite differences") {
    Rng rng(8);
    ParamSet ps;
    ImageEncoder enc = ImageEncoder::create(ps, "enc0", 6, 8, 3, 4, 6, rng);
    Tensor x({2, 6});
    rng.fill_normal(x, 1.0);
    Rng wrng(19);
    Tensor w({2, 3, 6});
    wrng.fill_normal(w, 1.0);
    std::vector<Parameter*> params;
    for (const auto& p : ps.items()) params.push_back(p.get());
    ParamProbe probe(params, [&](Tape& t) {
        ForwardCtx cx(t);
        Var y = enc.forward(cx, cx.C(x));
        return ops::sum_all(t, ops::mul(t, y, t.input(w)));
    });
    CHECK(grad_check(probe, 1e-5) < 1e-3);
}

TEST_CASE("tabular encoder output contract") {
    Rng rng(4);
    ParamSet ps;
    TabularEncoder enc = TabularEncoder::create(ps, "tab", 12, 5, 8, rng);
    TemplateSchema schema;
    schema.entries.push_back({"attr_0", "The {} is {}"});
    schema.entries.push_back({"attr_1", "The {} is {}"});

    Tape t;
    ForwardCtx cx(t);
    Var y = enc.encode(cx, {{"attr_0", "1"}, {"attr_1", "2"}}, schema);
    CHECK(t.val(y).shape() == std::vector<int>{1, 5, 8});
    for (long long i = 0; i < t.val(y).numel(); ++i) CHECK(t.val(y)[i] >= 0.0);

    // permuting the schema changes the rendered string and hence the tokens
    TemplateSchema swapped;
    swapped.entries.push_back({"attr_1", "The {} is {}"});
    swapped.entries.push_back({"attr_0", "The {} is {}"});
    Tape t2;
    ForwardCtx cx2(t2);
    Var y2 = enc.encode(cx2, {{"attr_0", "1"}, {"attr_1", "2"}}, swapped);
    CHECK(t.val(y).values() != t2.val(y2).values());

    // zero projection weights silence the tokens
    enc.Wp->value.fill(0.0);
    enc.bp->value.fill(0.0);
    Tape t3;
    ForwardCtx cx3(t3);
    Var y3 = enc.encode(cx3, {{"attr_0", "1"}, {"attr_1", "2"}}, schema);
    for (long long i = 0; i < t3.val(y3).numel(); ++i) CHECK(t3.val(y3)[i] == 0.0);
}

TEST_CASE("text embedder owns no trainable parameters") {
    Rng rng(5);
    ParamSet ps;
    TabularEncoder enc = TabularEncoder::create(ps, "tab", 12, 5, 8, rng);
    // only the projection behind the frozen embedder is trainable
    CHECK(ps.items().size() == 2);
    CHECK(ps.find("tab.proj.w") != nullptr);
    CHECK(ps.find("tab.proj.b") != nullptr);
}
