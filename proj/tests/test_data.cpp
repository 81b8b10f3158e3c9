#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <map>
#include <set>

#include "cmml/data.hpp"

using namespace cmml;

TEST_CASE("render_attributes fills templates in schema order") {
    TemplateSchema schema;
    schema.entries.push_back({"sex", "The {} of patient is {}"});
    CHECK(render_attributes({{"sex", "male"}}, schema) == "The sex of patient is male");

    CHECK(render_attributes({}, schema).empty());

    schema.entries.push_back({"age", "The {} of patient is {}"});
    // independent string-assembly oracle
    std::string expect = fill_template("The {} of patient is {}", "sex", "male") + ". " +
                         fill_template("The {} of patient is {}", "age", "62");
    CHECK(render_attributes({{"sex", "male"}, {"age", "62"}}, schema) == expect);

    CHECK_THROWS_AS(render_attributes({{"weight", "70"}}, schema), SchemaError);
}

TEST_CASE("render_attributes contains every name and value exactly once") {
    TemplateSchema schema;
    schema.entries.push_back({"alpha", "The {} is {}"});
    schema.entries.push_back({"beta", "Value of {} equals {}"});
    std::string out = render_attributes({{"alpha", "xx1"}, {"beta", "yy2"}}, schema);
    auto count = [&](const std::string& needle) {
        size_t n = 0, pos = 0;
        while ((pos = out.find(needle, pos)) != std::string::npos) {
            ++n;
            pos += needle.size();
        }
        return n;
    };
    CHECK(count("alpha") == 1);
    CHECK(count("beta") == 1);
    CHECK(count("xx1") == 1);
    CHECK(count("yy2") == 1);
}

TEST_CASE("dropout masks are uniform over nonempty subsets") {
    Rng rng(42);
    for (int trial = 0; trial < 50; ++trial) {
        AvailabilityMask m = sample_dropout_mask(1, rng);
        REQUIRE(m.flags.size() == 1);
        CHECK(m.available(0));
    }
    for (int trial = 0; trial < 2000; ++trial) {
        AvailabilityMask m = sample_dropout_mask(2, rng);
        CHECK(m.n_available() >= 1);
    }
    std::map<std::string, int> counts;
    const int draws = 100000;
    for (int trial = 0; trial < draws; ++trial)
        counts[sample_dropout_mask(3, rng).pattern_string()]++;
    CHECK(counts.size() == 7);
    for (const auto& [pat, n] : counts) {
        INFO(pat);
        CHECK(std::abs(static_cast<double>(n) / draws - 1.0 / 7) < 0.02);
    }
}

TEST_CASE("enumerate_patterns follows the size-then-lexicographic column order") {
    auto pats3 = enumerate_patterns(3);
    std::vector<std::string> got;
    for (const auto& p : pats3) got.push_back(p.pattern_string());
    CHECK(got == std::vector<std::string>{"0", "1", "2", "01", "02", "12", "012"});

    CHECK(enumerate_patterns(1).size() == 1);
    CHECK(enumerate_patterns(1)[0].pattern_string() == "0");

    auto pats4 = enumerate_patterns(4);
    std::vector<std::string> got4;
    for (const auto& p : pats4) got4.push_back(p.pattern_string());
    CHECK(got4 == std::vector<std::string>{"0", "1", "2", "3", "01", "02", "03", "12", "13", "23",
                                           "012", "013", "023", "123", "0123"});

    for (int M = 1; M <= 6; ++M) {
        auto pats = enumerate_patterns(M);
        std::set<std::string> uniq;
        for (const auto& p : pats) {
            CHECK(p.n_available() >= 1);
            uniq.insert(p.pattern_string());
        }
        CHECK(static_cast<int>(uniq.size()) == (1 << M) - 1);
    }
}

TEST_CASE("pattern strings round-trip") {
    auto m = AvailabilityMask::from_pattern_string("02", 3);
    CHECK(m.available(0));
    CHECK_FALSE(m.available(1));
    CHECK(m.available(2));
    CHECK(m.pattern_string() == "02");
    CHECK_THROWS_AS(AvailabilityMask::from_pattern_string("5", 3), ConfigError);
}

TEST_CASE("generate_synthetic is deterministic") {
    SyntheticSpec spec;
    spec.n_samples = 40;
    spec.seed = 123;
    Dataset a = generate_synthetic(spec);
    Dataset b = generate_synthetic(spec);
    REQUIRE(a.samples.size() == b.samples.size());
    for (size_t i = 0; i < a.samples.size(); ++i) {
        CHECK(a.samples[i].id == b.samples[i].id);
        CHECK(a.samples[i].label == b.samples[i].label);
        CHECK(a.samples[i].image_features == b.samples[i].image_features);
        CHECK(a.samples[i].attributes == b.samples[i].attributes);
    }
}

TEST_CASE("zero noise collapses each class onto its linear image") {
    SyntheticSpec spec;
    spec.noise_std = 0.0;
    spec.n_samples = 30;
    spec.seed = 5;
    Dataset ds = generate_synthetic(spec);
    for (const RawSample& s : ds.samples) {
        const RawSample& ref = ds.samples[static_cast<size_t>(s.label)];
        CHECK(s.image_features == ref.image_features);
        CHECK(s.attributes == ref.attributes);
    }
}

namespace {

// Ridge one-vs-rest least squares, the independent classifier oracle.
double linear_probe_accuracy(const std::vector<std::vector<double>>& X,
                             const std::vector<int>& y, int C, int train_n) {
    int n = static_cast<int>(X.size());
    int d = static_cast<int>(X[0].size());
    Eigen::MatrixXd A(train_n, d + 1);
    Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(train_n, C);
    for (int i = 0; i < train_n; ++i) {
        for (int j = 0; j < d; ++j) A(i, j) = X[static_cast<size_t>(i)][static_cast<size_t>(j)];
        A(i, d) = 1.0;
        Y(i, y[static_cast<size_t>(i)]) = 1.0;
    }
    Eigen::MatrixXd G = A.transpose() * A + 1e-3 * Eigen::MatrixXd::Identity(d + 1, d + 1);
    Eigen::MatrixXd W = G.ldlt().solve(A.transpose() * Y);
    int correct = 0;
    for (int i = train_n; i < n; ++i) {
        Eigen::VectorXd x(d + 1);
        for (int j = 0; j < d; ++j) x(j) = X[static_cast<size_t>(i)][static_cast<size_t>(j)];
        x(d) = 1.0;
        Eigen::VectorXd s = W.transpose() * x;
        int best = 0;
        for (int c = 1; c < C; ++c)
            if (s(c) > s(best)) best = c;
        if (best == y[static_cast<size_t>(i)]) ++correct;
    }
    return static_cast<double>(correct) / (n - train_n);
}

}  // namespace

TEST_CASE("every modality carries class signal at small noise") {
    SyntheticSpec spec;
    spec.noise_std = 0.1;
    spec.n_samples = 600;
    spec.n_attributes = 3;
    spec.seed = 77;
    Dataset ds = generate_synthetic(spec);
    int train_n = 400;
    std::vector<int> y;
    for (const auto& s : ds.samples) y.push_back(s.label);

    for (int j = 0; j < spec.M - 1; ++j) {
        std::vector<std::vector<double>> X;
        for (const auto& s : ds.samples) X.push_back(s.image_features[static_cast<size_t>(j)]);
        double acc = linear_probe_accuracy(X, y, spec.C, train_n);
        INFO("image modality " << j);
        CHECK(acc > 0.9);
    }
    // tabular modality via one-hot attribute levels
    std::vector<std::vector<double>> X;
    for (const auto& s : ds.samples) {
        std::vector<double> row(static_cast<size_t>(spec.n_attributes * spec.attr_levels), 0.0);
        for (int a = 0; a < spec.n_attributes; ++a) {
            int lvl = std::stoi(s.attributes[static_cast<size_t>(a)].second);
            row[static_cast<size_t>(a * spec.attr_levels + lvl)] = 1.0;
        }
        X.push_back(std::move(row));
    }
    double acc = linear_probe_accuracy(X, y, spec.C, train_n);
    INFO("tabular modality");
    CHECK(acc > 0.9);
}

TEST_CASE("dataset files round-trip") {
    SyntheticSpec spec;
    spec.n_samples = 25;
    spec.seed = 9;
    Dataset ds = generate_synthetic(spec);
    std::string path = "test_roundtrip.jsonl";
    save_dataset(ds, path);
    Dataset back = load_dataset(path);
    CHECK(back.manifest.M == ds.manifest.M);
    CHECK(back.manifest.C == ds.manifest.C);
    CHECK(back.manifest.feature_lens == ds.manifest.feature_lens);
    CHECK(back.manifest.S == ds.manifest.S);
    REQUIRE(back.samples.size() == ds.samples.size());
    for (size_t i = 0; i < ds.samples.size(); ++i) {
        CHECK(back.samples[i].id == ds.samples[i].id);
        CHECK(back.samples[i].label == ds.samples[i].label);
        CHECK(back.samples[i].image_features == ds.samples[i].image_features);
        CHECK(back.samples[i].attributes == ds.samples[i].attributes);
    }
    std::remove(path.c_str());
    std::remove(manifest_path_for(path).c_str());
}

TEST_CASE("loader validates records") {
    SyntheticSpec spec;
    spec.n_samples = 4;
    Dataset ds = generate_synthetic(spec);
    std::string path = "test_bad.jsonl";

    SECTION("missing modality vector names the record") {
        save_dataset(ds, path);
        std::ofstream f(path, std::ios::app);
        f << R"({"id":"broken1","label":0,"modality_0":[0],"attributes":[]})" << "\n";
        f.close();
        try {
            load_dataset(path);
            FAIL("expected a parse error");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("broken1") != std::string::npos);
        }
    }
    SECTION("record without any modality key names the record") {
        save_dataset(ds, path);
        std::ofstream f(path, std::ios::app);
        f << R"({"id":"broken2","label":0,"attributes":[]})" << "\n";
        f.close();
        try {
            load_dataset(path);
            FAIL("expected a parse error");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("broken2") != std::string::npos);
            CHECK(std::string(e.what()).find("modality_0") != std::string::npos);
        }
    }
    SECTION("invalid JSON reports the line number") {
        save_dataset(ds, path);
        std::ofstream f(path, std::ios::app);
        f << "{not json\n";
        f.close();
        try {
            load_dataset(path);
            FAIL("expected a parse error");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("line 5") != std::string::npos);
        }
    }
    SECTION("extra modality is a schema error") {
        save_dataset(ds, path);
        std::ofstream f(path, std::ios::app);
        std::string vec = "[0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0]";
        f << R"({"id":"extra","label":0,"modality_0":)" << vec << R"(,"modality_1":)" << vec
          << R"(,"modality_2":[1,2],"attributes":[]})" << "\n";
        f.close();
        CHECK_THROWS_AS(load_dataset(path), SchemaError);
    }
    SECTION("empty file loads as an empty list") {
        Dataset empty = ds;
        empty.samples.clear();
        save_dataset(empty, path);
        Dataset back = load_dataset(path);
        CHECK(back.samples.empty());
        CHECK(back.manifest.M == ds.manifest.M);
    }
    std::remove(path.c_str());
    std::remove(manifest_path_for(path).c_str());
}
