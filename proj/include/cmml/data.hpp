#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cmml/common.hpp"
#include "cmml/rng.hpp"
#include "cmml/tensor.hpp"

namespace cmml {

// Per-sample modality availability flags (at least one modality present).
struct AvailabilityMask {
    std::vector<uint8_t> flags;

    int M() const { return static_cast<int>(flags.size()); }
    bool available(int j) const { return flags[static_cast<size_t>(j)] != 0; }

    int n_available() const {
        int n = 0;
        for (uint8_t f : flags) n += f ? 1 : 0;
        return n;
    }

    std::vector<int> available_indices() const {
        std::vector<int> v;
        for (int j = 0; j < M(); ++j)
            if (flags[static_cast<size_t>(j)]) v.push_back(j);
        return v;
    }

    std::vector<int> missing_indices() const {
        std::vector<int> v;
        for (int j = 0; j < M(); ++j)
            if (!flags[static_cast<size_t>(j)]) v.push_back(j);
        return v;
    }

    bool operator==(const AvailabilityMask& o) const { return flags == o.flags; }

    static AvailabilityMask all_available(int M) {
        AvailabilityMask m;
        m.flags.assign(static_cast<size_t>(M), 1);
        return m;
    }

    // digits of the available modality indices, e.g. "02"
    std::string pattern_string() const {
        std::string s;
        for (int j = 0; j < M(); ++j)
            if (flags[static_cast<size_t>(j)]) s += static_cast<char>('0' + j);
        return s;
    }

    static AvailabilityMask from_pattern_string(const std::string& s, int M) {
        CMML_CHECK(M >= 1 && M <= 10, "pattern string notation supports M in [1,10]");
        AvailabilityMask m;
        m.flags.assign(static_cast<size_t>(M), 0);
        for (char c : s) {
            int j = c - '0';
            if (j < 0 || j >= M) throw ConfigError("unknown modality index in pattern: " + s);
            m.flags[static_cast<size_t>(j)] = 1;
        }
        if (m.n_available() == 0) throw ConfigError("pattern must name at least one modality");
        return m;
    }
};

struct RawSample {
    std::vector<std::vector<double>> image_features;       // M-1 vectors
    std::vector<std::pair<std::string, std::string>> attributes;  // tabular modality
    int label = 0;
    std::string id;
};

// One template per attribute; "{}" slots take the name then the value.
struct TemplateSchema {
    std::vector<std::pair<std::string, std::string>> entries;

    const std::string* find(const std::string& attr) const {
        for (const auto& e : entries)
            if (e.first == attr) return &e.second;
        return nullptr;
    }
};

inline std::string fill_template(const std::string& tmpl, const std::string& name,
                                 const std::string& value) {
    std::string out;
    out.reserve(tmpl.size() + name.size() + value.size());
    int slot = 0;
    for (size_t i = 0; i < tmpl.size(); ++i) {
        if (i + 1 < tmpl.size() && tmpl[i] == '{' && tmpl[i + 1] == '}') {
            out += slot == 0 ? name : value;
            ++slot;
            ++i;
        } else {
            out += tmpl[i];
        }
    }
    return out;
}

// Filled templates in schema order, joined by ". ".
inline std::string render_attributes(
    const std::vector<std::pair<std::string, std::string>>& attributes,
    const TemplateSchema& schema) {
    std::string out;
    bool first = true;
    for (const auto& entry : schema.entries) {
        for (const auto& attr : attributes) {
            if (attr.first != entry.first) continue;
            if (!first) out += ". ";
            out += fill_template(entry.second, attr.first, attr.second);
            first = false;
        }
    }
    for (const auto& attr : attributes)
        if (schema.find(attr.first) == nullptr)
            throw SchemaError("no template for attribute: " + attr.first);
    return out;
}

// ---- availability patterns ----

// Uniform draw over the 2^M - 1 nonempty modality subsets.
inline AvailabilityMask sample_dropout_mask(int M, Rng& rng) {
    CMML_CHECK(M >= 1 && M < 63, "sample_dropout_mask: M out of range");
    uint64_t r = static_cast<uint64_t>(rng.uniform_int(1, (1ll << M) - 1));
    AvailabilityMask m;
    m.flags.assign(static_cast<size_t>(M), 0);
    for (int j = 0; j < M; ++j) m.flags[static_cast<size_t>(j)] = (r >> j) & 1u;
    return m;
}

// All nonempty masks, ordered by subset size then lexicographically by the
// included indices: 0, 1, 2, 01, 02, 12, 012 for M = 3.
inline std::vector<AvailabilityMask> enumerate_patterns(int M) {
    CMML_CHECK(M >= 1 && M < 20, "enumerate_patterns: M out of range");
    std::vector<AvailabilityMask> out;
    std::vector<int> combo;
    auto emit = [&]() {
        AvailabilityMask m;
        m.flags.assign(static_cast<size_t>(M), 0);
        for (int j : combo) m.flags[static_cast<size_t>(j)] = 1;
        out.push_back(std::move(m));
    };
    std::function<void(int, int)> rec = [&](int start, int remaining) {
        if (remaining == 0) {
            emit();
            return;
        }
        for (int j = start; j <= M - remaining; ++j) {
            combo.push_back(j);
            rec(j + 1, remaining - 1);
            combo.pop_back();
        }
    };
    for (int size = 1; size <= M; ++size) rec(0, size);
    return out;
}

// ---- synthetic data ----

struct SyntheticSpec {
    int M = 3;
    int C = 3;
    std::vector<int> S = {8, 8, 8};  // per-modality token counts (recorded in the manifest)
    int latent_dim = 12;
    double noise_std = 0.5;
    int n_samples = 100;
    uint64_t seed = 0;
    // payload details
    int feature_len = 16;   // image-modality vector length
    int n_attributes = 2;   // tabular modality
    int attr_levels = 8;
    double class_sep = 2.0;  // spread of the class means

    void validate() const {
        if (M < 2) throw ConfigError("synthetic: M must be >= 2");
        if (C < 2) throw ConfigError("synthetic: C must be >= 2");
        if (n_samples < 0 || (n_samples > 0 && n_samples < C))
            throw ConfigError("synthetic: n_samples must be 0 or >= C");
        if (static_cast<int>(S.size()) != M) throw ConfigError("synthetic: S must list M entries");
        if (latent_dim < 1 || feature_len < 1 || n_attributes < 1 || attr_levels < 2)
            throw ConfigError("synthetic: bad payload dimensions");
        if (noise_std < 0) throw ConfigError("synthetic: noise_std must be >= 0");
    }
};

struct DatasetManifest {
    int M = 0;
    int C = 0;
    std::vector<int> feature_lens;  // per image modality (M-1 entries)
    std::vector<int> S;             // per-modality token counts
    TemplateSchema schema;
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<RawSample> samples;
};

// Class-conditioned latent factor model: z ~ N(mu_class, noise_std^2 I); each
// image payload is a fixed linear map of z plus private noise, and tabular
// attributes are quantized projections of z, so every modality carries class
// signal and the modalities are mutually predictive. Pure function of spec.
inline Dataset generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);

    std::vector<Tensor> mu;
    for (int c = 0; c < spec.C; ++c) {
        Tensor m({spec.latent_dim});
        rng.fill_normal(m, spec.class_sep);
        mu.push_back(std::move(m));
    }
    int n_img = spec.M - 1;
    std::vector<Tensor> maps;
    for (int j = 0; j < n_img; ++j) {
        Tensor A({spec.feature_len, spec.latent_dim});
        rng.fill_normal(A, 1.0 / std::sqrt(static_cast<double>(spec.latent_dim)));
        maps.push_back(std::move(A));
    }
    std::vector<Tensor> attr_w;
    for (int a = 0; a < spec.n_attributes; ++a) {
        Tensor w({spec.latent_dim});
        rng.fill_normal(w, 1.0);
        double n = 0;
        for (long long i = 0; i < w.numel(); ++i) n += w[i] * w[i];
        n = std::sqrt(n);
        for (long long i = 0; i < w.numel(); ++i) w[i] /= n;
        attr_w.push_back(std::move(w));
    }

    Dataset ds;
    ds.manifest.M = spec.M;
    ds.manifest.C = spec.C;
    ds.manifest.feature_lens.assign(static_cast<size_t>(n_img), spec.feature_len);
    ds.manifest.S = spec.S;
    for (int a = 0; a < spec.n_attributes; ++a)
        ds.manifest.schema.entries.push_back({"attr_" + std::to_string(a), "The {} is {}"});

    double spread = std::sqrt(spec.class_sep * spec.class_sep + spec.noise_std * spec.noise_std);
    ds.samples.reserve(static_cast<size_t>(spec.n_samples));
    for (int i = 0; i < spec.n_samples; ++i) {
        RawSample s;
        s.label = i % spec.C;
        s.id = "s" + std::to_string(i);
        Tensor z = mu[static_cast<size_t>(s.label)];
        for (long long k = 0; k < z.numel(); ++k) z[k] += spec.noise_std * rng.normal();
        for (int j = 0; j < n_img; ++j) {
            std::vector<double> payload(static_cast<size_t>(spec.feature_len), 0.0);
            const Tensor& A = maps[static_cast<size_t>(j)];
            for (int r = 0; r < spec.feature_len; ++r) {
                double acc = 0;
                for (int k = 0; k < spec.latent_dim; ++k) acc += A.at2(r, k) * z[k];
                payload[static_cast<size_t>(r)] = acc + spec.noise_std * rng.normal();
            }
            s.image_features.push_back(std::move(payload));
        }
        for (int a = 0; a < spec.n_attributes; ++a) {
            const Tensor& w = attr_w[static_cast<size_t>(a)];
            double score = 0;
            for (int k = 0; k < spec.latent_dim; ++k) score += w[k] * z[k];
            score += spec.noise_std * rng.normal();
            // fixed bucket boundaries spanning +-1.8 spread
            int level = 0;
            for (int b = 1; b < spec.attr_levels; ++b) {
                double edge = -1.8 * spread + 3.6 * spread * b / spec.attr_levels;
                if (score > edge) level = b;
            }
            s.attributes.push_back(
                {"attr_" + std::to_string(a), std::to_string(level)});
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// ---- file format ----
// One JSON record per line; the manifest sits next to the data file.

inline std::string manifest_path_for(const std::string& data_path) {
    return data_path + ".manifest.json";
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
    {
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw IoError("cannot write dataset file: " + path);
        for (const RawSample& s : ds.samples) {
            nlohmann::json rec;
            rec["id"] = s.id;
            rec["label"] = s.label;
            for (size_t j = 0; j < s.image_features.size(); ++j)
                rec["modality_" + std::to_string(j)] = s.image_features[j];
            nlohmann::json attrs = nlohmann::json::array();
            for (const auto& a : s.attributes) attrs.push_back({a.first, a.second});
            rec["attributes"] = attrs;
            f << rec.dump() << "\n";
        }
    }
    nlohmann::json man;
    man["M"] = ds.manifest.M;
    man["C"] = ds.manifest.C;
    man["feature_lens"] = ds.manifest.feature_lens;
    man["S"] = ds.manifest.S;
    nlohmann::json schema = nlohmann::json::array();
    for (const auto& e : ds.manifest.schema.entries) schema.push_back({e.first, e.second});
    man["schema"] = schema;
    std::ofstream mf(manifest_path_for(path), std::ios::trunc);
    if (!mf) throw IoError("cannot write manifest: " + manifest_path_for(path));
    mf << man.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream mf(manifest_path_for(path));
    if (!mf) throw IoError("missing manifest: " + manifest_path_for(path));
    Dataset ds;
    try {
        nlohmann::json man = nlohmann::json::parse(mf);
        ds.manifest.M = man.at("M").get<int>();
        ds.manifest.C = man.at("C").get<int>();
        ds.manifest.feature_lens = man.at("feature_lens").get<std::vector<int>>();
        ds.manifest.S = man.at("S").get<std::vector<int>>();
        for (const auto& e : man.at("schema")) {
            ds.manifest.schema.entries.push_back(
                {e.at(0).get<std::string>(), e.at(1).get<std::string>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("bad manifest " + manifest_path_for(path) + ": " + e.what());
    }
    if (ds.manifest.M != static_cast<int>(ds.manifest.feature_lens.size()) + 1)
        throw ParseError("manifest: feature_lens must have M-1 entries");

    std::ifstream f(path);
    if (!f) throw IoError("cannot open dataset file: " + path);
    std::string line;
    int lineno = 0;
    int n_img = ds.manifest.M - 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("line " + std::to_string(lineno) + ": invalid JSON: " + e.what());
        }
        RawSample s;
        try {
            s.id = rec.at("id").get<std::string>();
            s.label = rec.at("label").get<int>();
        } catch (const nlohmann::json::exception&) {
            throw ParseError("line " + std::to_string(lineno) + ": record missing id/label");
        }
        if (s.label < 0 || s.label >= ds.manifest.C)
            throw ParseError("line " + std::to_string(lineno) + ": record " + s.id +
                             ": label out of range");
        for (int j = 0; j < n_img; ++j) {
            std::string key = "modality_" + std::to_string(j);
            if (!rec.contains(key))
                throw ParseError("line " + std::to_string(lineno) + ": record " + s.id +
                                 " is missing " + key);
            std::vector<double> v;
            try {
                v = rec.at(key).get<std::vector<double>>();
            } catch (const nlohmann::json::exception&) {
                throw ParseError("line " + std::to_string(lineno) + ": record " + s.id + ": " +
                                 key + " is not a numeric vector");
            }
            if (static_cast<int>(v.size()) != ds.manifest.feature_lens[static_cast<size_t>(j)])
                throw ParseError("line " + std::to_string(lineno) + ": record " + s.id + ": " +
                                 key + " has wrong length");
            s.image_features.push_back(std::move(v));
        }
        if (rec.contains("modality_" + std::to_string(n_img)))
            throw SchemaError("line " + std::to_string(lineno) + ": record " + s.id +
                              " has more modalities than the manifest declares");
        if (!rec.contains("attributes"))
            throw ParseError("line " + std::to_string(lineno) + ": record " + s.id +
                             " is missing attributes");
        for (const auto& a : rec.at("attributes")) {
            if (!a.is_array() || a.size() != 2)
                throw ParseError("line " + std::to_string(lineno) + ": record " + s.id +
                                 ": attribute entries must be [name, value] pairs");
            s.attributes.push_back({a.at(0).get<std::string>(), a.at(1).get<std::string>()});
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace cmml
