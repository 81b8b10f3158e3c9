#pragma once

#include "cmml/model.hpp"
#include "cmml/trainer.hpp"

namespace cmml::testing {

// Desk-scale instance small enough for finite differences and quick training.
inline ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.M = 3;
    cfg.C = 3;
    cfg.S = {2, 2, 2};
    cfg.feature_lens = {6, 6};
    cfg.d = 16;
    cfg.d_r = 12;
    cfg.enc_hidden = 8;
    cfg.enc_c = 4;
    cfg.L = 2;
    cfg.r = 4;
    cfg.heads = 4;
    cfg.N_t = 8;
    cfg.N_e = 25;
    cfg.dropout = 0.5;
    return cfg;
}

inline SyntheticSpec tiny_data_spec(int n = 30) {
    SyntheticSpec spec;
    spec.M = 3;
    spec.C = 3;
    spec.S = {2, 2, 2};
    spec.latent_dim = 6;
    spec.noise_std = 0.4;
    spec.n_samples = n;
    spec.seed = 11;
    spec.feature_len = 6;
    spec.n_attributes = 2;
    spec.attr_levels = 6;
    return spec;
}

struct Fixture {
    Dataset ds;
    std::vector<Tensor> text_cache;
    ModelConfig cfg;

    explicit Fixture(int n = 30) : ds(generate_synthetic(tiny_data_spec(n))), cfg(tiny_config()) {
        text_cache = embed_dataset_texts(ds, cfg.S.back(), cfg.d_r);
    }

    Batch batch(const std::vector<int>& idx, const AvailabilityMask& pattern) const {
        std::vector<AvailabilityMask> masks(idx.size(), pattern);
        return make_batch(ds, idx, masks, text_cache, cfg.S.back(), cfg.d_r);
    }

    Batch batch(const std::vector<int>& idx, const std::vector<AvailabilityMask>& masks) const {
        return make_batch(ds, idx, masks, text_cache, cfg.S.back(), cfg.d_r);
    }
};

inline void zero_param(ParamSet& ps, const std::string& name) {
    Parameter* p = ps.find(name);
    CMML_CHECK(p != nullptr, "zero_param: no parameter named " + name);
    p->value.fill(0.0);
}

}  // namespace cmml::testing
