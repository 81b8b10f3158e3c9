#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cmml/checkpoint.hpp"
#include "cmml/metrics.hpp"
#include "cmml/model.hpp"

namespace cmml {

struct TrainConfig {
    int epochs = 50;
    double lr = 5e-4;
    double weight_decay = 1e-4;
    int warmup_epochs = 5;       // linear ramp, modality dropout disabled
    double decay_factor = 0.8;   // multiplicative step decay after warm-up
    int decay_every = 5;
    int batch_size = 32;
    uint64_t seed = 0;

    void validate() const {
        if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
        if (lr <= 0.0) throw ConfigError("train: lr must be positive");
        if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
        if (warmup_epochs < 0) throw ConfigError("train: warmup_epochs must be >= 0");
        if (epochs > 0 && warmup_epochs > epochs)
            throw ConfigError("train: warmup_epochs must not exceed epochs");
        if (decay_factor <= 0.0 || decay_factor > 1.0)
            throw ConfigError("train: decay_factor must be in (0,1]");
        if (decay_every < 1) throw ConfigError("train: decay_every must be >= 1");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    }
};

// Warm-up ramp to lr over the first warmup_epochs, then
// lr * decay_factor^floor((epoch - warmup) / decay_every). Epochs are 1-based.
inline double scheduled_lr(const TrainConfig& c, int epoch) {
    if (c.warmup_epochs > 0 && epoch <= c.warmup_epochs)
        return c.lr * static_cast<double>(epoch) / static_cast<double>(c.warmup_epochs);
    int k = (epoch - c.warmup_epochs) / c.decay_every;
    return c.lr * std::pow(c.decay_factor, k);
}

// Adam with decoupled weight decay.
class Adam {
public:
    Adam() = default;
    Adam(const ParamSet& ps, double weight_decay)
        : wd_(weight_decay) {
        for (const auto& p : ps.items()) {
            m_.push_back(Tensor(p->value.shape()));
            v_.push_back(Tensor(p->value.shape()));
        }
    }

    void step(ParamSet& ps, double lr) {
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        const auto& items = ps.items();
        CMML_CHECK(items.size() == m_.size(), "adam: parameter count changed");
        for (size_t i = 0; i < items.size(); ++i) {
            Parameter& p = *items[i];
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            for (long long k = 0; k < p.value.numel(); ++k) {
                double g = p.grad[k];
                m[k] = beta1_ * m[k] + (1.0 - beta1_) * g;
                v[k] = beta2_ * v[k] + (1.0 - beta2_) * g * g;
                double mhat = m[k] / bc1;
                double vhat = v[k] / bc2;
                p.value[k] -= lr * wd_ * p.value[k];
                p.value[k] -= lr * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    long long steps() const { return t_; }
    const std::vector<Tensor>& m() const { return m_; }
    const std::vector<Tensor>& v() const { return v_; }

    void restore(long long t, std::vector<Tensor> m, std::vector<Tensor> v) {
        t_ = t;
        m_ = std::move(m);
        v_ = std::move(v);
    }

private:
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, wd_ = 0.0;
    long long t_ = 0;
    std::vector<Tensor> m_, v_;
};

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    double ce = 0.0, sim = 0.0, sam = 0.0, proto = 0.0, total = 0.0;
};

// Owns the optimizer and rng streams of one training run; supports
// checkpoint/restore mid-run.
class Trainer {
public:
    using BatchHook = std::function<void(int epoch, const Batch& batch, double lr)>;

    Trainer(Model& model, TrainConfig cfg) : model_(model), cfg_(cfg) {
        cfg_.validate();
        adam_ = Adam(model_.params(), cfg_.weight_decay);
        uint64_t s = cfg_.seed;
        shuffle_ = Rng(splitmix64(s));
        maskr_ = Rng(splitmix64(s));
        dropr_ = Rng(splitmix64(s));
    }

    int epochs_done() const { return epochs_done_; }

    // Runs epochs (epochs_done, until]; default runs to cfg.epochs.
    std::vector<EpochLog> run(const Dataset& ds, int until = -1, const BatchHook& hook = {}) {
        if (until < 0) until = cfg_.epochs;
        CMML_CHECK(until <= cfg_.epochs, "trainer: until exceeds configured epochs");
        std::vector<EpochLog> logs;
        if (model_.config().has_memory() && epochs_done_ >= model_.config().N_e)
            model_.freeze_banks();
        if (until <= epochs_done_) return logs;
        int n = static_cast<int>(ds.samples.size());
        CMML_CHECK(n > 0, "trainer: empty dataset");
        std::vector<Tensor> text_cache = embed_dataset_texts(
            ds, model_.config().S[static_cast<size_t>(model_.config().M - 1)],
            model_.config().d_r);

        for (int epoch = epochs_done_ + 1; epoch <= until; ++epoch) {
            // banks update through epoch N_e and freeze afterwards
            if (model_.config().has_memory() && epoch > model_.config().N_e)
                model_.freeze_banks();
            double lr = scheduled_lr(cfg_, epoch);
            std::vector<int> order(static_cast<size_t>(n));
            std::iota(order.begin(), order.end(), 0);
            for (int i = n - 1; i > 0; --i)
                std::swap(order[static_cast<size_t>(i)],
                          order[static_cast<size_t>(shuffle_.uniform_int(0, i))]);

            EpochLog log;
            log.epoch = epoch;
            log.lr = lr;
            int steps = 0;
            bool warmup = epoch <= cfg_.warmup_epochs;
            for (int start = 0; start < n; start += cfg_.batch_size) {
                int bsize = std::min(cfg_.batch_size, n - start);
                std::vector<int> idx(order.begin() + start, order.begin() + start + bsize);
                std::vector<AvailabilityMask> masks;
                for (int i = 0; i < bsize; ++i)
                    masks.push_back(warmup ? AvailabilityMask::all_available(model_.config().M)
                                           : sample_dropout_mask(model_.config().M, maskr_));
                if (warmup)
                    for (const AvailabilityMask& m : masks)
                        CMML_CHECK(m.n_available() == model_.config().M,
                                   "trainer: warm-up batches must see all modalities");
                Batch batch = make_batch(
                    ds, idx, masks, text_cache,
                    model_.config().S[static_cast<size_t>(model_.config().M - 1)],
                    model_.config().d_r);

                model_.params().zero_grads();
                Tape tape;
                ForwardOptions opt;
                opt.losses = true;
                opt.dropout = model_.config().dropout > 0.0;
                opt.rng = &dropr_;
                ForwardResult res = model_.forward(tape, batch, opt);
                check_finite(tape, res, epoch);
                tape.backward(res.loss_total);
                adam_.step(model_.params(), lr);
                model_.update_banks(tape, res, batch);

                log.ce += tape.val(res.loss_ce)[0];
                log.sim += tape.val(res.loss_sim)[0];
                log.sam += tape.val(res.loss_sam)[0];
                log.proto += tape.val(res.loss_proto)[0];
                log.total += tape.val(res.loss_total)[0];
                ++steps;
                if (hook) hook(epoch, batch, lr);
            }
            log.ce /= steps;
            log.sim /= steps;
            log.sam /= steps;
            log.proto /= steps;
            log.total /= steps;
            logs.push_back(log);
            epochs_done_ = epoch;
        }
        return logs;
    }

    Checkpoint snapshot(const std::string& config_json) const {
        Checkpoint ck;
        ck.config_json = config_json;
        ck.epoch = epochs_done_;
        ck.adam_t = adam_.steps();
        for (const auto& p : model_.params().items()) ck.params.push_back({p->name, p->value});
        ck.adam_m = adam_.m();
        ck.adam_v = adam_.v();
        for (const MemoryBank& b : model_.banks()) {
            Checkpoint::BankState bs;
            bs.contents = b.contents();
            bs.lambda = b.decay();
            bs.frozen = b.frozen() ? 1 : 0;
            ck.banks.push_back(std::move(bs));
        }
        ck.rng_shuffle = shuffle_.serialize();
        ck.rng_mask = maskr_.serialize();
        ck.rng_drop = dropr_.serialize();
        return ck;
    }

    void restore(const Checkpoint& ck) {
        const auto& items = model_.params().items();
        CMML_CHECK(ck.params.size() == items.size(), "restore: parameter count mismatch");
        for (size_t i = 0; i < items.size(); ++i) {
            CMML_CHECK(ck.params[i].first == items[i]->name, "restore: parameter order mismatch");
            CMML_CHECK(ck.params[i].second.same_shape(items[i]->value),
                       "restore: parameter shape mismatch");
            items[i]->value = ck.params[i].second;
        }
        adam_.restore(ck.adam_t, ck.adam_m, ck.adam_v);
        CMML_CHECK(ck.banks.size() == model_.banks().size(), "restore: bank count mismatch");
        for (size_t i = 0; i < ck.banks.size(); ++i) {
            model_.banks()[i].contents_mut() = ck.banks[i].contents;
            if (ck.banks[i].frozen) model_.banks()[i].freeze();
        }
        shuffle_.deserialize(ck.rng_shuffle);
        maskr_.deserialize(ck.rng_mask);
        dropr_.deserialize(ck.rng_drop);
        epochs_done_ = ck.epoch;
    }

private:
    void check_finite(Tape& tape, const ForwardResult& res, int epoch) const {
        auto bad = [&](Var v) { return !std::isfinite(tape.val(v)[0]); };
        if (bad(res.loss_ce))
            throw NumericError("training diverged: non-finite L_ce at epoch " +
                               std::to_string(epoch));
        if (bad(res.loss_sim))
            throw NumericError("training diverged: non-finite L_sim at epoch " +
                               std::to_string(epoch));
        if (bad(res.loss_sam))
            throw NumericError("training diverged: non-finite L_sam at epoch " +
                               std::to_string(epoch));
        if (bad(res.loss_proto))
            throw NumericError("training diverged: non-finite L_proto at epoch " +
                               std::to_string(epoch));
        if (bad(res.loss_total))
            throw NumericError("training diverged: non-finite total loss at epoch " +
                               std::to_string(epoch));
    }

    Model& model_;
    TrainConfig cfg_;
    Adam adam_;
    Rng shuffle_, maskr_, dropr_;
    int epochs_done_ = 0;
};

// Fixed-pattern evaluation: the same mask applies to every sample; the model
// runs in eval mode (no dropout, banks read-only) and mutates nothing.
inline MetricReport evaluate(Model& model, const Dataset& ds,
                             const std::vector<AvailabilityMask>& patterns, int batch_size = 64) {
    CMML_CHECK(!ds.samples.empty(), "evaluate: empty dataset");
    int n = static_cast<int>(ds.samples.size());
    std::vector<Tensor> text_cache = embed_dataset_texts(
        ds, model.config().S[static_cast<size_t>(model.config().M - 1)], model.config().d_r);
    MetricReport report;
    for (const AvailabilityMask& pattern : patterns) {
        Tensor probs({n, model.config().C});
        std::vector<int> labels;
        for (int start = 0; start < n; start += batch_size) {
            int bsize = std::min(batch_size, n - start);
            std::vector<int> idx(static_cast<size_t>(bsize));
            std::iota(idx.begin(), idx.end(), start);
            std::vector<AvailabilityMask> masks(static_cast<size_t>(bsize), pattern);
            Batch batch = make_batch(
                ds, idx, masks, text_cache,
                model.config().S[static_cast<size_t>(model.config().M - 1)], model.config().d_r);
            Tape tape;
            ForwardResult res = model.forward(tape, batch, ForwardOptions{});
            Tensor p = tape.val(res.logits);
            softmax_rows_inplace(p.data(), p.rows(), p.last());
            std::copy(p.data(), p.data() + p.numel(),
                      probs.data() + static_cast<long long>(start) * model.config().C);
            for (int i = 0; i < bsize; ++i) labels.push_back(batch.labels[static_cast<size_t>(i)]);
        }
        PatternMetrics row;
        row.pattern = pattern.pattern_string();
        row.acc = accuracy(probs, labels);
        MacroAuc auc = macro_ovr_auc(probs, labels);
        row.auc = auc.auc;
        for (int c : auc.skipped_classes)
            report.notes.push_back("pattern " + row.pattern + ": class " + std::to_string(c) +
                                   " absent, omitted from macro AUC");
        report.rows.push_back(std::move(row));
    }
    report.finalize();
    return report;
}

}  // namespace cmml
