#pragma once

// Shared helpers for model-level tests: tiny configs, bundled
// store+plan+model construction, random batches, and the end-to-end
// finite-difference check used by several suites.

#include <memory>
#include <optional>

#include "ef/cost.hpp"
#include "ef/data.hpp"
#include "ef/model.hpp"
#include "ef/param_store.hpp"
#include "gradcheck.hpp"

namespace modelutil {

inline ef::ModelConfig tiny_cfg(ef::TyingScheme scheme = ef::TyingScheme::full,
                                ef::DecoderStyle style = ef::DecoderStyle::vanilla, int d = 16,
                                int m = 2, int n = 2, int vocab = 11) {
    ef::ModelConfig cfg;
    cfg.d = d;
    cfg.enc_layers = m;
    cfg.dec_layers = n;
    cfg.d_encffn = 2 * d;
    cfg.d_decffn = style == ef::DecoderStyle::interleaved ? std::max(1, d / 4) : 2 * d;
    cfg.decoder_style = style;
    cfg.heads = 2;
    cfg.vocab = vocab;
    cfg.max_len = 32;
    cfg.dropout = 0.0;
    cfg.scheme = scheme;
    return cfg;
}

template <typename T>
struct Bundle {
    ef::ModelConfig cfg;
    ef::TyingPlan plan;
    ef::ParamStore<T> store;
    std::optional<ef::Model<T>> model;
};

template <typename T>
std::unique_ptr<Bundle<T>> make_model(const ef::ModelConfig& cfg, uint64_t seed) {
    auto b = std::make_unique<Bundle<T>>();
    b->cfg = cfg;
    b->plan = ef::build_plan(cfg);
    b->store = ef::init_params<T>(b->plan, cfg, seed);
    b->model.emplace(b->cfg, b->plan, b->store);
    return b;
}

inline ef::Batch random_batch(int vocab, int64_t bsz, int64_t n_src, int64_t n_tgt, uint64_t seed,
                              bool with_padding = true) {
    ef::Rng rng(seed);
    ef::Batch b;
    b.size = bsz;
    b.n_src = n_src;
    b.n_tgt = n_tgt;
    auto tok = [&] { return static_cast<int32_t>(4 + rng.bits() % static_cast<uint64_t>(vocab - 4)); };
    b.src.assign(static_cast<size_t>(bsz * n_src), ef::Vocab::pad);
    b.src_valid.assign(static_cast<size_t>(bsz * n_src), 0);
    b.tgt_in.assign(static_cast<size_t>(bsz * n_tgt), ef::Vocab::pad);
    b.tgt_out.assign(static_cast<size_t>(bsz * n_tgt), ef::Vocab::pad);
    b.tgt_valid.assign(static_cast<size_t>(bsz * n_tgt), 0);
    for (int64_t i = 0; i < bsz; ++i) {
        // shorten the last row when padding is requested
        const int64_t ls = (with_padding && i == bsz - 1 && n_src > 1) ? n_src - 1 : n_src;
        const int64_t lt = (with_padding && i == bsz - 1 && n_tgt > 1) ? n_tgt - 1 : n_tgt;
        for (int64_t j = 0; j < ls; ++j) {
            b.src[static_cast<size_t>(i * n_src + j)] = j == ls - 1 ? ef::Vocab::eos : tok();
            b.src_valid[static_cast<size_t>(i * n_src + j)] = 1;
        }
        b.tgt_in[static_cast<size_t>(i * n_tgt)] = ef::Vocab::bos;
        b.tgt_valid[static_cast<size_t>(i * n_tgt)] = 1;
        for (int64_t j = 1; j < lt; ++j) {
            b.tgt_in[static_cast<size_t>(i * n_tgt + j)] = tok();
            b.tgt_valid[static_cast<size_t>(i * n_tgt + j)] = 1;
        }
        for (int64_t j = 0; j + 1 < lt; ++j)
            b.tgt_out[static_cast<size_t>(i * n_tgt + j)] = b.tgt_in[static_cast<size_t>(i * n_tgt + j + 1)];
        b.tgt_out[static_cast<size_t>(i * n_tgt + lt - 1)] = ef::Vocab::eos;
    }
    return b;
}

inline std::vector<int32_t> ce_targets(const ef::Batch& b) {
    std::vector<int32_t> t(b.tgt_out.size());
    for (size_t i = 0; i < t.size(); ++i) t[i] = b.tgt_valid[i] ? b.tgt_out[i] : -1;
    return t;
}

// Central-difference check of the whole model: every tensor of every group,
// a few entries each. Returns the worst relative error.
inline double model_grad_check(const ef::ModelConfig& cfg, uint64_t seed, int entries_per_tensor = 4) {
    auto bundle = make_model<double>(cfg, seed);
    auto batch = random_batch(cfg.vocab, 2, 4, 3, seed * 31 + 1);
    const auto targets = ce_targets(batch);
    auto f = [&] {
        auto logits = bundle->model->forward(batch);
        return ef::cross_entropy_label_smoothing(logits, targets, 0.1, -1);
    };
    double worst = 0.0;
    bundle->store.for_each_tensor(
        [&](ef::ParamGroup<double>&, const std::string&, ef::Tensor<double>& t) {
            worst = std::max(worst, gradcheck::check_param(f, t, entries_per_tensor).max_rel_err);
        });
    return worst;
}

}  // namespace modelutil
