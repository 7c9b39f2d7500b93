#pragma once

// Training loop: label-smoothed cross entropy, global-norm clipping, Adam
// with an inverse-sqrt learning-rate schedule, deterministic batching under a
// seed, and checkpoint selection by dev loss.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ef/data.hpp"
#include "ef/model.hpp"
#include "ef/param_store.hpp"

namespace ef {

struct TrainConfig {
    double lr_peak = 5e-4;
    int warmup = 400;
    double beta1 = 0.9;
    double beta2 = 0.98;  // 0.99 is the seq2seq-table option
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    double label_smoothing = 0.1;
    int max_steps = 2000;
    int batch_tokens = 512;
    uint64_t seed = 1;
    double clip_norm = 1.0;  // 0 disables clipping
    int accum_steps = 1;
    int log_every = 50;
    int eval_every = 200;

    void validate() const {
        if (lr_peak <= 0) throw config_error("train: lr_peak must be > 0");
        if (warmup < 1) throw config_error("train: warmup must be >= 1");
        if (label_smoothing < 0 || label_smoothing >= 1)
            throw config_error("train: label_smoothing must be in [0,1)");
        if (max_steps < 1 || batch_tokens < 1 || accum_steps < 1)
            throw config_error("train: max_steps, batch_tokens and accum_steps must be >= 1");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw config_error("train: betas must be in [0,1)");
    }
};

// peak * min(step/warmup, sqrt(warmup/step))
inline double lr_at(const TrainConfig& cfg, int64_t step) {
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(cfg.warmup);
    return cfg.lr_peak * std::min(s / w, std::sqrt(w / s));
}

template <typename T>
class Adam {
public:
    Adam(double beta1, double beta2, double eps, double weight_decay)
        : b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

    void step(ParamStore<T>& store, double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        store.for_each_tensor([&](ParamGroup<T>& g, const std::string& tn, Tensor<T>& p) {
            if (!p.has_grad()) return;
            auto& st = state_[g.name + "/" + tn];
            if (st.m.empty()) {
                st.m.assign(p.data().size(), 0.0);
                st.v.assign(p.data().size(), 0.0);
            }
            auto& grad = p.grad();
            for (size_t i = 0; i < grad.size(); ++i) {
                double gval = static_cast<double>(grad[i]) + wd_ * static_cast<double>(p.data()[i]);
                st.m[i] = b1_ * st.m[i] + (1.0 - b1_) * gval;
                st.v[i] = b2_ * st.v[i] + (1.0 - b2_) * gval * gval;
                const double mhat = st.m[i] / c1;
                const double vhat = st.v[i] / c2;
                p.data()[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
            }
        });
    }

    int64_t steps_taken() const { return t_; }

private:
    struct State {
        std::vector<double> m, v;
    };
    double b1_, b2_, eps_, wd_;
    int64_t t_ = 0;
    std::map<std::string, State> state_;
};

// Scales gradients so the global norm is at most max_norm; returns the
// pre-clip norm. max_norm <= 0 disables clipping.
template <typename T>
double clip_gradients(ParamStore<T>& store, double max_norm) {
    double sq = 0.0;
    store.for_each_tensor([&](ParamGroup<T>&, const std::string&, Tensor<T>& p) {
        if (!p.has_grad()) return;
        for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    });
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const T s = static_cast<T>(max_norm / norm);
        store.for_each_tensor([&](ParamGroup<T>&, const std::string&, Tensor<T>& p) {
            if (!p.has_grad()) return;
            for (T& g : p.grad()) g *= s;
        });
    }
    return norm;
}

namespace detail {

// Sequential batches in corpus order (deterministic evaluation).
inline std::vector<Batch> ordered_batches(const Corpus& c, const Vocab& v, int batch_tokens) {
    std::vector<Batch> out;
    std::vector<std::pair<std::string, std::string>> bucket;
    int tokens = 0;
    for (const auto& pair : c.pairs) {
        const int t = static_cast<int>(pair.second.size() / 2) + 2;
        if (!bucket.empty() && tokens + t > batch_tokens) {
            out.push_back(make_batch(v, bucket));
            bucket.clear();
            tokens = 0;
        }
        bucket.push_back(pair);
        tokens += t;
    }
    if (!bucket.empty()) out.push_back(make_batch(v, bucket));
    return out;
}

inline std::vector<int32_t> loss_targets(const Batch& b) {
    std::vector<int32_t> t(b.tgt_out.size());
    for (size_t i = 0; i < t.size(); ++i) t[i] = b.tgt_valid[i] ? b.tgt_out[i] : -1;
    return t;
}

template <typename T>
std::pair<int64_t, int64_t> batch_token_hits(const Tensor<T>& logits, const Batch& b) {
    const int64_t v = logits.dim(logits.rank() - 1);
    int64_t hits = 0, total = 0;
    for (int64_t row = 0; row < logits.numel() / v; ++row) {
        if (!b.tgt_valid[static_cast<size_t>(row)]) continue;
        const T* p = logits.data().data() + row * v;
        int32_t best = 0;
        for (int64_t j = 1; j < v; ++j)
            if (p[j] > p[best]) best = static_cast<int32_t>(j);
        hits += best == b.tgt_out[static_cast<size_t>(row)];
        ++total;
    }
    return {hits, total};
}

}  // namespace detail

// Teacher-forced mean loss over a corpus (no dropout, no smoothing).
template <typename T>
double evaluate_loss(Model<T>& model, const Corpus& c, const Vocab& v, int batch_tokens = 1024) {
    if (c.pairs.empty()) throw config_error("evaluate_loss: empty corpus");
    NoGradGuard ng;
    double total = 0;
    int64_t tokens = 0;
    for (const auto& batch : detail::ordered_batches(c, v, batch_tokens)) {
        auto logits = model.forward(batch);
        const auto targets = detail::loss_targets(batch);
        int64_t n = 0;
        for (int32_t t : targets) n += t >= 0;
        total += static_cast<double>(cross_entropy_label_smoothing(logits, targets, 0.0, -1).data()[0]) *
                 static_cast<double>(n);
        tokens += n;
    }
    return total / static_cast<double>(tokens);
}

template <typename T>
double evaluate_token_accuracy(Model<T>& model, const Corpus& c, const Vocab& v, int batch_tokens = 1024) {
    if (c.pairs.empty()) throw config_error("evaluate_token_accuracy: empty corpus");
    NoGradGuard ng;
    int64_t hits = 0, total = 0;
    for (const auto& batch : detail::ordered_batches(c, v, batch_tokens)) {
        auto logits = model.forward(batch);
        auto [h, t] = detail::batch_token_hits(logits, batch);
        hits += h;
        total += t;
    }
    return static_cast<double>(hits) / static_cast<double>(total);
}

struct TrainResult {
    int64_t steps = 0;
    double final_loss = 0.0;
    double final_token_accuracy = 0.0;
    double best_dev_loss = std::numeric_limits<double>::infinity();
    std::vector<std::string> log_lines;
};

// Runs the recipe: per step, teacher-forced forward, label-smoothed CE over
// non-pad targets, backward, global-norm clip, Adam update. Logs one
// `<step> key=value ...` line per interval. Aborts on non-finite loss naming
// the step and the group with the largest parameter magnitude.
template <typename T>
TrainResult train(Model<T>& model, const Corpus& train_corpus, const Corpus* dev_corpus,
                  const Vocab& vocab, const TrainConfig& cfg, std::ostream* log_stream = nullptr,
                  const std::string& ckpt_dir = "", const std::string& ckpt_header = "{}") {
    cfg.validate();
    if (train_corpus.pairs.empty()) throw config_error("train: empty corpus");

    ParamStore<T>& store = model.store();
    Adam<T> opt(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    Rng dropout_rng(cfg.seed * 0x9E3779B97F4A7C15ull + 1);

    TrainResult res;
    auto emit = [&](const std::string& line) {
        res.log_lines.push_back(line);
        if (log_stream) (*log_stream) << line << "\n";
    };

    if (!ckpt_dir.empty()) std::filesystem::create_directories(ckpt_dir);

    int64_t step = 0;
    uint64_t epoch = 0;
    std::vector<Batch> batches;
    size_t cursor = 0;
    double interval_loss = 0;
    int64_t interval_hits = 0, interval_tokens = 0, interval_batches = 0;

    store.zero_grads();
    while (step < cfg.max_steps) {
        if (cursor >= batches.size()) {
            Rng shuffle_rng(cfg.seed + 0x51ED270B * ++epoch);
            batches = make_batches(train_corpus, vocab, cfg.batch_tokens, shuffle_rng);
            cursor = 0;
        }

        ++step;
        double step_loss = 0;
        for (int acc = 0; acc < cfg.accum_steps; ++acc) {
            if (cursor >= batches.size()) {
                Rng shuffle_rng(cfg.seed + 0x51ED270B * ++epoch);
                batches = make_batches(train_corpus, vocab, cfg.batch_tokens, shuffle_rng);
                cursor = 0;
            }
            const Batch& batch = batches[cursor++];
            auto logits = model.forward(batch, &dropout_rng);
            const auto targets = detail::loss_targets(batch);
            auto loss = cross_entropy_label_smoothing(logits, targets, cfg.label_smoothing, -1);
            auto scaled = cfg.accum_steps > 1 ? scale(loss, T(1.0 / cfg.accum_steps)) : loss;
            backward(scaled);
            step_loss += static_cast<double>(loss.data()[0]) / cfg.accum_steps;

            auto [h, t] = detail::batch_token_hits(logits, batch);
            interval_hits += h;
            interval_tokens += t;
        }

        if (!std::isfinite(step_loss)) {
            std::string worst_group;
            double worst_mag = -1;
            store.for_each_tensor([&](ParamGroup<T>& g, const std::string&, Tensor<T>& p) {
                for (T x : p.data())
                    if (std::fabs(static_cast<double>(x)) > worst_mag) {
                        worst_mag = std::fabs(static_cast<double>(x));
                        worst_group = g.name;
                    }
            });
            throw error("training diverged: non-finite loss at step " + std::to_string(step) +
                        "; largest parameter magnitude in group '" + worst_group + "'");
        }

        clip_gradients(store, cfg.clip_norm);
        opt.step(store, lr_at(cfg, step));
        store.zero_grads();

        interval_loss += step_loss;
        ++interval_batches;
        res.final_loss = step_loss;

        const bool interval_end = step % cfg.log_every == 0 || step == cfg.max_steps;
        if (interval_end) {
            std::ostringstream line;
            line << step << " loss=" << interval_loss / static_cast<double>(interval_batches)
                 << " tok_acc=" << static_cast<double>(interval_hits) / std::max<int64_t>(1, interval_tokens)
                 << " lr=" << lr_at(cfg, step);
            res.final_token_accuracy =
                static_cast<double>(interval_hits) / std::max<int64_t>(1, interval_tokens);
            interval_loss = 0;
            interval_hits = interval_tokens = interval_batches = 0;

            if (dev_corpus && !dev_corpus->pairs.empty() &&
                (step % cfg.eval_every == 0 || step == cfg.max_steps)) {
                const double dev_loss = evaluate_loss(model, *dev_corpus, vocab, cfg.batch_tokens);
                line << " dev_loss=" << dev_loss;
                if (dev_loss < res.best_dev_loss) {
                    res.best_dev_loss = dev_loss;
                    if (!ckpt_dir.empty())
                        save_checkpoint(ckpt_dir + "/best.ckpt", store, ckpt_header);
                }
            }
            emit(line.str());
        }
    }
    res.steps = step;
    if (!ckpt_dir.empty()) save_checkpoint(ckpt_dir + "/last.ckpt", store, ckpt_header);
    return res;
}

}  // namespace ef
