#pragma once

// Greedy and beam-search decoding. Each hypothesis carries an incremental
// decoder state (per-layer self-attention K/V); states are immutable-append,
// so copying one is a handful of handle copies.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ef/data.hpp"
#include "ef/model.hpp"

namespace ef {

struct DecodeConfig {
    int beam = 5;
    int max_len = 64;
    double length_penalty = 0.6;  // alpha; 0 ranks by raw log-probability

    void validate() const {
        if (beam < 1) throw config_error("decode: beam must be >= 1");
        if (max_len < 1) throw config_error("decode: max_len must be >= 1");
    }
};

struct Hypothesis {
    std::vector<int32_t> tokens;  // content tokens, eos excluded
    double score = 0.0;           // cumulative log-probability incl. the eos step
    bool ended_by_eos = false;

    // score / len^alpha with len counting generated steps (eos included)
    double normalized(double alpha) const {
        const double len = static_cast<double>(tokens.size() + (ended_by_eos ? 1 : 0));
        return score / std::pow(std::max(1.0, len), alpha);
    }
};

namespace detail {

template <typename T>
std::vector<double> log_softmax_row(const std::vector<T>& logits) {
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : logits) mx = std::max(mx, static_cast<double>(v));
    double sum = 0;
    for (T v : logits) sum += std::exp(static_cast<double>(v) - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
    return out;
}

}  // namespace detail

// Length-normalized beam search over a single source. Hypotheses close on
// EOS and retire their slot; remaining slots keep expanding. Sequences still
// alive at max_len are force-finished. pad/bos are never candidates.
template <typename T>
std::vector<Hypothesis> beam_search(const Model<T>& model, const std::vector<int32_t>& src_ids,
                                    const DecodeConfig& cfg) {
    cfg.validate();
    NoGradGuard ng;
    if (src_ids.empty()) throw config_error("beam_search: empty source");
    const int64_t n_src = static_cast<int64_t>(src_ids.size());
    const std::vector<uint8_t> valid(static_cast<size_t>(n_src), 1);
    const auto memory = model.encode(src_ids, valid, 1, n_src, nullptr);

    struct BeamEntry {
        DecodeState<T> st;
        std::vector<int32_t> tokens;
        double score = 0.0;
    };
    std::vector<BeamEntry> alive;
    alive.push_back({model.make_decode_state(), {}, 0.0});
    std::vector<Hypothesis> finished;

    const int steps = std::min<int>(cfg.max_len, model.config().max_len - 1);
    for (int t = 0; t < steps && !alive.empty(); ++t) {
        struct Cand {
            size_t parent;
            int32_t token;
            double score;
        };
        std::vector<Cand> cands;
        for (size_t i = 0; i < alive.size(); ++i) {
            const int32_t feed = alive[i].tokens.empty() ? Vocab::bos : alive[i].tokens.back();
            const auto logits = model.decode_step(alive[i].st, memory, feed);
            const auto lp = detail::log_softmax_row(logits);
            for (size_t v = 0; v < lp.size(); ++v) {
                if (static_cast<int32_t>(v) == Vocab::pad || static_cast<int32_t>(v) == Vocab::bos)
                    continue;
                cands.push_back({i, static_cast<int32_t>(v), alive[i].score + lp[v]});
            }
        }
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.token != b.token) return a.token < b.token;
            return a.parent < b.parent;
        });
        // Fill slots best-first until the beam is fully occupied by finished
        // hypotheses plus continuations.
        std::vector<BeamEntry> next;
        for (const Cand& c : cands) {
            if (finished.size() + next.size() >= static_cast<size_t>(cfg.beam)) break;
            if (c.token == Vocab::eos) {
                Hypothesis h;
                h.tokens = alive[c.parent].tokens;
                h.score = c.score;
                h.ended_by_eos = true;
                finished.push_back(std::move(h));
            } else {
                BeamEntry e;
                e.st = alive[c.parent].st;  // handle copies; appends fork safely
                e.tokens = alive[c.parent].tokens;
                e.tokens.push_back(c.token);
                e.score = c.score;
                next.push_back(std::move(e));
            }
        }
        alive = std::move(next);
    }
    for (auto& b : alive) {
        Hypothesis h;
        h.tokens = std::move(b.tokens);
        h.score = b.score;
        h.ended_by_eos = false;
        finished.push_back(std::move(h));
    }
    std::sort(finished.begin(), finished.end(), [&](const Hypothesis& a, const Hypothesis& b) {
        const double na = a.normalized(cfg.length_penalty), nb = b.normalized(cfg.length_penalty);
        if (na != nb) return na > nb;
        return a.tokens < b.tokens;
    });
    return finished;
}

template <typename T>
Hypothesis decode_sentence(const Model<T>& model, const std::vector<int32_t>& src_ids,
                           const DecodeConfig& cfg) {
    auto hyps = beam_search(model, src_ids, cfg);
    return hyps.front();
}

// One detokenized output line per source line, order-preserving.
template <typename T>
std::vector<std::string> decode_corpus(const Model<T>& model, const Vocab& vocab,
                                       const std::vector<std::string>& sources, const DecodeConfig& cfg) {
    std::vector<std::string> out;
    out.reserve(sources.size());
    for (const auto& line : sources)
        out.push_back(vocab.decode(decode_sentence(model, encode_source(vocab, line), cfg).tokens));
    return out;
}

}  // namespace ef
