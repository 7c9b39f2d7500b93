#pragma once

// Sequence-level knowledge distillation and decoding-based evaluation: the
// teacher beam-decodes every source line, and the (source, hypothesis) pairs
// become the student's training corpus.

#include <string>
#include <vector>

#include "ef/decode.hpp"
#include "ef/metrics.hpp"
#include "ef/train.hpp"

namespace ef {

struct DistillJob {
    DecodeConfig decode{.beam = 5, .max_len = 64, .length_penalty = 0.6};
};

template <typename T>
Corpus seq_kd(const Model<T>& teacher, const Vocab& vocab, const std::vector<std::string>& sources,
              const DistillJob& job = {}) {
    Corpus out;
    const auto hyps = decode_corpus(teacher, vocab, sources, job.decode);
    for (size_t i = 0; i < sources.size(); ++i) out.pairs.emplace_back(sources[i], hyps[i]);
    return out;
}

enum class EvalMetric { token_accuracy, exact_match, corpus_bleu };

inline EvalMetric eval_metric_from(const std::string& s) {
    if (s == "token_accuracy") return EvalMetric::token_accuracy;
    if (s == "exact_match") return EvalMetric::exact_match;
    if (s == "corpus_bleu") return EvalMetric::corpus_bleu;
    throw config_error("unknown metric: " + s);
}

template <typename T>
double evaluate_metric(Model<T>& model, const Corpus& corpus, const Vocab& vocab, EvalMetric metric,
                       const DecodeConfig& dcfg = {}) {
    if (corpus.pairs.empty()) throw config_error("evaluate: empty corpus");
    if (metric == EvalMetric::token_accuracy) return evaluate_token_accuracy(model, corpus, vocab);
    std::vector<std::string> sources, refs;
    for (const auto& [s, t] : corpus.pairs) {
        sources.push_back(s);
        refs.push_back(t);
    }
    const auto hyps = decode_corpus(model, vocab, sources, dcfg);
    return metric == EvalMetric::exact_match ? exact_match(hyps, refs) : corpus_bleu(hyps, refs);
}

}  // namespace ef
