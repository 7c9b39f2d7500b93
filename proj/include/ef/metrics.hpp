#pragma once

// Corpus-level metrics over whitespace-token strings.

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ef/errors.hpp"

namespace ef {

inline double exact_match(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
    if (hyps.size() != refs.size()) throw config_error("exact_match: size mismatch");
    if (hyps.empty()) return 0.0;
    size_t hits = 0;
    for (size_t i = 0; i < hyps.size(); ++i) hits += hyps[i] == refs[i];
    return static_cast<double>(hits) / static_cast<double>(hyps.size());
}

// Corpus BLEU: geometric mean of modified 1..4-gram precisions with brevity
// penalty, on a 0..100 scale. Any zero precision gives 0 (no smoothing);
// orders with no n-grams anywhere in the corpus are skipped (effective
// order), so identical short corpora still score 100.
inline double corpus_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
    if (hyps.size() != refs.size()) throw config_error("corpus_bleu: size mismatch");
    if (hyps.empty()) return 0.0;

    auto tokens_of = [](const std::string& s) {
        std::istringstream is(s);
        std::vector<std::string> t;
        std::string w;
        while (is >> w) t.push_back(w);
        return t;
    };
    auto ngrams = [](const std::vector<std::string>& toks, size_t n) {
        std::map<std::string, int> counts;
        if (toks.size() < n) return counts;
        for (size_t i = 0; i + n <= toks.size(); ++i) {
            std::string key;
            for (size_t j = 0; j < n; ++j) {
                key += toks[i + j];
                key += '\x1f';
            }
            ++counts[key];
        }
        return counts;
    };

    double match[4] = {0, 0, 0, 0};
    double total[4] = {0, 0, 0, 0};
    double hyp_len = 0, ref_len = 0;
    for (size_t i = 0; i < hyps.size(); ++i) {
        const auto h = tokens_of(hyps[i]);
        const auto r = tokens_of(refs[i]);
        hyp_len += static_cast<double>(h.size());
        ref_len += static_cast<double>(r.size());
        for (size_t n = 1; n <= 4; ++n) {
            const auto hc = ngrams(h, n);
            const auto rc = ngrams(r, n);
            for (const auto& [g, c] : hc) {
                auto it = rc.find(g);
                match[n - 1] += std::min(c, it == rc.end() ? 0 : it->second);
                total[n - 1] += c;
            }
        }
    }
    double log_prec = 0;
    int orders = 0;
    for (int n = 0; n < 4; ++n) {
        if (total[n] == 0) continue;
        if (match[n] == 0) return 0.0;
        log_prec += std::log(match[n] / total[n]);
        ++orders;
    }
    if (orders == 0) return 0.0;
    const double bp = hyp_len >= ref_len || hyp_len == 0 ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
    return 100.0 * bp * std::exp(log_prec / orders);
}

}  // namespace ef
