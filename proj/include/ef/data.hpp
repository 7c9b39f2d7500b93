#pragma once

// Corpus I/O, the character-token vocabulary, synthetic seq2seq tasks, and
// batch assembly. Corpora are parallel UTF-8 text files, one example per
// line, tokens separated by whitespace.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ef/model.hpp"
#include "ef/tensor.hpp"

namespace ef {

struct Vocab {
    static constexpr int32_t pad = 0;
    static constexpr int32_t bos = 1;
    static constexpr int32_t eos = 2;
    static constexpr int32_t unk = 3;

    std::vector<std::string> tokens;
    std::map<std::string, int32_t> index;

    // 4 specials followed by single-character content tokens.
    static Vocab of_size(int size);
    static Vocab from_tokens(std::vector<std::string> toks);

    int64_t size() const { return static_cast<int64_t>(tokens.size()); }
    int content_count() const { return static_cast<int>(tokens.size()) - 4; }
    int32_t id(const std::string& tok) const;
    std::vector<int32_t> encode(const std::string& line) const;
    std::string decode(const std::vector<int32_t>& ids) const;  // drops specials
};

struct Corpus {
    std::vector<std::pair<std::string, std::string>> pairs;
    size_t size() const { return pairs.size(); }
};

enum class TaskKind { copy, reverse, sort, lookup_translate };

TaskKind task_from(const std::string& s);
const char* to_string(TaskKind t);

struct TaskSpec {
    TaskKind task = TaskKind::reverse;
    int vocab = 32;  // total size including the 4 specials
    int len_min = 5;
    int len_max = 12;
    int n_train = 512;
    int n_dev = 64;
    int n_test = 64;
    uint64_t seed = 1;

    void validate() const;
};

struct GeneratedData {
    Corpus train, dev, test;
    Vocab vocab;
};

// Deterministic under seed; all source sequences across the three splits are
// distinct. Rejects specs whose sequence space cannot hold the request.
GeneratedData gen_data(const TaskSpec& spec);

std::vector<std::string> read_lines(const std::string& path);
void write_lines(const std::string& path, const std::vector<std::string>& lines);
Corpus load_corpus(const std::string& src_path, const std::string& tgt_path);
void save_corpus(const Corpus& c, const std::string& src_path, const std::string& tgt_path);
Vocab load_vocab(const std::string& path);
void save_vocab(const Vocab& v, const std::string& path);

// Source side gets a trailing EOS; decoder input is BOS-shifted.
std::vector<int32_t> encode_source(const Vocab& v, const std::string& line);

Batch make_batch(const Vocab& v, const std::vector<std::pair<std::string, std::string>>& pairs);

// Shuffles and groups examples so one batch holds at most `batch_tokens`
// target tokens (at least one example per batch).
std::vector<Batch> make_batches(const Corpus& c, const Vocab& v, int batch_tokens, Rng& rng);

}  // namespace ef
