#include "ef/data.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace ef {

namespace {

const char kContentAlphabet[] =
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

std::vector<std::string> split_ws(const std::string& line) {
    std::istringstream is(line);
    std::vector<std::string> out;
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

}  // namespace

Vocab Vocab::of_size(int size) {
    if (size < 5) throw config_error("vocab: size must be at least 5 (4 specials + content)");
    if (size - 4 > static_cast<int>(sizeof(kContentAlphabet) - 1))
        throw config_error("vocab: at most " + std::to_string(sizeof(kContentAlphabet) - 1) +
                           " content tokens supported");
    std::vector<std::string> toks{"<pad>", "<bos>", "<eos>", "<unk>"};
    for (int i = 0; i < size - 4; ++i) toks.push_back(std::string(1, kContentAlphabet[i]));
    return from_tokens(std::move(toks));
}

Vocab Vocab::from_tokens(std::vector<std::string> toks) {
    Vocab v;
    v.tokens = std::move(toks);
    for (size_t i = 0; i < v.tokens.size(); ++i) v.index[v.tokens[i]] = static_cast<int32_t>(i);
    if (v.tokens.size() < 4 || v.tokens[0] != "<pad>" || v.tokens[1] != "<bos>" ||
        v.tokens[2] != "<eos>" || v.tokens[3] != "<unk>")
        throw config_error("vocab: first four tokens must be <pad> <bos> <eos> <unk>");
    return v;
}

int32_t Vocab::id(const std::string& tok) const {
    auto it = index.find(tok);
    return it == index.end() ? unk : it->second;
}

std::vector<int32_t> Vocab::encode(const std::string& line) const {
    std::vector<int32_t> out;
    for (const auto& tok : split_ws(line)) out.push_back(id(tok));
    return out;
}

std::string Vocab::decode(const std::vector<int32_t>& ids) const {
    std::string out;
    for (int32_t id : ids) {
        if (id == pad || id == bos || id == eos) continue;
        if (!out.empty()) out += ' ';
        out += id >= 0 && id < size() ? tokens[static_cast<size_t>(id)] : "<unk>";
    }
    return out;
}

TaskKind task_from(const std::string& s) {
    if (s == "copy") return TaskKind::copy;
    if (s == "reverse") return TaskKind::reverse;
    if (s == "sort") return TaskKind::sort;
    if (s == "lookup-translate") return TaskKind::lookup_translate;
    throw config_error("unknown task: " + s);
}

const char* to_string(TaskKind t) {
    switch (t) {
        case TaskKind::copy: return "copy";
        case TaskKind::reverse: return "reverse";
        case TaskKind::sort: return "sort";
        default: return "lookup-translate";
    }
}

void TaskSpec::validate() const {
    if (vocab - 4 < 2) throw config_error("task: vocabulary too small (need >= 2 content tokens)");
    if (len_min < 1 || len_max < len_min) throw config_error("task: bad length range");
    if (n_train < 1 || n_dev < 0 || n_test < 0) throw config_error("task: bad corpus sizes");

    // distinct-source capacity, saturating well above any sane request
    const double content = vocab - 4;
    double space = 0;
    for (int l = len_min; l <= len_max && space < 1e18; ++l) space += std::pow(content, l);
    if (space < static_cast<double>(n_train) + n_dev + n_test)
        throw config_error("task: vocabulary/length range too small for " +
                           std::to_string(n_train + n_dev + n_test) + " distinct sources");
}

GeneratedData gen_data(const TaskSpec& spec) {
    spec.validate();
    GeneratedData out;
    out.vocab = Vocab::of_size(spec.vocab);
    const int content = spec.vocab - 4;

    Rng rng(spec.seed);
    // seeded bijection over content ids for lookup-translate
    std::vector<int> mapping(static_cast<size_t>(content));
    for (int i = 0; i < content; ++i) mapping[static_cast<size_t>(i)] = i;
    for (int i = content - 1; i > 0; --i)
        std::swap(mapping[static_cast<size_t>(i)], mapping[rng.bits() % static_cast<uint64_t>(i + 1)]);

    const int total = spec.n_train + spec.n_dev + spec.n_test;
    std::set<std::vector<int>> seen;
    std::vector<std::vector<int>> sources;
    uint64_t attempts = 0;
    const uint64_t max_attempts = 1000ull * static_cast<uint64_t>(total) + 100000ull;
    while (static_cast<int>(sources.size()) < total) {
        if (++attempts > max_attempts)
            throw config_error("task: could not draw enough distinct sources; enlarge vocab or lengths");
        const int len = spec.len_min + static_cast<int>(rng.bits() % static_cast<uint64_t>(
                                           spec.len_max - spec.len_min + 1));
        std::vector<int> seq(static_cast<size_t>(len));
        for (auto& t : seq) t = static_cast<int>(rng.bits() % static_cast<uint64_t>(content));
        if (seen.insert(seq).second) sources.push_back(std::move(seq));
    }

    auto to_line = [&](const std::vector<int>& seq) {
        std::string s;
        for (size_t i = 0; i < seq.size(); ++i) {
            if (i) s += ' ';
            s += out.vocab.tokens[static_cast<size_t>(seq[i] + 4)];
        }
        return s;
    };
    auto target_of = [&](std::vector<int> seq) {
        switch (spec.task) {
            case TaskKind::copy: break;
            case TaskKind::reverse: std::reverse(seq.begin(), seq.end()); break;
            case TaskKind::sort: std::sort(seq.begin(), seq.end()); break;
            case TaskKind::lookup_translate:
                for (auto& t : seq) t = mapping[static_cast<size_t>(t)];
                break;
        }
        return seq;
    };

    for (int i = 0; i < total; ++i) {
        const auto& src = sources[static_cast<size_t>(i)];
        auto pair = std::make_pair(to_line(src), to_line(target_of(src)));
        if (i < spec.n_train)
            out.train.pairs.push_back(std::move(pair));
        else if (i < spec.n_train + spec.n_dev)
            out.dev.pairs.push_back(std::move(pair));
        else
            out.test.pairs.push_back(std::move(pair));
    }
    return out;
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open file: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) lines.push_back(line);
    return lines;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
    std::ofstream os(path);
    if (!os) throw io_error("cannot open file for writing: " + path);
    for (const auto& l : lines) os << l << '\n';
    if (!os) throw io_error("failed writing file: " + path);
}

Corpus load_corpus(const std::string& src_path, const std::string& tgt_path) {
    const auto src = read_lines(src_path);
    const auto tgt = read_lines(tgt_path);
    if (src.size() != tgt.size())
        throw io_error("parallel corpus line counts differ: " + src_path + " vs " + tgt_path);
    Corpus c;
    for (size_t i = 0; i < src.size(); ++i) c.pairs.emplace_back(src[i], tgt[i]);
    return c;
}

void save_corpus(const Corpus& c, const std::string& src_path, const std::string& tgt_path) {
    std::vector<std::string> src, tgt;
    for (const auto& [s, t] : c.pairs) {
        src.push_back(s);
        tgt.push_back(t);
    }
    write_lines(src_path, src);
    write_lines(tgt_path, tgt);
}

Vocab load_vocab(const std::string& path) { return Vocab::from_tokens(read_lines(path)); }

void save_vocab(const Vocab& v, const std::string& path) { write_lines(path, v.tokens); }

std::vector<int32_t> encode_source(const Vocab& v, const std::string& line) {
    auto ids = v.encode(line);
    ids.push_back(Vocab::eos);
    return ids;
}

Batch make_batch(const Vocab& v, const std::vector<std::pair<std::string, std::string>>& pairs) {
    if (pairs.empty()) throw config_error("make_batch: empty batch");
    Batch b;
    b.size = static_cast<int64_t>(pairs.size());
    std::vector<std::vector<int32_t>> src, tgt;
    for (const auto& [s, t] : pairs) {
        src.push_back(encode_source(v, s));
        tgt.push_back(v.encode(t));
        b.n_src = std::max<int64_t>(b.n_src, static_cast<int64_t>(src.back().size()));
        b.n_tgt = std::max<int64_t>(b.n_tgt, static_cast<int64_t>(tgt.back().size()) + 1);  // + eos
    }
    b.src.assign(static_cast<size_t>(b.size * b.n_src), Vocab::pad);
    b.src_valid.assign(static_cast<size_t>(b.size * b.n_src), 0);
    b.tgt_in.assign(static_cast<size_t>(b.size * b.n_tgt), Vocab::pad);
    b.tgt_out.assign(static_cast<size_t>(b.size * b.n_tgt), Vocab::pad);
    b.tgt_valid.assign(static_cast<size_t>(b.size * b.n_tgt), 0);
    for (int64_t i = 0; i < b.size; ++i) {
        const auto& s = src[static_cast<size_t>(i)];
        for (size_t j = 0; j < s.size(); ++j) {
            b.src[static_cast<size_t>(i * b.n_src) + j] = s[j];
            b.src_valid[static_cast<size_t>(i * b.n_src) + j] = 1;
        }
        const auto& t = tgt[static_cast<size_t>(i)];
        b.tgt_in[static_cast<size_t>(i * b.n_tgt)] = Vocab::bos;
        b.tgt_valid[static_cast<size_t>(i * b.n_tgt)] = 1;
        for (size_t j = 0; j < t.size(); ++j) {
            b.tgt_in[static_cast<size_t>(i * b.n_tgt) + j + 1] = t[j];
            b.tgt_out[static_cast<size_t>(i * b.n_tgt) + j] = t[j];
            b.tgt_valid[static_cast<size_t>(i * b.n_tgt) + j + 1] = 1;
        }
        b.tgt_out[static_cast<size_t>(i * b.n_tgt) + t.size()] = Vocab::eos;
    }
    return b;
}

std::vector<Batch> make_batches(const Corpus& c, const Vocab& v, int batch_tokens, Rng& rng) {
    if (batch_tokens < 1) throw config_error("batch_tokens must be >= 1");
    if (c.pairs.empty()) throw config_error("make_batches: empty corpus");
    std::vector<size_t> order(c.pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.bits() % i]);

    std::vector<Batch> batches;
    std::vector<std::pair<std::string, std::string>> bucket;
    int tokens = 0;
    auto flush = [&] {
        if (!bucket.empty()) {
            batches.push_back(make_batch(v, bucket));
            bucket.clear();
            tokens = 0;
        }
    };
    for (size_t idx : order) {
        const auto& pair = c.pairs[idx];
        const int t = static_cast<int>(split_ws(pair.second).size()) + 1;
        if (!bucket.empty() && tokens + t > batch_tokens) flush();
        bucket.push_back(pair);
        tokens += t;
    }
    flush();
    return batches;
}

}  // namespace ef
