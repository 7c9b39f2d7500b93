#include "ef/experiment.hpp"

#include <fstream>
#include <json.hpp>

namespace ef {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::initializer_list<const char*> allowed,
                    const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed) ok = ok || it.key() == k;
        if (!ok) throw config_error("unknown key '" + it.key() + "' in " + where);
    }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

json la_to_json(const LayerAdaptConfig& la) {
    return json{{"kind", to_string(la.kind)}, {"r", la.r}, {"prefix_len", la.prefix_len},
                {"scaling", la.scaling}};
}

LayerAdaptConfig la_from_json(const json& j) {
    reject_unknown(j, {"kind", "r", "prefix_len", "scaling"}, "model.la");
    LayerAdaptConfig la;
    std::string kind = to_string(la.kind);
    get_if(j, "kind", kind);
    la.kind = la_kind_from(kind);
    get_if(j, "r", la.r);
    get_if(j, "prefix_len", la.prefix_len);
    get_if(j, "scaling", la.scaling);
    return la;
}

json model_to_json(const ModelConfig& m) {
    json j{{"d", m.d},
           {"enc_layers", m.enc_layers},
           {"dec_layers", m.dec_layers},
           {"d_encffn", m.d_encffn},
           {"d_decffn", m.d_decffn},
           {"decoder_style", to_string(m.decoder_style)},
           {"heads", m.heads},
           {"vocab", m.vocab},
           {"d_embed", m.d_embed},
           {"max_len", m.max_len},
           {"dropout", m.dropout},
           {"la", la_to_json(m.la)},
           {"scheme", to_string(m.scheme)},
           {"tie_embeddings", m.tie_embeddings}};
    if (!m.custom_bindings.empty()) j["custom_bindings"] = m.custom_bindings;
    return j;
}

ModelConfig model_from_json(const json& j) {
    reject_unknown(j,
                   {"d", "enc_layers", "dec_layers", "d_encffn", "d_decffn", "decoder_style", "heads",
                    "vocab", "d_embed", "max_len", "dropout", "la", "scheme", "tie_embeddings",
                    "custom_bindings"},
                   "model");
    ModelConfig m;
    get_if(j, "d", m.d);
    get_if(j, "enc_layers", m.enc_layers);
    get_if(j, "dec_layers", m.dec_layers);
    get_if(j, "d_encffn", m.d_encffn);
    get_if(j, "d_decffn", m.d_decffn);
    if (j.contains("decoder_style")) m.decoder_style = decoder_style_from(j.at("decoder_style"));
    get_if(j, "heads", m.heads);
    get_if(j, "vocab", m.vocab);
    get_if(j, "d_embed", m.d_embed);
    get_if(j, "max_len", m.max_len);
    get_if(j, "dropout", m.dropout);
    if (j.contains("la")) m.la = la_from_json(j.at("la"));
    if (j.contains("scheme")) m.scheme = scheme_from(j.at("scheme"));
    get_if(j, "tie_embeddings", m.tie_embeddings);
    if (j.contains("custom_bindings"))
        m.custom_bindings = j.at("custom_bindings").get<std::map<std::string, std::string>>();
    return m;
}

json train_to_json(const TrainConfig& t) {
    return json{{"lr_peak", t.lr_peak},
                {"warmup", t.warmup},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"adam_eps", t.adam_eps},
                {"weight_decay", t.weight_decay},
                {"label_smoothing", t.label_smoothing},
                {"max_steps", t.max_steps},
                {"batch_tokens", t.batch_tokens},
                {"seed", t.seed},
                {"clip_norm", t.clip_norm},
                {"accum_steps", t.accum_steps},
                {"log_every", t.log_every},
                {"eval_every", t.eval_every}};
}

TrainConfig train_from_json(const json& j) {
    reject_unknown(j,
                   {"lr_peak", "warmup", "beta1", "beta2", "adam_eps", "weight_decay", "label_smoothing",
                    "max_steps", "batch_tokens", "seed", "clip_norm", "accum_steps", "log_every",
                    "eval_every"},
                   "train");
    TrainConfig t;
    get_if(j, "lr_peak", t.lr_peak);
    get_if(j, "warmup", t.warmup);
    get_if(j, "beta1", t.beta1);
    get_if(j, "beta2", t.beta2);
    get_if(j, "adam_eps", t.adam_eps);
    get_if(j, "weight_decay", t.weight_decay);
    get_if(j, "label_smoothing", t.label_smoothing);
    get_if(j, "max_steps", t.max_steps);
    get_if(j, "batch_tokens", t.batch_tokens);
    get_if(j, "seed", t.seed);
    get_if(j, "clip_norm", t.clip_norm);
    get_if(j, "accum_steps", t.accum_steps);
    get_if(j, "log_every", t.log_every);
    get_if(j, "eval_every", t.eval_every);
    return t;
}

json decode_to_json(const DecodeConfig& d) {
    return json{{"beam", d.beam}, {"max_len", d.max_len}, {"length_penalty", d.length_penalty}};
}

DecodeConfig decode_from_json(const json& j) {
    reject_unknown(j, {"beam", "max_len", "length_penalty"}, "decode");
    DecodeConfig d;
    get_if(j, "beam", d.beam);
    get_if(j, "max_len", d.max_len);
    get_if(j, "length_penalty", d.length_penalty);
    return d;
}

json task_to_json(const TaskSpec& t) {
    return json{{"task", to_string(t.task)}, {"vocab", t.vocab},     {"len_min", t.len_min},
                {"len_max", t.len_max},      {"n_train", t.n_train}, {"n_dev", t.n_dev},
                {"n_test", t.n_test},        {"seed", t.seed}};
}

TaskSpec task_from_json(const json& j) {
    reject_unknown(j, {"task", "vocab", "len_min", "len_max", "n_train", "n_dev", "n_test", "seed"},
                   "task");
    TaskSpec t;
    if (j.contains("task")) t.task = task_from(j.at("task"));
    get_if(j, "vocab", t.vocab);
    get_if(j, "len_min", t.len_min);
    get_if(j, "len_max", t.len_max);
    get_if(j, "n_train", t.n_train);
    get_if(j, "n_dev", t.n_dev);
    get_if(j, "n_test", t.n_test);
    get_if(j, "seed", t.seed);
    return t;
}

json experiment_to_json_obj(const ExperimentConfig& cfg) {
    return json{{"model", model_to_json(cfg.model)},   {"train", train_to_json(cfg.train)},
                {"decode", decode_to_json(cfg.decode)}, {"task", task_to_json(cfg.task)},
                {"seed", cfg.seed},                     {"out_dir", cfg.out_dir}};
}

ExperimentConfig experiment_from_json_obj(const json& j) {
    reject_unknown(j, {"model", "train", "decode", "task", "seed", "out_dir"}, "experiment config");
    ExperimentConfig cfg;
    if (j.contains("model")) cfg.model = model_from_json(j.at("model"));
    if (j.contains("train")) cfg.train = train_from_json(j.at("train"));
    if (j.contains("decode")) cfg.decode = decode_from_json(j.at("decode"));
    if (j.contains("task")) cfg.task = task_from_json(j.at("task"));
    get_if(j, "seed", cfg.seed);
    get_if(j, "out_dir", cfg.out_dir);
    return cfg;
}

json parse_json(const std::string& text, const std::string& what) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw config_error("malformed JSON in " + what);
    return j;
}

}  // namespace

std::string experiment_to_json(const ExperimentConfig& cfg) {
    return experiment_to_json_obj(cfg).dump(2) + "\n";
}

ExperimentConfig experiment_from_json(const std::string& text) {
    return experiment_from_json_obj(parse_json(text, "experiment config"));
}

ExperimentConfig load_experiment(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open config: " + path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return experiment_from_json(text);
}

void save_experiment(const ExperimentConfig& cfg, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw io_error("cannot write config: " + path);
    os << experiment_to_json(cfg);
}

void apply_override(ExperimentConfig& cfg, const std::string& dotted_key, const std::string& value) {
    json j = experiment_to_json_obj(cfg);
    json* cursor = &j;
    size_t start = 0;
    while (true) {
        const size_t dot = dotted_key.find('.', start);
        const std::string part = dotted_key.substr(start, dot - start);
        if (part.empty()) throw config_error("malformed override key: " + dotted_key);
        if (dot == std::string::npos) {
            json parsed = json::parse(value, nullptr, false);
            // bare words (scheme names, task names, paths) stay strings
            (*cursor)[part] = parsed.is_discarded() || parsed.is_object() || parsed.is_array()
                                  ? json(value)
                                  : parsed;
            break;
        }
        cursor = &(*cursor)[part];
        start = dot + 1;
    }
    cfg = experiment_from_json_obj(j);
}

uint64_t fnv1a(const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t fnv1a_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot hash missing file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return fnv1a(bytes.data(), bytes.size());
}

std::string manifest_json(const std::string& command, const ExperimentConfig& cfg,
                          const std::vector<std::pair<std::string, std::string>>& input_files) {
    json j{{"command", command}, {"seed", cfg.seed}, {"config", experiment_to_json_obj(cfg)}};
    json inputs = json::object();
    for (const auto& [name, path] : input_files) {
        char hex[32];
        std::snprintf(hex, sizeof(hex), "%016llx",
                      static_cast<unsigned long long>(fnv1a_file(path)));
        inputs[name] = json{{"path", path}, {"fnv64", hex}};
    }
    j["inputs"] = inputs;
    return j.dump(2) + "\n";
}

std::string checkpoint_header(const ModelConfig& model, const Vocab* vocab, int64_t step) {
    json j{{"format", 1}, {"step", step}, {"model", model_to_json(model)}};
    if (vocab) j["vocab"] = vocab->tokens;
    return j.dump();
}

ModelConfig model_from_header(const std::string& header, Vocab* vocab_out) {
    const json j = parse_json(header, "checkpoint header");
    if (!j.contains("model")) throw io_error("checkpoint header lacks a model section");
    ModelConfig m = model_from_json(j.at("model"));
    if (vocab_out) {
        if (!j.contains("vocab")) throw io_error("checkpoint header lacks a vocabulary");
        *vocab_out = Vocab::from_tokens(j.at("vocab").get<std::vector<std::string>>());
    }
    return m;
}

}  // namespace ef
