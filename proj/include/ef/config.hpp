#pragma once

#include <map>
#include <string>

#include "ef/errors.hpp"

namespace ef {

enum class DecoderStyle { vanilla, interleaved };
enum class TyingScheme { full, universal, edgeformer, custom };
enum class LaKind { none, bias, adapter, prefix };

struct LayerAdaptConfig {
    LaKind kind = LaKind::none;
    int r = 32;            // adapter rank
    int prefix_len = 8;    // prefix token count
    double scaling = 1.0;  // adapter output scale
};

// All architecture hyperparameters. d_embed == 0 means "same as d"
// (unfactorized embedding).
struct ModelConfig {
    int d = 512;
    int enc_layers = 12;
    int dec_layers = 2;
    int d_encffn = 2048;
    int d_decffn = 128;
    DecoderStyle decoder_style = DecoderStyle::interleaved;
    int heads = 8;
    int vocab = 32768;
    int d_embed = 0;
    int max_len = 256;
    double dropout = 0.1;
    LayerAdaptConfig la;
    TyingScheme scheme = TyingScheme::edgeformer;
    bool tie_embeddings = true;
    // slot -> group name, used when scheme == custom (e.g. "enc.3.ffn" -> "ffn_b")
    std::map<std::string, std::string> custom_bindings;

    int embed_width() const { return d_embed > 0 ? d_embed : d; }
    bool factorized_embedding() const { return embed_width() < d; }

    void validate() const {
        if (d < 1 || enc_layers < 1 || dec_layers < 1 || d_encffn < 1 || d_decffn < 1)
            throw config_error("model: dimensions and depths must be positive");
        if (heads < 1 || d % heads != 0)
            throw config_error("model: d must be divisible by heads");
        if (vocab < 2) throw config_error("model: vocabulary too small");
        if (d_embed < 0 || embed_width() > d)
            throw config_error("model: d_embed must be in [1, d]");
        if (max_len < 1) throw config_error("model: max_len must be >= 1");
        if (dropout < 0.0 || dropout >= 1.0) throw config_error("model: dropout must be in [0,1)");
        if (decoder_style == DecoderStyle::interleaved && d_decffn >= d)
            throw config_error("model: interleaved decoder requires d_decffn < d");
        if (la.kind == LaKind::adapter && (la.r < 1 || la.r >= d))
            throw config_error("model: adapter rank must satisfy 1 <= r < d");
        if (la.kind == LaKind::prefix && la.prefix_len < 1)
            throw config_error("model: prefix length must be >= 1");
    }
};

inline const char* to_string(DecoderStyle s) {
    return s == DecoderStyle::vanilla ? "vanilla" : "interleaved";
}
inline const char* to_string(TyingScheme s) {
    switch (s) {
        case TyingScheme::full: return "full";
        case TyingScheme::universal: return "universal";
        case TyingScheme::edgeformer: return "edgeformer";
        default: return "custom";
    }
}
inline const char* to_string(LaKind k) {
    switch (k) {
        case LaKind::none: return "none";
        case LaKind::bias: return "bias";
        case LaKind::adapter: return "adapter";
        default: return "prefix";
    }
}

inline DecoderStyle decoder_style_from(const std::string& s) {
    if (s == "vanilla") return DecoderStyle::vanilla;
    if (s == "interleaved") return DecoderStyle::interleaved;
    throw config_error("unknown decoder style: " + s);
}
inline TyingScheme scheme_from(const std::string& s) {
    if (s == "full") return TyingScheme::full;
    if (s == "universal") return TyingScheme::universal;
    if (s == "edgeformer") return TyingScheme::edgeformer;
    if (s == "custom") return TyingScheme::custom;
    throw config_error("unknown tying scheme: " + s);
}
inline LaKind la_kind_from(const std::string& s) {
    if (s == "none") return LaKind::none;
    if (s == "bias") return LaKind::bias;
    if (s == "adapter") return LaKind::adapter;
    if (s == "prefix") return LaKind::prefix;
    throw config_error("unknown layer-adaptation kind: " + s);
}

}  // namespace ef
