#include "ef/tying.hpp"

#include <sstream>

namespace ef {

namespace {

const char* kind_str(ModuleKind k) {
    switch (k) {
        case ModuleKind::self_attn: return "self_attn";
        case ModuleKind::cross_attn: return "cross_attn";
        default: return "ffn";
    }
}

ModuleKind kind_from_str(const std::string& s) {
    if (s == "self_attn" || s == "attn") return ModuleKind::self_attn;
    if (s == "cross_attn") return ModuleKind::cross_attn;
    if (s == "ffn") return ModuleKind::ffn;
    throw config_error("unknown module kind in slot: " + s);
}

ShapeClass slot_class(const SlotKey& s) {
    if (s.kind == ModuleKind::ffn) return s.decoder ? ShapeClass::decoder_ffn : ShapeClass::encoder_ffn;
    return ShapeClass::attention;
}

std::vector<SlotKey> all_slots(const ModelConfig& cfg) {
    std::vector<SlotKey> slots;
    for (int i = 1; i <= cfg.enc_layers; ++i) {
        slots.push_back({false, i, ModuleKind::self_attn});
        slots.push_back({false, i, ModuleKind::ffn});
    }
    for (int j = 1; j <= cfg.dec_layers; ++j) {
        slots.push_back({true, j, ModuleKind::self_attn});
        slots.push_back({true, j, ModuleKind::cross_attn});
        slots.push_back({true, j, ModuleKind::ffn});
    }
    return slots;
}

void bind(TyingPlan& plan, const SlotKey& slot, const std::string& group) {
    const ShapeClass c = slot_class(slot);
    auto [it, inserted] = plan.groups.emplace(group, c);
    if (!inserted && it->second != c) {
        // Attention groups are shape-identical across encoder and decoder, so
        // cross-side attention sharing is fine; FFN widths differ by side.
        throw config_error("slot " + slot_str(slot) + " cannot bind to group '" + group +
                           "' of class " + shape_class_str(it->second));
    }
    plan.bindings[slot] = group;
}

void add_adjunct_groups(TyingPlan& plan, const ModelConfig& cfg) {
    plan.groups.emplace(embedding_group_name(), ShapeClass::embedding);
    if (!cfg.tie_embeddings) plan.groups.emplace(output_group_name(), ShapeClass::embedding);
    if (cfg.la.kind == LaKind::none) return;
    const ShapeClass c = cfg.la.kind == LaKind::bias      ? ShapeClass::bias
                         : cfg.la.kind == LaKind::adapter ? ShapeClass::adapter
                                                          : ShapeClass::prefix;
    for (int i = 1; i <= cfg.enc_layers; ++i) plan.groups.emplace(la_group_name(cfg.la.kind, i), c);
}

TyingPlan build_full(const ModelConfig& cfg) {
    TyingPlan plan;
    for (const auto& s : all_slots(cfg)) {
        std::ostringstream name;
        name << (s.decoder ? "dec" : "enc") << s.layer << "_" << kind_str(s.kind);
        bind(plan, s, name.str());
    }
    return plan;
}

TyingPlan build_universal(const ModelConfig& cfg) {
    TyingPlan plan;
    for (const auto& s : all_slots(cfg)) {
        std::string name;
        if (!s.decoder)
            name = s.kind == ModuleKind::ffn ? "enc_ffn" : "enc_attn";
        else
            name = s.kind == ModuleKind::ffn          ? "dec_ffn"
                   : s.kind == ModuleKind::self_attn  ? "dec_self_attn"
                                                      : "dec_cross_attn";
        bind(plan, s, name);
    }
    return plan;
}

// Canonical 12+2: four attention groups with encoder period 4, decoder
// self-attn of layer j reusing encoder layer 2j-1 and cross-attn layer 2j;
// two encoder FFN groups with period 2; one decoder FFN group.
TyingPlan build_edgeformer(const ModelConfig& cfg) {
    if (cfg.enc_layers != 12)
        throw config_error("scheme edgeformer is defined for a 12-layer encoder; no binding rule for slot " +
                           slot_str({false, cfg.enc_layers, ModuleKind::self_attn}) +
                           " (use scheme=custom for other depths)");
    if (cfg.dec_layers != 2)
        throw config_error("scheme edgeformer is defined for a 2-layer decoder; no binding rule for slot " +
                           slot_str({true, cfg.dec_layers, ModuleKind::self_attn}) +
                           " (use scheme=custom for other depths)");
    if (cfg.decoder_style != DecoderStyle::interleaved)
        throw config_error("scheme edgeformer requires the interleaved decoder");

    TyingPlan plan;
    auto attn_group = [](int enc_layer) { return "attn_g" + std::to_string((enc_layer - 1) % 4 + 1); };
    for (int i = 1; i <= 12; ++i) {
        bind(plan, {false, i, ModuleKind::self_attn}, attn_group(i));
        bind(plan, {false, i, ModuleKind::ffn}, "enc_ffn_g" + std::to_string((i - 1) % 2 + 1));
    }
    for (int j = 1; j <= 2; ++j) {
        bind(plan, {true, j, ModuleKind::self_attn}, attn_group(2 * j - 1));
        bind(plan, {true, j, ModuleKind::cross_attn}, attn_group(2 * j));
        bind(plan, {true, j, ModuleKind::ffn}, "dec_ffn");
    }
    return plan;
}

TyingPlan build_custom(const ModelConfig& cfg) {
    TyingPlan plan;
    for (const auto& s : all_slots(cfg)) {
        auto it = cfg.custom_bindings.find(slot_str(s));
        if (it == cfg.custom_bindings.end())
            throw config_error("custom tying plan is missing a binding for slot " + slot_str(s));
        bind(plan, s, it->second);
    }
    for (const auto& [slot, group] : cfg.custom_bindings)
        if (!plan.bindings.count(slot_from_str(slot)))
            throw config_error("custom binding references unknown slot " + slot);
    return plan;
}

}  // namespace

std::string slot_str(const SlotKey& s) {
    std::ostringstream os;
    os << (s.decoder ? "dec." : "enc.") << s.layer << "." << kind_str(s.kind);
    return os.str();
}

SlotKey slot_from_str(const std::string& str) {
    const auto p1 = str.find('.');
    const auto p2 = str.find('.', p1 + 1);
    if (p1 == std::string::npos || p2 == std::string::npos)
        throw config_error("malformed slot key: " + str);
    SlotKey s;
    const std::string side = str.substr(0, p1);
    if (side == "enc")
        s.decoder = false;
    else if (side == "dec")
        s.decoder = true;
    else
        throw config_error("malformed slot key: " + str);
    s.layer = std::stoi(str.substr(p1 + 1, p2 - p1 - 1));
    s.kind = kind_from_str(str.substr(p2 + 1));
    if (s.layer < 1) throw config_error("slot layer must be >= 1: " + str);
    if (!s.decoder && s.kind == ModuleKind::cross_attn)
        throw config_error("encoder slots have no cross attention: " + str);
    return s;
}

const char* shape_class_str(ShapeClass c) {
    switch (c) {
        case ShapeClass::attention: return "attention";
        case ShapeClass::encoder_ffn: return "encoder_ffn";
        case ShapeClass::decoder_ffn: return "decoder_ffn";
        case ShapeClass::embedding: return "embedding";
        case ShapeClass::adapter: return "adapter";
        case ShapeClass::prefix: return "prefix";
        default: return "bias";
    }
}

const std::string& TyingPlan::group_of(const SlotKey& s) const {
    auto it = bindings.find(s);
    if (it == bindings.end()) throw config_error("no binding for slot " + slot_str(s));
    return it->second;
}

std::string la_group_name(LaKind kind, int enc_layer) {
    return std::string("la_") + to_string(kind) + "_enc" + std::to_string(enc_layer);
}

TyingPlan build_plan(const ModelConfig& cfg) {
    cfg.validate();
    TyingPlan plan;
    switch (cfg.scheme) {
        case TyingScheme::full: plan = build_full(cfg); break;
        case TyingScheme::universal: plan = build_universal(cfg); break;
        case TyingScheme::edgeformer: plan = build_edgeformer(cfg); break;
        case TyingScheme::custom: plan = build_custom(cfg); break;
    }
    add_adjunct_groups(plan, cfg);
    return plan;
}

std::map<std::string, int> load_report(const TyingPlan& plan, const ModelConfig& cfg) {
    std::map<std::string, int> loads;
    for (const auto& [slot, group] : plan.bindings) {
        int apps = 1;
        if (slot.decoder && slot.kind == ModuleKind::ffn && cfg.decoder_style == DecoderStyle::interleaved)
            apps = 2;  // the interleaved layer applies its FFN twice
        loads[group] += apps;
    }
    return loads;
}

std::vector<std::pair<std::string, std::vector<int64_t>>> group_tensor_shapes(
    ShapeClass c, const ModelConfig& cfg) {
    const int64_t d = cfg.d;
    switch (c) {
        case ShapeClass::attention:
            return {{"wq", {d, d}}, {"wk", {d, d}}, {"wv", {d, d}}, {"wo", {d, d}}};
        case ShapeClass::encoder_ffn:
            return {{"w1", {d, cfg.d_encffn}}, {"w2", {cfg.d_encffn, d}}};
        case ShapeClass::decoder_ffn:
            return {{"w1", {d, cfg.d_decffn}}, {"w2", {cfg.d_decffn, d}}};
        case ShapeClass::embedding: {
            std::vector<std::pair<std::string, std::vector<int64_t>>> t{
                {"table", {cfg.vocab, cfg.embed_width()}}};
            if (cfg.factorized_embedding()) t.push_back({"up", {cfg.embed_width(), d}});
            return t;
        }
        case ShapeClass::adapter:
            return {{"a_q", {d, cfg.la.r}}, {"b_q", {cfg.la.r, d}}, {"a_v", {d, cfg.la.r}}, {"b_v", {cfg.la.r, d}}};
        case ShapeClass::prefix:
            return {{"p", {cfg.la.prefix_len, d}}};
        case ShapeClass::bias:
            return {{"bq", {d}},          {"bk", {d}},          {"bv", {d}},          {"bo", {d}},
                    {"bf1", {cfg.d_encffn}}, {"bf2", {d}},
                    {"ln1_g", {d}},       {"ln1_b", {d}},       {"ln2_g", {d}},       {"ln2_b", {d}}};
    }
    throw config_error("unknown shape class");
}

int64_t group_param_count(ShapeClass c, const ModelConfig& cfg) {
    int64_t total = 0;
    for (const auto& [name, shape] : group_tensor_shapes(c, cfg)) {
        int64_t n = 1;
        for (int64_t dim : shape) n *= dim;
        total += n;
    }
    return total;
}

}  // namespace ef
