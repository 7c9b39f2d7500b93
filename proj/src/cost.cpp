#include "ef/cost.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace ef {

int64_t encoder_layer_params(int64_t d, int64_t d_encffn) { return 4 * d * d + 2 * d * d_encffn; }

int64_t decoder_layer_params(int64_t d, int64_t d_decffn, DecoderStyle /*style*/) {
    // Both styles hold two attention modules and one FFN group; the
    // interleaved layer merely applies the FFN twice.
    return 8 * d * d + 2 * d * d_decffn;
}

int64_t encoder_layer_flops(int64_t d, int64_t d_encffn, int64_t n) {
    return (4 * d * d + 2 * d * d_encffn) * n + 2 * n * n * d;
}

int64_t decoder_layer_flops(int64_t d, int64_t d_decffn, DecoderStyle style, int64_t n_tgt,
                            int64_t n_src) {
    const int64_t self_attn = 4 * d * d * n_tgt + 2 * n_tgt * n_tgt * d;
    const int64_t cross_attn = 2 * d * d * (n_tgt + n_src) + 2 * n_tgt * n_src * d;
    const int64_t ffn_apps = style == DecoderStyle::interleaved ? 2 : 1;
    return self_attn + cross_attn + ffn_apps * 2 * d * d_decffn * n_tgt;
}

int64_t la_param_delta(const ModelConfig& cfg) {
    const int64_t d = cfg.d, m = cfg.enc_layers;
    switch (cfg.la.kind) {
        case LaKind::none: return 0;
        case LaKind::bias: return m * (9 * d + cfg.d_encffn);
        case LaKind::adapter: return m * 4 * d * cfg.la.r;
        case LaKind::prefix: return m * static_cast<int64_t>(cfg.la.prefix_len) * d;
    }
    return 0;
}

int64_t count_params(const ModelConfig& cfg, const TyingPlan& plan, bool include_embeddings) {
    int64_t total = 0;
    for (const auto& [name, cls] : plan.groups) {
        if (!include_embeddings && cls == ShapeClass::embedding) continue;
        total += group_param_count(cls, cfg);
    }
    return total;
}

namespace {

int64_t la_flops_delta_per_layer(const ModelConfig& cfg, int64_t n_src) {
    const int64_t d = cfg.d;
    switch (cfg.la.kind) {
        case LaKind::adapter: return 2 * (2 * d * cfg.la.r) * n_src;  // Q and V adapters
        case LaKind::prefix: return 2 * n_src * cfg.la.prefix_len * d;
        default: return 0;
    }
}

}  // namespace

int64_t estimate_flops(const ModelConfig& cfg, int64_t n_src, int64_t n_tgt) {
    if (n_src < 1 || n_tgt < 1) throw config_error("estimate_flops: lengths must be >= 1");
    const int64_t d = cfg.d;
    int64_t total = 0;
    total += cfg.enc_layers *
             (encoder_layer_flops(d, cfg.d_encffn, n_src) + la_flops_delta_per_layer(cfg, n_src));
    total += cfg.dec_layers * decoder_layer_flops(d, cfg.d_decffn, cfg.decoder_style, n_tgt, n_src);
    if (cfg.factorized_embedding()) {
        const int64_t de = cfg.embed_width();
        total += (n_src + n_tgt) * de * d;        // embedding up-projection
        total += n_tgt * (d * de + de * cfg.vocab);  // factorized output projection
    } else {
        total += n_tgt * d * cfg.vocab;
    }
    return total;
}

BudgetVerdicts budget_check(int64_t params_shared_once, int64_t flops) {
    BudgetVerdicts v;
    v.params_pass = params_shared_once <= kParamBudget;
    v.flops_pass = flops <= kFlopsBudget;
    v.params_margin = kParamBudget - params_shared_once;
    v.flops_margin = kFlopsBudget - flops;
    return v;
}

CostReport analyze_cost(const ModelConfig& cfg, const TyingPlan& plan, int n_src, int n_tgt) {
    CostReport r;
    r.n_src = n_src;
    r.n_tgt = n_tgt;
    r.params_shared_once = count_params(cfg, plan, false);
    r.params_with_embeddings = count_params(cfg, plan, true);
    r.flops = estimate_flops(cfg, n_src, n_tgt);
    for (const auto& [name, cls] : plan.groups)
        r.params_by_class[shape_class_str(cls)] += group_param_count(cls, cfg);
    r.flops_by_part["encoder"] = cfg.enc_layers * encoder_layer_flops(cfg.d, cfg.d_encffn, n_src);
    r.flops_by_part["decoder"] =
        cfg.dec_layers * decoder_layer_flops(cfg.d, cfg.d_decffn, cfg.decoder_style, n_tgt, n_src);
    r.flops_by_part["layer_adapt"] = cfg.enc_layers * la_flops_delta_per_layer(cfg, n_src);
    r.flops_by_part["projections"] =
        r.flops - r.flops_by_part["encoder"] - r.flops_by_part["decoder"] - r.flops_by_part["layer_adapt"];
    r.loads = load_report(plan, cfg);
    r.budget = budget_check(r.params_shared_once, r.flops);
    return r;
}

namespace {

std::string human(int64_t v) {
    char buf[64];
    if (v >= 1'000'000'000)
        std::snprintf(buf, sizeof(buf), "%.2fG", static_cast<double>(v) / 1e9);
    else if (v >= 1'000'000)
        std::snprintf(buf, sizeof(buf), "%.2fM", static_cast<double>(v) / 1e6);
    else
        std::snprintf(buf, sizeof(buf), "%lld", static_cast<long long>(v));
    return buf;
}

}  // namespace

std::string format_report(const CostReport& r) {
    std::ostringstream os;
    os << "params (shared once, no embeddings): " << r.params_shared_once << " (" << human(r.params_shared_once)
       << ")\n";
    os << "params (with embeddings):            " << r.params_with_embeddings << " ("
       << human(r.params_with_embeddings) << ")\n";
    os << "flops @ n_src=" << r.n_src << " n_tgt=" << r.n_tgt << ":            " << r.flops << " ("
       << human(r.flops) << ")\n";
    os << "breakdown by class:\n";
    for (const auto& [k, v] : r.params_by_class) os << "  " << k << ": " << v << "\n";
    os << "flops by part:\n";
    for (const auto& [k, v] : r.flops_by_part) os << "  " << k << ": " << v << "\n";
    os << "group loads:\n";
    for (const auto& [k, v] : r.loads) os << "  " << k << ": " << v << "\n";
    os << "budget: params " << (r.budget.params_pass ? "PASS" : "FAIL") << " (margin " << r.budget.params_margin
       << "), flops " << (r.budget.flops_pass ? "PASS" : "FAIL") << " (margin " << r.budget.flops_margin << ")\n";
    return os.str();
}

std::string machine_report(const CostReport& r) {
    std::ostringstream os;
    os << "params_shared_once=" << r.params_shared_once << "\n";
    os << "params_with_embeddings=" << r.params_with_embeddings << "\n";
    os << "flops=" << r.flops << "\n";
    os << "n_src=" << r.n_src << "\n";
    os << "n_tgt=" << r.n_tgt << "\n";
    for (const auto& [k, v] : r.params_by_class) os << "params_class_" << k << "=" << v << "\n";
    for (const auto& [k, v] : r.flops_by_part) os << "flops_part_" << k << "=" << v << "\n";
    for (const auto& [k, v] : r.loads) os << "load_" << k << "=" << v << "\n";
    os << "budget_params_pass=" << (r.budget.params_pass ? 1 : 0) << "\n";
    os << "budget_flops_pass=" << (r.budget.flops_pass ? 1 : 0) << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

namespace {

ModelConfig base_model(int d) {
    ModelConfig cfg;
    cfg.d = d;
    cfg.heads = d / 64;
    cfg.vocab = 32768;
    cfg.d_embed = 0;
    cfg.max_len = 256;
    cfg.dropout = 0.1;
    return cfg;
}

ModelConfig edgeformer_model(int d) {
    ModelConfig cfg = base_model(d);
    cfg.enc_layers = 12;
    cfg.dec_layers = 2;
    cfg.d_encffn = 4 * d;
    cfg.d_decffn = d / 4;
    cfg.decoder_style = DecoderStyle::interleaved;
    cfg.scheme = TyingScheme::edgeformer;
    return cfg;
}

ModelConfig dense_model(int d, int m, int n, TyingScheme scheme) {
    ModelConfig cfg = base_model(d);
    cfg.enc_layers = m;
    cfg.dec_layers = n;
    cfg.d_encffn = 4 * d;
    cfg.d_decffn = 4 * d;
    cfg.decoder_style = DecoderStyle::vanilla;
    cfg.scheme = scheme;
    return cfg;
}

// Table-3 style variants: canonical attention/decoder tying, encoder FFN
// groups assigned per `ffn_group_of` (1-based layer -> 1-based group).
template <typename Fn>
ModelConfig edgeformer_ffn_variant(int d, int d_encffn, Fn ffn_group_of) {
    ModelConfig cfg = edgeformer_model(d);
    cfg.d_encffn = d_encffn;
    cfg.scheme = TyingScheme::custom;
    auto attn_group = [](int i) { return "attn_g" + std::to_string((i - 1) % 4 + 1); };
    for (int i = 1; i <= 12; ++i) {
        cfg.custom_bindings["enc." + std::to_string(i) + ".self_attn"] = attn_group(i);
        cfg.custom_bindings["enc." + std::to_string(i) + ".ffn"] =
            "enc_ffn_g" + std::to_string(ffn_group_of(i));
    }
    for (int j = 1; j <= 2; ++j) {
        cfg.custom_bindings["dec." + std::to_string(j) + ".self_attn"] = attn_group(2 * j - 1);
        cfg.custom_bindings["dec." + std::to_string(j) + ".cross_attn"] = attn_group(2 * j);
        cfg.custom_bindings["dec." + std::to_string(j) + ".ffn"] = "dec_ffn";
    }
    return cfg;
}

}  // namespace

std::vector<std::string> preset_names() {
    return {
        "edgeformer-384", "edgeformer-512", "edgeformer-768",
        "full-6+6-384", "full-6+6-512", "full-6+6-768",
        "full-12+2-384", "full-12+2-512", "full-12+2-768",
        "ut-12+2-384", "ut-12+2-512", "ut-12+2-768",
        "edgeformer-512-bias", "edgeformer-512-adapter-r32", "edgeformer-512-adapter-r64",
        "edgeformer-512-prefix-l8",
        "edgeformer-512-ffn-load-4-4-4", "edgeformer-512-ffn-load-3-3-3-3",
        "edgeformer-512-ffn-load-1-11", "edgeformer-512-ffn-load-11-1",
    };
}

ModelConfig preset(const std::string& name) {
    auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
    auto width = [&]() -> int {
        if (name.size() >= 3) {
            const std::string tail = name.substr(name.size() - 3);
            if (tail == "384") return 384;
            if (tail == "512") return 512;
            if (tail == "768") return 768;
        }
        throw config_error("unknown preset: " + name);
    };

    if (starts("edgeformer-") && (name.size() == 14)) return edgeformer_model(width());
    if (starts("full-6+6-")) return dense_model(width(), 6, 6, TyingScheme::full);
    if (starts("full-12+2-")) return dense_model(width(), 12, 2, TyingScheme::full);
    if (starts("ut-12+2-")) return dense_model(width(), 12, 2, TyingScheme::universal);

    if (name == "edgeformer-512-bias") {
        ModelConfig cfg = edgeformer_model(512);
        cfg.la.kind = LaKind::bias;
        return cfg;
    }
    if (name == "edgeformer-512-adapter-r32" || name == "edgeformer-512-adapter-r64") {
        ModelConfig cfg = edgeformer_model(512);
        cfg.la.kind = LaKind::adapter;
        cfg.la.r = name.back() == '2' ? 32 : 64;
        return cfg;
    }
    if (name == "edgeformer-512-prefix-l8") {
        ModelConfig cfg = edgeformer_model(512);
        cfg.la.kind = LaKind::prefix;
        cfg.la.prefix_len = 8;
        return cfg;
    }
    if (name == "edgeformer-512-ffn-load-4-4-4")
        return edgeformer_ffn_variant(512, 1536, [](int i) { return (i - 1) % 3 + 1; });
    if (name == "edgeformer-512-ffn-load-3-3-3-3")
        return edgeformer_ffn_variant(512, 1024, [](int i) { return (i - 1) % 4 + 1; });
    if (name == "edgeformer-512-ffn-load-1-11")
        return edgeformer_ffn_variant(512, 2048, [](int i) { return i == 1 ? 1 : 2; });
    if (name == "edgeformer-512-ffn-load-11-1")
        return edgeformer_ffn_variant(512, 2048, [](int i) { return i <= 11 ? 1 : 2; });

    throw config_error("unknown preset: " + name);
}

// ---------------------------------------------------------------------------
// Golden tables
// ---------------------------------------------------------------------------

namespace {

struct GoldenParse {
    double value = 0;
    double unit = 1;
    int decimals = 0;
};

GoldenParse parse_golden(const std::string& g) {
    GoldenParse p;
    std::string num = g;
    if (!g.empty() && (g.back() == 'M' || g.back() == 'G')) {
        p.unit = g.back() == 'M' ? 1e6 : 1e9;
        num = g.substr(0, g.size() - 1);
    }
    const auto dot = num.find('.');
    p.decimals = dot == std::string::npos ? 0 : static_cast<int>(num.size() - dot - 1);
    p.value = std::stod(num) * p.unit;
    return p;
}

std::string format_at(double actual, const GoldenParse& p) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", p.decimals, actual / p.unit);
    std::string s = buf;
    if (p.unit == 1e6) s += "M";
    if (p.unit == 1e9) s += "G";
    return s;
}

}  // namespace

bool golden_match(const std::string& golden, double actual) {
    const GoldenParse p = parse_golden(golden);
    if (format_at(actual, p) == golden) return true;
    return std::fabs(actual - p.value) <= 0.01 * p.value;
}

namespace {

void push_value_cell(std::vector<ReproCell>& out, const std::string& table, const std::string& row,
                     const std::string& metric, const std::string& golden, int64_t actual) {
    ReproCell c;
    c.table = table;
    c.row = row;
    c.metric = metric;
    c.golden = golden;
    c.exact = actual;
    c.actual = format_at(static_cast<double>(actual), parse_golden(golden));
    c.pass = golden_match(golden, static_cast<double>(actual));
    out.push_back(std::move(c));
}

std::string ffn_load_string(const ModelConfig& cfg) {
    const TyingPlan plan = build_plan(cfg);
    const auto loads = load_report(plan, cfg);
    std::string s;
    for (const auto& [g, l] : loads) {
        if (plan.groups.at(g) != ShapeClass::encoder_ffn) continue;
        if (!s.empty()) s += "-";
        s += std::to_string(l);
    }
    return s;
}

}  // namespace

std::vector<ReproCell> repro_tables() {
    std::vector<ReproCell> cells;

    // Per-layer block: params and FLOPS at n=30 for d in {512, 384, 768}.
    struct LayerGolden {
        int d;
        const char* enc_p; const char* enc_f;
        const char* van_p; const char* van_f;
        const char* int_p; const char* int_f;
    };
    const LayerGolden layer_rows[] = {
        {512, "3.15M", "95.4M", "4.20M", "128M", "2.23M", "72.9M"},
        {384, "1.77M", "53.9M", "2.37M", "72.3M", "1.25M", "41.3M"},
        {768, "7.08M", "214M", "9.45M", "286M", "5.01M", "162M"},
    };
    for (const auto& g : layer_rows) {
        const int64_t d = g.d;
        const std::string sd = std::to_string(g.d);
        push_value_cell(cells, "table1-layers", "encoder d=" + sd, "params", g.enc_p,
                        encoder_layer_params(d, 4 * d));
        push_value_cell(cells, "table1-layers", "encoder d=" + sd, "flops", g.enc_f,
                        encoder_layer_flops(d, 4 * d, 30));
        push_value_cell(cells, "table1-layers", "vanilla-decoder d=" + sd, "params", g.van_p,
                        decoder_layer_params(d, 4 * d, DecoderStyle::vanilla));
        push_value_cell(cells, "table1-layers", "vanilla-decoder d=" + sd, "flops", g.van_f,
                        decoder_layer_flops(d, 4 * d, DecoderStyle::vanilla, 30, 30));
        push_value_cell(cells, "table1-layers", "interleaved-decoder d=" + sd, "params", g.int_p,
                        decoder_layer_params(d, d / 4, DecoderStyle::interleaved));
        push_value_cell(cells, "table1-layers", "interleaved-decoder d=" + sd, "flops", g.int_f,
                        decoder_layer_flops(d, d / 4, DecoderStyle::interleaved, 30, 30));
    }

    // Whole-model block.
    struct ModelGolden {
        const char* preset; const char* params; const char* flops;
    };
    const ModelGolden model_rows[] = {
        {"full-6+6-512", "44M", "1.84G"},   {"full-6+6-384", "25M", "1.13G"},   {"full-6+6-768", "99M", "3.76G"},
        {"full-12+2-512", "46M", "1.90G"},  {"full-12+2-384", "26M", "1.17G"},  {"full-12+2-768", "104M", "3.89G"},
        {"ut-12+2-512", "7.4M", "1.90G"},   {"ut-12+2-384", "4.1M", "1.17G"},   {"ut-12+2-768", "16.5M", "3.89G"},
        {"edgeformer-512", "8.6M", "1.79G"}, {"edgeformer-384", "4.8M", "1.11G"}, {"edgeformer-768", "19.2M", "3.65G"},
    };
    for (const auto& g : model_rows) {
        const ModelConfig cfg = preset(g.preset);
        const TyingPlan plan = build_plan(cfg);
        push_value_cell(cells, "table1-models", g.preset, "params", g.params, count_params(cfg, plan, false));
        push_value_cell(cells, "table1-models", g.preset, "flops", g.flops, estimate_flops(cfg, 30, 30));
    }

    // Layer-adaptation block: parameter totals.
    const ModelGolden la_rows[] = {
        {"edgeformer-512", "8.6M", nullptr},
        {"edgeformer-512-bias", "8.6M", nullptr},
        {"edgeformer-512-adapter-r32", "9.4M", nullptr},
        {"edgeformer-512-prefix-l8", "8.6M", nullptr},
    };
    for (const auto& g : la_rows) {
        const ModelConfig cfg = preset(g.preset);
        push_value_cell(cells, "table2-la", g.preset, "params", g.params,
                        count_params(cfg, build_plan(cfg), false));
    }

    // Encoder-FFN load block: load patterns plus parameter totals.
    struct LoadGolden {
        const char* preset; const char* loads; const char* params; const char* flops;
    };
    const LoadGolden load_rows[] = {
        {"edgeformer-512", "6-6", "8.6M", "1.8G"},
        {"edgeformer-512-ffn-load-4-4-4", "4-4-4", "9.1M", "1.6G"},
        {"edgeformer-512-ffn-load-3-3-3-3", "3-3-3-3", "8.6M", "1.4G"},
        {"edgeformer-512-ffn-load-1-11", "1-11", "8.6M", "1.8G"},
        {"edgeformer-512-ffn-load-11-1", "11-1", "8.6M", "1.8G"},
    };
    for (const auto& g : load_rows) {
        const ModelConfig cfg = preset(g.preset);
        ReproCell c;
        c.table = "table3-loads";
        c.row = g.preset;
        c.metric = "loads";
        c.golden = g.loads;
        c.actual = ffn_load_string(cfg);
        c.pass = c.actual == g.loads;
        cells.push_back(std::move(c));
        push_value_cell(cells, "table3-loads", g.preset, "params", g.params,
                        count_params(cfg, build_plan(cfg), false));
        push_value_cell(cells, "table3-loads", g.preset, "flops", g.flops, estimate_flops(cfg, 30, 30));
    }

    return cells;
}

}  // namespace ef
