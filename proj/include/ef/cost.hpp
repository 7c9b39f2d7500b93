#pragma once

// Static parameter and FLOPS accounting.
//
// FLOPS convention, calibrated against the reference cost tables this module
// reproduces: one multiply-accumulate counts as one FLOP; every linear layer
// application costs (its parameter count) x (tokens processed), so tied
// weights are charged once per application; each attention module adds
// n_q*n_k*d for scores and the same again for context aggregation; the output
// projection adds n_tgt*d*V; embedding lookup is free. LN, softmax, bias and
// other scalar ops are excluded (they are below the tables' rounding
// precision at the calibration point).

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ef/config.hpp"
#include "ef/tying.hpp"

namespace ef {

inline constexpr int64_t kParamBudget = 10'000'000;
inline constexpr int64_t kFlopsBudget = 2'000'000'000;

struct BudgetVerdicts {
    bool params_pass = false;
    bool flops_pass = false;
    int64_t params_margin = 0;  // budget - actual (negative = over)
    int64_t flops_margin = 0;
};

struct CostReport {
    int n_src = 30;
    int n_tgt = 30;
    int64_t params_shared_once = 0;  // each group counted once, embeddings excluded
    int64_t params_with_embeddings = 0;
    int64_t flops = 0;
    std::map<std::string, int64_t> params_by_class;
    std::map<std::string, int64_t> flops_by_part;
    std::map<std::string, int> loads;
    BudgetVerdicts budget;
};

// Per-layer closed forms (weight matrices only). The interleaved decoder
// layer counts its shared FFN once.
int64_t encoder_layer_params(int64_t d, int64_t d_encffn);
int64_t decoder_layer_params(int64_t d, int64_t d_decffn, DecoderStyle style);
int64_t encoder_layer_flops(int64_t d, int64_t d_encffn, int64_t n);
int64_t decoder_layer_flops(int64_t d, int64_t d_decffn, DecoderStyle style, int64_t n_tgt,
                            int64_t n_src);

// Added parameters of one layer-adaptation kind across all encoder layers.
int64_t la_param_delta(const ModelConfig& cfg);

int64_t count_params(const ModelConfig& cfg, const TyingPlan& plan, bool include_embeddings);
int64_t estimate_flops(const ModelConfig& cfg, int64_t n_src, int64_t n_tgt);

BudgetVerdicts budget_check(int64_t params_shared_once, int64_t flops);

CostReport analyze_cost(const ModelConfig& cfg, const TyingPlan& plan, int n_src = 30, int n_tgt = 30);

// Human-readable table and `metric=value` lines for golden-file tests.
std::string format_report(const CostReport& r);
std::string machine_report(const CostReport& r);

// ---------------------------------------------------------------------------
// Named presets and golden-table reproduction
// ---------------------------------------------------------------------------

std::vector<std::string> preset_names();
ModelConfig preset(const std::string& name);

struct ReproCell {
    std::string table;
    std::string row;
    std::string metric;   // "params", "flops", "loads"
    std::string golden;   // value as printed in the reference table
    std::string actual;   // our value formatted at the same precision
    int64_t exact = 0;    // our exact integer (0 for load rows)
    bool pass = false;
};

// A value matches its golden cell when it formats to the same string at the
// golden's precision, or deviates by at most 1% (the tables round to three
// significant figures and carry a few one-ulp rounding quirks).
bool golden_match(const std::string& golden, double actual);

std::vector<ReproCell> repro_tables();

}  // namespace ef
