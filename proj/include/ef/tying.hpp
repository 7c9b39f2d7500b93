#pragma once

// Tying plans: a declarative map from layer-module slots to named parameter
// groups. Binding several slots to one group is what realizes shared
// parameterization; the load of a group is how many module applications hit
// it in one forward pass.

#include <compare>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ef/config.hpp"

namespace ef {

enum class ModuleKind { self_attn, cross_attn, ffn };

enum class ShapeClass : uint8_t {
    attention = 0,
    encoder_ffn = 1,
    decoder_ffn = 2,
    embedding = 3,
    adapter = 4,
    prefix = 5,
    bias = 6,
};

struct SlotKey {
    bool decoder = false;
    int layer = 1;  // 1-based
    ModuleKind kind = ModuleKind::self_attn;

    auto operator<=>(const SlotKey&) const = default;
};

std::string slot_str(const SlotKey& s);
SlotKey slot_from_str(const std::string& s);

const char* shape_class_str(ShapeClass c);

struct TyingPlan {
    // Layer-module slots only; embedding and layer-adaptation groups live in
    // `groups` but are not slot-bound.
    std::map<SlotKey, std::string> bindings;
    std::map<std::string, ShapeClass> groups;

    const std::string& group_of(const SlotKey& s) const;
};

// Group names used for non-slot parameters.
inline std::string embedding_group_name() { return "embedding"; }
inline std::string output_group_name() { return "output_embedding"; }
std::string la_group_name(LaKind kind, int enc_layer);

// Builds the plan for cfg.scheme. For scheme=edgeformer the canonical 12+2
// structure is required; other depths must use scheme=custom with explicit
// bindings.
TyingPlan build_plan(const ModelConfig& cfg);

// Applications per group in one forward pass. Interleaved decoder layers
// apply their FFN group twice. Only slot-bound groups are reported.
std::map<std::string, int> load_report(const TyingPlan& plan, const ModelConfig& cfg);

// Tensor inventory of one group: (tensor name, shape) pairs.
std::vector<std::pair<std::string, std::vector<int64_t>>> group_tensor_shapes(
    ShapeClass c, const ModelConfig& cfg);

int64_t group_param_count(ShapeClass c, const ModelConfig& cfg);

}  // namespace ef
