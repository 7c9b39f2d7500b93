#pragma once

// Weight-only int8 quantization: symmetric per-row absmax scales for every
// weight matrix; rank-1 parameters (biases, LN affine) stay float32. Scales
// are kept in double so quantize -> dequantize -> quantize is a fixpoint.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ef/model.hpp"
#include "ef/param_store.hpp"

namespace ef {

struct QuantTensor {
    Shape shape;
    std::vector<int8_t> q;
    std::vector<double> scales;  // one per row (leading dimension)
};

struct QuantGroup {
    std::string name;
    ShapeClass shape_class = ShapeClass::attention;
    std::map<std::string, QuantTensor> quantized;
    std::map<std::string, std::pair<Shape, std::vector<float>>> raw;
};

struct QuantizedStore {
    std::map<std::string, QuantGroup> groups;
};

struct QuantSizeReport {
    int64_t weight_f32_bytes = 0;   // float32 footprint of the quantized matrices
    int64_t weight_int8_bytes = 0;  // their int8 payload
    int64_t scale_bytes = 0;        // per-row scale overhead
    int64_t raw_f32_bytes = 0;      // parameters left in float32
};

QuantizedStore quantize_store(const ParamStore<float>& store);

// Reference realization of quantized inference: rebuild a float store by
// dequantizing every matrix, then run the ordinary forward path.
ParamStore<float> dequantize_store(const QuantizedStore& qs);

Tensor<float> quantized_forward(const ModelConfig& cfg, const TyingPlan& plan,
                                const QuantizedStore& qs, const Batch& batch);

QuantSizeReport quant_size_report(const QuantizedStore& qs);

void save_quantized(const std::string& path, const QuantizedStore& qs, const std::string& header_json);
QuantizedStore load_quantized(const std::string& path, std::string* header_json = nullptr);

}  // namespace ef
