#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "ef/quant.hpp"
#include "modelutil.hpp"

using namespace ef;
using modelutil::make_model;
using modelutil::tiny_cfg;

TEST_CASE("dequantized weights deviate by at most scale/2 elementwise") {
    auto cfg = tiny_cfg(TyingScheme::edgeformer, DecoderStyle::interleaved, 16, 12, 2, 40);
    cfg.d_encffn = 32;
    cfg.d_decffn = 4;
    auto bundle = make_model<float>(cfg, 7);
    auto qs = quantize_store(bundle->store);
    auto deq = dequantize_store(qs);

    bundle->store.for_each_tensor([&](ParamGroup<float>& g, const std::string& tn, Tensor<float>& t) {
        if (t.rank() < 2) return;
        const auto& qt = qs.groups.at(g.name).quantized.at(tn);
        const auto& dt = deq.tensor(g.name, tn);
        const int64_t cols = t.numel() / t.dim(0);
        for (int64_t r = 0; r < t.dim(0); ++r)
            for (int64_t c = 0; c < cols; ++c) {
                const size_t i = static_cast<size_t>(r * cols + c);
                CHECK(std::fabs(static_cast<double>(t.data()[i]) - dt.data()[i]) <=
                      qt.scales[static_cast<size_t>(r)] / 2 + 1e-12);
            }
    });
}

TEST_CASE("quantize -> dequantize -> quantize is a bitwise fixpoint") {
    auto cfg = tiny_cfg(TyingScheme::universal, DecoderStyle::vanilla, 16, 2, 2, 30);
    auto bundle = make_model<float>(cfg, 13);
    auto q1 = quantize_store(bundle->store);
    auto d1 = dequantize_store(q1);
    auto q2 = quantize_store(d1);
    for (const auto& [gname, g1] : q1.groups) {
        const auto& g2 = q2.groups.at(gname);
        for (const auto& [tn, t1] : g1.quantized) {
            CHECK(t1.q == g2.quantized.at(tn).q);
            CHECK(t1.scales == g2.quantized.at(tn).scales);
        }
    }
    // and the dequantized values themselves are stable
    auto d2 = dequantize_store(q2);
    bool same = true;
    d1.for_each_tensor([&](ParamGroup<float>& g, const std::string& tn, Tensor<float>& t) {
        same = same && t.data() == d2.tensor(g.name, tn).data();
    });
    CHECK(same);
}

TEST_CASE("all-zero rows quantize losslessly with scale 1") {
    auto t = Tensor<float>::zeros({3, 4});
    t.data()[4] = 0.5f;  // row 1 only
    ParamStore<float> store;
    ParamGroup<float> g;
    g.name = "g";
    g.shape_class = ShapeClass::attention;
    g.tensors.emplace("w", t);
    store.groups.emplace("g", std::move(g));
    auto qs = quantize_store(store);
    const auto& qt = qs.groups.at("g").quantized.at("w");
    CHECK(qt.scales[0] == 1.0);
    CHECK(qt.scales[2] == 1.0);
    auto deq = dequantize_store(qs);
    for (int j = 0; j < 4; ++j) {
        CHECK(deq.tensor("g", "w").data()[static_cast<size_t>(j)] == 0.0f);
        CHECK(deq.tensor("g", "w").data()[static_cast<size_t>(8 + j)] == 0.0f);
    }
}

TEST_CASE("int8 payload is 25% of float32, under the 26% bound") {
    auto cfg = tiny_cfg(TyingScheme::edgeformer, DecoderStyle::interleaved, 64, 12, 2, 50);
    cfg.heads = 4;
    cfg.d_encffn = 128;
    cfg.d_decffn = 16;
    auto bundle = make_model<float>(cfg, 3);
    auto qs = quantize_store(bundle->store);
    const auto r = quant_size_report(qs);
    CHECK(r.weight_int8_bytes * 4 == r.weight_f32_bytes);
    CHECK(static_cast<double>(r.weight_int8_bytes) <= 0.26 * static_cast<double>(r.weight_f32_bytes));
    CHECK(r.scale_bytes > 0);
    CHECK(r.raw_f32_bytes == 0);  // no bias-LA in this model
}

TEST_CASE("zero-weight model produces identical logits quantized or not") {
    auto cfg = tiny_cfg(TyingScheme::full, DecoderStyle::vanilla, 16, 1, 1, 11);
    auto bundle = make_model<float>(cfg, 5);
    bundle->store.for_each_tensor([&](ParamGroup<float>&, const std::string&, Tensor<float>& t) {
        for (auto& v : t.data()) v = 0.0f;  // all-zero rows quantize losslessly
    });
    auto batch = modelutil::random_batch(11, 2, 4, 3, 9);
    NoGradGuard ng;
    auto want = bundle->model->forward(batch).data();
    auto got = quantized_forward(cfg, bundle->plan, quantize_store(bundle->store), batch).data();
    CHECK(want == got);
}

TEST_CASE("quantization error through one linear layer respects the interval bound") {
    Rng rng(11);
    const int64_t din = 12, dout = 8;
    auto w = Tensor<float>::zeros({din, dout});
    for (auto& v : w.data()) v = static_cast<float>(rng.uniform_pm(0.7));
    ParamStore<float> store;
    ParamGroup<float> g;
    g.name = "g";
    g.shape_class = ShapeClass::attention;
    g.tensors.emplace("w", w);
    store.groups.emplace("g", std::move(g));
    auto qs = quantize_store(store);
    auto wq = dequantize_store(qs).tensor("g", "w");
    const auto& scales = qs.groups.at("g").quantized.at("w").scales;

    auto x = Tensor<float>::zeros({1, din});
    for (auto& v : x.data()) v = static_cast<float>(rng.uniform_pm(2.0));
    auto y = matmul(x, w);
    auto yq = matmul(x, wq);
    for (int64_t j = 0; j < dout; ++j) {
        double bound = 0;
        for (int64_t k = 0; k < din; ++k)
            bound += std::fabs(static_cast<double>(x.data()[static_cast<size_t>(k)])) *
                     scales[static_cast<size_t>(k)] / 2;
        CHECK(std::fabs(static_cast<double>(y.data()[static_cast<size_t>(j)]) -
                        yq.data()[static_cast<size_t>(j)]) <= bound + 1e-6);
    }
}

TEST_CASE("quantized container round-trips") {
    auto cfg = tiny_cfg(TyingScheme::universal, DecoderStyle::interleaved, 16, 2, 2, 20);
    cfg.la.kind = LaKind::bias;  // exercises raw float records
    auto bundle = make_model<float>(cfg, 21);
    auto qs = quantize_store(bundle->store);

    const std::string path = "quant_roundtrip_test.bin";
    save_quantized(path, qs, "{\"k\":1}");
    std::string header;
    auto loaded = load_quantized(path, &header);
    CHECK(header == "{\"k\":1}");
    for (const auto& [gname, g] : qs.groups) {
        const auto& lg = loaded.groups.at(gname);
        CHECK(lg.shape_class == g.shape_class);
        for (const auto& [tn, qt] : g.quantized) {
            CHECK(lg.quantized.at(tn).q == qt.q);
            CHECK(lg.quantized.at(tn).scales == qt.scales);
        }
        for (const auto& [tn, raw] : g.raw) CHECK(lg.raw.at(tn).second == raw.second);
    }
    std::remove(path.c_str());
    CHECK_THROWS_AS(load_quantized("no_such_file.bin"), io_error);
}
