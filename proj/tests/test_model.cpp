#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ef/cost.hpp"
#include "modelutil.hpp"

using namespace ef;
using modelutil::make_model;
using modelutil::random_batch;
using modelutil::tiny_cfg;

namespace {

template <typename T>
void zero_group_like(AttnSlot<T>& a) {
    for (auto* t : {&a.wq, &a.wk, &a.wv, &a.wo})
        for (auto& v : t->data()) v = T(0);
}

TensorD rand3(Shape s, Rng& rng, double sc = 1.0) {
    auto t = TensorD::zeros(std::move(s));
    for (auto& v : t.data()) v = rng.uniform_pm(sc);
    return t;
}

MaskBuf ones_mask(int64_t b, int64_t q, int64_t k) {
    return std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(b * q * k), uint8_t{1});
}

}  // namespace

TEST_CASE("logits shape contract and id validation") {
    auto bundle = make_model<float>(tiny_cfg(), 1);
    auto batch = random_batch(11, 3, 5, 4, 7);
    auto logits = bundle->model->forward(batch);
    CHECK(logits.shape() == Shape{3, 4, 11});

    batch.src[0] = 99;  // out of vocabulary
    CHECK_THROWS_AS(bundle->model->forward(batch), config_error);
}

TEST_CASE("zero-weight layers are residual passthroughs") {
    Rng rng(3);
    const int d = 8, heads = 2;
    auto x = rand3({2, 3, d}, rng);
    auto ones = TensorD::filled({d}, 1.0);
    auto zeros = TensorD::zeros({d});

    EncoderLayerSlots<double> enc;
    enc.attn.wq = TensorD::zeros({d, d});
    enc.attn.wk = TensorD::zeros({d, d});
    enc.attn.wv = TensorD::zeros({d, d});
    enc.attn.wo = TensorD::zeros({d, d});
    enc.ffn.w1 = TensorD::zeros({d, 2 * d});
    enc.ffn.w2 = TensorD::zeros({2 * d, d});
    enc.ln1 = {ones, zeros};
    enc.ln2 = {ones, zeros};
    auto y = encoder_layer_forward(x, enc, heads, ones_mask(2, 3, 3));
    CHECK(y.data() == x.data());

    DecoderLayerSlots<double> dec;
    dec.self_attn = enc.attn;
    dec.cross_attn = enc.attn;
    dec.ffn = enc.ffn;
    dec.ln1 = dec.ln2 = dec.ln3 = dec.ln4 = LnSlot<double>{ones, zeros};
    auto mem = rand3({2, 4, d}, rng);
    auto yv = vanilla_decoder_layer_forward(x, mem, dec, heads, ones_mask(2, 3, 3), ones_mask(2, 3, 4));
    CHECK(yv.data() == x.data());
    auto yi = interleaved_decoder_layer_forward(x, mem, dec, heads, ones_mask(2, 3, 3), ones_mask(2, 3, 4));
    CHECK(yi.data() == x.data());
}

TEST_CASE("encoder layer is permutation-equivariant") {
    Rng rng(5);
    const int d = 16, n = 6;
    auto bundle = make_model<double>(tiny_cfg(TyingScheme::full, DecoderStyle::vanilla, d, 2, 2, 11), 2);
    const auto& slots = bundle->model->encoder_layer(0);

    auto x = rand3({1, n, d}, rng);
    auto y = encoder_layer_forward(x, slots, 2, ones_mask(1, n, n));

    const std::vector<int64_t> perm{3, 0, 5, 1, 4, 2};
    auto xp = TensorD::zeros({1, n, d});
    for (int64_t q = 0; q < n; ++q)
        for (int64_t j = 0; j < d; ++j)
            xp.data()[static_cast<size_t>(q * d + j)] = x.data()[static_cast<size_t>(perm[static_cast<size_t>(q)] * d + j)];
    auto yp = encoder_layer_forward(xp, slots, 2, ones_mask(1, n, n));

    for (int64_t q = 0; q < n; ++q)
        for (int64_t j = 0; j < d; ++j)
            CHECK(yp.data()[static_cast<size_t>(q * d + j)] ==
                  doctest::Approx(y.data()[static_cast<size_t>(perm[static_cast<size_t>(q)] * d + j)]).epsilon(1e-9));
}

TEST_CASE("decoder causality for both styles, 50 seeds") {
    for (auto style : {DecoderStyle::vanilla, DecoderStyle::interleaved}) {
        for (uint64_t seed = 1; seed <= 25; ++seed) {
            auto cfg = tiny_cfg(TyingScheme::full, style, 16, 1, 2, 11);
            auto bundle = make_model<float>(cfg, seed);
            auto batch = random_batch(11, 1, 4, 5, seed, /*with_padding=*/false);
            auto base = bundle->model->forward(batch).data();

            const int64_t t = 2;
            auto perturbed = batch;
            perturbed.tgt_in[static_cast<size_t>(t)] =
                perturbed.tgt_in[static_cast<size_t>(t)] == 4 ? 5 : 4;
            auto out = bundle->model->forward(perturbed).data();

            const int64_t v = 11;
            bool before_identical = true;
            for (int64_t j = 0; j < t * v; ++j) before_identical = before_identical && base[static_cast<size_t>(j)] == out[static_cast<size_t>(j)];
            CHECK(before_identical);
            bool at_differs = false;
            for (int64_t j = t * v; j < (t + 1) * v; ++j) at_differs = at_differs || base[static_cast<size_t>(j)] != out[static_cast<size_t>(j)];
            CHECK(at_differs);
        }
    }
}

TEST_CASE("forward is deterministic with dropout off") {
    auto bundle = make_model<float>(tiny_cfg(TyingScheme::universal, DecoderStyle::interleaved), 9);
    auto batch = random_batch(11, 2, 5, 4, 3);
    auto a = bundle->model->forward(batch).data();
    auto b = bundle->model->forward(batch).data();
    CHECK(a == b);
}

TEST_CASE("interleaved layer with zeroed FFN matches an attention-only assembly") {
    Rng rng(11);
    const int d = 16, heads = 2, n = 4, ns = 5;
    auto bundle = make_model<double>(
        tiny_cfg(TyingScheme::full, DecoderStyle::interleaved, d, 1, 1, 11), 21);
    DecoderLayerSlots<double> slots = bundle->model->decoder_layer(0);
    for (auto& v : slots.ffn.w1.data()) v = 0.0;
    for (auto& v : slots.ffn.w2.data()) v = 0.0;

    auto y = rand3({1, n, d}, rng);
    auto mem = rand3({1, ns, d}, rng);
    auto self_mask = ones_mask(1, n, n);
    auto cross_mask = ones_mask(1, n, ns);
    auto got = interleaved_decoder_layer_forward(y, mem, slots, heads, self_mask, cross_mask);

    // attention-only reference from the same slot parameters
    auto ones = TensorD::filled({d}, 1.0);
    auto zeros = TensorD::zeros({d});
    auto h1 = layer_norm(y, ones, zeros);
    auto y1 = add(y, multi_head_attention(h1, h1, slots.self_attn, heads, self_mask));
    auto h3 = layer_norm(y1, ones, zeros);
    auto want = add(y1, multi_head_attention(h3, mem, slots.cross_attn, heads, cross_mask));

    for (size_t i = 0; i < got.data().size(); ++i)
        CHECK(std::fabs(got.data()[i] - want.data()[i]) < 1e-6);
}

TEST_CASE("end-to-end gradient check on the tiny config (d=8, 2+2, V=11)") {
    auto cfg = tiny_cfg(TyingScheme::full, DecoderStyle::vanilla, 8, 2, 2, 11);
    CHECK(modelutil::model_grad_check(cfg, 1) < 1e-4);

    auto tied = tiny_cfg(TyingScheme::universal, DecoderStyle::interleaved, 8, 2, 2, 11);
    CHECK(modelutil::model_grad_check(tied, 2) < 1e-4);
}

TEST_CASE("gradient check covers the canonical tied plan") {
    auto cfg = tiny_cfg(TyingScheme::edgeformer, DecoderStyle::interleaved, 8, 12, 2, 11);
    cfg.d_encffn = 16;
    cfg.d_decffn = 2;
    CHECK(modelutil::model_grad_check(cfg, 3, 2) < 1e-4);
}

TEST_CASE("factorized embedding changes parameter shapes, not the interface") {
    auto cfg = tiny_cfg();
    cfg.d_embed = 4;  // < d = 16
    auto bundle = make_model<float>(cfg, 6);
    CHECK(bundle->store.tensor("embedding", "table").shape() == Shape{11, 4});
    CHECK(bundle->store.tensor("embedding", "up").shape() == Shape{4, 16});
    auto batch = random_batch(11, 2, 4, 3, 9);
    CHECK(bundle->model->forward(batch).shape() == Shape{2, 3, 11});

    // grad check through the factorized path
    auto dcfg = tiny_cfg(TyingScheme::full, DecoderStyle::vanilla, 8, 1, 1, 9);
    dcfg.d_embed = 4;
    CHECK(modelutil::model_grad_check(dcfg, 4) < 1e-4);
}

TEST_CASE("untied output embedding is its own group") {
    auto cfg = tiny_cfg();
    cfg.tie_embeddings = false;
    auto bundle = make_model<float>(cfg, 8);
    CHECK(bundle->store.has_group(output_group_name()));
    auto batch = random_batch(11, 1, 3, 3, 2);
    CHECK_NOTHROW(bundle->model->forward(batch));

    const int64_t with_emb = count_params(cfg, bundle->plan, true);
    cfg.tie_embeddings = true;
    const int64_t tied = count_params(cfg, build_plan(cfg), true);
    CHECK(with_emb == tied + 11 * 16);
}

TEST_CASE("sequence length beyond max_len is rejected") {
    auto cfg = tiny_cfg();
    cfg.max_len = 4;
    auto bundle = make_model<float>(cfg, 1);
    auto batch = random_batch(11, 1, 6, 3, 5);
    CHECK_THROWS_AS(bundle->model->forward(batch), config_error);
}
