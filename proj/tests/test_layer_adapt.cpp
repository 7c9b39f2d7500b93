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

ModelConfig la_cfg(LaKind kind, TyingScheme scheme = TyingScheme::universal) {
    auto cfg = tiny_cfg(scheme, DecoderStyle::interleaved, 16, 3, 2, 11);
    cfg.la.kind = kind;
    cfg.la.r = 4;
    cfg.la.prefix_len = 2;
    return cfg;
}

}  // namespace

TEST_CASE("bias-LA and adapter-LA are bitwise identities at initialization") {
    for (auto kind : {LaKind::bias, LaKind::adapter}) {
        auto base_cfg = la_cfg(LaKind::none);
        auto adapted_cfg = la_cfg(kind);
        // same seed: identical draws for the shared (non-LA) groups, because
        // LA groups draw nothing random except adapter A (drawn after the
        // alphabetically earlier groups)... verify equality explicitly.
        auto base = make_model<float>(base_cfg, 17);
        auto adapted = make_model<float>(adapted_cfg, 17);
        // align shared weights exactly
        base->store.for_each_tensor([&](ParamGroup<float>& g, const std::string& tn, Tensor<float>& t) {
            adapted->store.tensor(g.name, tn).data() = t.data();
        });

        auto batch = random_batch(11, 2, 5, 4, 5);
        auto want = base->model->forward(batch).data();
        auto got = adapted->model->forward(batch).data();
        CHECK(want == got);
    }
}

TEST_CASE("adapter rank bound is enforced") {
    auto cfg = la_cfg(LaKind::adapter);
    cfg.la.r = cfg.d;
    CHECK_THROWS_AS(build_plan(cfg), config_error);
}

TEST_CASE("layer adaptation is encoder-only") {
    for (auto kind : {LaKind::bias, LaKind::adapter, LaKind::prefix}) {
        auto cfg = la_cfg(kind);
        const TyingPlan plan = build_plan(cfg);
        int la_groups = 0;
        for (const auto& [name, cls] : plan.groups) {
            if (cls == ShapeClass::bias || cls == ShapeClass::adapter || cls == ShapeClass::prefix) {
                ++la_groups;
                CHECK(name.find("enc") != std::string::npos);
                CHECK(name.find("dec") == std::string::npos);
            }
        }
        CHECK(la_groups == cfg.enc_layers);
    }
}

TEST_CASE("store parameter deltas match the closed forms") {
    auto count_with = [&](LaKind kind) {
        auto cfg = la_cfg(kind);
        const TyingPlan plan = build_plan(cfg);
        auto store = init_params<float>(plan, cfg, 3);
        return store.param_count(false);
    };
    const int64_t base = count_with(LaKind::none);
    const int d = 16, m = 3, encffn = 32, r = 4, l = 2;
    CHECK(count_with(LaKind::bias) - base == m * (9 * d + encffn));
    CHECK(count_with(LaKind::adapter) - base == m * 4 * d * r);
    CHECK(count_with(LaKind::prefix) - base == m * l * d);
}

TEST_CASE("prefix attention matches a hand-computed one-head case") {
    // 1 head, d=2, n=2, L=1, prefix rows zeroed: keys/values gain one
    // all-zero row, so outputs change only through the softmax denominator.
    const int64_t d = 2;
    Rng rng(23);
    AttnSlot<double> slot;
    for (auto* w : {&slot.wq, &slot.wk, &slot.wv, &slot.wo}) {
        *w = TensorD::zeros({d, d});
        for (auto& v : w->data()) v = rng.uniform_pm(0.8);
    }
    slot.prefix = TensorD::zeros({1, d});

    auto x = TensorD::from({1, 2, d}, {0.3, -0.7, 1.1, 0.4});
    auto mask = std::make_shared<std::vector<uint8_t>>(std::vector<uint8_t>{1, 1, 1, 1, 1, 1});  // [1,2,3]
    auto got = multi_head_attention(x, x, slot, 1, mask);

    // independent reference, plain loops
    auto matvec = [&](const TensorD& w, const double* in, double* out) {
        for (int64_t j = 0; j < d; ++j) {
            out[j] = 0;
            for (int64_t k = 0; k < d; ++k) out[j] += in[k] * w.data()[static_cast<size_t>(k * d + j)];
        }
    };
    double kv[3][2] = {{0, 0}, {0, 0}, {0, 0}};  // prefix, x1, x2 rows
    double vv[3][2] = {{0, 0}, {0, 0}, {0, 0}};
    double zero[2] = {0, 0};
    matvec(slot.wk, zero, kv[0]);
    matvec(slot.wv, zero, vv[0]);
    for (int i = 0; i < 2; ++i) {
        matvec(slot.wk, &x.data()[static_cast<size_t>(i * d)], kv[i + 1]);
        matvec(slot.wv, &x.data()[static_cast<size_t>(i * d)], vv[i + 1]);
    }
    for (int i = 0; i < 2; ++i) {
        double q[2];
        matvec(slot.wq, &x.data()[static_cast<size_t>(i * d)], q);
        double s[3], mx = -1e300;
        for (int j = 0; j < 3; ++j) {
            s[j] = (q[0] * kv[j][0] + q[1] * kv[j][1]) / std::sqrt(2.0);
            mx = std::max(mx, s[j]);
        }
        double denom = 0;
        for (int j = 0; j < 3; ++j) denom += std::exp(s[j] - mx);
        double ctx[2] = {0, 0};
        for (int j = 0; j < 3; ++j)
            for (int c = 0; c < 2; ++c) ctx[c] += std::exp(s[j] - mx) / denom * vv[j][c];
        double out[2];
        matvec(slot.wo, ctx, out);
        for (int c = 0; c < 2; ++c)
            CHECK(got.data()[static_cast<size_t>(i * d + c)] == doctest::Approx(out[c]).epsilon(1e-12));

        // the zero prefix contributes exp(s_prefix) to the denominator only
        CHECK(std::exp(s[0] - mx) > 0.0);
    }
}

TEST_CASE("prefix extends keys but not the output length") {
    auto cfg = la_cfg(LaKind::prefix);
    auto bundle = make_model<float>(cfg, 29);
    auto batch = random_batch(11, 2, 5, 4, 11);
    auto logits = bundle->model->forward(batch);
    CHECK(logits.shape() == Shape{2, 4, 11});
}

TEST_CASE("adaptation parameters de-specialize tied layers") {
    // two layers tied to the same weights produce identical outputs until
    // their per-layer biases diverge
    auto cfg = la_cfg(LaKind::bias);
    auto bundle = make_model<double>(cfg, 31);
    Rng rng(7);
    auto x = TensorD::zeros({1, 4, 16});
    for (auto& v : x.data()) v = rng.uniform_pm(1.0);
    auto mask = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(1 * 4 * 4), uint8_t{1});

    auto y0 = encoder_layer_forward(x, bundle->model->encoder_layer(0), cfg.heads, mask);
    auto y1 = encoder_layer_forward(x, bundle->model->encoder_layer(1), cfg.heads, mask);
    CHECK(y0.data() == y1.data());

    auto& b1 = bundle->store.tensor(la_group_name(LaKind::bias, 2), "bq");
    for (auto& v : b1.data()) v = 0.05;
    auto y1p = encoder_layer_forward(x, bundle->model->encoder_layer(1), cfg.heads, mask);
    CHECK(y1p.data() != y0.data());
}

TEST_CASE("per-layer adaptation parameters diverge after one update") {
    for (auto kind : {LaKind::bias, LaKind::adapter, LaKind::prefix}) {
        auto cfg = la_cfg(kind);
        auto bundle = make_model<double>(cfg, 41);
        auto batch = random_batch(11, 2, 5, 4, 13);
        const auto targets = modelutil::ce_targets(batch);
        auto loss = cross_entropy_label_smoothing(bundle->model->forward(batch), targets, 0.1, -1);
        backward(loss);

        // one plain gradient step on the LA groups
        const std::string probe = kind == LaKind::bias ? "bq" : kind == LaKind::adapter ? "b_q" : "p";
        for (int i = 1; i <= cfg.enc_layers; ++i) {
            auto& t = bundle->store.tensor(la_group_name(kind, i), probe);
            if (t.has_grad())
                for (size_t j = 0; j < t.data().size(); ++j) t.data()[j] -= 0.1 * t.grad()[j];
        }
        const auto& a = bundle->store.tensor(la_group_name(kind, 1), probe).data();
        const auto& b = bundle->store.tensor(la_group_name(kind, 2), probe).data();
        CHECK(a != b);
    }
}

TEST_CASE("gradient checks cover biases, adapters and prefixes") {
    for (auto kind : {LaKind::bias, LaKind::adapter, LaKind::prefix}) {
        auto cfg = tiny_cfg(TyingScheme::universal, DecoderStyle::interleaved, 8, 2, 2, 11);
        cfg.la.kind = kind;
        cfg.la.r = 3;
        cfg.la.prefix_len = 2;
        // adapter B starts at zero, so nudge it to make A's gradient visible
        auto worst = 0.0;
        {
            auto bundle = make_model<double>(cfg, 47);
            if (kind == LaKind::adapter)
                for (int i = 1; i <= cfg.enc_layers; ++i)
                    for (auto* tn : {"b_q", "b_v"}) {
                        Rng r2(1000 + static_cast<uint64_t>(i));
                        for (auto& v : bundle->store.tensor(la_group_name(kind, i), tn).data())
                            v = r2.uniform_pm(0.3);
                    }
            auto batch = random_batch(11, 2, 4, 3, 17);
            const auto targets = modelutil::ce_targets(batch);
            auto f = [&] {
                return cross_entropy_label_smoothing(bundle->model->forward(batch), targets, 0.1, -1);
            };
            for (int i = 1; i <= cfg.enc_layers; ++i) {
                auto& g = bundle->store.group(la_group_name(kind, i));
                for (auto& [tn, t] : g.tensors)
                    worst = std::max(worst, gradcheck::check_param(f, t, 4).max_rel_err);
            }
        }
        INFO("kind = ", to_string(kind));
        CHECK(worst < 1e-4);
    }
}
