#pragma once

// The configurable seq2seq Transformer: embeddings (optionally factorized),
// pre-norm encoder layers, vanilla or interleaved decoder layers, and the
// three encoder-side layer-adaptation mechanisms (untied biases, low-rank
// adapters on Q/V, learnable key/value prefixes).

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "ef/config.hpp"
#include "ef/param_store.hpp"
#include "ef/tensor.hpp"
#include "ef/tying.hpp"

namespace ef {

struct Batch {
    int64_t size = 0;
    int64_t n_src = 0;
    int64_t n_tgt = 0;
    std::vector<int32_t> src;      // size x n_src, pad-filled
    std::vector<int32_t> tgt_in;   // size x n_tgt, decoder input (bos-shifted)
    std::vector<int32_t> tgt_out;  // size x n_tgt, prediction targets
    std::vector<uint8_t> src_valid;
    std::vector<uint8_t> tgt_valid;
};

using MaskBuf = std::shared_ptr<std::vector<uint8_t>>;

template <typename T>
struct AttnSlot {
    Tensor<T> wq, wk, wv, wo;
    Tensor<T> bq, bk, bv, bo;                  // bias-LA only
    Tensor<T> a_q, b_q, a_v, b_v;              // adapter-LA only
    T adapter_scaling = T(1);
    Tensor<T> prefix;                          // prefix-LA only, [L,d]
};

template <typename T>
struct FfnSlot {
    Tensor<T> w1, w2;
    Tensor<T> b1, b2;  // bias-LA only
};

template <typename T>
struct LnSlot {
    Tensor<T> gain, bias;
};

template <typename T>
struct EncoderLayerSlots {
    AttnSlot<T> attn;
    FfnSlot<T> ffn;
    LnSlot<T> ln1, ln2;
};

template <typename T>
struct DecoderLayerSlots {
    AttnSlot<T> self_attn, cross_attn;
    FfnSlot<T> ffn;
    LnSlot<T> ln1, ln2, ln3, ln4;  // interleaved uses all four, vanilla the first three
};

namespace detail {

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    const int64_t rows = x.numel() / x.dim(x.rank() - 1);
    auto flat = reshape(x, {rows, x.dim(x.rank() - 1)});
    auto y = matmul(flat, w);
    if (bias.defined()) y = add_bias(y, bias);
    Shape out = x.shape();
    out.back() = w.dim(1);
    return reshape(y, out);
}

// x + scaling * (x A) B
template <typename T>
Tensor<T> apply_adapter(const Tensor<T>& base, const Tensor<T>& x, const Tensor<T>& a,
                        const Tensor<T>& b, T scaling) {
    auto delta = linear(linear(x, a, Tensor<T>()), b, Tensor<T>());
    return add(base, scale(delta, scaling));
}

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int heads) {
    const int64_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    return permute(reshape(x, {b, n, heads, d / heads}), {0, 2, 1, 3});
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
    const int64_t b = x.dim(0), h = x.dim(1), n = x.dim(2), dk = x.dim(3);
    return reshape(permute(x, {0, 2, 1, 3}), {b, n, h * dk});
}

}  // namespace detail

// Scaled dot-product attention over heads. `mask` covers [B, n_q, n_k_total]
// (including prefix columns when the slot carries one); pass nullptr for
// unmasked attention. Query and key/value streams may differ (cross-attn).
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q_in, const Tensor<T>& kv_in, const AttnSlot<T>& p,
                               int heads, const MaskBuf& mask) {
    const int64_t b = q_in.dim(0), d = q_in.dim(2);
    Tensor<T> kv = kv_in;
    if (p.prefix.defined()) kv = concat_rows(expand_batch(p.prefix, b), kv_in);

    auto q = detail::linear(q_in, p.wq, p.bq);
    if (p.a_q.defined()) q = detail::apply_adapter(q, q_in, p.a_q, p.b_q, p.adapter_scaling);
    auto k = detail::linear(kv, p.wk, p.bk);
    auto v = detail::linear(kv, p.wv, p.bv);
    if (p.a_v.defined()) v = detail::apply_adapter(v, kv, p.a_v, p.b_v, p.adapter_scaling);

    const int64_t dk = d / heads;
    auto qh = detail::split_heads(q, heads);
    auto kh = detail::split_heads(k, heads);
    auto vh = detail::split_heads(v, heads);
    auto scores = scale(bmm_nt(qh, kh), T(1.0 / std::sqrt(static_cast<double>(dk))));
    if (mask) scores = mask_scores(scores, mask);
    auto ctx = bmm(softmax(scores, 3), vh);
    return detail::linear(detail::merge_heads(ctx), p.wo, p.bo);
}

template <typename T>
Tensor<T> ffn_forward(const Tensor<T>& x, const FfnSlot<T>& f) {
    return detail::linear(relu(detail::linear(x, f.w1, f.b1)), f.w2, f.b2);
}

// Pre-norm residual encoder layer: x + Attn(LN(x)), then x + FFN(LN(x)).
template <typename T>
Tensor<T> encoder_layer_forward(const Tensor<T>& x, const EncoderLayerSlots<T>& slots, int heads,
                                const MaskBuf& mask, double dropout_p = 0.0, Rng* rng = nullptr) {
    auto drop = [&](Tensor<T> t) { return rng ? dropout(t, dropout_p, *rng, true) : t; };
    auto h1 = layer_norm(x, slots.ln1.gain, slots.ln1.bias);
    auto x1 = add(x, drop(multi_head_attention(h1, h1, slots.attn, heads, mask)));
    auto h2 = layer_norm(x1, slots.ln2.gain, slots.ln2.bias);
    return add(x1, drop(ffn_forward(h2, slots.ffn)));
}

// Vanilla decoder layer: self-attn, cross-attn, FFN.
template <typename T>
Tensor<T> vanilla_decoder_layer_forward(const Tensor<T>& y, const Tensor<T>& memory,
                                        const DecoderLayerSlots<T>& slots, int heads,
                                        const MaskBuf& self_mask, const MaskBuf& cross_mask,
                                        double dropout_p = 0.0, Rng* rng = nullptr) {
    auto drop = [&](Tensor<T> t) { return rng ? dropout(t, dropout_p, *rng, true) : t; };
    auto h1 = layer_norm(y, slots.ln1.gain, slots.ln1.bias);
    auto y1 = add(y, drop(multi_head_attention(h1, h1, slots.self_attn, heads, self_mask)));
    auto h2 = layer_norm(y1, slots.ln2.gain, slots.ln2.bias);
    auto y2 = add(y1, drop(multi_head_attention(h2, memory, slots.cross_attn, heads, cross_mask)));
    auto h3 = layer_norm(y2, slots.ln3.gain, slots.ln3.bias);
    return add(y2, drop(ffn_forward(h3, slots.ffn)));
}

// Interleaved decoder layer: self-attn, lightweight FFN, cross-attn,
// lightweight FFN; both FFN applications run the same parameter group.
template <typename T>
Tensor<T> interleaved_decoder_layer_forward(const Tensor<T>& y, const Tensor<T>& memory,
                                            const DecoderLayerSlots<T>& slots, int heads,
                                            const MaskBuf& self_mask, const MaskBuf& cross_mask,
                                            double dropout_p = 0.0, Rng* rng = nullptr) {
    auto drop = [&](Tensor<T> t) { return rng ? dropout(t, dropout_p, *rng, true) : t; };
    auto h1 = layer_norm(y, slots.ln1.gain, slots.ln1.bias);
    auto y1 = add(y, drop(multi_head_attention(h1, h1, slots.self_attn, heads, self_mask)));
    auto h2 = layer_norm(y1, slots.ln2.gain, slots.ln2.bias);
    auto y2 = add(y1, drop(ffn_forward(h2, slots.ffn)));
    auto h3 = layer_norm(y2, slots.ln3.gain, slots.ln3.bias);
    auto y3 = add(y2, drop(multi_head_attention(h3, memory, slots.cross_attn, heads, cross_mask)));
    auto h4 = layer_norm(y3, slots.ln4.gain, slots.ln4.bias);
    return add(y3, drop(ffn_forward(h4, slots.ffn)));
}

// Incremental decoding state: per-layer self-attention K/V (pre-head-split,
// grown one position per step) plus the fixed cross-attention projections.
template <typename T>
struct DecodeState {
    std::vector<Tensor<T>> self_k, self_v;  // per layer, [1, len, d]
    int len = 0;
};

template <typename T>
class Model {
public:
    Model(const ModelConfig& cfg, const TyingPlan& plan, ParamStore<T>& store)
        : cfg_(cfg), plan_(plan), store_(&store) {
        cfg_.validate();
        ones_ = Tensor<T>::filled({cfg_.d}, T(1));
        zeros_ = Tensor<T>::zeros({cfg_.d});
        build_position_table();
        resolve_slots();
    }

    const ModelConfig& config() const { return cfg_; }
    const TyingPlan& plan() const { return plan_; }
    ParamStore<T>& store() { return *store_; }

    // Source side: embedding -> M encoder layers -> final LN.
    Tensor<T> encode(const std::vector<int32_t>& src, const std::vector<uint8_t>& src_valid,
                     int64_t batch, int64_t n_src, Rng* rng = nullptr) const {
        auto x = embed(src, batch, n_src, 0);
        if (rng) x = dropout(x, cfg_.dropout, *rng, true);
        const int64_t pl = prefix_len();
        auto mask = std::make_shared<std::vector<uint8_t>>(
            static_cast<size_t>(batch * n_src * (pl + n_src)));
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t q = 0; q < n_src; ++q)
                for (int64_t k = 0; k < pl + n_src; ++k)
                    (*mask)[static_cast<size_t>((b * n_src + q) * (pl + n_src) + k)] =
                        k < pl ? 1 : src_valid[static_cast<size_t>(b * n_src + (k - pl))];
        for (const auto& layer : enc_layers_)
            x = encoder_layer_forward(x, layer, cfg_.heads, mask, cfg_.dropout, rng);
        return layer_norm(x, ones_, zeros_);
    }

    // Target side over a full (teacher-forced) sequence.
    Tensor<T> decode_full(const Tensor<T>& memory, const std::vector<uint8_t>& src_valid,
                          const std::vector<int32_t>& tgt_in, const std::vector<uint8_t>& tgt_valid,
                          Rng* rng = nullptr) const {
        const int64_t batch = memory.dim(0), n_src = memory.dim(1);
        const int64_t n_tgt = static_cast<int64_t>(tgt_in.size()) / batch;
        auto y = embed(tgt_in, batch, n_tgt, 0);
        if (rng) y = dropout(y, cfg_.dropout, *rng, true);

        auto self_mask = std::make_shared<std::vector<uint8_t>>(
            static_cast<size_t>(batch * n_tgt * n_tgt));
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t q = 0; q < n_tgt; ++q)
                for (int64_t k = 0; k < n_tgt; ++k)
                    (*self_mask)[static_cast<size_t>((b * n_tgt + q) * n_tgt + k)] =
                        k <= q && tgt_valid[static_cast<size_t>(b * n_tgt + k)];
        auto cross_mask = std::make_shared<std::vector<uint8_t>>(
            static_cast<size_t>(batch * n_tgt * n_src));
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t q = 0; q < n_tgt; ++q)
                for (int64_t k = 0; k < n_src; ++k)
                    (*cross_mask)[static_cast<size_t>((b * n_tgt + q) * n_src + k)] =
                        src_valid[static_cast<size_t>(b * n_src + k)];

        for (const auto& layer : dec_layers_) {
            if (cfg_.decoder_style == DecoderStyle::interleaved)
                y = interleaved_decoder_layer_forward(y, memory, layer, cfg_.heads, self_mask, cross_mask,
                                                      cfg_.dropout, rng);
            else
                y = vanilla_decoder_layer_forward(y, memory, layer, cfg_.heads, self_mask, cross_mask,
                                                  cfg_.dropout, rng);
        }
        return output_logits(layer_norm(y, ones_, zeros_));
    }

    // Teacher-forced forward: logits [B, n_tgt, V].
    Tensor<T> forward(const Batch& batch, Rng* rng = nullptr) const {
        auto memory = encode(batch.src, batch.src_valid, batch.size, batch.n_src, rng);
        return decode_full(memory, batch.src_valid, batch.tgt_in, batch.tgt_valid, rng);
    }

    // --- incremental decoding -------------------------------------------

    DecodeState<T> make_decode_state() const {
        DecodeState<T> st;
        st.self_k.assign(dec_layers_.size(), Tensor<T>());
        st.self_v.assign(dec_layers_.size(), Tensor<T>());
        return st;
    }

    // One decoder step for a single hypothesis (batch 1). Returns the logits
    // row for the new position and appends this step's K/V to the state.
    std::vector<T> decode_step(DecodeState<T>& st, const Tensor<T>& memory, int32_t token) const {
        NoGradGuard ng;
        if (st.len + 1 > cfg_.max_len) throw config_error("decode_step: exceeded max_len");
        auto y = embed({token}, 1, 1, st.len);
        for (size_t li = 0; li < dec_layers_.size(); ++li) {
            const auto& layer = dec_layers_[li];
            auto h1 = layer_norm(y, layer.ln1.gain, layer.ln1.bias);
            y = add(y, self_attn_step(st, li, h1));
            if (cfg_.decoder_style == DecoderStyle::interleaved) {
                auto h2 = layer_norm(y, layer.ln2.gain, layer.ln2.bias);
                y = add(y, ffn_forward(h2, layer.ffn));
                auto h3 = layer_norm(y, layer.ln3.gain, layer.ln3.bias);
                y = add(y, multi_head_attention(h3, memory, layer.cross_attn, cfg_.heads, nullptr));
                auto h4 = layer_norm(y, layer.ln4.gain, layer.ln4.bias);
                y = add(y, ffn_forward(h4, layer.ffn));
            } else {
                auto h2 = layer_norm(y, layer.ln2.gain, layer.ln2.bias);
                y = add(y, multi_head_attention(h2, memory, layer.cross_attn, cfg_.heads, nullptr));
                auto h3 = layer_norm(y, layer.ln3.gain, layer.ln3.bias);
                y = add(y, ffn_forward(h3, layer.ffn));
            }
        }
        st.len += 1;
        auto logits = output_logits(layer_norm(y, ones_, zeros_));
        return logits.data();
    }

    const EncoderLayerSlots<T>& encoder_layer(int i) const { return enc_layers_[static_cast<size_t>(i)]; }
    const DecoderLayerSlots<T>& decoder_layer(int i) const { return dec_layers_[static_cast<size_t>(i)]; }

private:
    int64_t prefix_len() const { return cfg_.la.kind == LaKind::prefix ? cfg_.la.prefix_len : 0; }

    void build_position_table() {
        pos_table_.assign(static_cast<size_t>(cfg_.max_len) * cfg_.d, T(0));
        for (int64_t p = 0; p < cfg_.max_len; ++p)
            for (int64_t i = 0; i < cfg_.d / 2; ++i) {
                const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / cfg_.d);
                pos_table_[static_cast<size_t>(p * cfg_.d + 2 * i)] = static_cast<T>(std::sin(p * freq));
                pos_table_[static_cast<size_t>(p * cfg_.d + 2 * i + 1)] = static_cast<T>(std::cos(p * freq));
            }
    }

    // token embedding (optionally factorized), scaled by sqrt(d), plus
    // sinusoidal positions starting at `pos_offset`.
    Tensor<T> embed(const std::vector<int32_t>& ids, int64_t batch, int64_t n, int64_t pos_offset) const {
        if (pos_offset + n > cfg_.max_len)
            throw config_error("sequence length " + std::to_string(pos_offset + n) + " exceeds max_len " +
                               std::to_string(cfg_.max_len));
        auto e = embedding_gather(emb_table_, ids, {batch, n});
        if (cfg_.factorized_embedding()) e = detail::linear(e, emb_up_, Tensor<T>());
        e = scale(e, static_cast<T>(std::sqrt(static_cast<double>(cfg_.d))));
        auto pe = Tensor<T>::zeros({batch, n, cfg_.d});
        for (int64_t b = 0; b < batch; ++b)
            std::copy(pos_table_.begin() + pos_offset * cfg_.d, pos_table_.begin() + (pos_offset + n) * cfg_.d,
                      pe.data().begin() + b * n * cfg_.d);
        return add(e, pe);
    }

    Tensor<T> output_logits(const Tensor<T>& h) const {
        const int64_t rows = h.numel() / cfg_.d;
        auto flat = reshape(h, {rows, cfg_.d});
        Tensor<T> proj = flat;
        if (cfg_.factorized_embedding()) proj = matmul_nt(flat, out_up_);  // d -> d_embed
        auto logits = matmul_nt(proj, out_table_);
        Shape out = h.shape();
        out.back() = cfg_.vocab;
        return reshape(logits, out);
    }

    Tensor<T> self_attn_step(DecodeState<T>& st, size_t layer, const Tensor<T>& h) const {
        const auto& p = dec_layers_[layer].self_attn;
        auto q = detail::linear(h, p.wq, p.bq);
        auto k_t = detail::linear(h, p.wk, p.bk);
        auto v_t = detail::linear(h, p.wv, p.bv);
        st.self_k[layer] = st.self_k[layer].defined() ? concat_rows(st.self_k[layer], k_t) : k_t;
        st.self_v[layer] = st.self_v[layer].defined() ? concat_rows(st.self_v[layer], v_t) : v_t;
        const int64_t dk = cfg_.d / cfg_.heads;
        auto qh = detail::split_heads(q, cfg_.heads);
        auto kh = detail::split_heads(st.self_k[layer], cfg_.heads);
        auto vh = detail::split_heads(st.self_v[layer], cfg_.heads);
        auto scores = scale(bmm_nt(qh, kh), T(1.0 / std::sqrt(static_cast<double>(dk))));
        auto ctx = bmm(softmax(scores, 3), vh);
        return detail::linear(detail::merge_heads(ctx), p.wo, p.bo);
    }

    LnSlot<T> const_ln() const { return {ones_, zeros_}; }

    AttnSlot<T> resolve_attn(const SlotKey& slot) const {
        AttnSlot<T> a;
        auto& g = store_->group(plan_.group_of(slot));
        a.wq = g.tensors.at("wq");
        a.wk = g.tensors.at("wk");
        a.wv = g.tensors.at("wv");
        a.wo = g.tensors.at("wo");
        return a;
    }

    void resolve_slots() {
        enc_layers_.clear();
        dec_layers_.clear();
        for (int i = 1; i <= cfg_.enc_layers; ++i) {
            EncoderLayerSlots<T> l;
            l.attn = resolve_attn({false, i, ModuleKind::self_attn});
            auto& fg = store_->group(plan_.group_of({false, i, ModuleKind::ffn}));
            l.ffn.w1 = fg.tensors.at("w1");
            l.ffn.w2 = fg.tensors.at("w2");
            l.ln1 = const_ln();
            l.ln2 = const_ln();
            if (cfg_.la.kind == LaKind::bias) {
                auto& la = store_->group(la_group_name(LaKind::bias, i));
                l.attn.bq = la.tensors.at("bq");
                l.attn.bk = la.tensors.at("bk");
                l.attn.bv = la.tensors.at("bv");
                l.attn.bo = la.tensors.at("bo");
                l.ffn.b1 = la.tensors.at("bf1");
                l.ffn.b2 = la.tensors.at("bf2");
                l.ln1 = {la.tensors.at("ln1_g"), la.tensors.at("ln1_b")};
                l.ln2 = {la.tensors.at("ln2_g"), la.tensors.at("ln2_b")};
            } else if (cfg_.la.kind == LaKind::adapter) {
                auto& la = store_->group(la_group_name(LaKind::adapter, i));
                l.attn.a_q = la.tensors.at("a_q");
                l.attn.b_q = la.tensors.at("b_q");
                l.attn.a_v = la.tensors.at("a_v");
                l.attn.b_v = la.tensors.at("b_v");
                l.attn.adapter_scaling = static_cast<T>(cfg_.la.scaling);
            } else if (cfg_.la.kind == LaKind::prefix) {
                l.attn.prefix = store_->group(la_group_name(LaKind::prefix, i)).tensors.at("p");
            }
            enc_layers_.push_back(std::move(l));
        }
        for (int j = 1; j <= cfg_.dec_layers; ++j) {
            DecoderLayerSlots<T> l;
            l.self_attn = resolve_attn({true, j, ModuleKind::self_attn});
            l.cross_attn = resolve_attn({true, j, ModuleKind::cross_attn});
            auto& fg = store_->group(plan_.group_of({true, j, ModuleKind::ffn}));
            l.ffn.w1 = fg.tensors.at("w1");
            l.ffn.w2 = fg.tensors.at("w2");
            l.ln1 = const_ln();
            l.ln2 = const_ln();
            l.ln3 = const_ln();
            l.ln4 = const_ln();
            dec_layers_.push_back(std::move(l));
        }
        emb_table_ = store_->tensor(embedding_group_name(), "table");
        if (cfg_.factorized_embedding()) emb_up_ = store_->tensor(embedding_group_name(), "up");
        if (cfg_.tie_embeddings) {
            out_table_ = emb_table_;
            out_up_ = emb_up_;
        } else {
            out_table_ = store_->tensor(output_group_name(), "table");
            if (cfg_.factorized_embedding()) out_up_ = store_->tensor(output_group_name(), "up");
        }
    }

    ModelConfig cfg_;
    TyingPlan plan_;
    ParamStore<T>* store_;
    std::vector<EncoderLayerSlots<T>> enc_layers_;
    std::vector<DecoderLayerSlots<T>> dec_layers_;
    Tensor<T> emb_table_, emb_up_, out_table_, out_up_;
    Tensor<T> ones_, zeros_;
    std::vector<T> pos_table_;
};

using ModelF = Model<float>;
using ModelD = Model<double>;

}  // namespace ef
