#pragma once

// Neural building blocks: pre-LN causal decoder block with GELU feed-forward,
// learned absolute positions, cross-attention, and plain MLPs.

#include <string>
#include <utility>
#include <vector>

#include "seqctl/adam.hpp"
#include "seqctl/rng.hpp"
#include "seqctl/tensor.hpp"

namespace seqctl {

// Flat name -> tensor registry; keys are stable dotted paths used by the
// checkpoint format and the optimizers.
struct ParamMap {
    std::vector<std::pair<std::string, Tensor>> items;

    void add(const std::string& name, const Tensor& t) {
        check(find(name) == nullptr, "ParamMap: duplicate parameter name " + name);
        items.emplace_back(name, t);
    }

    Tensor* find(const std::string& name) {
        for (auto& [n, t] : items) {
            if (n == name) {
                return &t;
            }
        }
        return nullptr;
    }

    i64 total_size() const {
        i64 n = 0;
        for (const auto& [name, t] : items) {
            n += t.size();
        }
        return n;
    }

    void set_requires_grad() {
        for (auto& [name, t] : items) {
            t.set_requires_grad(true);
        }
    }

    void zero_grad() {
        for (auto& [name, t] : items) {
            t.zero_grad();
        }
    }
};

inline i64 param_count(const ParamMap& pm) { return pm.total_size(); }

struct TransformerConfig {
    i64 num_layers = 1;
    i64 num_heads = 4;
    i64 d_model = 128;
    i64 d_ff = 256;
    i64 context_len = 10;
    double dropout = 0.0;

    void validate() const {
        check(num_layers >= 0, "TransformerConfig: num_layers must be >= 0");
        check(num_heads >= 1 && d_model >= 1 && d_ff >= 1, "TransformerConfig: bad dims");
        check(d_model % num_heads == 0, "TransformerConfig: d_model must divide num_heads");
        check(context_len >= 1, "TransformerConfig: context_len must be >= 1");
        check(dropout >= 0.0 && dropout < 1.0, "TransformerConfig: dropout must be in [0,1)");
    }
};

// Exact-erf GELU: x * Phi(x).
inline Tensor gelu(const Tensor& x) {
    const double inv_sqrt2 = 0.7071067811865475244;
    return mul(x, scale(add_scalar(erf(scale(x, inv_sqrt2)), 1.0), 0.5));
}

namespace init {

inline Tensor uniform_fanin(i64 in, i64 out, Rng& rng) {
    Tensor w = Tensor::zeros({in, out});
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : w.data()) {
        v = rng.uniform(-bound, bound);
    }
    return w;
}

inline Tensor gaussian(Shape shape, double stddev, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.data()) {
        v = rng.gaussian(0.0, stddev);
    }
    return t;
}

}  // namespace init

struct Linear {
    Tensor w;  // [in, out]
    Tensor b;  // [out]

    static Linear make(i64 in, i64 out, Rng& rng) {
        return {init::uniform_fanin(in, out, rng), Tensor::zeros({out})};
    }

    i64 in_dim() const { return w.dim(0); }
    i64 out_dim() const { return w.dim(1); }

    Tensor operator()(const Tensor& x) const {
        if (x.rank() == 2) {
            return add(matmul(x, w), b);
        }
        check(x.rank() >= 1, "Linear: bad input rank");
        Shape out_shape = x.shape();
        const i64 in = out_shape.back();
        out_shape.back() = out_dim();
        Tensor flat = x.reshape({x.size() / in, in});
        return add(matmul(flat, w), b).reshape(out_shape);
    }

    void register_params(ParamMap& pm, const std::string& prefix) const {
        pm.add(prefix + ".w", w);
        pm.add(prefix + ".b", b);
    }
};

struct LayerNormLayer {
    Tensor gamma;  // scale, init 1
    Tensor beta;   // shift, init 0
    double eps = 1e-5;

    static LayerNormLayer make(i64 n) {
        return {Tensor::full({n}, 1.0), Tensor::zeros({n}), 1e-5};
    }

    Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }

    void register_params(ParamMap& pm, const std::string& prefix) const {
        pm.add(prefix + ".scale", gamma);
        pm.add(prefix + ".shift", beta);
    }
};

// Q/K/V/O projection bundle shared by self- and cross-attention.
struct AttnProj {
    Linear q, k, v, o;

    static AttnProj make(i64 d, Rng& rng) {
        return {Linear::make(d, d, rng), Linear::make(d, d, rng), Linear::make(d, d, rng),
                Linear::make(d, d, rng)};
    }

    void register_params(ParamMap& pm, const std::string& prefix) const {
        q.register_params(pm, prefix + ".wq");
        k.register_params(pm, prefix + ".wk");
        v.register_params(pm, prefix + ".wv");
        o.register_params(pm, prefix + ".wo");
    }
};

// Multi-head causal self-attention over [B,C,d] (or [C,d]).
inline Tensor causal_self_attention(const Tensor& seq, const AttnProj& p, i64 heads,
                                    const std::vector<std::uint8_t>* key_valid = nullptr) {
    const bool batched = seq.rank() == 3;
    Tensor x = batched ? seq : seq.reshape({1, seq.dim(0), seq.dim(1)});
    Tensor out = p.o(attention(p.q(x), p.k(x), p.v(x), heads, 0, key_valid));
    return batched ? out : out.reshape({seq.dim(0), seq.dim(1)});
}

// Queries from one stream, keys/values from another; query i attends key
// positions <= i + (Ck - Cq).
inline Tensor cross_attention(const Tensor& queries, const Tensor& keys_values, const AttnProj& p,
                              i64 heads) {
    const bool batched = queries.rank() == 3;
    Tensor qs = batched ? queries : queries.reshape({1, queries.dim(0), queries.dim(1)});
    Tensor kv = batched ? keys_values
                        : keys_values.reshape({1, keys_values.dim(0), keys_values.dim(1)});
    check(kv.dim(1) >= 1, "cross_attention: empty keys");
    const i64 offset = kv.dim(1) - qs.dim(1);
    Tensor out = p.o(attention(qs, p.k(kv), p.v(kv), heads, offset));
    // note: q projection applied to queries, k/v to the memory stream
    return out;
}

struct GptBlock {
    LayerNormLayer ln1, ln2;
    AttnProj attn;
    Linear ff1, ff2;
    i64 heads = 1;
    double dropout_p = 0.0;

    static GptBlock make(const TransformerConfig& cfg, Rng& rng) {
        GptBlock b;
        b.ln1 = LayerNormLayer::make(cfg.d_model);
        b.ln2 = LayerNormLayer::make(cfg.d_model);
        b.attn = AttnProj::make(cfg.d_model, rng);
        b.ff1 = Linear::make(cfg.d_model, cfg.d_ff, rng);
        b.ff2 = Linear::make(cfg.d_ff, cfg.d_model, rng);
        b.heads = cfg.num_heads;
        b.dropout_p = cfg.dropout;
        return b;
    }

    // x1 = x + Attn(LN1(x)); out = x1 + FF(LN2(x1)). Dropout sits after the
    // attention projection and after the second FF linear, and only fires
    // when a dropout rng is supplied (training with dropout > 0).
    Tensor forward(const Tensor& x, Rng* drop_rng = nullptr) const {
        Tensor h = ln1(x);
        Tensor a = attn.o(attention(attn.q(h), attn.k(h), attn.v(h), heads, 0));
        if (dropout_p > 0.0 && drop_rng != nullptr) {
            a = dropout(a, dropout_p, *drop_rng);
        }
        Tensor x1 = add(x, a);
        Tensor f = ff2(gelu(ff1(ln2(x1))));
        if (dropout_p > 0.0 && drop_rng != nullptr) {
            f = dropout(f, dropout_p, *drop_rng);
        }
        return add(x1, f);
    }

    void register_params(ParamMap& pm, const std::string& prefix) const {
        ln1.register_params(pm, prefix + ".ln1");
        ln2.register_params(pm, prefix + ".ln2");
        attn.register_params(pm, prefix + ".attn");
        ff1.register_params(pm, prefix + ".ff1");
        ff2.register_params(pm, prefix + ".ff2");
    }
};

// Decoder stack: add positions, run blocks, final layer-norm.
struct Transformer {
    TransformerConfig cfg;
    Tensor pos;  // [context_len, d_model], learned
    std::vector<GptBlock> blocks;
    LayerNormLayer final_ln;

    static Transformer make(const TransformerConfig& cfg, Rng& rng) {
        cfg.validate();
        Transformer t;
        t.cfg = cfg;
        t.pos = init::gaussian({cfg.context_len, cfg.d_model}, 0.02, rng);
        for (i64 i = 0; i < cfg.num_layers; ++i) {
            t.blocks.push_back(GptBlock::make(cfg, rng));
        }
        t.final_ln = LayerNormLayer::make(cfg.d_model);
        return t;
    }

    // tokens: [B,L,d] or [L,d], already embedded to d_model.
    Tensor forward(const Tensor& tokens, Rng* drop_rng = nullptr) const {
        const bool batched = tokens.rank() == 3;
        Tensor x = batched ? tokens : tokens.reshape({1, tokens.dim(0), tokens.dim(1)});
        const i64 L = x.dim(1);
        if (L > cfg.context_len) {
            throw std::runtime_error("Transformer: sequence length " + std::to_string(L) +
                                     " exceeds context_len " + std::to_string(cfg.context_len));
        }
        check(x.dim(2) == cfg.d_model, "Transformer: token width != d_model");
        x = add(x, slice_rows(pos, 0, L));
        for (const auto& b : blocks) {
            x = b.forward(x, drop_rng);
        }
        x = final_ln(x);
        return batched ? x : x.reshape({L, cfg.d_model});
    }

    void register_params(ParamMap& pm, const std::string& prefix) const {
        pm.add(prefix + ".pos", pos);
        for (size_t i = 0; i < blocks.size(); ++i) {
            blocks[i].register_params(pm, prefix + ".block" + std::to_string(i));
        }
        final_ln.register_params(pm, prefix + ".final_ln");
    }
};

// Last row per sample: [B,L,d] -> [B,d], or [C,d] -> [d].
inline Tensor select_last_token(const Tensor& hidden) {
    if (hidden.rank() == 2) {
        const i64 C = hidden.dim(0);
        check(C >= 1, "select_last_token: empty sequence");
        return slice_rows(hidden, C - 1, C).reshape({hidden.dim(1)});
    }
    check(hidden.rank() == 3, "select_last_token: expects [B,L,d] or [C,d]");
    const i64 B = hidden.dim(0), L = hidden.dim(1);
    check(L >= 1, "select_last_token: empty sequence");
    std::vector<std::pair<i64, i64>> idx;
    idx.reserve(static_cast<size_t>(B));
    for (i64 b = 0; b < B; ++b) {
        idx.emplace_back(b, L - 1);
    }
    return gather_steps(hidden, idx);
}

enum class Activation { relu, gelu, tanh };

inline Tensor apply_activation(const Tensor& x, Activation a) {
    switch (a) {
        case Activation::relu:
            return relu(x);
        case Activation::gelu:
            return gelu(x);
        case Activation::tanh:
            return seqctl::tanh(x);
    }
    throw std::runtime_error("apply_activation: bad enum");
}

// Alternating linear/activation, final layer linear.
struct Mlp {
    std::vector<Linear> layers;
    Activation act = Activation::relu;

    static Mlp make(const std::vector<i64>& sizes, Activation act, Rng& rng) {
        check(sizes.size() >= 2, "Mlp: need at least input and output sizes");
        Mlp m;
        m.act = act;
        for (size_t i = 0; i + 1 < sizes.size(); ++i) {
            m.layers.push_back(Linear::make(sizes[i], sizes[i + 1], rng));
        }
        return m;
    }

    Tensor forward(const Tensor& x) const {
        Tensor h = x;
        for (size_t i = 0; i < layers.size(); ++i) {
            h = layers[i](h);
            if (i + 1 < layers.size()) {
                h = apply_activation(h, act);
            }
        }
        return h;
    }

    void register_params(ParamMap& pm, const std::string& prefix) const {
        for (size_t i = 0; i < layers.size(); ++i) {
            layers[i].register_params(pm, prefix + ".l" + std::to_string(i));
        }
    }
};

inline Tensor mlp_forward(const Tensor& x, const Mlp& mlp) { return mlp.forward(x); }

}  // namespace seqctl
