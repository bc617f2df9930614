#pragma once

// TD3 actor-critic over sequence (transformer) or MLP backbones.
//
// Sharing modes wire the critic's view of the backbone:
//   separate        actor and critic own disjoint backbones/encoders
//   shared_frozen   one backbone; the critic loss hits a stop-gradient at the
//                   backbone output, so backbone + encoders learn only from
//                   the actor loss
//   shared_unfrozen one backbone updated by both losses (the unstable regime;
//                   gradient norms are logged raw, never clipped)

#include <memory>
#include <string>
#include <vector>

#include "seqctl/adam.hpp"
#include "seqctl/conditioning.hpp"
#include "seqctl/nn.hpp"
#include "seqctl/replay.hpp"

namespace seqctl {

struct Td3Config {
    double gamma = 0.99;
    double tau = 0.005;
    double policy_noise = 0.2;
    double noise_clip = 0.5;
    double exploration_noise = 0.1;
    i64 batch_size = 256;
    double lr = 3e-4;
    i64 learning_starts = 25000;
    i64 policy_delay = 2;

    void validate() const {
        check(gamma > 0.0 && gamma <= 1.0, "Td3Config: gamma must be in (0,1]");
        check(tau > 0.0 && tau <= 1.0, "Td3Config: tau must be in (0,1]");
        check(noise_clip >= 0.0, "Td3Config: noise_clip must be >= 0");
        check(policy_delay >= 1, "Td3Config: policy_delay must be >= 1");
        check(batch_size >= 1, "Td3Config: batch_size must be >= 1");
        check(lr > 0.0, "Td3Config: lr must be positive");
        check(learning_starts >= 0, "Td3Config: learning_starts must be >= 0");
    }
};

enum class SharingMode { separate, shared_frozen, shared_unfrozen };
enum class BackboneKind { gpt, mlp };

inline std::string to_string(SharingMode m) {
    switch (m) {
        case SharingMode::separate:
            return "separate";
        case SharingMode::shared_frozen:
            return "shared_frozen";
        case SharingMode::shared_unfrozen:
            return "shared_unfrozen";
    }
    throw std::runtime_error("to_string(SharingMode): bad enum");
}

inline SharingMode sharing_mode_from_string(const std::string& s) {
    if (s == "separate") return SharingMode::separate;
    if (s == "shared_frozen") return SharingMode::shared_frozen;
    if (s == "shared_unfrozen") return SharingMode::shared_unfrozen;
    throw std::runtime_error("unknown sharing mode: " + s);
}

inline std::string to_string(BackboneKind k) { return k == BackboneKind::gpt ? "gpt" : "mlp"; }

inline BackboneKind backbone_kind_from_string(const std::string& s) {
    if (s == "gpt") return BackboneKind::gpt;
    if (s == "mlp") return BackboneKind::mlp;
    throw std::runtime_error("unknown backbone kind: " + s);
}

// Pre-LN block whose attention queries one stream and reads keys/values from
// another (the second layer of the cross-attention conditioning variant).
struct CrossBlock {
    LayerNormLayer ln_q, ln_ff;
    AttnProj attn;
    Linear ff1, ff2;
    i64 heads = 1;

    static CrossBlock make(const TransformerConfig& cfg, Rng& rng) {
        CrossBlock b;
        b.ln_q = LayerNormLayer::make(cfg.d_model);
        b.ln_ff = LayerNormLayer::make(cfg.d_model);
        b.attn = AttnProj::make(cfg.d_model, rng);
        b.ff1 = Linear::make(cfg.d_model, cfg.d_ff, rng);
        b.ff2 = Linear::make(cfg.d_ff, cfg.d_model, rng);
        b.heads = cfg.num_heads;
        return b;
    }

    Tensor forward(const Tensor& queries, const Tensor& memory) const {
        Tensor h = ln_q(queries);
        Tensor a = attn.o(attention(attn.q(h), attn.k(memory), attn.v(memory), heads,
                                    memory.dim(1) - queries.dim(1)));
        Tensor x1 = add(queries, a);
        return add(x1, ff2(gelu(ff1(ln_ff(x1)))));
    }

    void register_params(ParamMap& pm, const std::string& prefix) const {
        ln_q.register_params(pm, prefix + ".ln_q");
        ln_ff.register_params(pm, prefix + ".ln_ff");
        attn.register_params(pm, prefix + ".attn");
        ff1.register_params(pm, prefix + ".ff1");
        ff2.register_params(pm, prefix + ".ff2");
    }
};

// Conditioning encoders + sequence model for one role (actor or critic).
struct SeqBackbone {
    Strategy strategy = Strategy::obs_only;
    TransformerConfig cfg;  // cfg.context_len is in tokens
    Conditioner cond;
    Transformer trunk;                  // single-sequence strategies
    std::vector<GptBlock> self_blocks;  // cross-attention path
    CrossBlock cross_block;
    Tensor pos_q, pos_kv;
    LayerNormLayer cross_final_ln;

    struct Out {
        Tensor hidden;  // [B, L, d]
        std::vector<i64> slot_positions;
    };

    static SeqBackbone make(Strategy s, TransformerConfig base, i64 context_steps, i64 obs_dim,
                            i64 act_dim, Rng& rng) {
        SeqBackbone bb;
        bb.strategy = s;
        bb.cond = Conditioner::make(s, obs_dim, act_dim, base.d_model, rng);
        base.context_len = bb.cond.token_len(context_steps);
        base.validate();
        bb.cfg = base;
        if (!is_cross_attn(s)) {
            bb.trunk = Transformer::make(base, rng);
        } else {
            for (i64 i = 0; i < base.num_layers; ++i) {
                bb.self_blocks.push_back(GptBlock::make(base, rng));
            }
            bb.cross_block = CrossBlock::make(base, rng);
            bb.pos_q = init::gaussian({context_steps, base.d_model}, 0.02, rng);
            bb.pos_kv = init::gaussian({context_steps, base.d_model}, 0.02, rng);
            bb.cross_final_ln = LayerNormLayer::make(base.d_model);
        }
        return bb;
    }

    Out forward(const WindowBatch& w, Rng* drop_rng = nullptr) const {
        Out out;
        out.slot_positions = cond.slot_positions(w.steps);
        switch (strategy) {
            case Strategy::obs_only:
                out.hidden = trunk.forward(cond.build_obs_only(w).tokens, drop_rng);
                return out;
            case Strategy::interleaved:
                out.hidden = trunk.forward(cond.build_interleaved(w).tokens, drop_rng);
                return out;
            case Strategy::embed_concat:
                out.hidden = trunk.forward(cond.build_embed_concat(w).tokens, drop_rng);
                return out;
            case Strategy::cross_attn_ao:
            case Strategy::cross_attn_oa: {
                auto [seq_a, seq_o] = cond.build_cross_attn_inputs(w);
                // _ao self-attends actions and cross-attends into the
                // observations; _oa is the swapped input order.
                Tensor xq = strategy == Strategy::cross_attn_ao ? seq_a.tokens : seq_o.tokens;
                Tensor xkv = strategy == Strategy::cross_attn_ao ? seq_o.tokens : seq_a.tokens;
                xq = add(xq, slice_rows(pos_q, 0, w.steps));
                xkv = add(xkv, slice_rows(pos_kv, 0, w.steps));
                for (const auto& blk : self_blocks) {
                    xq = blk.forward(xq, drop_rng);
                }
                out.hidden = cross_final_ln(cross_block.forward(xq, xkv));
                return out;
            }
        }
        throw std::runtime_error("SeqBackbone: bad strategy");
    }

    void register_params(ParamMap& pm, const std::string& prefix) const {
        cond.register_params(pm, prefix + ".cond");
        if (!is_cross_attn(strategy)) {
            trunk.register_params(pm, prefix + ".trunk");
        } else {
            for (size_t i = 0; i < self_blocks.size(); ++i) {
                self_blocks[i].register_params(pm, prefix + ".self" + std::to_string(i));
            }
            cross_block.register_params(pm, prefix + ".cross");
            pm.add(prefix + ".pos_q", pos_q);
            pm.add(prefix + ".pos_kv", pos_kv);
            cross_final_ln.register_params(pm, prefix + ".cross_final_ln");
        }
    }
};

struct MlpAgentConfig {
    i64 encoder_width = 256;
    std::vector<i64> hidden = {256, 256};
};

struct AgentConfig {
    BackboneKind kind = BackboneKind::gpt;
    Strategy strategy = Strategy::obs_only;
    SharingMode sharing = SharingMode::separate;
    TransformerConfig transformer;
    i64 q_head_hidden = 0;  // 0 -> d_model
    MlpAgentConfig mlp;
    Td3Config td3;
    i64 context = 10;  // window length in timesteps
    i64 obs_dim = 0, act_dim = 0;
    double action_low = -1.0, action_high = 1.0;

    i64 q_hidden() const { return q_head_hidden > 0 ? q_head_hidden : transformer.d_model; }
    double act_center() const { return 0.5 * (action_low + action_high); }
    double act_scale() const { return 0.5 * (action_high - action_low); }

    void validate() const {
        td3.validate();
        check(context >= 1, "AgentConfig: context must be >= 1");
        check(obs_dim >= 1 && act_dim >= 1, "AgentConfig: env dims unset");
        check(action_high > action_low, "AgentConfig: bad action bounds");
    }
};

struct GptNets {
    SharingMode mode = SharingMode::separate;
    SeqBackbone actor_bb;   // the shared backbone in shared modes
    SeqBackbone critic_bb;  // only populated in separate mode
    Linear actor_head;      // d_model -> act_dim, tanh-squashed downstream
    Mlp q1_head, q2_head;   // (d_model + act_dim) -> q_hidden -> 1

    static GptNets make(const AgentConfig& cfg, Rng& rng) {
        GptNets n;
        n.mode = cfg.sharing;
        n.actor_bb = SeqBackbone::make(cfg.strategy, cfg.transformer, cfg.context, cfg.obs_dim,
                                       cfg.act_dim, rng);
        if (cfg.sharing == SharingMode::separate) {
            n.critic_bb = SeqBackbone::make(cfg.strategy, cfg.transformer, cfg.context,
                                            cfg.obs_dim, cfg.act_dim, rng);
        }
        const i64 d = cfg.transformer.d_model;
        n.actor_head = Linear::make(d, cfg.act_dim, rng);
        n.q1_head = Mlp::make({d + cfg.act_dim, cfg.q_hidden(), 1}, Activation::relu, rng);
        n.q2_head = Mlp::make({d + cfg.act_dim, cfg.q_hidden(), 1}, Activation::relu, rng);
        return n;
    }

    const SeqBackbone& critic_backbone() const {
        return mode == SharingMode::separate ? critic_bb : actor_bb;
    }

    void register_params(ParamMap& pm, const std::string& prefix) const {
        actor_bb.register_params(pm, prefix + ".actor.backbone");
        if (mode == SharingMode::separate) {
            critic_bb.register_params(pm, prefix + ".critic.backbone");
        }
        actor_head.register_params(pm, prefix + ".actor.head");
        q1_head.register_params(pm, prefix + ".critic.q1");
        q2_head.register_params(pm, prefix + ".critic.q2");
    }
};

struct MlpNets {
    SharingMode mode = SharingMode::separate;
    Linear actor_enc;   // obs -> encoder_width (the shared encoder in shared modes)
    Linear critic_enc;  // only populated in separate mode
    Mlp actor_body;     // encoder_width -> hidden... -> act_dim
    Mlp q1_body, q2_body;  // encoder_width + act_dim -> hidden... -> 1

    static MlpNets make(const AgentConfig& cfg, Rng& rng) {
        MlpNets n;
        n.mode = cfg.sharing;
        const i64 w = cfg.mlp.encoder_width;
        n.actor_enc = Linear::make(cfg.obs_dim, w, rng);
        if (cfg.sharing == SharingMode::separate) {
            n.critic_enc = Linear::make(cfg.obs_dim, w, rng);
        }
        std::vector<i64> actor_sizes = {w};
        std::vector<i64> q_sizes = {w + cfg.act_dim};
        for (i64 h : cfg.mlp.hidden) {
            actor_sizes.push_back(h);
            q_sizes.push_back(h);
        }
        actor_sizes.push_back(cfg.act_dim);
        q_sizes.push_back(1);
        n.actor_body = Mlp::make(actor_sizes, Activation::relu, rng);
        n.q1_body = Mlp::make(q_sizes, Activation::relu, rng);
        n.q2_body = Mlp::make(q_sizes, Activation::relu, rng);
        return n;
    }

    const Linear& critic_encoder() const {
        return mode == SharingMode::separate ? critic_enc : actor_enc;
    }

    void register_params(ParamMap& pm, const std::string& prefix) const {
        actor_enc.register_params(pm, prefix + ".actor.encoder");
        if (mode == SharingMode::separate) {
            critic_enc.register_params(pm, prefix + ".critic.encoder");
        }
        actor_body.register_params(pm, prefix + ".actor.body");
        q1_body.register_params(pm, prefix + ".critic.q1");
        q2_body.register_params(pm, prefix + ".critic.q2");
    }
};

// ---------------------------------------------------------------------------
// Gradient norms
// ---------------------------------------------------------------------------

// L2 norm over the gradient buffers of `params`; a parameter without a
// gradient buffer is an error (run backward first).
inline double global_grad_norm(const std::vector<Tensor>& params) {
    check(!params.empty(), "global_grad_norm: empty parameter list");
    double s = 0.0;
    for (const Tensor& p : params) {
        check(p.has_grad(), "global_grad_norm: parameter has no gradient buffer");
        for (double g : p.grad()) {
            s += g * g;
        }
    }
    return std::sqrt(s);
}

inline double global_grad_norm(const ParamMap& pm) {
    std::vector<Tensor> ps;
    ps.reserve(pm.items.size());
    for (const auto& [n, t] : pm.items) {
        ps.push_back(t);
    }
    return global_grad_norm(ps);
}

namespace detail {
// Telemetry variant: parameters the loss never reached count as zero.
inline double grad_norm_or_zero(const std::vector<std::pair<std::string, Tensor>>& params) {
    double s = 0.0;
    for (const auto& [n, t] : params) {
        if (!t.has_grad()) {
            continue;
        }
        for (double g : t.grad()) {
            s += g * g;
        }
    }
    return std::sqrt(s);
}
}  // namespace detail

// target <- tau * online + (1 - tau) * target, elementwise.
inline void soft_update(const Tensor& online, Tensor& target, double tau) {
    check(online.shape() == target.shape(), "soft_update: shape mismatch");
    const auto& o = online.data();
    auto& t = target.data();
    for (size_t i = 0; i < t.size(); ++i) {
        t[i] = tau * o[i] + (1.0 - tau) * t[i];
    }
}

// ---------------------------------------------------------------------------
// AgentBundle
// ---------------------------------------------------------------------------

struct UpdateStats {
    double loss = 0.0;
    double grad_norm = 0.0;
};

struct AgentBundle {
    AgentConfig cfg;
    GptNets gpt, gpt_target;
    MlpNets mlp, mlp_target;
    ParamMap online_params, target_params;
    Adam actor_opt, critic_opt;
    i64 critic_steps = 0;
    i64 actor_steps = 0;
    std::vector<double> critic_grad_log, actor_grad_log;
    double last_critic_loss = 0.0, last_actor_loss = 0.0;

    static AgentBundle make(const AgentConfig& cfg, u64 seed) {
        cfg.validate();
        AgentBundle b;
        b.cfg = cfg;
        Rng rng(seed);
        if (cfg.kind == BackboneKind::gpt) {
            b.gpt = GptNets::make(cfg, rng);
            b.gpt_target = GptNets::make(cfg, rng);
            b.gpt.register_params(b.online_params, "online");
            b.gpt_target.register_params(b.target_params, "online");  // same key layout
        } else {
            b.mlp = MlpNets::make(cfg, rng);
            b.mlp_target = MlpNets::make(cfg, rng);
            b.mlp.register_params(b.online_params, "online");
            b.mlp_target.register_params(b.target_params, "online");
        }
        b.online_params.set_requires_grad();
        // Targets start as exact copies; they are only ever soft-updated.
        for (size_t i = 0; i < b.online_params.items.size(); ++i) {
            b.target_params.items[i].second.data() = b.online_params.items[i].second.data();
        }
        AdamConfig ac;
        ac.lr = cfg.td3.lr;
        b.actor_opt = Adam(b.actor_group(), ac);
        b.critic_opt = Adam(b.critic_group(), ac);
        return b;
    }

    std::vector<std::pair<std::string, Tensor>> params_with_prefixes(
        const std::vector<std::string>& prefixes) const {
        std::vector<std::pair<std::string, Tensor>> out;
        for (const auto& [name, t] : online_params.items) {
            for (const auto& p : prefixes) {
                if (name.rfind(p, 0) == 0) {
                    out.emplace_back(name, t);
                    break;
                }
            }
        }
        return out;
    }

    // Parameters stepped by the actor optimizer: actor head + the backbone it
    // sees (the shared backbone lives under the actor prefix).
    std::vector<std::pair<std::string, Tensor>> actor_group() const {
        return params_with_prefixes({"online.actor."});
    }

    // Parameters stepped by the critic optimizer.
    std::vector<std::pair<std::string, Tensor>> critic_group() const {
        switch (cfg.sharing) {
            case SharingMode::separate:
                return params_with_prefixes({"online.critic."});
            case SharingMode::shared_frozen:
                return params_with_prefixes({"online.critic.q1", "online.critic.q2"});
            case SharingMode::shared_unfrozen:
                return params_with_prefixes(
                    {"online.critic.", "online.actor.backbone"});
        }
        throw std::runtime_error("AgentBundle: bad sharing mode");
    }

    // Telemetry sets: structurally identical across modes so norm traces are
    // comparable (a frozen backbone contributes exactly zero).
    std::vector<std::pair<std::string, Tensor>> critic_telemetry() const {
        if (cfg.sharing == SharingMode::separate) {
            return params_with_prefixes({"online.critic."});
        }
        return params_with_prefixes(
            {"online.actor.backbone", "online.actor.encoder", "online.critic."});
    }

    std::vector<std::pair<std::string, Tensor>> actor_telemetry() const {
        return params_with_prefixes({"online.actor."});
    }

    void zero_grads() { online_params.zero_grad(); }

    void soft_update_targets() {
        for (size_t i = 0; i < online_params.items.size(); ++i) {
            soft_update(online_params.items[i].second, target_params.items[i].second,
                        cfg.td3.tau);
        }
    }

    void hard_copy_to_targets() {
        for (size_t i = 0; i < online_params.items.size(); ++i) {
            target_params.items[i].second.data() = online_params.items[i].second.data();
        }
    }
};

inline i64 param_count(const AgentBundle& b) { return b.online_params.total_size(); }

// Learnable scalar count for a config without building optimizer state.
inline i64 param_count(const AgentConfig& cfg) {
    Rng rng(0);
    ParamMap pm;
    if (cfg.kind == BackboneKind::gpt) {
        GptNets::make(cfg, rng).register_params(pm, "online");
    } else {
        MlpNets::make(cfg, rng).register_params(pm, "online");
    }
    return pm.total_size();
}

// ---------------------------------------------------------------------------
// Forward helpers
// ---------------------------------------------------------------------------

namespace detail {

// Squash raw head output to action bounds.
inline Tensor squash_actions(const Tensor& raw, const AgentConfig& cfg) {
    return add_scalar(scale(seqctl::tanh(raw), cfg.act_scale()), cfg.act_center());
}

// Observation rows at the supervised slots: [N, obs_dim].
inline Tensor gather_obs(const std::vector<const HistoryWindow*>& windows,
                         const std::vector<std::pair<i64, i64>>& pos, i64 obs_dim) {
    std::vector<double> data;
    data.reserve(pos.size() * static_cast<size_t>(obs_dim));
    for (const auto& [s, p] : pos) {
        const auto& w = *windows[static_cast<size_t>(s)];
        data.insert(data.end(), w.obs.begin() + p * obs_dim, w.obs.begin() + (p + 1) * obs_dim);
    }
    return Tensor::from({static_cast<i64>(pos.size()), obs_dim}, std::move(data));
}

}  // namespace detail

// Deterministic action from the current window; optional exploration noise.
inline std::vector<double> act(const AgentBundle& b, const HistoryWindow& window, bool explore,
                               Rng& rng) {
    const AgentConfig& cfg = b.cfg;
    Tensor a;
    if (cfg.kind == BackboneKind::gpt) {
        WindowBatch wb = WindowBatch::stack({window});
        SeqBackbone::Out out = b.gpt.actor_bb.forward(wb);
        Tensor h = select_last_token(out.hidden);  // [1, d]
        a = detail::squash_actions(b.gpt.actor_head(h), cfg);
    } else {
        // Markov baseline: only the current observation is used.
        Tensor obs = Tensor::from({1, cfg.obs_dim},
                                  std::vector<double>(window.obs.end() - cfg.obs_dim,
                                                      window.obs.end()));
        Tensor h = relu(b.mlp.actor_enc(obs));
        a = detail::squash_actions(b.mlp.actor_body.forward(h), cfg);
    }
    std::vector<double> action = a.data();
    for (double v : action) {
        check(std::isfinite(v), "act: non-finite actor output");
    }
    if (explore) {
        for (auto& v : action) {
            v += rng.gaussian(0.0, cfg.td3.exploration_noise * cfg.act_scale());
            v = std::clamp(v, cfg.action_low, cfg.action_high);
        }
    }
    return action;
}

// ---------------------------------------------------------------------------
// TD3 targets
// ---------------------------------------------------------------------------

namespace detail {

// Smoothed, clipped target action for a batch of next-windows, then
// y = r + (1 - terminal) * gamma * min(Q1', Q2').
inline std::vector<double> targets_for_windows(const AgentBundle& b,
                                               const std::vector<const HistoryWindow*>& windows,
                                               const std::vector<double>& rewards,
                                               const std::vector<std::uint8_t>& terminal,
                                               Rng& rng) {
    const AgentConfig& cfg = b.cfg;
    const i64 N = static_cast<i64>(windows.size());
    NoTapeScope no_tape;  // targets never carry gradients

    Tensor h_actor, h_critic;
    if (cfg.kind == BackboneKind::gpt) {
        std::vector<HistoryWindow> copies;
        copies.reserve(static_cast<size_t>(N));
        for (const auto* w : windows) {
            copies.push_back(*w);
        }
        WindowBatch wb = WindowBatch::stack(copies);
        h_actor = select_last_token(b.gpt_target.actor_bb.forward(wb).hidden);
        h_critic = cfg.sharing == SharingMode::separate
                       ? select_last_token(b.gpt_target.critic_bb.forward(wb).hidden)
                       : h_actor;
    } else {
        std::vector<std::pair<i64, i64>> last(static_cast<size_t>(N));
        for (i64 i = 0; i < N; ++i) {
            last[static_cast<size_t>(i)] = {i, windows[static_cast<size_t>(i)]->steps - 1};
        }
        Tensor obs = gather_obs(windows, last, cfg.obs_dim);
        h_actor = relu(b.mlp_target.actor_enc(obs));
        h_critic = cfg.sharing == SharingMode::separate
                       ? relu(b.mlp_target.critic_enc(obs))
                       : h_actor;
    }

    Tensor raw = cfg.kind == BackboneKind::gpt ? b.gpt_target.actor_head(h_actor)
                                               : Tensor(b.mlp_target.actor_body.forward(h_actor));
    Tensor a = squash_actions(raw, cfg);
    // Clipped gaussian smoothing noise, then clamp to bounds.
    for (i64 i = 0; i < a.size(); ++i) {
        double eps = rng.gaussian(0.0, cfg.td3.policy_noise);
        eps = std::clamp(eps, -cfg.td3.noise_clip, cfg.td3.noise_clip) * cfg.act_scale();
        a.data()[static_cast<size_t>(i)] = std::clamp(a.data()[static_cast<size_t>(i)] + eps,
                                                      cfg.action_low, cfg.action_high);
    }

    Tensor q_in = concat_last(h_critic, a);
    Tensor q1 = cfg.kind == BackboneKind::gpt ? b.gpt_target.q1_head.forward(q_in)
                                              : b.mlp_target.q1_body.forward(q_in);
    Tensor q2 = cfg.kind == BackboneKind::gpt ? b.gpt_target.q2_head.forward(q_in)
                                              : b.mlp_target.q2_body.forward(q_in);

    std::vector<double> y(static_cast<size_t>(N));
    for (i64 i = 0; i < N; ++i) {
        const double minq = std::min(q1.data()[static_cast<size_t>(i)],
                                     q2.data()[static_cast<size_t>(i)]);
        const double cont = terminal[static_cast<size_t>(i)] ? 0.0 : 1.0;
        y[static_cast<size_t>(i)] = rewards[static_cast<size_t>(i)] +
                                    cont * cfg.td3.gamma * minq;
    }
    return y;
}

}  // namespace detail

// Single-transition form: y = r + (1 - done) * gamma * min Q'(next, a~).
inline double td3_target(const AgentBundle& b, const HistoryWindow& next_window, double reward,
                         bool terminal, Rng& rng) {
    return detail::targets_for_windows(b, {&next_window}, {reward},
                                       {static_cast<std::uint8_t>(terminal ? 1 : 0)}, rng)[0];
}

// Targets for every (sample, supervised position) pair, sample-major.
inline std::vector<double> td3_targets(const AgentBundle& b, const SequenceBatch& batch,
                                       Rng& rng) {
    std::vector<const HistoryWindow*> windows;
    std::vector<double> rewards;
    std::vector<std::uint8_t> terminal;
    for (const auto& s : batch.samples) {
        for (size_t k = 0; k < s.sup_positions.size(); ++k) {
            const i64 p = s.sup_positions[k];
            if (batch.spec.supervision == Supervision::every_token) {
                windows.push_back(&s.position_next_windows[k]);
            } else {
                windows.push_back(&s.next_window);
            }
            rewards.push_back(s.rewards[static_cast<size_t>(p)]);
            terminal.push_back(s.terminal[static_cast<size_t>(p)]);
        }
    }
    return detail::targets_for_windows(b, windows, rewards, terminal, rng);
}

// ---------------------------------------------------------------------------
// Updates
// ---------------------------------------------------------------------------

namespace detail {

struct SupGather {
    std::vector<std::pair<i64, i64>> token_pos;  // (sample, token index)
    std::vector<std::pair<i64, i64>> slot_pos;   // (sample, slot index)
};

inline SupGather supervised_positions(const SequenceBatch& batch,
                                      const std::vector<i64>& slot_to_token) {
    SupGather g;
    for (size_t s = 0; s < batch.samples.size(); ++s) {
        for (i64 p : batch.samples[s].sup_positions) {
            g.slot_pos.emplace_back(static_cast<i64>(s), p);
            g.token_pos.emplace_back(static_cast<i64>(s), slot_to_token[static_cast<size_t>(p)]);
        }
    }
    return g;
}

inline Tensor actions_at(const SequenceBatch& batch, const std::vector<std::pair<i64, i64>>& pos,
                         i64 act_dim) {
    std::vector<double> data;
    data.reserve(pos.size() * static_cast<size_t>(act_dim));
    for (const auto& [s, p] : pos) {
        const auto& a = batch.samples[static_cast<size_t>(s)].actions;
        data.insert(data.end(), a.begin() + p * act_dim, a.begin() + (p + 1) * act_dim);
    }
    return Tensor::from({static_cast<i64>(pos.size()), act_dim}, std::move(data));
}

inline std::vector<HistoryWindow> batch_windows(const SequenceBatch& batch) {
    std::vector<HistoryWindow> ws;
    ws.reserve(batch.samples.size());
    for (const auto& s : batch.samples) {
        ws.push_back(s.window);
    }
    return ws;
}

inline std::vector<const HistoryWindow*> window_ptrs(const std::vector<HistoryWindow>& ws) {
    std::vector<const HistoryWindow*> p;
    p.reserve(ws.size());
    for (const auto& w : ws) {
        p.push_back(&w);
    }
    return p;
}

}  // namespace detail

// One critic step: TD loss on both heads, backward, Adam on the critic group.
// In shared_frozen the backbone output is detached, so backbone and encoder
// gradients from this loss are exactly zero.
inline UpdateStats critic_update(AgentBundle& b, const SequenceBatch& batch, Rng& rng) {
    const AgentConfig& cfg = b.cfg;
    check(!batch.samples.empty(), "critic_update: empty batch");
    const std::vector<double> y = td3_targets(b, batch, rng);

    b.zero_grads();
    Tape tape;
    TapeScope scope(tape);

    std::vector<HistoryWindow> windows = detail::batch_windows(batch);
    Tensor h_sup;
    detail::SupGather sup;
    if (cfg.kind == BackboneKind::gpt) {
        WindowBatch wb = WindowBatch::stack(windows);
        SeqBackbone::Out out = b.gpt.critic_backbone().forward(wb);
        Tensor hidden = cfg.sharing == SharingMode::shared_frozen ? out.hidden.detach()
                                                                  : out.hidden;
        sup = detail::supervised_positions(batch, out.slot_positions);
        h_sup = gather_steps(hidden, sup.token_pos);
    } else {
        std::vector<i64> ident(static_cast<size_t>(batch.spec.context));
        for (i64 i = 0; i < batch.spec.context; ++i) {
            ident[static_cast<size_t>(i)] = i;
        }
        sup = detail::supervised_positions(batch, ident);
        Tensor obs = detail::gather_obs(detail::window_ptrs(windows), sup.slot_pos, cfg.obs_dim);
        Tensor enc = relu(b.mlp.critic_encoder()(obs));
        h_sup = cfg.sharing == SharingMode::shared_frozen ? enc.detach() : enc;
    }

    Tensor acts = detail::actions_at(batch, sup.slot_pos, cfg.act_dim);
    Tensor q_in = concat_last(h_sup, acts);
    Tensor q1 = cfg.kind == BackboneKind::gpt ? b.gpt.q1_head.forward(q_in)
                                              : b.mlp.q1_body.forward(q_in);
    Tensor q2 = cfg.kind == BackboneKind::gpt ? b.gpt.q2_head.forward(q_in)
                                              : b.mlp.q2_body.forward(q_in);
    Tensor yt = Tensor::from({static_cast<i64>(y.size()), 1}, y);
    Tensor d1 = sub(q1, yt);
    Tensor d2 = sub(q2, yt);
    Tensor loss = add(mean(mul(d1, d1)), mean(mul(d2, d2)));
    check(std::isfinite(loss.value()), "critic_update: non-finite loss");
    tape.backward(loss);

    UpdateStats stats;
    stats.loss = loss.value();
    stats.grad_norm = detail::grad_norm_or_zero(b.critic_telemetry());
    b.critic_grad_log.push_back(stats.grad_norm);
    b.last_critic_loss = stats.loss;
    b.critic_opt.step();
    b.critic_steps += 1;
    return stats;
}

// One actor step: deterministic policy gradient through Q1 at the supervised
// positions. Gradients flow through the shared backbone in shared modes; Q1
// head parameters receive no update from this loss.
inline UpdateStats actor_update(AgentBundle& b, const SequenceBatch& batch) {
    const AgentConfig& cfg = b.cfg;
    check(!batch.samples.empty(), "actor_update: empty batch");

    b.zero_grads();
    Tape tape;
    TapeScope scope(tape);

    std::vector<HistoryWindow> windows = detail::batch_windows(batch);
    Tensor h_actor, h_critic;
    detail::SupGather sup;
    if (cfg.kind == BackboneKind::gpt) {
        WindowBatch wb = WindowBatch::stack(windows);
        SeqBackbone::Out out_a = b.gpt.actor_bb.forward(wb);
        sup = detail::supervised_positions(batch, out_a.slot_positions);
        h_actor = gather_steps(out_a.hidden, sup.token_pos);
        if (cfg.sharing == SharingMode::separate) {
            SeqBackbone::Out out_c = b.gpt.critic_bb.forward(wb);
            h_critic = gather_steps(out_c.hidden, sup.token_pos);
        } else {
            h_critic = h_actor;
        }
    } else {
        std::vector<i64> ident(static_cast<size_t>(batch.spec.context));
        for (i64 i = 0; i < batch.spec.context; ++i) {
            ident[static_cast<size_t>(i)] = i;
        }
        sup = detail::supervised_positions(batch, ident);
        Tensor obs = detail::gather_obs(detail::window_ptrs(windows), sup.slot_pos, cfg.obs_dim);
        h_actor = relu(b.mlp.actor_enc(obs));
        h_critic = cfg.sharing == SharingMode::separate ? relu(b.mlp.critic_enc(obs)) : h_actor;
    }

    Tensor raw = cfg.kind == BackboneKind::gpt ? b.gpt.actor_head(h_actor)
                                               : b.mlp.actor_body.forward(h_actor);
    Tensor a = detail::squash_actions(raw, cfg);
    Tensor q_in = concat_last(h_critic, a);
    Tensor q1 = cfg.kind == BackboneKind::gpt ? b.gpt.q1_head.forward(q_in)
                                              : b.mlp.q1_body.forward(q_in);
    Tensor loss = neg(mean(q1));
    check(std::isfinite(loss.value()), "actor_update: non-finite loss");
    tape.backward(loss);

    UpdateStats stats;
    stats.loss = loss.value();
    stats.grad_norm = detail::grad_norm_or_zero(b.actor_telemetry());
    b.actor_grad_log.push_back(stats.grad_norm);
    b.last_actor_loss = stats.loss;
    b.actor_opt.step();
    b.actor_steps += 1;
    return stats;
}

// ---------------------------------------------------------------------------
// Scaling presets
// ---------------------------------------------------------------------------
//
// The four TD3-GPT tiers (51k / 320k / 1M / 5M learnable scalars) are full
// separate-mode agents -- two backbones, twin Q heads with hidden width
// d_model, linear actor head -- at nominal locomotion dims (obs 17, act 6).
// The TD3-MLP tiers size the scaled policy stack: input proj, n core
// width-w layers, output head; widths 160/256/512/1024 (n*w^2 dominates and
// lands on the published sizes).

struct ScalingPreset {
    std::string name;
    i64 target_params = 0;
    i64 count = 0;
};

inline std::vector<ScalingPreset> gpt_scaling_presets() {
    const i64 layers[4] = {1, 1, 1, 6};
    const i64 d_model[4] = {32, 128, 256, 256};
    const i64 targets[4] = {51'000, 320'000, 1'000'000, 5'000'000};
    std::vector<ScalingPreset> out;
    for (int i = 0; i < 4; ++i) {
        AgentConfig cfg;
        cfg.kind = BackboneKind::gpt;
        cfg.strategy = Strategy::obs_only;
        cfg.sharing = SharingMode::separate;
        cfg.transformer = TransformerConfig{.num_layers = layers[i], .num_heads = 4,
                                            .d_model = d_model[i], .d_ff = 256,
                                            .context_len = 10};
        cfg.context = 10;
        cfg.obs_dim = 17;
        cfg.act_dim = 6;
        out.push_back({"gpt_" + std::to_string(targets[i]), targets[i], param_count(cfg)});
    }
    return out;
}

inline std::vector<ScalingPreset> mlp_scaling_presets() {
    const i64 layers[4] = {2, 5, 4, 5};
    const i64 widths[4] = {160, 256, 512, 1024};
    const i64 targets[4] = {51'000, 320'000, 1'000'000, 5'000'000};
    std::vector<ScalingPreset> out;
    Rng rng(0);
    for (int i = 0; i < 4; ++i) {
        std::vector<i64> sizes = {17};
        for (i64 k = 0; k < layers[i] + 1; ++k) {
            sizes.push_back(widths[i]);
        }
        sizes.push_back(6);
        Mlp net = Mlp::make(sizes, Activation::relu, rng);
        ParamMap pm;
        net.register_params(pm, "net");
        out.push_back({"mlp_" + std::to_string(targets[i]), targets[i], param_count(pm)});
    }
    return out;
}

}  // namespace seqctl
