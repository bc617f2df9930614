#pragma once

// Builders mapping (observation, action, reward) histories onto transformer
// token sequences. Four strategies:
//
//   obs_only      tokens are encoded observations, one per timestep
//   interleaved   o, a, o, a, ..., o alternating modality tokens (2M-1)
//   embed_concat  per-step fusion of obs, previous action and previous reward
//   cross_attn_*  action stream and observation stream kept separate; one is
//                 self-attended and cross-attends into the other
//
// Reward/action streams are aligned so that slot n carries what the agent had
// already seen when acting at step n: the action taken at n-1 and the reward
// received on arrival (zero at an episode start).

#include <string>
#include <utility>
#include <vector>

#include "seqctl/nn.hpp"

namespace seqctl {

enum class Strategy { obs_only, interleaved, embed_concat, cross_attn_ao, cross_attn_oa };

inline std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::obs_only:
            return "obs_only";
        case Strategy::interleaved:
            return "interleaved";
        case Strategy::embed_concat:
            return "embed_concat";
        case Strategy::cross_attn_ao:
            return "cross_attn_ao";
        case Strategy::cross_attn_oa:
            return "cross_attn_oa";
    }
    throw std::runtime_error("to_string(Strategy): bad enum");
}

inline Strategy strategy_from_string(const std::string& s) {
    if (s == "obs_only") return Strategy::obs_only;
    if (s == "interleaved") return Strategy::interleaved;
    if (s == "embed_concat") return Strategy::embed_concat;
    if (s == "cross_attn_ao") return Strategy::cross_attn_ao;
    if (s == "cross_attn_oa") return Strategy::cross_attn_oa;
    throw std::runtime_error("unknown conditioning strategy: " + s);
}

inline bool is_cross_attn(Strategy s) {
    return s == Strategy::cross_attn_ao || s == Strategy::cross_attn_oa;
}

// One history window of M timesteps (batch == stack of these). Plain data,
// gradient-free; slot n holds o_n, a_{n-1}, r_{n-1}.
struct HistoryWindow {
    i64 steps = 0, obs_dim = 0, act_dim = 0;
    std::vector<double> obs;          // [M, obs_dim]
    std::vector<double> prev_action;  // [M, act_dim]
    std::vector<double> prev_reward;  // [M]
    std::vector<std::uint8_t> valid;       // false where the mask rule filled the slot
    std::vector<std::uint8_t> in_episode;  // false for foreign / pre-episode slots

    static HistoryWindow empty(i64 steps, i64 obs_dim, i64 act_dim) {
        HistoryWindow w;
        w.steps = steps;
        w.obs_dim = obs_dim;
        w.act_dim = act_dim;
        w.obs.assign(static_cast<size_t>(steps * obs_dim), 0.0);
        w.prev_action.assign(static_cast<size_t>(steps * act_dim), 0.0);
        w.prev_reward.assign(static_cast<size_t>(steps), 0.0);
        w.valid.assign(static_cast<size_t>(steps), 0);
        w.in_episode.assign(static_cast<size_t>(steps), 0);
        return w;
    }
};

// Stacked windows ready for a batched network pass.
struct WindowBatch {
    i64 batch = 0, steps = 0, obs_dim = 0, act_dim = 0;
    std::vector<double> obs;          // [B, M, obs_dim]
    std::vector<double> prev_action;  // [B, M, act_dim]
    std::vector<double> prev_reward;  // [B, M]

    static WindowBatch stack(const std::vector<HistoryWindow>& windows) {
        check(!windows.empty(), "WindowBatch::stack: empty batch");
        WindowBatch wb;
        wb.batch = static_cast<i64>(windows.size());
        wb.steps = windows[0].steps;
        wb.obs_dim = windows[0].obs_dim;
        wb.act_dim = windows[0].act_dim;
        for (const auto& w : windows) {
            check(w.steps == wb.steps && w.obs_dim == wb.obs_dim && w.act_dim == wb.act_dim,
                  "WindowBatch::stack: inhomogeneous windows");
            wb.obs.insert(wb.obs.end(), w.obs.begin(), w.obs.end());
            wb.prev_action.insert(wb.prev_action.end(), w.prev_action.begin(),
                                  w.prev_action.end());
            wb.prev_reward.insert(wb.prev_reward.end(), w.prev_reward.begin(),
                                  w.prev_reward.end());
        }
        return wb;
    }

    Tensor obs_tensor() const { return Tensor::from({batch, steps, obs_dim}, obs); }
    Tensor prev_action_tensor() const { return Tensor::from({batch, steps, act_dim}, prev_action); }
    Tensor prev_reward_tensor() const { return Tensor::from({batch, steps, 1}, prev_reward); }
};

// Token sequence handed to the sequence backbone. `slot_positions[n]` is the
// token index whose hidden state predicts for timestep slot n; the prediction
// index is always the last token.
struct TokenSequence {
    Tensor tokens;  // [B, L, d_model]
    std::vector<int> tags;  // 0 = obs, 1 = action, 2 = fused
    i64 prediction_index = 0;
    std::vector<i64> slot_positions;
};

// Modality encoders for one backbone. Which sub-encoders exist depends on the
// strategy; absent ones stay empty and unregistered.
struct Conditioner {
    Strategy strategy = Strategy::obs_only;
    i64 d_model = 0, obs_dim = 0, act_dim = 0;
    Linear obs_enc;
    Linear act_enc;
    Linear rew_enc;
    Linear fusion;
    Tensor start_token;  // [d_model], learned start-of-episode action slot

    static Conditioner make(Strategy s, i64 obs_dim, i64 act_dim, i64 d_model, Rng& rng) {
        check(obs_dim >= 1 && act_dim >= 1 && d_model >= 1, "Conditioner: bad dims");
        Conditioner c;
        c.strategy = s;
        c.d_model = d_model;
        c.obs_dim = obs_dim;
        c.act_dim = act_dim;
        c.obs_enc = Linear::make(obs_dim, d_model, rng);
        if (s != Strategy::obs_only) {
            c.act_enc = Linear::make(act_dim, d_model, rng);
        }
        if (s == Strategy::embed_concat) {
            c.rew_enc = Linear::make(1, d_model, rng);
            c.fusion = Linear::make(3 * d_model, d_model, rng);
        }
        if (is_cross_attn(s)) {
            c.start_token = init::gaussian({d_model}, 0.02, rng);
        }
        return c;
    }

    // Token count produced for an M-step window.
    i64 token_len(i64 steps) const {
        return strategy == Strategy::interleaved ? 2 * steps - 1 : steps;
    }

    std::vector<i64> slot_positions(i64 steps) const {
        std::vector<i64> pos(static_cast<size_t>(steps));
        for (i64 n = 0; n < steps; ++n) {
            pos[static_cast<size_t>(n)] = strategy == Strategy::interleaved ? 2 * n : n;
        }
        return pos;
    }

    TokenSequence build_obs_only(const WindowBatch& w) const {
        check(w.steps >= 1, "build_obs_only: window must have at least one step");
        TokenSequence ts;
        ts.tokens = obs_enc(w.obs_tensor());
        ts.tags.assign(static_cast<size_t>(w.steps), 0);
        ts.prediction_index = w.steps - 1;
        ts.slot_positions = slot_positions(w.steps);
        return ts;
    }

    // o_{t-M+1}, a_{t-M+1}, o_{t-M+2}, ..., a_{t-1}, o_t. The action taken at
    // slot n is the next slot's previous action.
    TokenSequence build_interleaved(const WindowBatch& w) const {
        check(w.steps >= 1, "build_interleaved: window must have at least one step");
        const i64 M = w.steps;
        Tensor eo = obs_enc(w.obs_tensor());
        TokenSequence ts;
        if (M == 1) {
            ts.tokens = eo;
            ts.tags = {0};
        } else {
            Tensor ea = act_enc(w.prev_action_tensor());
            Tensor both = concat_steps(eo, ea);  // rows 0..M-1 = obs, M..2M-1 = actions
            std::vector<i64> map(static_cast<size_t>(2 * M - 1));
            for (i64 n = 0; n < M; ++n) {
                map[static_cast<size_t>(2 * n)] = n;
                if (n + 1 < M) {
                    map[static_cast<size_t>(2 * n + 1)] = M + n + 1;  // a_n lives in slot n+1
                }
            }
            ts.tokens = row_select(both, map);
            ts.tags.assign(static_cast<size_t>(2 * M - 1), 0);
            for (i64 i = 1; i < 2 * M - 1; i += 2) {
                ts.tags[static_cast<size_t>(i)] = 1;
            }
        }
        ts.prediction_index = token_len(M) - 1;
        ts.slot_positions = slot_positions(M);
        return ts;
    }

    // Per slot: fuse(concat(emb(o_n), emb(a_{n-1}), emb(r_{n-1}))) -> d_model.
    TokenSequence build_embed_concat(const WindowBatch& w) const {
        check(w.steps >= 1, "build_embed_concat: window must have at least one step");
        check(!w.prev_reward.empty(), "build_embed_concat: missing reward stream");
        Tensor eo = obs_enc(w.obs_tensor());
        Tensor ea = act_enc(w.prev_action_tensor());
        Tensor er = rew_enc(w.prev_reward_tensor());
        Tensor fused = fusion(concat_last(concat_last(eo, ea), er));
        TokenSequence ts;
        ts.tokens = fused;
        ts.tags.assign(static_cast<size_t>(w.steps), 2);
        ts.prediction_index = w.steps - 1;
        ts.slot_positions = slot_positions(w.steps);
        return ts;
    }

    // Action stream (learned start token + a_{t-M+1..t-1}) and observation
    // stream, both length M. Which one queries the other depends on the
    // cross_attn_ao / cross_attn_oa variant, resolved by the backbone.
    std::pair<TokenSequence, TokenSequence> build_cross_attn_inputs(const WindowBatch& w) const {
        check(w.steps >= 1, "build_cross_attn_inputs: window must have at least one step");
        const i64 M = w.steps;
        Tensor actions;
        Tensor start = add(Tensor::zeros({w.batch, 1, d_model}), start_token.reshape({1, 1, d_model}));
        if (M == 1) {
            actions = start;
        } else {
            Tensor ea = act_enc(w.prev_action_tensor());
            std::vector<i64> tail(static_cast<size_t>(M - 1));
            for (i64 n = 0; n < M - 1; ++n) {
                tail[static_cast<size_t>(n)] = n + 1;  // a_{t-M+1+n} sits in slot n+1
            }
            actions = concat_steps(start, row_select(ea, tail));
        }
        TokenSequence seq_x;
        seq_x.tokens = actions;
        seq_x.tags.assign(static_cast<size_t>(M), 1);
        seq_x.prediction_index = M - 1;
        seq_x.slot_positions = slot_positions(M);

        TokenSequence seq_y;
        seq_y.tokens = obs_enc(w.obs_tensor());
        seq_y.tags.assign(static_cast<size_t>(M), 0);
        seq_y.prediction_index = M - 1;
        seq_y.slot_positions = slot_positions(M);
        return {seq_x, seq_y};
    }

    void register_params(ParamMap& pm, const std::string& prefix) const {
        obs_enc.register_params(pm, prefix + ".obs_enc");
        if (strategy != Strategy::obs_only) {
            act_enc.register_params(pm, prefix + ".act_enc");
        }
        if (strategy == Strategy::embed_concat) {
            rew_enc.register_params(pm, prefix + ".rew_enc");
            fusion.register_params(pm, prefix + ".fusion");
        }
        if (is_cross_attn(strategy)) {
            pm.add(prefix + ".start_token", start_token);
        }
    }
};

}  // namespace seqctl
