#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "seqctl/agents.hpp"

using namespace seqctl;

namespace {

AgentConfig tiny_gpt(SharingMode mode, Strategy strat = Strategy::obs_only, i64 context = 3) {
    AgentConfig cfg;
    cfg.kind = BackboneKind::gpt;
    cfg.strategy = strat;
    cfg.sharing = mode;
    cfg.transformer = TransformerConfig{.num_layers = 1, .num_heads = 2, .d_model = 8,
                                        .d_ff = 16, .context_len = context};
    cfg.context = context;
    cfg.obs_dim = 3;
    cfg.act_dim = 1;
    cfg.td3.batch_size = 4;
    cfg.td3.learning_starts = 0;
    return cfg;
}

EpisodeStore rollout_store(i64 n_transitions, i64 ep_len, u64 seed) {
    EpisodeStore store(1000, 3, 1);
    Rng rng(seed);
    i64 step = 0;
    for (i64 i = 0; i < n_transitions; ++i) {
        const bool done = step == ep_len - 1;
        store.append({rng.gaussian(), rng.gaussian(), rng.gaussian()}, {rng.uniform(-1, 1)},
                     rng.gaussian(), {rng.gaussian(), rng.gaussian(), rng.gaussian()}, done,
                     false);
        step = done ? 0 : step + 1;
    }
    return store;
}

void force_constant_q(Mlp& head, double value) {
    for (auto& l : head.layers) {
        std::fill(l.w.data().begin(), l.w.data().end(), 0.0);
        std::fill(l.b.data().begin(), l.b.data().end(), 0.0);
    }
    head.layers.back().b.data() = {value};
}

std::vector<double> snapshot(const std::vector<std::pair<std::string, Tensor>>& params) {
    std::vector<double> all;
    for (const auto& [n, t] : params) {
        all.insert(all.end(), t.data().begin(), t.data().end());
    }
    return all;
}

}  // namespace

TEST_CASE("act is deterministic without exploration and clamps with it") {
    AgentBundle b = AgentBundle::make(tiny_gpt(SharingMode::separate), 7);
    HistoryWindow w = HistoryWindow::empty(3, 3, 1);
    for (size_t i = 0; i < w.obs.size(); ++i) {
        w.obs[i] = 0.1 * static_cast<double>(i);
    }
    Rng r1(1), r2(1);
    REQUIRE(act(b, w, false, r1) == act(b, w, false, r2));

    // Saturated actor: exploration noise pushes past the bound, clamp holds.
    std::fill(b.gpt.actor_head.w.data().begin(), b.gpt.actor_head.w.data().end(), 0.0);
    b.gpt.actor_head.b.data() = {5.0};  // tanh(5) ~ 0.9999
    Rng rn(3);
    bool hit_bound = false;
    for (int i = 0; i < 64; ++i) {
        const auto a = act(b, w, true, rn);
        REQUIRE(a[0] <= 1.0);
        REQUIRE(a[0] >= -1.0);
        hit_bound = hit_bound || a[0] == 1.0;
    }
    REQUIRE(hit_bound);

    // Zero actor weights: deterministic action is tanh(0) = 0.
    b.gpt.actor_head.b.data() = {0.0};
    Rng rz(5);
    REQUIRE(act(b, w, false, rz)[0] == 0.0);

    // Non-finite output is surfaced, never clamped away.
    b.gpt.actor_head.b.data() = {std::nan("")};
    REQUIRE_THROWS_WITH(act(b, w, false, rz), Catch::Matchers::ContainsSubstring("non-finite"));
}

TEST_CASE("td3_target arithmetic fixtures") {
    AgentBundle b = AgentBundle::make(tiny_gpt(SharingMode::separate), 11);
    force_constant_q(b.gpt_target.q1_head, 2.0);
    force_constant_q(b.gpt_target.q2_head, 3.0);
    HistoryWindow w = HistoryWindow::empty(3, 3, 1);

    Rng rng(1);
    const double y = td3_target(b, w, 1.0, false, rng);
    REQUIRE(y == 1.0 + 0.99 * 2.0);
    REQUIRE(y == Catch::Approx(2.98));

    // done = 1: y = r exactly, independent of the critic.
    Rng rng2(2);
    REQUIRE(td3_target(b, w, 0.75, true, rng2) == 0.75);

    // Twin-min symmetry: swapping critic labels leaves y unchanged.
    force_constant_q(b.gpt_target.q1_head, 3.0);
    force_constant_q(b.gpt_target.q2_head, 2.0);
    Rng rng3(1);
    REQUIRE(td3_target(b, w, 1.0, false, rng3) == 1.0 + 0.99 * 2.0);
}

TEST_CASE("target policy smoothing noise is clipped at noise_clip") {
    AgentConfig cfg = tiny_gpt(SharingMode::separate);
    cfg.td3.policy_noise = 5.0;  // nearly every draw exceeds the clip
    AgentBundle b = AgentBundle::make(cfg, 13);
    // Zero the target actor so the pre-noise action is exactly 0, and make
    // Q1 = Q2 = (smoothed action) via a +/- relu pair.
    for (auto& [n, t] : b.target_params.items) {
        if (n.find("actor") != std::string::npos) {
            std::fill(t.data().begin(), t.data().end(), 0.0);
        }
    }
    auto make_q_identity = [&](Mlp& q) {
        // input = [h(8), a(1)] -> hidden(8) -> 1; hidden0 = relu(a), hidden1 = relu(-a)
        for (auto& l : q.layers) {
            std::fill(l.w.data().begin(), l.w.data().end(), 0.0);
            std::fill(l.b.data().begin(), l.b.data().end(), 0.0);
        }
        q.layers[0].w.data()[static_cast<size_t>(8 * q.layers[0].out_dim() + 0)] = 1.0;
        q.layers[0].w.data()[static_cast<size_t>(8 * q.layers[0].out_dim() + 1)] = -1.0;
        q.layers[1].w.data()[0] = 1.0;
        q.layers[1].w.data()[1] = -1.0;
    };
    make_q_identity(b.gpt_target.q1_head);
    make_q_identity(b.gpt_target.q2_head);

    HistoryWindow w = HistoryWindow::empty(3, 3, 1);
    Rng rng(17);
    double max_abs_y = 0.0;
    bool saw_positive = false, saw_negative = false;
    for (int i = 0; i < 200; ++i) {
        const double y = td3_target(b, w, 0.0, false, rng);  // y = gamma * a~
        const double a = y / 0.99;
        REQUIRE(std::abs(a) <= 0.5 + 1e-12);
        max_abs_y = std::max(max_abs_y, std::abs(a));
        saw_positive = saw_positive || a > 0.4;
        saw_negative = saw_negative || a < -0.4;
    }
    REQUIRE(max_abs_y == Catch::Approx(0.5));
    REQUIRE(saw_positive);
    REQUIRE(saw_negative);
}

TEST_CASE("soft_update fixtures and geometric target lag") {
    Tensor online = Tensor::from({1}, {1.0});
    Tensor target = Tensor::from({1}, {0.0});
    soft_update(online, target, 0.005);
    REQUIRE(target.data()[0] == 0.005);

    Tensor t2 = Tensor::from({1}, {0.25});
    soft_update(online, t2, 1.0);
    REQUIRE(t2.data()[0] == 1.0);

    Tensor t3 = Tensor::from({1}, {0.25});
    soft_update(online, t3, 0.0);
    REQUIRE(t3.data()[0] == 0.25);

    // After n updates with constant online p: p - (1-tau)^n (p - t0).
    Tensor t4 = Tensor::from({1}, {0.0});
    const double tau = 0.1;
    for (int n = 1; n <= 20; ++n) {
        soft_update(online, t4, tau);
        const double expect = 1.0 - std::pow(1.0 - tau, n) * 1.0;
        REQUIRE(t4.data()[0] == Catch::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("sharing modes control exactly which parameters move") {
    EpisodeStore store = rollout_store(60, 12, 3);
    SliceSpec spec{.context = 3, .mode = SliceMode::cross_episode, .masking = Masking::zero};

    SECTION("shared_frozen: critic steps never touch backbone or encoder") {
        AgentBundle b = AgentBundle::make(tiny_gpt(SharingMode::shared_frozen), 5);
        auto backbone = b.params_with_prefixes({"online.actor.backbone"});
        auto heads = b.params_with_prefixes({"online.critic.q1"});
        const auto before = snapshot(backbone);
        const auto heads_before = snapshot(heads);
        Rng rng(9);
        for (int i = 0; i < 10; ++i) {
            SequenceBatch batch = sample_batch(store, spec, 8, rng);
            critic_update(b, batch, rng);
        }
        REQUIRE(snapshot(backbone) == before);
        // The stop-gradient really is analytic zero: no grad buffers ever
        // appeared on backbone parameters during those critic steps.
        for (const auto& [n, t] : backbone) {
            if (t.has_grad()) {
                for (double g : t.grad()) {
                    REQUIRE(g == 0.0);
                }
            }
        }
        // The critic heads did learn.
        REQUIRE(snapshot(heads) != heads_before);
    }

    SECTION("shared_unfrozen: the backbone moves on the first critic step") {
        AgentBundle b = AgentBundle::make(tiny_gpt(SharingMode::shared_unfrozen), 5);
        auto backbone = b.params_with_prefixes({"online.actor.backbone"});
        const auto before = snapshot(backbone);
        Rng rng(9);
        SequenceBatch batch = sample_batch(store, spec, 8, rng);
        critic_update(b, batch, rng);
        REQUIRE(snapshot(backbone) != before);
    }

    SECTION("separate: cross-updates never touch the other backbone") {
        AgentBundle b = AgentBundle::make(tiny_gpt(SharingMode::separate), 5);
        auto actor_bb = b.params_with_prefixes({"online.actor.backbone"});
        auto critic_bb = b.params_with_prefixes({"online.critic.backbone"});
        Rng rng(9);
        SequenceBatch batch = sample_batch(store, spec, 8, rng);

        const auto actor_before = snapshot(actor_bb);
        critic_update(b, batch, rng);
        REQUIRE(snapshot(actor_bb) == actor_before);

        const auto critic_before = snapshot(critic_bb);
        actor_update(b, batch);
        REQUIRE(snapshot(critic_bb) == critic_before);
    }
}

TEST_CASE("actor step leaves Q1 head parameters unchanged") {
    EpisodeStore store = rollout_store(40, 8, 4);
    SliceSpec spec{.context = 3, .mode = SliceMode::cross_episode, .masking = Masking::first_obs};
    AgentBundle b = AgentBundle::make(tiny_gpt(SharingMode::shared_frozen), 6);
    auto q1 = b.params_with_prefixes({"online.critic.q1"});
    const auto before = snapshot(q1);
    Rng rng(2);
    SequenceBatch batch = sample_batch(store, spec, 8, rng);
    actor_update(b, batch);
    REQUIRE(snapshot(q1) == before);
}

TEST_CASE("zero critic everywhere gives a zero actor gradient and no movement") {
    EpisodeStore store = rollout_store(40, 8, 4);
    SliceSpec spec{.context = 3, .mode = SliceMode::cross_episode, .masking = Masking::zero};
    AgentBundle b = AgentBundle::make(tiny_gpt(SharingMode::separate), 6);
    for (auto& l : b.gpt.q1_head.layers) {
        std::fill(l.w.data().begin(), l.w.data().end(), 0.0);
        std::fill(l.b.data().begin(), l.b.data().end(), 0.0);
    }
    auto actor_params = b.actor_group();
    const auto before = snapshot(actor_params);
    Rng rng(2);
    SequenceBatch batch = sample_batch(store, spec, 8, rng);
    UpdateStats st = actor_update(b, batch);
    REQUIRE(st.grad_norm == 0.0);
    REQUIRE(snapshot(actor_params) == before);
}

TEST_CASE("every_token at C=1 degenerates to last_token exactly") {
    EpisodeStore store = rollout_store(30, 6, 8);
    AgentConfig cfg = tiny_gpt(SharingMode::separate, Strategy::obs_only, 1);
    AgentBundle b1 = AgentBundle::make(cfg, 42);
    AgentBundle b2 = AgentBundle::make(cfg, 42);

    SliceSpec last{.context = 1, .mode = SliceMode::cross_episode,
                   .supervision = Supervision::last_token};
    SliceSpec every_spec{.context = 1, .mode = SliceMode::cross_episode,
                   .supervision = Supervision::every_token};
    Rng ra(3), rb(3);
    SequenceBatch batch_last = sample_batch(store, last, 8, ra);
    SequenceBatch batch_every = sample_batch(store, every_spec, 8, rb);

    Rng ua(4), ub(4);
    UpdateStats s1 = critic_update(b1, batch_last, ua);
    UpdateStats s2 = critic_update(b2, batch_every, ub);
    REQUIRE(s1.loss == s2.loss);
    REQUIRE(s1.grad_norm == s2.grad_norm);
    UpdateStats a1 = actor_update(b1, batch_last);
    UpdateStats a2 = actor_update(b2, batch_every);
    REQUIRE(a1.loss == a2.loss);
    REQUIRE(snapshot(b1.online_params.items) == snapshot(b2.online_params.items));
}

TEST_CASE("global_grad_norm fixtures") {
    Tensor a = Tensor::from({2}, {3.0, 4.0}).set_requires_grad();
    a.ensure_grad();
    a.grad() = {3.0, 4.0};
    REQUIRE(global_grad_norm(std::vector<Tensor>{a}) == 5.0);

    Tensor z = Tensor::from({3}, {1.0, 1.0, 1.0});
    z.ensure_grad();
    REQUIRE(global_grad_norm(std::vector<Tensor>{z}) == 0.0);

    Tensor b = Tensor::from({2}, {1.0, 2.0});
    b.ensure_grad();
    b.grad() = {1.0, 2.0};
    const double na = global_grad_norm(std::vector<Tensor>{a});
    const double nb = global_grad_norm(std::vector<Tensor>{b});
    const double nab = global_grad_norm(std::vector<Tensor>{a, b});
    REQUIRE(nab == Catch::Approx(std::sqrt(na * na + nb * nb)).epsilon(1e-15));

    Tensor missing = Tensor::from({1}, {1.0});
    REQUIRE_THROWS_WITH(global_grad_norm(std::vector<Tensor>{missing}),
                        Catch::Matchers::ContainsSubstring("no gradient buffer"));
}

TEST_CASE("param_count fixtures") {
    Rng rng(1);
    Linear l = Linear::make(2, 3, rng);
    ParamMap pm;
    l.register_params(pm, "l");
    REQUIRE(param_count(pm) == 9);
}

TEST_CASE("scaling presets land within 10% of the published sizes") {
    for (const auto& family : {gpt_scaling_presets(), mlp_scaling_presets()}) {
        for (const auto& p : family) {
            const double rel = std::abs(static_cast<double>(p.count - p.target_params)) /
                               static_cast<double>(p.target_params);
            INFO(p.name << " count=" << p.count << " target=" << p.target_params);
            REQUIRE(rel <= 0.10);
        }
    }
}

TEST_CASE("gpt preset counts match the hand-summed layer formulas") {
    // One decoder block at width d with feed-forward f:
    //   2 layer norms (2d each) + 4 attention projections (d^2 + d)
    //   + two FF linears (d*f + f + f*d + d)
    auto block = [](i64 d, i64 f) { return 4 * d + 4 * (d * d + d) + d * f + f + f * d + d; };
    auto backbone = [&](i64 L, i64 d, i64 f, i64 C) {
        return L * block(d, f) + C * d + 2 * d;  // + positions + final LN
    };
    const i64 layers[4] = {1, 1, 1, 6};
    const i64 dm[4] = {32, 128, 256, 256};
    auto presets = gpt_scaling_presets();
    for (int i = 0; i < 4; ++i) {
        const i64 d = dm[i];
        const i64 enc = 17 * d + d;
        const i64 actor_head = d * 6 + 6;
        const i64 q_head = (d + 6) * d + d + d * 1 + 1;
        const i64 expect =
            2 * (backbone(layers[i], d, 256, 10) + enc) + actor_head + 2 * q_head;
        REQUIRE(presets[static_cast<size_t>(i)].count == expect);
    }
}

TEST_CASE("cross-attention and interleaved agents run end to end") {
    EpisodeStore store = rollout_store(50, 10, 12);
    SliceSpec spec{.context = 4, .mode = SliceMode::cross_episode, .masking = Masking::first_obs};
    for (Strategy s : {Strategy::interleaved, Strategy::embed_concat, Strategy::cross_attn_ao,
                       Strategy::cross_attn_oa}) {
        AgentConfig cfg = tiny_gpt(SharingMode::separate, s, 4);
        AgentBundle b = AgentBundle::make(cfg, 21);
        Rng rng(6);
        SequenceBatch batch = sample_batch(store, spec, 4, rng);
        UpdateStats cs = critic_update(b, batch, rng);
        REQUIRE(std::isfinite(cs.loss));
        UpdateStats as = actor_update(b, batch);
        REQUIRE(std::isfinite(as.loss));
        b.soft_update_targets();
        HistoryWindow w = make_window(store, store.appended() - 1, spec);
        Rng ar(7);
        const auto a = act(b, w, false, ar);
        REQUIRE(a.size() == 1);
        REQUIRE(std::isfinite(a[0]));
    }
}

TEST_CASE("mlp agent sharing modes and updates") {
    EpisodeStore store = rollout_store(40, 8, 9);
    SliceSpec spec{.context = 1, .mode = SliceMode::cross_episode};
    AgentConfig cfg;
    cfg.kind = BackboneKind::mlp;
    cfg.sharing = SharingMode::shared_frozen;
    cfg.mlp = MlpAgentConfig{.encoder_width = 16, .hidden = {16, 16}};
    cfg.td3.batch_size = 8;
    cfg.context = 1;
    cfg.obs_dim = 3;
    cfg.act_dim = 1;
    AgentBundle b = AgentBundle::make(cfg, 31);

    auto enc = b.params_with_prefixes({"online.actor.encoder"});
    const auto enc_before = snapshot(enc);
    Rng rng(8);
    for (int i = 0; i < 5; ++i) {
        SequenceBatch batch = sample_batch(store, spec, 8, rng);
        critic_update(b, batch, rng);
    }
    REQUIRE(snapshot(enc) == enc_before);  // frozen encoder under critic steps

    SequenceBatch batch = sample_batch(store, spec, 8, rng);
    actor_update(b, batch);
    REQUIRE(snapshot(enc) != enc_before);  // actor step updates the shared encoder
}
