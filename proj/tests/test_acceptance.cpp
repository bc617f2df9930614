// Acceptance suite: one test case per criterion, each printing a PASS/FAIL
// line. Criteria 6-9 train real agents and dominate the runtime; the rest
// are property checks. Run via ctest or directly:
//   ./test_acceptance "[acceptance]" --durations yes

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "replay_oracle.hpp"
#include "seqctl/grad_check.hpp"
#include "seqctl/harness.hpp"

using namespace seqctl;
namespace fs = std::filesystem;

namespace {

void report(int criterion, bool pass, const std::string& what) {
    std::printf("[%s] criterion %2d: %s\n", pass ? "PASS" : "FAIL", criterion, what.c_str());
    std::fflush(stdout);
}

Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.data()) {
        v = rng.gaussian(0.0, stddev);
    }
    return t;
}

double pooled_sem(double sem_a, double sem_b) {
    return std::sqrt(sem_a * sem_a + sem_b * sem_b);
}

}  // namespace

TEST_CASE("criterion 1: gradient correctness across all blocks", "[acceptance]") {
    Rng rng(101);
    double worst = 0.0;
    auto fd = [&](const std::function<Tensor()>& f, std::vector<Tensor> ps) {
        worst = std::max(worst, grad_check(f, std::move(ps), 1e-5));
    };
    for (int trial = 0; trial < 20; ++trial) {
        const i64 rows = 2 + static_cast<i64>(rng.below(3));

        // linear
        Linear lin = Linear::make(5, 4, rng);
        Tensor xl = randn({rows, 5}, rng);
        fd([&] { return sum(mul(lin(xl), lin(xl))); }, {xl, lin.w, lin.b});

        // layer-norm
        LayerNormLayer ln = LayerNormLayer::make(6);
        Tensor xn = randn({rows, 6}, rng);
        Tensor g = randn({6}, rng, 0.4);
        Tensor b = randn({6}, rng, 0.4);
        ln.gamma = g;
        ln.beta = b;
        fd([&] { return sum(mul(ln(xn), ln(xn))); }, {xn, g, b});

        // gelu
        Tensor xg = randn({rows, 5}, rng);
        fd([&] { return sum(mul(gelu(xg), xg)); }, {xg});

        // The key-projection bias shifts every key equally, which softmax
        // cancels: its true gradient is identically zero, below the finite
        // difference noise floor. It is asserted exactly zero instead of
        // being pushed through the relative-error check.
        auto check_kbias_zero = [&](Tensor kbias, const std::function<Tensor()>& f) {
            kbias.set_requires_grad(true);
            kbias.ensure_grad();
            kbias.zero_grad();
            Tape tape;
            TapeScope scope(tape);
            tape.backward(f());
            for (double gv : kbias.grad()) {
                if (std::abs(gv) > 1e-12) {
                    worst = std::max(worst, 1.0);
                }
            }
        };

        // causal self-attention
        AttnProj pa = AttnProj::make(8, rng);
        Tensor xs = randn({3, 8}, rng);
        {
            auto f = [&] {
                Tensor o = causal_self_attention(xs, pa, 2);
                return sum(mul(o, o));
            };
            fd(f, {xs, pa.q.w, pa.q.b, pa.k.w, pa.v.w, pa.v.b, pa.o.w, pa.o.b});
            check_kbias_zero(pa.k.b, f);
        }

        // cross-attention
        AttnProj pc = AttnProj::make(8, rng);
        Tensor q = randn({2, 8}, rng);
        Tensor kv = randn({4, 8}, rng);
        {
            auto f = [&] {
                Tensor o = cross_attention(q, kv, pc, 2);
                return sum(mul(o, o));
            };
            fd(f, {q, kv, pc.q.w, pc.q.b, pc.k.w, pc.v.w, pc.v.b, pc.o.w, pc.o.b});
            check_kbias_zero(pc.k.b, f);
        }

        // full GPT block at d=8
        TransformerConfig cfg{.num_layers = 1, .num_heads = 2, .d_model = 8, .d_ff = 16,
                              .context_len = 4};
        GptBlock blk = GptBlock::make(cfg, rng);
        Tensor xb = randn({3, 8}, rng);
        {
            ParamMap pm;
            blk.register_params(pm, "b");
            std::vector<Tensor> ps = {xb};
            for (auto& [n, t] : pm.items) {
                if (n != "b.attn.wk.b") {
                    ps.push_back(t);
                }
            }
            auto f = [&] {
                Tensor o = blk.forward(xb.reshape({1, 3, 8}));
                return sum(mul(o, o));
            };
            fd(f, ps);
            check_kbias_zero(blk.attn.k.b, f);
        }

        // mlp
        Mlp mlp = Mlp::make({5, 8, 3}, Activation::relu, rng);
        Tensor xm = randn({rows, 5}, rng);
        {
            ParamMap pm;
            mlp.register_params(pm, "m");
            std::vector<Tensor> ps = {xm};
            for (auto& [n, t] : pm.items) {
                ps.push_back(t);
            }
            fd(
                [&] {
                    Tensor o = mlp.forward(xm);
                    return sum(mul(o, o));
                },
                ps);
        }
    }
    const bool pass = worst <= 1e-4;
    report(1, pass, "max grad_check relative error " + std::to_string(worst) + " (tol 1e-4)");
    REQUIRE(pass);
}

TEST_CASE("criterion 2: causality, bit-exact over 1000 random trials", "[acceptance]") {
    Rng rng(202);
    i64 violations = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const i64 heads = 1 + static_cast<i64>(rng.below(3));
        const i64 d = heads * (2 + static_cast<i64>(rng.below(3)));
        const i64 layers = 1 + static_cast<i64>(rng.below(2));
        const i64 C = 2 + static_cast<i64>(rng.below(5));
        TransformerConfig cfg{.num_layers = layers, .num_heads = heads, .d_model = d,
                              .d_ff = 2 * d, .context_len = C};
        Transformer t = Transformer::make(cfg, rng);
        Tensor tokens = randn({C, d}, rng);
        Tensor base = t.forward(tokens);
        const i64 pos = 1 + static_cast<i64>(rng.below(static_cast<u64>(C - 1)));
        Tensor pert = tokens.clone();
        for (i64 c = 0; c < d; ++c) {
            pert.data()[static_cast<size_t>(pos * d + c)] += rng.gaussian(0.0, 3.0);
        }
        Tensor out = t.forward(pert);
        for (i64 i = 0; i < pos * d; ++i) {
            if (base.data()[static_cast<size_t>(i)] != out.data()[static_cast<size_t>(i)]) {
                violations += 1;
                break;
            }
        }
    }
    const bool pass = violations == 0;
    report(2, pass, "future-token perturbation trials with prefix drift: " +
                        std::to_string(violations) + "/1000");
    REQUIRE(pass);
}

TEST_CASE("criterion 3: slicing matches the brute-force oracle on 500 stores", "[acceptance]") {
    Rng rng(303);
    i64 mismatches = 0;
    for (int trial = 0; trial < 500; ++trial) {
        const i64 cap = trial % 4 == 0 ? 30 + static_cast<i64>(rng.below(40)) : 400;
        EpisodeStore s(cap, 2, 1);
        oracle::Store o(cap, 2, 1);
        const int total = 10 + static_cast<int>(rng.below(190));
        int step = 0, len = 1 + static_cast<int>(rng.below(14));
        for (int i = 0; i < total; ++i) {
            const bool done = step == len - 1;
            std::vector<double> obs = {rng.gaussian(), rng.gaussian()};
            std::vector<double> act = {rng.gaussian()};
            std::vector<double> nxt = {rng.gaussian(), rng.gaussian()};
            const double r = rng.gaussian();
            s.append(obs, act, r, nxt, done, done && rng.below(5) == 0);
            o.append({obs, act, nxt, r, done, false});
            if (done) {
                step = 0;
                len = 1 + static_cast<int>(rng.below(14));
            } else {
                step += 1;
            }
        }
        struct V {
            SliceMode mode;
            Masking mask;
        };
        const V variants[4] = {{SliceMode::within_episode, Masking::none},
                               {SliceMode::cross_episode, Masking::none},
                               {SliceMode::cross_episode, Masking::zero},
                               {SliceMode::cross_episode, Masking::first_obs}};
        for (i64 C : {1, 2, 3, 5, 10}) {
            for (const V& v : variants) {
                SliceSpec spec{.context = C, .mode = v.mode, .masking = v.mask};
                const auto got = valid_indices(s, spec);
                if (got != o.valid(spec)) {
                    mismatches += 1;
                    continue;
                }
                for (i64 end : got) {
                    HistoryWindow gw = make_window(s, end, spec);
                    HistoryWindow ow = o.window(end, spec);
                    if (gw.obs != ow.obs || gw.prev_action != ow.prev_action ||
                        gw.prev_reward != ow.prev_reward || gw.valid != ow.valid ||
                        gw.in_episode != ow.in_episode) {
                        mismatches += 1;
                        break;
                    }
                }
            }
        }
    }
    const bool pass = mismatches == 0;
    report(3, pass, "oracle mismatches over 500 stores x 5 contexts x 4 variants: " +
                        std::to_string(mismatches));
    REQUIRE(pass);
}

namespace {
AgentConfig accept_gpt(SharingMode mode) {
    AgentConfig cfg;
    cfg.kind = BackboneKind::gpt;
    cfg.strategy = Strategy::obs_only;
    cfg.sharing = mode;
    cfg.transformer = TransformerConfig{.num_layers = 1, .num_heads = 2, .d_model = 8,
                                        .d_ff = 16, .context_len = 4};
    cfg.context = 4;
    cfg.obs_dim = 3;
    cfg.act_dim = 1;
    cfg.td3.batch_size = 8;
    return cfg;
}

EpisodeStore accept_store(u64 seed) {
    EpisodeStore store(2000, 3, 1);
    Rng rng(seed);
    int step = 0;
    for (int i = 0; i < 120; ++i) {
        const bool done = step == 11;
        store.append({rng.gaussian(), rng.gaussian(), rng.gaussian()}, {rng.uniform(-1, 1)},
                     rng.gaussian(), {rng.gaussian(), rng.gaussian(), rng.gaussian()}, done,
                     false);
        step = done ? 0 : step + 1;
    }
    return store;
}

std::vector<double> values_of(const std::vector<std::pair<std::string, Tensor>>& ps) {
    std::vector<double> all;
    for (const auto& [n, t] : ps) {
        all.insert(all.end(), t.data().begin(), t.data().end());
    }
    return all;
}
}  // namespace

TEST_CASE("criterion 4: freeze exactness across sharing modes", "[acceptance]") {
    EpisodeStore store = accept_store(404);
    SliceSpec spec{.context = 4, .mode = SliceMode::cross_episode, .masking = Masking::zero};
    bool pass = true;
    std::string detail;

    {
        AgentBundle b = AgentBundle::make(accept_gpt(SharingMode::shared_frozen), 1);
        auto bb = b.params_with_prefixes({"online.actor.backbone"});
        const auto before = values_of(bb);
        Rng rng(2);
        for (int i = 0; i < 100; ++i) {
            SequenceBatch batch = sample_batch(store, spec, 8, rng);
            critic_update(b, batch, rng);
        }
        if (values_of(bb) != before) {
            pass = false;
            detail += "shared_frozen backbone drifted; ";
        }
    }
    {
        AgentBundle b = AgentBundle::make(accept_gpt(SharingMode::shared_unfrozen), 1);
        auto bb = b.params_with_prefixes({"online.actor.backbone"});
        const auto before = values_of(bb);
        Rng rng(2);
        SequenceBatch batch = sample_batch(store, spec, 8, rng);
        critic_update(b, batch, rng);
        if (values_of(bb) == before) {
            pass = false;
            detail += "shared_unfrozen backbone frozen at step 1; ";
        }
    }
    {
        AgentBundle b = AgentBundle::make(accept_gpt(SharingMode::separate), 1);
        auto abb = b.params_with_prefixes({"online.actor.backbone"});
        auto cbb = b.params_with_prefixes({"online.critic.backbone"});
        Rng rng(2);
        SequenceBatch batch = sample_batch(store, spec, 8, rng);
        const auto a_before = values_of(abb);
        critic_update(b, batch, rng);
        if (values_of(abb) != a_before) {
            pass = false;
            detail += "separate: critic step touched actor backbone; ";
        }
        const auto c_before = values_of(cbb);
        actor_update(b, batch);
        if (values_of(cbb) != c_before) {
            pass = false;
            detail += "separate: actor step touched critic backbone; ";
        }
    }
    report(4, pass, pass ? "100 frozen critic steps bit-identical; unfrozen moves at step 1; "
                           "separate stays disjoint"
                         : detail);
    REQUIRE(pass);
}

TEST_CASE("criterion 5: TD3 arithmetic fixtures", "[acceptance]") {
    bool pass = true;
    std::string detail;

    AgentBundle b = AgentBundle::make(accept_gpt(SharingMode::separate), 11);
    auto zero_head = [](Mlp& head, double bias) {
        for (auto& l : head.layers) {
            std::fill(l.w.data().begin(), l.w.data().end(), 0.0);
            std::fill(l.b.data().begin(), l.b.data().end(), 0.0);
        }
        head.layers.back().b.data() = {bias};
    };
    zero_head(b.gpt_target.q1_head, 2.0);
    zero_head(b.gpt_target.q2_head, 3.0);
    HistoryWindow w = HistoryWindow::empty(4, 3, 1);
    Rng rng(1);
    if (td3_target(b, w, 1.0, false, rng) != 1.0 + 0.99 * 2.0) {
        pass = false;
        detail += "y != 2.98 fixture; ";
    }
    Rng rng2(2);
    if (td3_target(b, w, 0.75, true, rng2) != 0.75) {
        pass = false;
        detail += "terminal y != r; ";
    }

    // Noise clipping at 0.5: huge-sigma noise on a zero target policy with a
    // Q head that returns the action itself never exceeds gamma * 0.5.
    AgentConfig nc = accept_gpt(SharingMode::separate);
    nc.td3.policy_noise = 50.0;
    AgentBundle bn = AgentBundle::make(nc, 12);
    for (auto& [n, t] : bn.target_params.items) {
        if (n.find("actor") != std::string::npos) {
            std::fill(t.data().begin(), t.data().end(), 0.0);
        }
    }
    auto identity_q = [](Mlp& q, i64 d) {
        for (auto& l : q.layers) {
            std::fill(l.w.data().begin(), l.w.data().end(), 0.0);
            std::fill(l.b.data().begin(), l.b.data().end(), 0.0);
        }
        q.layers[0].w.data()[static_cast<size_t>(d * q.layers[0].out_dim() + 0)] = 1.0;
        q.layers[0].w.data()[static_cast<size_t>(d * q.layers[0].out_dim() + 1)] = -1.0;
        q.layers[1].w.data()[0] = 1.0;
        q.layers[1].w.data()[1] = -1.0;
    };
    identity_q(bn.gpt_target.q1_head, 8);
    identity_q(bn.gpt_target.q2_head, 8);
    Rng rn(3);
    double max_a = 0.0;
    for (int i = 0; i < 300; ++i) {
        max_a = std::max(max_a, std::abs(td3_target(bn, w, 0.0, false, rn)) / 0.99);
    }
    if (std::abs(max_a - 0.5) > 1e-9) {
        pass = false;
        detail += "noise clip bound violated (max " + std::to_string(max_a) + "); ";
    }

    Tensor online = Tensor::from({1}, {1.0});
    Tensor target = Tensor::from({1}, {0.0});
    soft_update(online, target, 0.005);
    if (target.data()[0] != 0.005) {
        pass = false;
        detail += "soft_update fixture; ";
    }
    Tensor t1 = Tensor::from({1}, {0.25});
    soft_update(online, t1, 1.0);
    Tensor t0 = Tensor::from({1}, {0.25});
    soft_update(online, t0, 0.0000001);
    if (t1.data()[0] != 1.0) {
        pass = false;
        detail += "tau=1 hard copy; ";
    }

    report(5, pass, pass ? "td3_target (2.98, terminal, clip) and soft_update fixtures exact"
                         : detail);
    REQUIRE(pass);
}

TEST_CASE("criterion 10: parameter counts match the published tiers", "[acceptance]") {
    bool pass = true;
    std::string detail = "counts ";
    for (const auto& family : {gpt_scaling_presets(), mlp_scaling_presets()}) {
        for (const auto& p : family) {
            const double rel = std::abs(static_cast<double>(p.count - p.target_params)) /
                               static_cast<double>(p.target_params);
            detail += p.name + "=" + std::to_string(p.count) + " (" +
                      std::to_string(rel * 100.0).substr(0, 4) + "%) ";
            if (rel > 0.10) {
                pass = false;
            }
        }
    }
    report(10, pass, detail);
    REQUIRE(pass);
}

TEST_CASE("criterion 11: metrics reproducibility", "[acceptance]") {
    const std::string d1 = "accept_repro_1", d2 = "accept_repro_2";
    fs::remove_all(d1);
    fs::remove_all(d2);
    ExperimentConfig c;
    c.env_name = "pointmass";
    c.agent.kind = BackboneKind::gpt;
    c.agent.strategy = Strategy::obs_only;
    c.agent.sharing = SharingMode::shared_frozen;
    c.agent.transformer = TransformerConfig{.num_layers = 1, .num_heads = 2, .d_model = 16,
                                            .d_ff = 32, .context_len = 10};
    c.agent.context = 10;
    c.agent.td3.batch_size = 16;
    c.agent.td3.learning_starts = 100;
    c.slice = SliceSpec{.context = 10, .mode = SliceMode::cross_episode,
                        .masking = Masking::first_obs};
    c.replay_capacity = 10'000;
    c.total_steps = 400;
    c.eval_interval = 200;
    c.eval_seed_count = 4;
    c.out_dir = d1;
    TrainOutcome a = run_training(c, 1);
    c.out_dir = d2;
    TrainOutcome b = run_training(c, 1);

    auto slurp = [](const std::string& p) {
        std::ifstream in(p);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    auto strip_wall = [](const std::string& csv) {
        std::stringstream out;
        std::istringstream in(csv);
        std::string line;
        while (std::getline(in, line)) {
            out << line.substr(0, line.rfind(',')) << "\n";
        }
        return out.str();
    };
    // wall_ms is physical time and cannot reproduce; every other byte must.
    const bool pass = a.ok && b.ok &&
                      strip_wall(slurp(a.metrics_path)) == strip_wall(slurp(b.metrics_path)) &&
                      slurp(a.checkpoint_path) == slurp(b.checkpoint_path);
    report(11, pass,
           "two identical (config, seed) runs: metrics byte-identical modulo wall_ms column, "
           "checkpoints byte-identical");
    fs::remove_all(d1);
    fs::remove_all(d2);
    REQUIRE(pass);
}
