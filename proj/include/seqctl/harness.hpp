#pragma once

// Experiment harness: the online TD3 training loop, the evaluation protocol
// (fixed eval seeds disjoint from run seeds), the early-step reward probe,
// and hidden-state export. Metrics stream to CSV with the fixed column order
//   step,mean_return,sem,actor_grad_norm,critic_grad_norm,critic_loss,actor_loss,wall_ms
// Every column except wall_ms is bit-reproducible for equal (config, seed).

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "seqctl/checkpoint.hpp"
#include "seqctl/config.hpp"

namespace seqctl {

inline constexpr u64 kEvalSeedBase = 10'000;  // disjoint from run seeds {1..}

// Rolling view of the current episode used for acting and evaluation; steps
// before the episode start are filled with the run's masking rule.
class EpisodeHistory {
public:
    EpisodeHistory(i64 obs_dim, i64 act_dim) : od_(obs_dim), ad_(act_dim) {}

    void start(std::vector<double> first_obs) {
        obs_.clear();
        act_.clear();
        rew_.clear();
        obs_.push_back(std::move(first_obs));
    }

    void record(const std::vector<double>& action, double reward, std::vector<double> next_obs) {
        act_.push_back(action);
        rew_.push_back(reward);
        obs_.push_back(std::move(next_obs));
    }

    i64 steps_seen() const { return static_cast<i64>(obs_.size()); }

    // Window ending at the latest observation.
    HistoryWindow window(i64 context, Masking masking) const {
        check(!obs_.empty(), "EpisodeHistory: start() not called");
        HistoryWindow w = HistoryWindow::empty(context, od_, ad_);
        const i64 latest = static_cast<i64>(obs_.size()) - 1;
        for (i64 n = 0; n < context; ++n) {
            const i64 s = latest - context + 1 + n;
            if (s < 0) {
                // Pre-episode slot: zeros, or the first observation of this
                // episode under first_obs masking. Content invalid either way.
                if (masking == Masking::first_obs) {
                    std::copy(obs_[0].begin(), obs_[0].end(), w.obs.begin() + n * od_);
                }
                continue;
            }
            std::copy(obs_[static_cast<size_t>(s)].begin(), obs_[static_cast<size_t>(s)].end(),
                      w.obs.begin() + n * od_);
            if (s > 0) {
                std::copy(act_[static_cast<size_t>(s - 1)].begin(),
                          act_[static_cast<size_t>(s - 1)].end(),
                          w.prev_action.begin() + n * ad_);
                w.prev_reward[static_cast<size_t>(n)] = rew_[static_cast<size_t>(s - 1)];
            }
            w.valid[static_cast<size_t>(n)] = 1;
            w.in_episode[static_cast<size_t>(n)] = 1;
        }
        return w;
    }

private:
    i64 od_, ad_;
    std::vector<std::vector<double>> obs_;
    std::vector<std::vector<double>> act_;
    std::vector<double> rew_;
};

struct EvalResult {
    double mean = 0.0;
    double sem = 0.0;
    std::vector<double> returns;
};

inline double sample_sem(const std::vector<double>& xs) {
    check(xs.size() >= 2, "sem: need at least two samples");
    double m = 0.0;
    for (double x : xs) {
        m += x;
    }
    m /= static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs) {
        ss += (x - m) * (x - m);
    }
    const double var = ss / static_cast<double>(xs.size() - 1);
    return std::sqrt(var) / std::sqrt(static_cast<double>(xs.size()));
}

// Runs one deterministic episode; returns the per-step rewards.
inline std::vector<double> rollout_episode(const AgentBundle& bundle, Env& env, u64 seed,
                                           const SliceSpec& slice) {
    NoTapeScope no_tape;
    EpisodeHistory hist(env.spec().obs_dim, env.spec().act_dim);
    hist.start(env.reset(seed));
    Rng unused(0);
    std::vector<double> rewards;
    while (true) {
        HistoryWindow w = hist.window(slice.context, slice.masking);
        const std::vector<double> a = act(bundle, w, false, unused);
        StepResult r = env.step(a);
        rewards.push_back(r.reward);
        hist.record(a, r.reward, r.obs);
        if (r.done) {
            break;
        }
    }
    return rewards;
}

// n_seeds full episodes with exploration off, eval seeds 10000+i. Pure: the
// bundle, replay and training RNG are never touched.
inline EvalResult evaluate(const AgentBundle& bundle, const Env& env_proto, i64 n_seeds,
                           const SliceSpec& slice) {
    check(n_seeds >= 2, "evaluate: need n_seeds >= 2 for the SEM");
    EvalResult res;
    for (i64 i = 0; i < n_seeds; ++i) {
        auto env = env_proto.fresh();
        const auto rewards = rollout_episode(bundle, *env, kEvalSeedBase + static_cast<u64>(i),
                                             slice);
        double ret = 0.0;
        for (double r : rewards) {
            ret += r;
        }
        res.returns.push_back(ret);
    }
    double m = 0.0;
    for (double r : res.returns) {
        m += r;
    }
    res.mean = m / static_cast<double>(res.returns.size());
    res.sem = sample_sem(res.returns);
    return res;
}

// Mean reward at each of the first k steps across n_seeds evaluation episodes.
inline std::vector<double> early_step_reward(const AgentBundle& bundle, const Env& env_proto,
                                             i64 n_seeds, i64 k_steps, const SliceSpec& slice) {
    check(k_steps >= 1, "early_step_reward: k_steps must be >= 1");
    std::vector<double> acc(static_cast<size_t>(k_steps), 0.0);
    for (i64 i = 0; i < n_seeds; ++i) {
        auto env = env_proto.fresh();
        const auto rewards = rollout_episode(bundle, *env, kEvalSeedBase + static_cast<u64>(i),
                                             slice);
        check(static_cast<i64>(rewards.size()) >= k_steps,
              "early_step_reward: episode shorter than k_steps");
        for (i64 t = 0; t < k_steps; ++t) {
            acc[static_cast<size_t>(t)] += rewards[static_cast<size_t>(t)];
        }
    }
    for (auto& v : acc) {
        v /= static_cast<double>(n_seeds);
    }
    return acc;
}

// One row per step: final hidden state then the executed action, over
// n_episodes deterministic evaluation episodes.
inline void export_hidden_states(const AgentBundle& bundle, const Env& env_proto,
                                 i64 n_episodes, const SliceSpec& slice,
                                 const std::string& path) {
    check(bundle.cfg.kind == BackboneKind::gpt,
          "export_hidden_states: MLP agents have no sequence hidden state");
    NoTapeScope no_tape;
    std::ofstream out(path);
    check(out.good(), "export_hidden_states: cannot open " + path);
    const i64 d = bundle.cfg.transformer.d_model;
    for (i64 c = 0; c < d; ++c) {
        out << (c ? "," : "") << "h_" << c;
    }
    for (i64 c = 0; c < bundle.cfg.act_dim; ++c) {
        out << ",a_" << c;
    }
    out << "\n";
    char buf[32];
    auto put = [&](double v, bool lead_comma) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        if (lead_comma) {
            out << ',';
        }
        out << buf;
    };
    Rng unused(0);
    for (i64 ep = 0; ep < n_episodes; ++ep) {
        auto env = env_proto.fresh();
        EpisodeHistory hist(env->spec().obs_dim, env->spec().act_dim);
        hist.start(env->reset(kEvalSeedBase + static_cast<u64>(ep)));
        while (true) {
            HistoryWindow w = hist.window(slice.context, slice.masking);
            WindowBatch wb = WindowBatch::stack({w});
            Tensor h = select_last_token(bundle.gpt.actor_bb.forward(wb).hidden);
            const std::vector<double> a = act(bundle, w, false, unused);
            for (i64 c = 0; c < d; ++c) {
                put(h.data()[static_cast<size_t>(c)], c > 0);
            }
            for (i64 c = 0; c < bundle.cfg.act_dim; ++c) {
                put(a[static_cast<size_t>(c)], true);
            }
            out << "\n";
            StepResult r = env->step(a);
            hist.record(a, r.reward, r.obs);
            if (r.done) {
                break;
            }
        }
    }
}

struct TrainOutcome {
    bool ok = false;
    std::string error;
    std::string metrics_path;
    std::string checkpoint_path;
    double final_mean = 0.0;
    double final_sem = 0.0;
    std::unique_ptr<AgentBundle> bundle;
    std::unique_ptr<EpisodeStore> store;
};

// The online loop: act with exploration (uniform random during warm-up),
// append to replay, one critic step per env step after learning_starts, actor
// and target updates every policy_delay critic steps, periodic evaluation.
inline TrainOutcome run_training(const ExperimentConfig& config, u64 seed) {
    ExperimentConfig cfg = config;
    cfg.finalize_dims();
    cfg.agent.validate();
    cfg.slice.validate();

    TrainOutcome outcome;
    std::filesystem::create_directories(cfg.out_dir);
    const std::string metrics_path =
        cfg.out_dir + "/metrics_seed" + std::to_string(seed) + ".csv";
    outcome.metrics_path = metrics_path;

    auto env = make_env(cfg.env_name, cfg.mask);
    auto bundle = std::make_unique<AgentBundle>(AgentBundle::make(cfg.agent, seed));
    auto store = std::make_unique<EpisodeStore>(cfg.replay_capacity, cfg.agent.obs_dim,
                                                cfg.agent.act_dim);
    Rng train_rng(seed * 0x9E3779B9u + 1);

    std::ofstream metrics(metrics_path);
    check(metrics.good(), "run_training: cannot open " + metrics_path);
    metrics << "step,mean_return,sem,actor_grad_norm,critic_grad_norm,critic_loss,actor_loss,"
               "wall_ms\n";
    char buf[32];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };

    const auto t0 = std::chrono::steady_clock::now();
    EpisodeHistory hist(cfg.agent.obs_dim, cfg.agent.act_dim);
    i64 episode_index = 0;
    std::vector<double> cur_obs = env->reset(seed * 1'000'003ull + static_cast<u64>(episode_index));
    hist.start(cur_obs);

    // Telemetry accumulators between metrics rows.
    double sum_cg = 0, sum_ag = 0, sum_cl = 0, sum_al = 0;
    i64 n_c = 0, n_a = 0;

    auto write_row = [&](i64 step) {
        const EvalResult ev = evaluate(*bundle, *env, cfg.eval_seed_count, cfg.slice);
        const double wall =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();
        metrics << step << ',' << num(ev.mean) << ',' << num(ev.sem) << ','
                << num(n_a > 0 ? sum_ag / static_cast<double>(n_a) : 0.0) << ','
                << num(n_c > 0 ? sum_cg / static_cast<double>(n_c) : 0.0) << ','
                << num(n_c > 0 ? sum_cl / static_cast<double>(n_c) : 0.0) << ','
                << num(n_a > 0 ? sum_al / static_cast<double>(n_a) : 0.0) << ','
                << num(wall) << "\n";
        metrics.flush();
        sum_cg = sum_ag = sum_cl = sum_al = 0;
        n_c = n_a = 0;
        outcome.final_mean = ev.mean;
        outcome.final_sem = ev.sem;
    };

    try {
        for (i64 step = 1; step <= cfg.total_steps; ++step) {
            std::vector<double> action(static_cast<size_t>(cfg.agent.act_dim));
            if (step <= cfg.agent.td3.learning_starts) {
                for (auto& a : action) {
                    a = train_rng.uniform(cfg.agent.action_low, cfg.agent.action_high);
                }
            } else {
                action = act(*bundle, hist.window(cfg.agent.context, cfg.slice.masking), true,
                             train_rng);
            }
            StepResult r = env->step(action);
            store->append(cur_obs, action, r.reward, r.obs, r.done, r.terminal);
            hist.record(action, r.reward, r.obs);
            if (r.done) {
                episode_index += 1;
                cur_obs = env->reset(seed * 1'000'003ull + static_cast<u64>(episode_index));
                hist.start(cur_obs);
            } else {
                cur_obs = r.obs;
            }

            if (step > cfg.agent.td3.learning_starts) {
                bool have_data = true;
                SequenceBatch batch;
                try {
                    batch = sample_batch(*store, cfg.slice, cfg.agent.td3.batch_size, train_rng);
                } catch (const std::runtime_error&) {
                    have_data = false;  // insufficient data; keep collecting
                }
                if (have_data) {
                    const UpdateStats cs = critic_update(*bundle, batch, train_rng);
                    sum_cg += cs.grad_norm;
                    sum_cl += cs.loss;
                    n_c += 1;
                    if (bundle->critic_steps % cfg.agent.td3.policy_delay == 0) {
                        const UpdateStats as = actor_update(*bundle, batch);
                        sum_ag += as.grad_norm;
                        sum_al += as.loss;
                        n_a += 1;
                        bundle->soft_update_targets();
                    }
                }
            }

            if (step % cfg.eval_interval == 0 || step == cfg.total_steps) {
                write_row(step);
            }
        }
        const std::string ckpt = cfg.out_dir + "/checkpoint_seed" + std::to_string(seed) + ".json";
        save_checkpoint(bundle->online_params, ckpt);
        outcome.checkpoint_path = ckpt;
        outcome.ok = true;
    } catch (const std::exception& e) {
        // Divergence or contract failure: metrics written so far survive.
        outcome.ok = false;
        outcome.error = e.what();
    }
    outcome.bundle = std::move(bundle);
    outcome.store = std::move(store);
    return outcome;
}

// The per-protocol loop: one independent run per seed in the config.
inline std::vector<TrainOutcome> run_all_seeds(const ExperimentConfig& cfg) {
    std::vector<TrainOutcome> out;
    for (i64 seed : cfg.run_seeds) {
        out.push_back(run_training(cfg, static_cast<u64>(seed)));
    }
    return out;
}

}  // namespace seqctl
