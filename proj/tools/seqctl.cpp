// seqctl: config-driven experiment CLI.
//
//   train          run TD3 training per config file (one run per seed)
//   eval           evaluate a checkpoint over fixed evaluation seeds
//   export-hidden  dump (final hidden state, action) rows for offline t-SNE
//   grad-probe     train under each backbone-sharing mode, logging gradient
//                  norms per update
//   slice-probe    run the four slicing/masking variants and their early-step
//                  reward probes
//
// SEQCTL_OUT overrides the output directory for every subcommand.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "seqctl/harness.hpp"

using namespace seqctl;
namespace fs = std::filesystem;

namespace {

ExperimentConfig load_config(const std::string& path) {
    if (path.empty()) {
        return ExperimentConfig::from_tree(ConfigTree::parse(""));
    }
    return ExperimentConfig::from_file(path);
}

void apply_out_override(ExperimentConfig& cfg, const std::string& out_flag) {
    if (const char* env = std::getenv("SEQCTL_OUT"); env != nullptr && *env != '\0') {
        cfg.out_dir = env;
    }
    if (!out_flag.empty()) {
        cfg.out_dir = out_flag;
    }
}

int cmd_train(const std::string& config_path, i64 seed, const std::string& out_flag, i64 steps,
              i64 eval_seeds) {
    ExperimentConfig cfg = load_config(config_path);
    apply_out_override(cfg, out_flag);
    if (steps > 0) {
        cfg.total_steps = steps;
    }
    if (eval_seeds > 0) {
        cfg.eval_seed_count = eval_seeds;
    }
    if (seed >= 0) {
        cfg.run_seeds = {seed};
    }
    fs::create_directories(cfg.out_dir);
    cfg.save(cfg.out_dir + "/config.toml");

    int status = 0;
    for (i64 s : cfg.run_seeds) {
        TrainOutcome out = run_training(cfg, static_cast<u64>(s));
        if (out.ok) {
            std::cout << "seed " << s << ": final return " << out.final_mean << " +/- "
                      << out.final_sem << "  metrics " << out.metrics_path << "  checkpoint "
                      << out.checkpoint_path << "\n";
        } else {
            std::cerr << "seed " << s << ": run halted: " << out.error << " (partial metrics at "
                      << out.metrics_path << ")\n";
            status = 1;
        }
    }
    return status;
}

int cmd_eval(const std::string& config_path, const std::string& ckpt, i64 seeds) {
    ExperimentConfig cfg = load_config(config_path);
    AgentBundle bundle = AgentBundle::make(cfg.agent, 0);
    load_checkpoint(bundle.online_params, ckpt);
    bundle.hard_copy_to_targets();
    auto env = make_env(cfg.env_name, cfg.mask);
    EvalResult res = evaluate(bundle, *env, seeds > 0 ? seeds : cfg.eval_seed_count, cfg.slice);
    std::cout << "mean_return " << res.mean << " sem " << res.sem << " episodes "
              << res.returns.size() << "\n";
    return 0;
}

int cmd_export_hidden(const std::string& config_path, const std::string& ckpt, i64 episodes,
                      const std::string& out_file) {
    ExperimentConfig cfg = load_config(config_path);
    AgentBundle bundle = AgentBundle::make(cfg.agent, 0);
    load_checkpoint(bundle.online_params, ckpt);
    bundle.hard_copy_to_targets();
    auto env = make_env(cfg.env_name, cfg.mask);
    export_hidden_states(bundle, *env, episodes, cfg.slice, out_file);
    std::cout << "wrote " << out_file << "\n";
    return 0;
}

void write_grad_norm_csv(const AgentBundle& b, const std::string& path) {
    std::ofstream out(path);
    check(out.good(), "grad-probe: cannot open " + path);
    out << "update,critic_grad_norm,actor_grad_norm\n";
    char buf[32];
    for (size_t i = 0; i < b.critic_grad_log.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", b.critic_grad_log[i]);
        out << i << ',' << buf << ',';
        // actor updates run every policy_delay critic steps
        const size_t delay = static_cast<size_t>(b.cfg.td3.policy_delay);
        if ((i + 1) % delay == 0 && i / delay < b.actor_grad_log.size()) {
            std::snprintf(buf, sizeof buf, "%.17g", b.actor_grad_log[i / delay]);
            out << buf;
        }
        out << "\n";
    }
}

int cmd_grad_probe(const std::string& config_path, const std::string& modes_csv, i64 steps,
                   i64 seed, const std::string& out_flag) {
    ExperimentConfig cfg = load_config(config_path);
    apply_out_override(cfg, out_flag);
    if (steps > 0) {
        cfg.total_steps = steps;
    }
    fs::create_directories(cfg.out_dir);

    std::vector<std::string> modes;
    std::istringstream ss(modes_csv);
    std::string m;
    while (std::getline(ss, m, ',')) {
        modes.push_back(m);
    }
    for (const std::string& mode : modes) {
        ExperimentConfig c = cfg;
        c.agent.sharing = sharing_mode_from_string(mode);
        c.out_dir = cfg.out_dir + "/" + mode;
        TrainOutcome out = run_training(c, static_cast<u64>(seed));
        const std::string path = cfg.out_dir + "/grad_norms_" + mode + ".csv";
        write_grad_norm_csv(*out.bundle, path);
        double max_norm = 0.0;
        for (double g : out.bundle->critic_grad_log) {
            max_norm = std::max(max_norm, g);
        }
        std::cout << mode << ": " << out.bundle->critic_grad_log.size()
                  << " critic updates, max critic grad norm " << max_norm << ", log " << path
                  << "\n";
        if (!out.ok) {
            std::cerr << mode << ": run halted early: " << out.error << "\n";
        }
    }
    return 0;
}

int cmd_slice_probe(const std::string& config_path, const std::string& env_name, i64 context,
                    i64 steps, i64 seed, i64 probe_steps, const std::string& out_flag) {
    ExperimentConfig cfg = load_config(config_path);
    apply_out_override(cfg, out_flag);
    if (!env_name.empty()) {
        cfg.env_name = env_name;
        cfg.finalize_dims();
    }
    if (context > 0) {
        cfg.agent.context = context;
        cfg.slice.context = context;
    }
    if (steps > 0) {
        cfg.total_steps = steps;
    }
    fs::create_directories(cfg.out_dir);

    struct Variant {
        const char* name;
        SliceMode mode;
        Masking masking;
        Supervision supervision;
    };
    const Variant variants[] = {
        {"within", SliceMode::within_episode, Masking::none, Supervision::last_token},
        {"cross-none", SliceMode::cross_episode, Masking::none, Supervision::last_token},
        {"cross-zero", SliceMode::cross_episode, Masking::zero, Supervision::last_token},
        {"cross-firstobs", SliceMode::cross_episode, Masking::first_obs,
         Supervision::last_token},
    };
    const i64 k = probe_steps > 0 ? probe_steps : cfg.agent.context + 2;
    int status = 0;
    for (const Variant& v : variants) {
        ExperimentConfig c = cfg;
        c.slice.mode = v.mode;
        c.slice.masking = v.masking;
        c.slice.supervision = v.supervision;
        c.out_dir = cfg.out_dir + "/" + v.name;
        TrainOutcome out = run_training(c, static_cast<u64>(seed));
        if (!out.ok) {
            std::cerr << v.name << ": run halted: " << out.error << "\n";
            status = 1;
            continue;
        }
        auto env = make_env(c.env_name, c.mask);
        const auto early = early_step_reward(*out.bundle, *env, c.eval_seed_count, k, c.slice);
        const std::string path = cfg.out_dir + "/early_rewards_" + v.name + ".csv";
        std::ofstream probe(path);
        probe << "step,mean_reward\n";
        char buf[32];
        for (size_t t = 0; t < early.size(); ++t) {
            std::snprintf(buf, sizeof buf, "%.17g", early[t]);
            probe << t << ',' << buf << "\n";
        }
        std::cout << v.name << ": final return " << out.final_mean << " +/- " << out.final_sem
                  << ", early-step probe " << path << "\n";
    }
    return status;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"seqctl: transformer TD3 experiments on toy continuous control"};
    app.require_subcommand(1);

    std::string config_path, out_flag, ckpt, out_file, env_name;
    std::string modes = "separate,shared_frozen,shared_unfrozen";
    i64 seed = -1, steps = 0, eval_seeds = 0, episodes = 10, context = 0, probe_steps = 0;
    i64 probe_seed = 1;

    auto* train = app.add_subcommand("train", "run training per config");
    train->add_option("--config", config_path, "config file (TOML)")->required();
    train->add_option("--seed", seed, "override: run only this seed");
    train->add_option("--out", out_flag, "output directory");
    train->add_option("--steps", steps, "override total env steps");
    train->add_option("--eval-seeds", eval_seeds, "override evaluation seed count");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--config", config_path, "config file (TOML)")->required();
    eval->add_option("--checkpoint", ckpt, "checkpoint JSON")->required();
    eval->add_option("--seeds", eval_seeds, "evaluation seed count");

    auto* exph = app.add_subcommand("export-hidden", "export (hidden state, action) rows");
    exph->add_option("--config", config_path, "config file (TOML)")->required();
    exph->add_option("--checkpoint", ckpt, "checkpoint JSON")->required();
    exph->add_option("--episodes", episodes, "number of evaluation episodes");
    exph->add_option("--out", out_file, "output CSV path")->required();

    auto* gp = app.add_subcommand("grad-probe", "gradient norms per sharing mode");
    gp->add_option("--config", config_path, "base config (optional)");
    gp->add_option("--modes", modes, "comma-separated sharing modes");
    gp->add_option("--steps", steps, "env steps per mode");
    gp->add_option("--seed", probe_seed, "run seed");
    gp->add_option("--out", out_flag, "output directory");

    auto* sp = app.add_subcommand("slice-probe", "four-way slicing comparison");
    sp->add_option("--config", config_path, "base config (optional)");
    sp->add_option("--env", env_name, "environment name");
    sp->add_option("--context", context, "context length C");
    sp->add_option("--steps", steps, "env steps per variant");
    sp->add_option("--seed", probe_seed, "run seed");
    sp->add_option("--probe-steps", probe_steps, "early-reward probe length");
    sp->add_option("--out", out_flag, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(train)) {
            return cmd_train(config_path, seed, out_flag, steps, eval_seeds);
        }
        if (app.got_subcommand(eval)) {
            return cmd_eval(config_path, ckpt, eval_seeds);
        }
        if (app.got_subcommand(exph)) {
            return cmd_export_hidden(config_path, ckpt, episodes, out_file);
        }
        if (app.got_subcommand(gp)) {
            return cmd_grad_probe(config_path, modes, steps, probe_seed, out_flag);
        }
        if (app.got_subcommand(sp)) {
            return cmd_slice_probe(config_path, env_name, context, steps, probe_seed, probe_steps,
                                   out_flag);
        }
    } catch (const std::exception& e) {
        std::cerr << "seqctl: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
