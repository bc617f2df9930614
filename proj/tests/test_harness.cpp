#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "seqctl/harness.hpp"

using namespace seqctl;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_config(const std::string& out_dir) {
    ExperimentConfig c;
    c.env_name = "pointmass";
    c.agent.kind = BackboneKind::gpt;
    c.agent.strategy = Strategy::obs_only;
    c.agent.sharing = SharingMode::separate;
    c.agent.transformer = TransformerConfig{.num_layers = 1, .num_heads = 2, .d_model = 8,
                                            .d_ff = 16, .context_len = 3};
    c.agent.context = 3;
    c.agent.td3.batch_size = 4;
    c.agent.td3.learning_starts = 20;
    c.slice = SliceSpec{.context = 3, .mode = SliceMode::cross_episode,
                        .masking = Masking::first_obs};
    c.replay_capacity = 5'000;
    c.total_steps = 120;
    c.eval_interval = 60;
    c.eval_seed_count = 3;
    c.run_seeds = {1, 2, 3};
    c.out_dir = out_dir;
    c.finalize_dims();
    return c;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Strips the (wall-clock) last column from every CSV row.
std::string drop_wall_column(const std::string& csv) {
    std::stringstream out;
    std::istringstream in(csv);
    std::string line;
    while (std::getline(in, line)) {
        out << line.substr(0, line.rfind(',')) << "\n";
    }
    return out.str();
}

}  // namespace

TEST_CASE("sem fixtures") {
    REQUIRE(sample_sem({1.0, 2.0, 3.0}) == Catch::Approx(1.0 / std::sqrt(3.0)).epsilon(1e-12));
    REQUIRE(sample_sem({4.0, 4.0, 4.0, 4.0}) == 0.0);
    REQUIRE_THROWS(sample_sem({1.0}));
}

TEST_CASE("config defaults carry the published hyperparameters") {
    ExperimentConfig c = ExperimentConfig::from_tree(ConfigTree::parse(""));
    REQUIRE(c.agent.td3.gamma == 0.99);
    REQUIRE(c.agent.td3.tau == 0.005);
    REQUIRE(c.agent.td3.policy_noise == 0.2);
    REQUIRE(c.agent.td3.noise_clip == 0.5);
    REQUIRE(c.agent.td3.exploration_noise == 0.1);
    REQUIRE(c.agent.td3.batch_size == 256);
    REQUIRE(c.agent.td3.lr == 3e-4);
    REQUIRE(c.agent.td3.learning_starts == 25'000);
    REQUIRE(c.replay_capacity == 1'500'000);
    REQUIRE(c.agent.transformer.num_layers == 1);
    REQUIRE(c.agent.transformer.num_heads == 4);
    REQUIRE(c.agent.transformer.d_model == 128);
    REQUIRE(c.agent.transformer.d_ff == 256);
    REQUIRE(c.agent.transformer.dropout == 0.0);
    REQUIRE(c.agent.context == 10);
    REQUIRE(c.eval_seed_count == 100);
    REQUIRE(c.run_seeds == std::vector<i64>{1, 2, 3});
}

TEST_CASE("config round-trips through the serialized form") {
    ExperimentConfig c = small_config("rt_out");
    c.env_name = "pendulum";
    c.mask = PomdpMask::hide_velocity;
    c.agent.strategy = Strategy::embed_concat;
    c.agent.td3.lr = 1.25e-4;
    c.run_seeds = {7, 9};
    const std::string text = c.to_tree().serialize();
    ExperimentConfig back = ExperimentConfig::from_tree(ConfigTree::parse(text));
    REQUIRE(back.to_tree() == c.to_tree());
    // And the canonical text itself is a fixed point.
    REQUIRE(back.to_tree().serialize() == text);
}

TEST_CASE("config parser handles comments, sections and arrays") {
    const std::string text = R"(# experiment
[env]
name = "pendulum"   # the swing-up task
mask = "hide_velocity"
[run]
seeds = [4, 5]
total_steps = 500
[td3]
lr = 0.0003
)";
    ExperimentConfig c = ExperimentConfig::from_tree(ConfigTree::parse(text));
    REQUIRE(c.env_name == "pendulum");
    REQUIRE(c.mask == PomdpMask::hide_velocity);
    REQUIRE(c.run_seeds == std::vector<i64>{4, 5});
    REQUIRE(c.total_steps == 500);
    REQUIRE(c.agent.td3.lr == 0.0003);
    REQUIRE_THROWS_WITH(ConfigTree::parse("key"), Catch::Matchers::ContainsSubstring("key = value"));
    REQUIRE_THROWS_WITH(ConfigTree::parse("x = \"unterminated"),
                        Catch::Matchers::ContainsSubstring("unterminated"));
}

TEST_CASE("training loop produces metrics, checkpoint, and respects warm-up") {
    const std::string dir = "harness_test_runs_a";
    fs::remove_all(dir);
    ExperimentConfig c = small_config(dir);
    c.total_steps = 60;
    c.agent.td3.learning_starts = 60;  // exactly the whole run
    TrainOutcome out = run_training(c, 1);
    REQUIRE(out.ok);
    REQUIRE(out.bundle->critic_steps == 0);  // zero gradient steps taken
    const std::string csv = slurp(out.metrics_path);
    REQUIRE(csv.rfind("step,mean_return,sem,actor_grad_norm,critic_grad_norm,critic_loss,"
                      "actor_loss,wall_ms\n", 0) == 0);
    // Exploration-phase rows have zero loss/grad columns.
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    i64 rows = 0;
    while (std::getline(in, line)) {
        rows += 1;
        REQUIRE(line.find(",0,0,0,0,") != std::string::npos);
    }
    REQUIRE(rows == 1);
    fs::remove_all(dir);
}

TEST_CASE("within-episode sampler shortfall keeps the loop collecting") {
    const std::string dir = "harness_test_runs_b";
    fs::remove_all(dir);
    ExperimentConfig c = small_config(dir);
    c.agent.context = 8;
    c.slice = SliceSpec{.context = 8, .mode = SliceMode::within_episode};
    c.agent.transformer.context_len = 8;
    c.agent.td3.learning_starts = 0;  // sampler starves for the first steps
    c.total_steps = 30;
    c.eval_interval = 30;
    TrainOutcome out = run_training(c, 2);
    REQUIRE(out.ok);
    // Steps 1..7 starve the within-episode sampler (first window needs
    // step_in_episode >= 7); training proceeds on every step after.
    REQUIRE(out.bundle->critic_steps == 23);
    fs::remove_all(dir);
}

TEST_CASE("three seeds produce three metrics files") {
    const std::string dir = "harness_test_runs_c";
    fs::remove_all(dir);
    ExperimentConfig c = small_config(dir);
    c.total_steps = 40;
    c.eval_interval = 40;
    c.agent.td3.learning_starts = 40;
    auto outcomes = run_all_seeds(c);
    REQUIRE(outcomes.size() == 3);
    for (i64 seed : {1, 2, 3}) {
        REQUIRE(fs::exists(dir + "/metrics_seed" + std::to_string(seed) + ".csv"));
    }
    fs::remove_all(dir);
}

TEST_CASE("policy delay schedules actor steps at every second critic step") {
    const std::string dir = "harness_test_runs_d";
    fs::remove_all(dir);
    ExperimentConfig c = small_config(dir);
    c.agent.td3.learning_starts = 5;
    c.total_steps = 45;
    c.eval_interval = 45;
    TrainOutcome out = run_training(c, 3);
    REQUIRE(out.ok);
    REQUIRE(out.bundle->critic_steps == 40);
    REQUIRE(out.bundle->actor_steps == 20);  // critic steps 2,4,...,40
    fs::remove_all(dir);
}

TEST_CASE("metrics are byte-identical across reruns apart from wall clock") {
    const std::string d1 = "harness_test_runs_e1", d2 = "harness_test_runs_e2";
    fs::remove_all(d1);
    fs::remove_all(d2);
    ExperimentConfig c = small_config(d1);
    c.total_steps = 100;
    c.eval_interval = 50;
    c.agent.td3.learning_starts = 30;
    TrainOutcome a = run_training(c, 5);
    c.out_dir = d2;
    TrainOutcome b = run_training(c, 5);
    REQUIRE(a.ok);
    REQUIRE(b.ok);
    REQUIRE(drop_wall_column(slurp(a.metrics_path)) == drop_wall_column(slurp(b.metrics_path)));
    // Checkpoints are fully deterministic.
    REQUIRE(slurp(a.checkpoint_path) == slurp(b.checkpoint_path));
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST_CASE("evaluate is pure and deterministic") {
    const std::string dir = "harness_test_runs_f";
    fs::remove_all(dir);
    ExperimentConfig c = small_config(dir);
    c.total_steps = 50;
    c.eval_interval = 50;
    c.agent.td3.learning_starts = 10;
    TrainOutcome out = run_training(c, 7);
    REQUIRE(out.ok);
    auto env = make_env(c.env_name, c.mask);

    std::vector<double> before;
    for (const auto& [n, t] : out.bundle->online_params.items) {
        before.insert(before.end(), t.data().begin(), t.data().end());
    }
    EvalResult e1 = evaluate(*out.bundle, *env, 4, c.slice);
    EvalResult e2 = evaluate(*out.bundle, *env, 4, c.slice);
    REQUIRE(e1.returns == e2.returns);
    std::vector<double> after;
    for (const auto& [n, t] : out.bundle->online_params.items) {
        after.insert(after.end(), t.data().begin(), t.data().end());
    }
    REQUIRE(before == after);

    // returns [1,2,3] style SEM sanity on the real result
    REQUIRE(e1.sem >= 0.0);
    fs::remove_all(dir);
}

TEST_CASE("early-step rewards with one seed equal that episode's first rewards") {
    const std::string dir = "harness_test_runs_g";
    fs::remove_all(dir);
    ExperimentConfig c = small_config(dir);
    c.total_steps = 30;
    c.eval_interval = 30;
    c.agent.td3.learning_starts = 30;
    TrainOutcome out = run_training(c, 9);
    REQUIRE(out.ok);
    auto env = make_env(c.env_name, c.mask);
    const auto early = early_step_reward(*out.bundle, *env, 1, 12, c.slice);
    REQUIRE(early.size() == 12);
    auto env2 = make_env(c.env_name, c.mask);
    const auto rewards = rollout_episode(*out.bundle, *env2, kEvalSeedBase, c.slice);
    for (size_t t = 0; t < 12; ++t) {
        REQUIRE(early[t] == rewards[t]);
    }
    fs::remove_all(dir);
}

TEST_CASE("hidden-state export writes one row per step and is reproducible") {
    const std::string dir = "harness_test_runs_h";
    fs::remove_all(dir);
    ExperimentConfig c = small_config(dir);
    c.total_steps = 25;
    c.eval_interval = 25;
    c.agent.td3.learning_starts = 25;
    TrainOutcome out = run_training(c, 11);
    REQUIRE(out.ok);
    auto env = make_env(c.env_name, c.mask);
    const std::string f1 = dir + "/hidden1.csv", f2 = dir + "/hidden2.csv";
    export_hidden_states(*out.bundle, *env, 2, c.slice, f1);
    export_hidden_states(*out.bundle, *env, 2, c.slice, f2);
    const std::string text = slurp(f1);
    REQUIRE(text == slurp(f2));

    std::istringstream in(text);
    std::string header;
    std::getline(in, header);
    REQUIRE(header.rfind("h_0,h_1", 0) == 0);
    REQUIRE(header.find("h_7,a_0") != std::string::npos);
    i64 rows = 0;
    std::string line;
    while (std::getline(in, line)) {
        rows += !line.empty();
    }
    REQUIRE(rows == 2 * 64);  // two point-mass episodes of length 64

    // MLP agents are rejected: no sequence hidden state to export.
    ExperimentConfig mc = small_config(dir);
    mc.agent.kind = BackboneKind::mlp;
    mc.agent.mlp = MlpAgentConfig{.encoder_width = 8, .hidden = {8}};
    mc.total_steps = 5;
    mc.eval_interval = 5;
    mc.agent.td3.learning_starts = 5;
    TrainOutcome mo = run_training(mc, 1);
    REQUIRE(mo.ok);
    REQUIRE_THROWS_WITH(export_hidden_states(*mo.bundle, *env, 1, mc.slice, f1),
                        Catch::Matchers::ContainsSubstring("no sequence hidden state"));
    fs::remove_all(dir);
}

TEST_CASE("divergence aborts the run but preserves metrics") {
    const std::string dir = "harness_test_runs_i";
    fs::remove_all(dir);
    ExperimentConfig c = small_config(dir);
    c.total_steps = 40;
    c.eval_interval = 10;
    c.agent.td3.learning_starts = 5;
    c.agent.td3.lr = 1e200;  // overflow to a non-finite loss quickly
    TrainOutcome out = run_training(c, 13);
    REQUIRE_FALSE(out.ok);
    REQUIRE(!out.error.empty());
    REQUIRE(fs::exists(out.metrics_path));
    fs::remove_all(dir);
}
