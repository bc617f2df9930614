#pragma once

// Experiment configuration: a small TOML-subset reader/writer (sections,
// dotted keys, strings, numbers, booleans, flat arrays, # comments) plus the
// typed ExperimentConfig that fully determines a run. Serialization is
// canonical (sorted sections/keys) so round-trips compare equal.

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "seqctl/agents.hpp"
#include "seqctl/envs.hpp"

namespace seqctl {

struct ConfigValue {
    enum class Kind { string_v, number_v, bool_v, array_v };
    Kind kind = Kind::string_v;
    std::string str;
    double num = 0.0;
    bool boolean = false;
    std::vector<double> array;

    static ConfigValue make_string(std::string s) {
        ConfigValue v;
        v.kind = Kind::string_v;
        v.str = std::move(s);
        return v;
    }
    static ConfigValue make_number(double d) {
        ConfigValue v;
        v.kind = Kind::number_v;
        v.num = d;
        return v;
    }
    static ConfigValue make_bool(bool b) {
        ConfigValue v;
        v.kind = Kind::bool_v;
        v.boolean = b;
        return v;
    }
    static ConfigValue make_array(std::vector<double> a) {
        ConfigValue v;
        v.kind = Kind::array_v;
        v.array = std::move(a);
        return v;
    }

    bool operator==(const ConfigValue&) const = default;
};

class ConfigTree {
public:
    std::map<std::string, ConfigValue> values;

    static ConfigTree parse(const std::string& text) {
        ConfigTree t;
        std::istringstream in(text);
        std::string line, section;
        i64 lineno = 0;
        while (std::getline(in, line)) {
            lineno += 1;
            const std::string s = strip(strip_comment(line));
            if (s.empty()) {
                continue;
            }
            if (s.front() == '[') {
                check(s.back() == ']', "config: unterminated section at line " +
                                           std::to_string(lineno));
                section = strip(s.substr(1, s.size() - 2));
                check(!section.empty(), "config: empty section name at line " +
                                            std::to_string(lineno));
                continue;
            }
            const size_t eq = s.find('=');
            check(eq != std::string::npos,
                  "config: expected key = value at line " + std::to_string(lineno));
            std::string key = strip(s.substr(0, eq));
            check(!key.empty(), "config: empty key at line " + std::to_string(lineno));
            if (!section.empty()) {
                key = section + "." + key;
            }
            t.values[key] = parse_value(strip(s.substr(eq + 1)), lineno);
        }
        return t;
    }

    // Canonical form: keys grouped by section, sorted; scalars first.
    std::string serialize() const {
        std::map<std::string, std::map<std::string, const ConfigValue*>> by_section;
        for (const auto& [k, v] : values) {
            const size_t dot = k.rfind('.');
            const std::string section = dot == std::string::npos ? "" : k.substr(0, dot);
            const std::string leaf = dot == std::string::npos ? k : k.substr(dot + 1);
            by_section[section][leaf] = &v;
        }
        std::ostringstream out;
        bool first = true;
        for (const auto& [section, kv] : by_section) {
            if (!first) {
                out << "\n";
            }
            first = false;
            if (!section.empty()) {
                out << "[" << section << "]\n";
            }
            for (const auto& [leaf, v] : kv) {
                out << leaf << " = " << format_value(*v) << "\n";
            }
        }
        return out.str();
    }

    bool has(const std::string& key) const { return values.count(key) > 0; }

    const ConfigValue& at(const std::string& key) const {
        auto it = values.find(key);
        check(it != values.end(), "config: missing key " + key);
        return it->second;
    }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        if (!has(key)) {
            return fallback;
        }
        const auto& v = at(key);
        check(v.kind == ConfigValue::Kind::string_v, "config: " + key + " must be a string");
        return v.str;
    }

    double get_number(const std::string& key, double fallback) const {
        if (!has(key)) {
            return fallback;
        }
        const auto& v = at(key);
        check(v.kind == ConfigValue::Kind::number_v, "config: " + key + " must be a number");
        return v.num;
    }

    i64 get_int(const std::string& key, i64 fallback) const {
        return static_cast<i64>(get_number(key, static_cast<double>(fallback)));
    }

    bool get_bool(const std::string& key, bool fallback) const {
        if (!has(key)) {
            return fallback;
        }
        const auto& v = at(key);
        check(v.kind == ConfigValue::Kind::bool_v, "config: " + key + " must be a boolean");
        return v.boolean;
    }

    std::vector<i64> get_int_array(const std::string& key, std::vector<i64> fallback) const {
        if (!has(key)) {
            return fallback;
        }
        const auto& v = at(key);
        check(v.kind == ConfigValue::Kind::array_v, "config: " + key + " must be an array");
        std::vector<i64> out;
        for (double d : v.array) {
            out.push_back(static_cast<i64>(d));
        }
        return out;
    }

    void set_string(const std::string& key, const std::string& s) {
        values[key] = ConfigValue::make_string(s);
    }
    void set_number(const std::string& key, double d) {
        values[key] = ConfigValue::make_number(d);
    }
    void set_bool(const std::string& key, bool b) { values[key] = ConfigValue::make_bool(b); }
    void set_int_array(const std::string& key, const std::vector<i64>& a) {
        std::vector<double> d(a.begin(), a.end());
        values[key] = ConfigValue::make_array(std::move(d));
    }

    bool operator==(const ConfigTree&) const = default;

private:
    static std::string strip(const std::string& s) {
        size_t a = s.find_first_not_of(" \t\r");
        size_t b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? "" : s.substr(a, b - a + 1);
    }

    static std::string strip_comment(const std::string& s) {
        bool in_str = false;
        for (size_t i = 0; i < s.size(); ++i) {
            if (s[i] == '"') {
                in_str = !in_str;
            } else if (s[i] == '#' && !in_str) {
                return s.substr(0, i);
            }
        }
        return s;
    }

    static ConfigValue parse_value(const std::string& s, i64 lineno) {
        check(!s.empty(), "config: empty value at line " + std::to_string(lineno));
        if (s.front() == '"') {
            check(s.size() >= 2 && s.back() == '"',
                  "config: unterminated string at line " + std::to_string(lineno));
            return ConfigValue::make_string(s.substr(1, s.size() - 2));
        }
        if (s == "true" || s == "false") {
            return ConfigValue::make_bool(s == "true");
        }
        if (s.front() == '[') {
            check(s.back() == ']', "config: unterminated array at line " + std::to_string(lineno));
            std::vector<double> items;
            std::istringstream ss(s.substr(1, s.size() - 2));
            std::string cell;
            while (std::getline(ss, cell, ',')) {
                const std::string c = strip(cell);
                if (c.empty()) {
                    continue;
                }
                items.push_back(parse_number(c, lineno));
            }
            return ConfigValue::make_array(std::move(items));
        }
        return ConfigValue::make_number(parse_number(s, lineno));
    }

    static double parse_number(const std::string& s, i64 lineno) {
        try {
            size_t pos = 0;
            const double d = std::stod(s, &pos);
            check(pos == s.size(), "config: trailing characters in number at line " +
                                       std::to_string(lineno));
            return d;
        } catch (const std::invalid_argument&) {
            throw std::runtime_error("config: bad number '" + s + "' at line " +
                                     std::to_string(lineno));
        }
    }

    static std::string format_value(const ConfigValue& v) {
        switch (v.kind) {
            case ConfigValue::Kind::string_v:
                return "\"" + v.str + "\"";
            case ConfigValue::Kind::bool_v:
                return v.boolean ? "true" : "false";
            case ConfigValue::Kind::number_v:
                return format_number(v.num);
            case ConfigValue::Kind::array_v: {
                std::string out = "[";
                for (size_t i = 0; i < v.array.size(); ++i) {
                    out += format_number(v.array[i]);
                    if (i + 1 < v.array.size()) {
                        out += ", ";
                    }
                }
                return out + "]";
            }
        }
        throw std::runtime_error("config: bad value kind");
    }

    static std::string format_number(double d) {
        if (d == static_cast<double>(static_cast<long long>(d)) && std::abs(d) < 1e15) {
            return std::to_string(static_cast<long long>(d));
        }
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", d);
        return buf;
    }
};

// Everything that determines a run; (config, seed) fixes the metrics bytes
// (wall-clock column aside).
struct ExperimentConfig {
    std::string env_name = "pointmass";
    PomdpMask mask = PomdpMask::full;
    AgentConfig agent;
    SliceSpec slice;
    i64 replay_capacity = 1'500'000;
    i64 total_steps = 60'000;
    i64 eval_interval = 2'000;
    i64 eval_seed_count = 100;
    std::vector<i64> run_seeds = {1, 2, 3};
    std::string out_dir = "runs";

    void finalize_dims() {
        auto env = make_env(env_name, mask);
        agent.obs_dim = env->spec().obs_dim;
        agent.act_dim = env->spec().act_dim;
        agent.action_low = env->spec().action_low;
        agent.action_high = env->spec().action_high;
        slice.context = agent.context;
    }

    static ExperimentConfig from_tree(const ConfigTree& t) {
        ExperimentConfig c;
        c.env_name = t.get_string("env.name", c.env_name);
        c.mask = pomdp_mask_from_string(t.get_string("env.mask", "full"));

        c.agent.kind = backbone_kind_from_string(t.get_string("agent.kind", "gpt"));
        c.agent.strategy = strategy_from_string(t.get_string("agent.strategy", "obs_only"));
        c.agent.sharing = sharing_mode_from_string(t.get_string("agent.sharing", "separate"));
        c.agent.context = t.get_int("agent.context", 10);
        c.agent.q_head_hidden = t.get_int("agent.q_head_hidden", 0);

        c.agent.transformer.num_layers = t.get_int("transformer.num_layers", 1);
        c.agent.transformer.num_heads = t.get_int("transformer.num_heads", 4);
        c.agent.transformer.d_model = t.get_int("transformer.d_model", 128);
        c.agent.transformer.d_ff = t.get_int("transformer.d_ff", 256);
        c.agent.transformer.dropout = t.get_number("transformer.dropout", 0.0);

        c.agent.mlp.encoder_width = t.get_int("mlp.encoder_width", 256);
        std::vector<i64> hidden = t.get_int_array("mlp.hidden", {256, 256});
        c.agent.mlp.hidden = hidden;

        c.agent.td3.gamma = t.get_number("td3.gamma", 0.99);
        c.agent.td3.tau = t.get_number("td3.tau", 0.005);
        c.agent.td3.policy_noise = t.get_number("td3.policy_noise", 0.2);
        c.agent.td3.noise_clip = t.get_number("td3.noise_clip", 0.5);
        c.agent.td3.exploration_noise = t.get_number("td3.exploration_noise", 0.1);
        c.agent.td3.batch_size = t.get_int("td3.batch_size", 256);
        c.agent.td3.lr = t.get_number("td3.lr", 3e-4);
        c.agent.td3.learning_starts = t.get_int("td3.learning_starts", 25'000);
        c.agent.td3.policy_delay = t.get_int("td3.policy_delay", 2);

        c.slice.mode = slice_mode_from_string(t.get_string("slice.mode", "cross_episode"));
        c.slice.masking = masking_from_string(t.get_string("slice.masking", "first_obs"));
        c.slice.supervision =
            supervision_from_string(t.get_string("slice.supervision", "last_token"));

        c.replay_capacity = t.get_int("replay.capacity", 1'500'000);
        c.total_steps = t.get_int("run.total_steps", 60'000);
        c.eval_interval = t.get_int("run.eval_interval", 2'000);
        c.eval_seed_count = t.get_int("run.eval_seeds", 100);
        c.run_seeds = t.get_int_array("run.seeds", {1, 2, 3});
        c.out_dir = t.get_string("run.out_dir", "runs");

        c.finalize_dims();
        return c;
    }

    ConfigTree to_tree() const {
        ConfigTree t;
        t.set_string("env.name", env_name);
        t.set_string("env.mask", to_string(mask));
        t.set_string("agent.kind", to_string(agent.kind));
        t.set_string("agent.strategy", to_string(agent.strategy));
        t.set_string("agent.sharing", to_string(agent.sharing));
        t.set_number("agent.context", static_cast<double>(agent.context));
        t.set_number("agent.q_head_hidden", static_cast<double>(agent.q_head_hidden));
        t.set_number("transformer.num_layers", static_cast<double>(agent.transformer.num_layers));
        t.set_number("transformer.num_heads", static_cast<double>(agent.transformer.num_heads));
        t.set_number("transformer.d_model", static_cast<double>(agent.transformer.d_model));
        t.set_number("transformer.d_ff", static_cast<double>(agent.transformer.d_ff));
        t.set_number("transformer.dropout", agent.transformer.dropout);
        t.set_number("mlp.encoder_width", static_cast<double>(agent.mlp.encoder_width));
        t.set_int_array("mlp.hidden", agent.mlp.hidden);
        t.set_number("td3.gamma", agent.td3.gamma);
        t.set_number("td3.tau", agent.td3.tau);
        t.set_number("td3.policy_noise", agent.td3.policy_noise);
        t.set_number("td3.noise_clip", agent.td3.noise_clip);
        t.set_number("td3.exploration_noise", agent.td3.exploration_noise);
        t.set_number("td3.batch_size", static_cast<double>(agent.td3.batch_size));
        t.set_number("td3.lr", agent.td3.lr);
        t.set_number("td3.learning_starts", static_cast<double>(agent.td3.learning_starts));
        t.set_number("td3.policy_delay", static_cast<double>(agent.td3.policy_delay));
        t.set_string("slice.mode", to_string(slice.mode));
        t.set_string("slice.masking", to_string(slice.masking));
        t.set_string("slice.supervision", to_string(slice.supervision));
        t.set_number("replay.capacity", static_cast<double>(replay_capacity));
        t.set_number("run.total_steps", static_cast<double>(total_steps));
        t.set_number("run.eval_interval", static_cast<double>(eval_interval));
        t.set_number("run.eval_seeds", static_cast<double>(eval_seed_count));
        t.set_int_array("run.seeds", run_seeds);
        t.set_string("run.out_dir", out_dir);
        return t;
    }

    static ExperimentConfig from_file(const std::string& path);
    void save(const std::string& path) const;
};

inline ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_tree(ConfigTree::parse(ss.str()));
}

inline void ExperimentConfig::save(const std::string& path) const {
    std::ofstream out(path);
    check(out.good(), "config: cannot write " + path);
    out << to_tree().serialize();
}

}  // namespace seqctl
