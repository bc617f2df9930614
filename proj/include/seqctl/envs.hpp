#pragma once

// Deterministic seeded toy continuous-control environments.
//
// This header is the source of truth for every physical constant; the
// acceptance baselines assume exactly these values.
//
//   point-mass reach (MDP testbed), 1-D:
//     state [x, v], goal g, obs [x, v, g], action a in [-1, 1]
//     x' = x + v*dt;  v' = v + a*dt;  dt = 0.05;  episode length 64
//     reward = -(x' - g)^2 - 0.01*a^2
//
//   pendulum swing-up (the harder testbed):
//     angle th measured from hanging down (th = 0 down, th = pi upright)
//     obs [cos th, sin th, thdot], torque u in [-2, 2]
//     thdd = (g_c/l)*sin th + u/(m*l^2), g_c = -9.81 (signed: restores to 0),
//     l = m = 1, dt = 0.05, |thdot| <= 8, episode length 200
//     reward = -(delta^2 + 0.1*thdot^2 + 0.001*u^2), delta = angle to upright
//
// Episodes end only by time limit (truncation): done=true, terminal=false.

#include <cmath>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "seqctl/rng.hpp"

namespace seqctl {

enum class PomdpMask { full, hide_velocity, hide_position };

inline std::string to_string(PomdpMask m) {
    switch (m) {
        case PomdpMask::full:
            return "full";
        case PomdpMask::hide_velocity:
            return "hide_velocity";
        case PomdpMask::hide_position:
            return "hide_position";
    }
    throw std::runtime_error("to_string(PomdpMask): bad enum");
}

inline PomdpMask pomdp_mask_from_string(const std::string& s) {
    if (s == "full") return PomdpMask::full;
    if (s == "hide_velocity") return PomdpMask::hide_velocity;
    if (s == "hide_position") return PomdpMask::hide_position;
    throw std::runtime_error("unknown pomdp mask: " + s);
}

struct EnvSpec {
    i64 obs_dim = 0;
    i64 act_dim = 0;
    double action_low = -1.0;
    double action_high = 1.0;
    i64 max_steps = 0;
    double dt = 0.0;
    double reward_min = 0.0;  // documented per-env bound
    double reward_max = 0.0;
};

struct StepResult {
    std::vector<double> obs;
    double reward = 0.0;
    bool done = false;      // episode boundary (time limit here)
    bool terminal = false;  // true termination; unused by these envs
};

class Env {
public:
    virtual ~Env() = default;
    virtual const EnvSpec& spec() const = 0;
    virtual std::vector<double> reset(u64 seed) = 0;
    virtual StepResult step(const std::vector<double>& action) = 0;
    virtual std::unique_ptr<Env> fresh() const = 0;
    // Kept observation indices under a mask; throws for incompatible masks.
    virtual std::vector<i64> mask_indices(PomdpMask mask) const = 0;
    virtual std::string name() const = 0;

    i64 clamp_count() const { return clamps_; }

protected:
    double clamp_action(double a) {
        const auto& sp = spec();
        if (a < sp.action_low || a > sp.action_high) {
            clamps_ += 1;
            return std::clamp(a, sp.action_low, sp.action_high);
        }
        return a;
    }

    void check_steppable(bool done) const {
        check(started_, "env: step before reset");
        check(!done, "env: step after episode end");
    }

    bool started_ = false;
    i64 clamps_ = 0;
};

class PointMassEnv final : public Env {
public:
    PointMassEnv() {
        spec_.obs_dim = 3;
        spec_.act_dim = 1;
        spec_.action_low = -1.0;
        spec_.action_high = 1.0;
        spec_.max_steps = 64;
        spec_.dt = 0.05;
        // |x - g| stays below 8 under these dynamics and start ranges.
        spec_.reward_min = -64.01;
        spec_.reward_max = 0.0;
    }

    const EnvSpec& spec() const override { return spec_; }
    std::string name() const override { return "pointmass"; }

    std::vector<double> reset(u64 seed) override {
        Rng rng(seed);
        x_ = rng.uniform(-1.0, 1.0);
        v_ = rng.uniform(-0.5, 0.5);
        goal_ = rng.uniform(-1.0, 1.0);
        t_ = 0;
        done_ = false;
        started_ = true;
        return obs();
    }

    StepResult step(const std::vector<double>& action) override {
        check_steppable(done_);
        check(action.size() == 1, "pointmass: action must be 1-D");
        const double a = clamp_action(action[0]);
        x_ = x_ + v_ * spec_.dt;
        v_ = v_ + a * spec_.dt;
        t_ += 1;
        const double dist = x_ - goal_;
        const double reward = -(dist * dist) - 0.01 * a * a;
        done_ = t_ >= spec_.max_steps;
        return {obs(), reward, done_, false};
    }

    std::unique_ptr<Env> fresh() const override { return std::make_unique<PointMassEnv>(); }

    std::vector<i64> mask_indices(PomdpMask mask) const override {
        switch (mask) {
            case PomdpMask::full:
                return {0, 1, 2};
            case PomdpMask::hide_velocity:
                return {0, 2};  // [x, g]
            case PomdpMask::hide_position:
                return {1, 2};  // [v, g]
        }
        throw std::runtime_error("pointmass: incompatible mask");
    }

    // Probe hook for tests: overrides the physical state.
    void set_state(double x, double v, double goal) {
        x_ = x;
        v_ = v;
        goal_ = goal;
        started_ = true;
        done_ = false;
        t_ = 0;
    }
    double goal() const { return goal_; }

private:
    std::vector<double> obs() const { return {x_, v_, goal_}; }

    EnvSpec spec_;
    double x_ = 0, v_ = 0, goal_ = 0;
    i64 t_ = 0;
    bool done_ = false;
};

class PendulumEnv final : public Env {
public:
    static constexpr double kGravity = -9.81;  // signed for the down-is-zero convention
    static constexpr double kLength = 1.0;
    static constexpr double kMass = 1.0;
    static constexpr double kMaxSpeed = 8.0;
    static constexpr double kMaxTorque = 2.0;

    PendulumEnv() {
        spec_.obs_dim = 3;
        spec_.act_dim = 1;
        spec_.action_low = -kMaxTorque;
        spec_.action_high = kMaxTorque;
        spec_.max_steps = 200;
        spec_.dt = 0.05;
        const double pi = std::numbers::pi;
        spec_.reward_min = -(pi * pi + 0.1 * kMaxSpeed * kMaxSpeed +
                             0.001 * kMaxTorque * kMaxTorque);
        spec_.reward_max = 0.0;
    }

    const EnvSpec& spec() const override { return spec_; }
    std::string name() const override { return "pendulum"; }

    std::vector<double> reset(u64 seed) override {
        Rng rng(seed);
        th_ = rng.uniform(-std::numbers::pi, std::numbers::pi);
        thdot_ = rng.uniform(-1.0, 1.0);
        t_ = 0;
        done_ = false;
        started_ = true;
        return obs();
    }

    StepResult step(const std::vector<double>& action) override {
        check_steppable(done_);
        check(action.size() == 1, "pendulum: action must be 1-D");
        const double u = clamp_action(action[0]);
        const double thdd = (kGravity / kLength) * std::sin(th_) + u / (kMass * kLength * kLength);
        thdot_ = std::clamp(thdot_ + thdd * spec_.dt, -kMaxSpeed, kMaxSpeed);
        th_ = th_ + thdot_ * spec_.dt;  // semi-implicit Euler
        t_ += 1;
        const double delta = angle_to_upright();
        const double reward = -(delta * delta + 0.1 * thdot_ * thdot_ + 0.001 * u * u);
        done_ = t_ >= spec_.max_steps;
        return {obs(), reward, done_, false};
    }

    std::unique_ptr<Env> fresh() const override { return std::make_unique<PendulumEnv>(); }

    std::vector<i64> mask_indices(PomdpMask mask) const override {
        switch (mask) {
            case PomdpMask::full:
                return {0, 1, 2};
            case PomdpMask::hide_velocity:
                return {0, 1};  // [cos th, sin th]
            case PomdpMask::hide_position:
                return {2};  // [thdot]
        }
        throw std::runtime_error("pendulum: incompatible mask");
    }

    void set_state(double th, double thdot) {
        th_ = th;
        thdot_ = thdot;
        started_ = true;
        done_ = false;
        t_ = 0;
    }
    double angle() const { return th_; }

private:
    double angle_to_upright() const {
        const double pi = std::numbers::pi;
        double d = std::fmod(th_ - pi, 2.0 * pi);
        if (d > pi) {
            d -= 2.0 * pi;
        }
        if (d < -pi) {
            d += 2.0 * pi;
        }
        return d;
    }

    std::vector<double> obs() const { return {std::cos(th_), std::sin(th_), thdot_}; }

    EnvSpec spec_;
    double th_ = 0, thdot_ = 0;
    i64 t_ = 0;
    bool done_ = false;
};

// Projects observations; dynamics and rewards pass through untouched.
class PomdpWrapper final : public Env {
public:
    PomdpWrapper(std::unique_ptr<Env> inner, PomdpMask mask)
        : inner_(std::move(inner)), mask_(mask) {
        keep_ = inner_->mask_indices(mask);
        check(!keep_.empty(), "pomdp_wrap: mask keeps no observation components");
        check(static_cast<i64>(keep_.size()) <= inner_->spec().obs_dim,
              "pomdp_wrap: bad mask layout");
        spec_ = inner_->spec();
        spec_.obs_dim = static_cast<i64>(keep_.size());
    }

    const EnvSpec& spec() const override { return spec_; }
    std::string name() const override { return inner_->name(); }
    PomdpMask mask() const { return mask_; }

    std::vector<double> reset(u64 seed) override { return project(inner_->reset(seed)); }

    StepResult step(const std::vector<double>& action) override {
        StepResult r = inner_->step(action);
        r.obs = project(r.obs);
        return r;
    }

    std::unique_ptr<Env> fresh() const override {
        return std::make_unique<PomdpWrapper>(inner_->fresh(), mask_);
    }

    std::vector<i64> mask_indices(PomdpMask mask) const override {
        check(mask == PomdpMask::full, "pomdp_wrap: cannot re-mask a wrapped env");
        std::vector<i64> all(keep_.size());
        for (size_t i = 0; i < keep_.size(); ++i) {
            all[i] = static_cast<i64>(i);
        }
        return all;
    }

    Env& inner() { return *inner_; }

private:
    std::vector<double> project(const std::vector<double>& full) const {
        std::vector<double> out;
        out.reserve(keep_.size());
        for (i64 i : keep_) {
            out.push_back(full[static_cast<size_t>(i)]);
        }
        return out;
    }

    std::unique_ptr<Env> inner_;
    PomdpMask mask_;
    std::vector<i64> keep_;
    EnvSpec spec_;
};

inline std::unique_ptr<Env> pomdp_wrap(std::unique_ptr<Env> env, PomdpMask mask) {
    if (mask == PomdpMask::full) {
        return env;  // identity wrapper
    }
    return std::make_unique<PomdpWrapper>(std::move(env), mask);
}

// Env selected by name: pointmass | pendulum.
inline std::unique_ptr<Env> make_env(const std::string& name, PomdpMask mask = PomdpMask::full) {
    std::unique_ptr<Env> base;
    if (name == "pointmass") {
        base = std::make_unique<PointMassEnv>();
    } else if (name == "pendulum") {
        base = std::make_unique<PendulumEnv>();
    } else {
        throw std::runtime_error("unknown env: " + name);
    }
    return pomdp_wrap(std::move(base), mask);
}

}  // namespace seqctl
