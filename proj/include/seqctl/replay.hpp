#pragma once

// Episodic transition storage and sequence-window sampling.
//
// Transitions live in a ring indexed by a monotone global id; slot g % cap.
// Windows of C consecutive transitions are cut either strictly inside one
// episode (within_episode) or across boundaries (cross_episode). Foreign
// slots -- those from an earlier episode, or before the run started -- are
// kept verbatim, zeroed, or replaced by the current episode's first
// observation, per the masking rule. Windows that would touch evicted
// entries are skipped rather than stitched.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "seqctl/conditioning.hpp"
#include "seqctl/rng.hpp"

namespace seqctl {

enum class SliceMode { within_episode, cross_episode };
enum class Masking { none, zero, first_obs };
enum class Supervision { last_token, every_token };

inline std::string to_string(SliceMode m) {
    return m == SliceMode::within_episode ? "within_episode" : "cross_episode";
}
inline std::string to_string(Masking m) {
    switch (m) {
        case Masking::none:
            return "none";
        case Masking::zero:
            return "zero";
        case Masking::first_obs:
            return "first_obs";
    }
    throw std::runtime_error("to_string(Masking): bad enum");
}
inline std::string to_string(Supervision s) {
    return s == Supervision::last_token ? "last_token" : "every_token";
}

inline SliceMode slice_mode_from_string(const std::string& s) {
    if (s == "within_episode") return SliceMode::within_episode;
    if (s == "cross_episode") return SliceMode::cross_episode;
    throw std::runtime_error("unknown slice mode: " + s);
}
inline Masking masking_from_string(const std::string& s) {
    if (s == "none") return Masking::none;
    if (s == "zero") return Masking::zero;
    if (s == "first_obs") return Masking::first_obs;
    throw std::runtime_error("unknown masking: " + s);
}
inline Supervision supervision_from_string(const std::string& s) {
    if (s == "last_token") return Supervision::last_token;
    if (s == "every_token") return Supervision::every_token;
    throw std::runtime_error("unknown supervision: " + s);
}

struct SliceSpec {
    i64 context = 10;
    SliceMode mode = SliceMode::cross_episode;
    Masking masking = Masking::first_obs;
    Supervision supervision = Supervision::last_token;

    void validate() const { check(context >= 1, "SliceSpec: context must be >= 1"); }
};

class EpisodeStore {
public:
    EpisodeStore(i64 capacity, i64 obs_dim, i64 act_dim)
        : capacity_(capacity), obs_dim_(obs_dim), act_dim_(act_dim) {
        check(capacity >= 1, "EpisodeStore: capacity must be >= 1");
        check(obs_dim >= 1 && act_dim >= 1, "EpisodeStore: bad dims");
    }

    i64 capacity() const { return capacity_; }
    i64 obs_dim() const { return obs_dim_; }
    i64 act_dim() const { return act_dim_; }
    i64 appended() const { return next_; }                      // global count
    i64 oldest() const { return std::max<i64>(0, next_ - capacity_); }
    i64 size() const { return next_ - oldest(); }
    bool empty() const { return next_ == 0; }

    // done marks any episode boundary; terminal additionally marks true
    // termination (bootstrapping off). Time-limit truncation is done=true,
    // terminal=false.
    void append(const std::vector<double>& obs, const std::vector<double>& action, double reward,
                const std::vector<double>& next_obs, bool done, bool terminal) {
        check(static_cast<i64>(obs.size()) == obs_dim_ &&
                  static_cast<i64>(next_obs.size()) == obs_dim_,
              "EpisodeStore::append: observation shape mismatch");
        check(static_cast<i64>(action.size()) == act_dim_,
              "EpisodeStore::append: action shape mismatch");
        check(!terminal || done, "EpisodeStore::append: terminal implies done");
        const i64 slot = next_ % capacity_;
        if (next_ < capacity_) {
            grow_one();
        }
        write(obs_, slot, obs);
        write(action_, slot, action);
        write(next_obs_, slot, next_obs);
        write(prev_action_, slot, cur_step_ == 0 ? std::vector<double>(act_dim_, 0.0)
                                                 : last_action_);
        reward_[slot] = reward;
        prev_reward_[slot] = cur_step_ == 0 ? 0.0 : last_reward_;
        done_[slot] = done ? 1 : 0;
        terminal_[slot] = terminal ? 1 : 0;
        episode_[slot] = cur_episode_;
        step_[slot] = cur_step_;
        next_ += 1;
        if (done) {
            cur_episode_ += 1;
            cur_step_ = 0;
        } else {
            cur_step_ += 1;
            last_action_ = action;
            last_reward_ = reward;
        }
    }

    bool stored(i64 g) const { return g >= oldest() && g < next_; }

    i64 episode_id(i64 g) const { return episode_[check_slot(g)]; }
    i64 step_in_episode(i64 g) const { return step_[check_slot(g)]; }
    bool done_at(i64 g) const { return done_[check_slot(g)] != 0; }
    bool terminal_at(i64 g) const { return terminal_[check_slot(g)] != 0; }
    double reward_at(i64 g) const { return reward_[check_slot(g)]; }
    double prev_reward_at(i64 g) const { return prev_reward_[check_slot(g)]; }
    const double* obs_at(i64 g) const { return obs_.data() + check_slot(g) * obs_dim_; }
    const double* next_obs_at(i64 g) const { return next_obs_.data() + check_slot(g) * obs_dim_; }
    const double* action_at(i64 g) const { return action_.data() + check_slot(g) * act_dim_; }
    const double* prev_action_at(i64 g) const {
        return prev_action_.data() + check_slot(g) * act_dim_;
    }

private:
    void grow_one() {
        obs_.resize(obs_.size() + static_cast<size_t>(obs_dim_), 0.0);
        next_obs_.resize(next_obs_.size() + static_cast<size_t>(obs_dim_), 0.0);
        action_.resize(action_.size() + static_cast<size_t>(act_dim_), 0.0);
        prev_action_.resize(prev_action_.size() + static_cast<size_t>(act_dim_), 0.0);
        reward_.push_back(0.0);
        prev_reward_.push_back(0.0);
        done_.push_back(0);
        terminal_.push_back(0);
        episode_.push_back(0);
        step_.push_back(0);
    }

    i64 check_slot(i64 g) const {
        if (!stored(g)) {
            throw std::runtime_error("EpisodeStore: index " + std::to_string(g) + " not stored");
        }
        return g % capacity_;
    }

    static void write(std::vector<double>& dst, i64 slot, const std::vector<double>& src) {
        std::copy(src.begin(), src.end(),
                  dst.begin() + slot * static_cast<i64>(src.size()));
    }

    i64 capacity_, obs_dim_, act_dim_;
    i64 next_ = 0;
    i64 cur_episode_ = 0;
    i64 cur_step_ = 0;
    std::vector<double> last_action_;
    double last_reward_ = 0.0;
    std::vector<double> obs_, action_, next_obs_, prev_action_;
    std::vector<double> reward_, prev_reward_;
    std::vector<std::uint8_t> done_, terminal_;
    std::vector<i64> episode_, step_;
};

// Window-end indices that can be materialized under `spec`. Cross-episode
// windows may reach before the run start (filled per the masking rule) but
// never across the eviction seam.
inline std::vector<i64> valid_indices(const EpisodeStore& store, const SliceSpec& spec) {
    spec.validate();
    check(!store.empty(), "valid_indices: store is empty");
    std::vector<i64> out;
    const i64 C = spec.context;
    for (i64 end = store.oldest(); end < store.appended(); ++end) {
        if (spec.mode == SliceMode::within_episode) {
            if (store.step_in_episode(end) >= C - 1 && end - C + 1 >= store.oldest()) {
                out.push_back(end);
            }
        } else {
            if (end - C + 1 >= store.oldest() || store.oldest() == 0) {
                out.push_back(end);
            }
        }
    }
    return out;
}

namespace detail {

// Fills slot n of `w` for global index g (which may be negative pre-history),
// relative to the episode that owns `end`. Within-episode mode never crosses
// a boundary for base windows; in auxiliary (per-position target) windows
// foreign slots are zero-filled there, since its masking field is meaningless.
inline void fill_slot(const EpisodeStore& store, HistoryWindow& w, i64 n, i64 g, i64 end,
                      i64 cur_episode, const SliceSpec& spec) {
    const i64 od = store.obs_dim(), ad = store.act_dim();
    const bool exists = g >= 0 && store.stored(g);
    const bool foreign = !exists || store.episode_id(g) != cur_episode;
    if (!foreign) {
        std::copy(store.obs_at(g), store.obs_at(g) + od, w.obs.begin() + n * od);
        std::copy(store.prev_action_at(g), store.prev_action_at(g) + ad,
                  w.prev_action.begin() + n * ad);
        w.prev_reward[static_cast<size_t>(n)] = store.prev_reward_at(g);
        w.valid[static_cast<size_t>(n)] = 1;
        w.in_episode[static_cast<size_t>(n)] = 1;
        return;
    }
    w.in_episode[static_cast<size_t>(n)] = 0;
    if (spec.masking == Masking::none && spec.mode == SliceMode::cross_episode && exists) {
        // Kept verbatim; the model learns the boundary.
        std::copy(store.obs_at(g), store.obs_at(g) + od, w.obs.begin() + n * od);
        std::copy(store.prev_action_at(g), store.prev_action_at(g) + ad,
                  w.prev_action.begin() + n * ad);
        w.prev_reward[static_cast<size_t>(n)] = store.prev_reward_at(g);
        w.valid[static_cast<size_t>(n)] = 1;
        return;
    }
    // zero fill (also the pre-history fill when nothing verbatim exists)
    w.valid[static_cast<size_t>(n)] = 0;
    std::fill(w.obs.begin() + n * od, w.obs.begin() + (n + 1) * od, 0.0);
    std::fill(w.prev_action.begin() + n * ad, w.prev_action.begin() + (n + 1) * ad, 0.0);
    w.prev_reward[static_cast<size_t>(n)] = 0.0;
    if (spec.masking == Masking::first_obs && spec.mode == SliceMode::cross_episode) {
        const i64 first = end - store.step_in_episode(end);
        if (first >= store.oldest()) {
            std::copy(store.obs_at(first), store.obs_at(first) + od, w.obs.begin() + n * od);
        }
    }
}

inline void check_window_available(const EpisodeStore& store, i64 end, const SliceSpec& spec) {
    check(store.stored(end), "make_window: end index not stored");
    const i64 C = spec.context;
    check(end - C + 1 >= store.oldest() || store.oldest() == 0,
          "make_window: window crosses the ring seam");
    if (spec.mode == SliceMode::within_episode) {
        check(store.step_in_episode(end) >= C - 1,
              "make_window: within-episode window needs step_in_episode >= C-1");
    }
}

}  // namespace detail

// The C transitions ending at `end`, masked per spec.
inline HistoryWindow make_window(const EpisodeStore& store, i64 end, const SliceSpec& spec) {
    spec.validate();
    detail::check_window_available(store, end, spec);
    const i64 C = spec.context;
    HistoryWindow w = HistoryWindow::empty(C, store.obs_dim(), store.act_dim());
    const i64 cur_episode = store.episode_id(end);
    for (i64 n = 0; n < C; ++n) {
        detail::fill_slot(store, w, n, end - C + 1 + n, end, cur_episode, spec);
    }
    return w;
}

// The window advanced one transition past `end`, ending in a synthetic slot
// built from end's next observation. Equals make_window(end + 1) whenever
// end + 1 exists in the same episode. `relaxed` skips the availability checks
// and mask-fills unreachable slots; used for per-position bootstrap targets.
inline HistoryWindow make_next_window(const EpisodeStore& store, i64 end, const SliceSpec& spec,
                                      bool relaxed = false) {
    spec.validate();
    if (!relaxed) {
        detail::check_window_available(store, end, spec);
    } else {
        check(store.stored(end), "make_next_window: end index not stored");
    }
    const i64 C = spec.context;
    const i64 od = store.obs_dim(), ad = store.act_dim();
    HistoryWindow w = HistoryWindow::empty(C, od, ad);
    const i64 cur_episode = store.episode_id(end);
    for (i64 n = 0; n < C - 1; ++n) {
        detail::fill_slot(store, w, n, end - C + 2 + n, end, cur_episode, spec);
    }
    const i64 n = C - 1;
    std::copy(store.next_obs_at(end), store.next_obs_at(end) + od, w.obs.begin() + n * od);
    std::copy(store.action_at(end), store.action_at(end) + ad, w.prev_action.begin() + n * ad);
    w.prev_reward[static_cast<size_t>(n)] = store.reward_at(end);
    w.valid[static_cast<size_t>(n)] = 1;
    w.in_episode[static_cast<size_t>(n)] = 1;
    return w;
}

// Positions whose hidden states receive supervision.
inline std::vector<i64> supervision_positions(const HistoryWindow& w, const SliceSpec& spec) {
    std::vector<i64> out;
    if (spec.supervision == Supervision::last_token) {
        out.push_back(w.steps - 1);
        return out;
    }
    for (i64 n = 0; n < w.steps; ++n) {
        if (w.in_episode[static_cast<size_t>(n)]) {
            out.push_back(n);
        }
    }
    return out;
}

// One sampled training example: the window, its one-step-advanced successor
// for bootstrapped targets, and the per-slot supervision payload.
struct SequenceSample {
    HistoryWindow window;
    HistoryWindow next_window;
    std::vector<i64> sup_positions;
    // Under every_token supervision, one bootstrap window per supervised
    // position (the window advanced one step past that position); for
    // last_token this is empty and next_window serves position C-1.
    std::vector<HistoryWindow> position_next_windows;
    std::vector<double> actions;        // [C, act_dim], action taken at slot n
    std::vector<double> rewards;        // [C], reward produced by that action
    std::vector<std::uint8_t> terminal; // [C], true termination at slot n
    i64 end_index = 0;
};

struct SequenceBatch {
    SliceSpec spec;
    std::vector<SequenceSample> samples;
};

inline SequenceSample materialize_sample(const EpisodeStore& store, i64 end,
                                         const SliceSpec& spec) {
    SequenceSample s;
    s.end_index = end;
    s.window = make_window(store, end, spec);
    s.next_window = make_next_window(store, end, spec);
    s.sup_positions = supervision_positions(s.window, spec);
    if (spec.supervision == Supervision::every_token) {
        for (i64 p : s.sup_positions) {
            s.position_next_windows.push_back(
                make_next_window(store, end - spec.context + 1 + p, spec, /*relaxed=*/true));
        }
    }
    const i64 C = spec.context, ad = store.act_dim();
    s.actions.assign(static_cast<size_t>(C * ad), 0.0);
    s.rewards.assign(static_cast<size_t>(C), 0.0);
    s.terminal.assign(static_cast<size_t>(C), 0);
    for (i64 n = 0; n < C; ++n) {
        const i64 g = end - C + 1 + n;
        if (g < 0 || !store.stored(g) || !s.window.in_episode[static_cast<size_t>(n)]) {
            continue;
        }
        std::copy(store.action_at(g), store.action_at(g) + ad, s.actions.begin() + n * ad);
        s.rewards[static_cast<size_t>(n)] = store.reward_at(g);
        s.terminal[static_cast<size_t>(n)] = store.terminal_at(g) ? 1 : 0;
    }
    return s;
}

// batch_size indices drawn uniformly with replacement from valid_indices.
inline SequenceBatch sample_batch(const EpisodeStore& store, const SliceSpec& spec,
                                  i64 batch_size, Rng& rng) {
    check(batch_size >= 1, "sample_batch: batch_size must be >= 1");
    const std::vector<i64> valid = valid_indices(store, spec);
    check(!valid.empty(), "sample_batch: insufficient data");
    SequenceBatch batch;
    batch.spec = spec;
    batch.samples.reserve(static_cast<size_t>(batch_size));
    for (i64 i = 0; i < batch_size; ++i) {
        const i64 end = valid[rng.below(valid.size())];
        batch.samples.push_back(materialize_sample(store, end, spec));
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Snapshot fixtures: one CSV row per transition.
// Columns: episode,step,done,terminal,reward,o*,a*,next_o*
// ---------------------------------------------------------------------------

inline void export_store(const EpisodeStore& store, const std::string& path) {
    std::ofstream out(path);
    check(out.good(), "export_store: cannot open " + path);
    out << "episode,step,done,terminal,reward";
    for (i64 i = 0; i < store.obs_dim(); ++i) {
        out << ",o" << i;
    }
    for (i64 i = 0; i < store.act_dim(); ++i) {
        out << ",a" << i;
    }
    for (i64 i = 0; i < store.obs_dim(); ++i) {
        out << ",next_o" << i;
    }
    out << "\n";
    char buf[32];
    auto put = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << ',' << buf;
    };
    for (i64 g = store.oldest(); g < store.appended(); ++g) {
        out << store.episode_id(g) << ',' << store.step_in_episode(g) << ','
            << (store.done_at(g) ? 1 : 0) << ',' << (store.terminal_at(g) ? 1 : 0);
        put(store.reward_at(g));
        for (i64 i = 0; i < store.obs_dim(); ++i) {
            put(store.obs_at(g)[i]);
        }
        for (i64 i = 0; i < store.act_dim(); ++i) {
            put(store.action_at(g)[i]);
        }
        for (i64 i = 0; i < store.obs_dim(); ++i) {
            put(store.next_obs_at(g)[i]);
        }
        out << "\n";
    }
}

// Rebuilds a store by replaying the rows through append; episode/step columns
// are recomputed and verified against the file.
inline EpisodeStore import_store(const std::string& path, i64 capacity, i64 obs_dim, i64 act_dim) {
    std::ifstream in(path);
    check(in.good(), "import_store: cannot open " + path);
    std::string line;
    check(static_cast<bool>(std::getline(in, line)), "import_store: empty file");
    EpisodeStore store(capacity, obs_dim, act_dim);
    i64 row = 0;
    i64 episode_offset = 0;
    bool verify = false;  // only when the snapshot starts at a clean episode head
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::istringstream ss(line);
        std::string cell;
        std::vector<double> vals;
        while (std::getline(ss, cell, ',')) {
            vals.push_back(std::stod(cell));
        }
        const size_t want = 5 + static_cast<size_t>(2 * obs_dim + act_dim);
        check(vals.size() == want, "import_store: bad column count at row " + std::to_string(row));
        if (row == 0) {
            episode_offset = static_cast<i64>(vals[0]);
            verify = static_cast<i64>(vals[1]) == 0;
        }
        std::vector<double> obs(vals.begin() + 5, vals.begin() + 5 + obs_dim);
        std::vector<double> act(vals.begin() + 5 + obs_dim, vals.begin() + 5 + obs_dim + act_dim);
        std::vector<double> nxt(vals.begin() + 5 + obs_dim + act_dim, vals.end());
        store.append(obs, act, vals[4], nxt, vals[2] != 0.0, vals[3] != 0.0);
        const i64 g = store.appended() - 1;
        if (verify && store.stored(g)) {
            check(store.episode_id(g) == static_cast<i64>(vals[0]) - episode_offset &&
                      store.step_in_episode(g) == static_cast<i64>(vals[1]),
                  "import_store: episode/step mismatch at row " + std::to_string(row));
        }
        row += 1;
    }
    return store;
}

}  // namespace seqctl
