#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tensor is a value-semantic handle onto shared storage. Operations run
// eagerly; when a Tape is active and an input participates in gradients, the
// op appends a backward closure to the tape (define-by-run). backward() walks
// the tape in reverse, accumulating d(loss)/d(tensor) into grad buffers.
// Everything is double precision and single-threaded by contract.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "seqctl/common.hpp"
#include "seqctl/rng.hpp"

namespace seqctl {

using Shape = std::vector<i64>;

inline i64 shape_size(const Shape& s) {
    i64 n = 1;
    for (i64 d : s) {
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        os << s[i] << (i + 1 < s.size() ? "," : "");
    }
    os << "]";
    return os.str();
}

class Tensor {
    struct Storage {
        std::vector<double> data;
        std::vector<double> grad;  // empty until first accumulation
    };

    struct Impl {
        Shape shape;
        std::shared_ptr<Storage> storage;
        bool requires_grad = false;
        bool tracked = false;
        u64 tape_id = 0;
    };

public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return make(std::move(shape), {});
    }

    static Tensor full(Shape shape, double v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.data().begin(), t.data().end(), v);
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> values) {
        if (shape_size(shape) != static_cast<i64>(values.size())) {
            throw std::runtime_error("Tensor::from: shape " + shape_str(shape) +
                                     " does not match value count");
        }
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = std::move(shape);
        t.impl_->storage = std::make_shared<Storage>();
        t.impl_->storage->data = std::move(values);
        return t;
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    i64 rank() const { return static_cast<i64>(impl_->shape.size()); }
    i64 dim(i64 i) const { return impl_->shape[static_cast<size_t>(i)]; }
    i64 size() const { return static_cast<i64>(impl_->storage->data.size()); }

    std::vector<double>& data() { return impl_->storage->data; }
    const std::vector<double>& data() const { return impl_->storage->data; }
    double value() const {
        check(size() == 1, "Tensor::value: tensor is not scalar");
        return data()[0];
    }

    bool has_grad() const { return defined() && !impl_->storage->grad.empty(); }
    std::vector<double>& grad() {
        check(has_grad(), "Tensor::grad: no gradient buffer (run backward first)");
        return impl_->storage->grad;
    }
    const std::vector<double>& grad() const {
        check(has_grad(), "Tensor::grad: no gradient buffer (run backward first)");
        return impl_->storage->grad;
    }
    void ensure_grad() {
        if (!has_grad()) {
            impl_->storage->grad.assign(impl_->storage->data.size(), 0.0);
        }
    }
    void zero_grad() {
        if (has_grad()) {
            std::fill(impl_->storage->grad.begin(), impl_->storage->grad.end(), 0.0);
        }
    }

    Tensor& set_requires_grad(bool v = true) {
        impl_->requires_grad = v;
        return *this;
    }
    bool requires_grad() const { return impl_->requires_grad; }
    bool tracked() const { return impl_->tracked; }
    u64 tape_id() const { return impl_->tape_id; }
    void mark_tracked(u64 tape_id) {
        impl_->tracked = true;
        impl_->tape_id = tape_id;
    }

    // Stop-gradient boundary: shares storage, drops all gradient tracking.
    Tensor detach() const {
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = impl_->shape;
        t.impl_->storage = impl_->storage;
        return t;
    }

    // Metadata-only reshape; storage (data and grad) is shared.
    Tensor reshape(Shape shape) const {
        if (shape_size(shape) != size()) {
            throw std::runtime_error("reshape: " + shape_str(impl_->shape) + " -> " +
                                     shape_str(shape) + " changes element count");
        }
        Tensor t;
        t.impl_ = std::make_shared<Impl>(*impl_);
        t.impl_->shape = std::move(shape);
        return t;
    }

    // Deep copy of values only (fresh untracked tensor).
    Tensor clone() const { return from(impl_->shape, impl_->storage->data); }

    bool same_storage(const Tensor& o) const { return impl_->storage == o.impl_->storage; }

private:
    static Tensor make(Shape shape, std::vector<double> values) {
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->storage = std::make_shared<Storage>();
        if (values.empty()) {
            t.impl_->storage->data.assign(static_cast<size_t>(shape_size(shape)), 0.0);
        } else {
            t.impl_->storage->data = std::move(values);
        }
        t.impl_->shape = std::move(shape);
        return t;
    }

    std::shared_ptr<Impl> impl_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape {
public:
    Tape() : id_(next_id()++) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    u64 id() const { return id_; }
    size_t size() const { return nodes_.size(); }

    void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

    // Populates grad buffers of all tracked ancestors of `loss`. Each recorded
    // node runs exactly once, in reverse order of recording, which is a valid
    // topological order by construction.
    void backward(Tensor loss) {
        check(loss.size() == 1, "backward: loss must be scalar");
        check(loss.tracked() && loss.tape_id() == id_, "backward: loss is not on the active tape");
        loss.ensure_grad();
        loss.grad()[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            (*it)();
        }
    }

    void clear() { nodes_.clear(); }

private:
    static u64& next_id() {
        static u64 n = 1;
        return n;
    }
    std::vector<std::function<void()>> nodes_;
    u64 id_;
};

namespace detail {
inline Tape*& tape_slot() {
    thread_local Tape* t = nullptr;
    return t;
}
}  // namespace detail

inline Tape* active_tape() { return detail::tape_slot(); }

// RAII guard making a tape the active recording target.
class TapeScope {
public:
    explicit TapeScope(Tape& t) : prev_(detail::tape_slot()) { detail::tape_slot() = &t; }
    ~TapeScope() { detail::tape_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

inline void backward(const Tensor& loss) {
    check(active_tape() != nullptr, "backward: no active tape");
    active_tape()->backward(loss);
}

// Temporarily disables op recording (e.g. target computation, evaluation).
class NoTapeScope {
public:
    NoTapeScope() : prev_(detail::tape_slot()) { detail::tape_slot() = nullptr; }
    ~NoTapeScope() { detail::tape_slot() = prev_; }
    NoTapeScope(const NoTapeScope&) = delete;
    NoTapeScope& operator=(const NoTapeScope&) = delete;

private:
    Tape* prev_;
};

namespace detail {

inline bool participates(const Tensor& t, const Tape* tp) {
    return t.requires_grad() || (t.tracked() && t.tape_id() == tp->id());
}

// Records `bw` if any input participates on the active tape; marks the output.
inline void record_op(std::initializer_list<Tensor> inputs, Tensor& out,
                      const std::function<void()>& bw) {
    Tape* tp = active_tape();
    if (tp == nullptr) {
        return;
    }
    bool any = false;
    for (const Tensor& t : inputs) {
        if (participates(t, tp)) {
            any = true;
            break;
        }
    }
    if (!any) {
        return;
    }
    out.mark_tracked(tp->id());
    tp->record(bw);
}

inline bool wants_grad(const Tensor& t, u64 tape_id) {
    return t.requires_grad() || (t.tracked() && t.tape_id() == tape_id);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Broadcasting machinery (trailing-dimension alignment)
// ---------------------------------------------------------------------------

namespace detail {

// Result shape of broadcasting a and b; mismatched non-1 extents are errors.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        const i64 da = i < r - ra ? 1 : a[i - (r - ra)];
        const i64 db = i < r - rb ? 1 : b[i - (r - rb)];
        if (!(da == db || da == 1 || db == 1)) {
            throw std::runtime_error("broadcast: incompatible shapes " + shape_str(a) + " vs " +
                                     shape_str(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `s` rank-padded to `r` dims, with 0 stride on broadcast dims.
inline std::vector<i64> broadcast_strides(const Shape& s, const Shape& out) {
    const size_t r = out.size();
    std::vector<i64> st(r, 0);
    i64 acc = 1;
    for (size_t i = s.size(); i-- > 0;) {
        const size_t oi = i + (r - s.size());
        st[oi] = (s[i] == 1 && out[oi] != 1) ? 0 : acc;
        acc *= s[i];
    }
    return st;
}

// Calls fn(out_flat, a_flat, b_flat) for every element of the result shape.
template <class Fn>
inline void for_broadcast(const Shape& out, const Shape& a, const Shape& b, Fn&& fn) {
    const auto sa = broadcast_strides(a, out);
    const auto sb = broadcast_strides(b, out);
    const size_t r = out.size();
    const i64 n = shape_size(out);
    std::vector<i64> idx(r, 0);
    i64 ia = 0, ib = 0;
    for (i64 flat = 0; flat < n; ++flat) {
        fn(flat, ia, ib);
        for (size_t d = r; d-- > 0;) {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out[d]) {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary primitives
// ---------------------------------------------------------------------------

namespace detail {

// True when b's shape (sans leading 1-dims) equals the trailing dims of a's:
// the bias-add pattern, where b tiles every b.size() elements of a.
inline bool is_trailing_suffix(const Shape& a, const Shape& b) {
    size_t skip = 0;
    while (skip < b.size() && b[skip] == 1) {
        skip += 1;
    }
    const size_t rb = b.size() - skip;
    if (rb > a.size()) {
        return false;
    }
    for (size_t i = 0; i < rb; ++i) {
        if (b[skip + i] != a[a.size() - rb + i]) {
            return false;
        }
    }
    return true;
}

template <class FwdFn, class BwdFn>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, FwdFn fwd, BwdFn bwd) {
    const Shape os = broadcast_shape(a.shape(), b.shape());
    Tensor out = Tensor::zeros(os);
    const bool same = a.shape() == b.shape();
    const bool suffix = !same && is_trailing_suffix(a.shape(), b.shape());
    const auto& pa = a.data();
    const auto& pb = b.data();
    auto& po = out.data();
    if (same) {
        for (size_t i = 0; i < po.size(); ++i) {
            po[i] = fwd(pa[i], pb[i]);
        }
    } else if (suffix) {
        const size_t bs = pb.size();
        for (size_t r = 0; r < po.size() / bs; ++r) {
            const size_t base = r * bs;
            for (size_t j = 0; j < bs; ++j) {
                po[base + j] = fwd(pa[base + j], pb[j]);
            }
        }
    } else {
        for_broadcast(os, a.shape(), b.shape(), [&](i64 o, i64 ia, i64 ib) {
            out.data()[static_cast<size_t>(o)] =
                fwd(a.data()[static_cast<size_t>(ia)], b.data()[static_cast<size_t>(ib)]);
        });
    }
    Tape* tp = active_tape();
    if (tp != nullptr) {
        const u64 tape_id = tp->id();
        Tensor av = a, bv = b, ov = out;
        record_op({a, b}, out, [av, bv, ov, tape_id, bwd, same, suffix]() mutable {
            if (!ov.has_grad()) {
                return;
            }
            const bool ga = wants_grad(av, tape_id);
            const bool gb = wants_grad(bv, tape_id);
            if (ga) {
                av.ensure_grad();
            }
            if (gb) {
                bv.ensure_grad();
            }
            const auto& g = ov.grad();
            const auto& xa = av.data();
            const auto& xb = bv.data();
            if (same) {
                for (size_t i = 0; i < g.size(); ++i) {
                    double da = 0.0, db = 0.0;
                    bwd(g[i], xa[i], xb[i], da, db);
                    if (ga) {
                        av.grad()[i] += da;
                    }
                    if (gb) {
                        bv.grad()[i] += db;
                    }
                }
            } else if (suffix) {
                const size_t bs = xb.size();
                for (size_t r = 0; r < g.size() / bs; ++r) {
                    const size_t base = r * bs;
                    for (size_t j = 0; j < bs; ++j) {
                        double da = 0.0, db = 0.0;
                        bwd(g[base + j], xa[base + j], xb[j], da, db);
                        if (ga) {
                            av.grad()[base + j] += da;
                        }
                        if (gb) {
                            bv.grad()[j] += db;
                        }
                    }
                }
            } else {
                for_broadcast(ov.shape(), av.shape(), bv.shape(), [&](i64 o, i64 ia, i64 ib) {
                    double da = 0.0, db = 0.0;
                    bwd(g[static_cast<size_t>(o)], xa[static_cast<size_t>(ia)],
                        xb[static_cast<size_t>(ib)], da, db);
                    if (ga) {
                        av.grad()[static_cast<size_t>(ia)] += da;
                    }
                    if (gb) {
                        bv.grad()[static_cast<size_t>(ib)] += db;
                    }
                });
            }
        });
    }
    (void)name;
    return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double g, double, double, double& da, double& db) {
            da = g;
            db = g;
        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double g, double, double, double& da, double& db) {
            da = g;
            db = -g;
        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double g, double x, double y, double& da, double& db) {
            da = g * y;
            db = g * x;
        });
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "divide", [](double x, double y) { return x / y; },
        [](double g, double x, double y, double& da, double& db) {
            da = g / y;
            db = -g * x / (y * y);
        });
}

// ---------------------------------------------------------------------------
// Elementwise unary primitives
// ---------------------------------------------------------------------------

namespace detail {

template <class FwdFn, class BwdFn>
Tensor unary_op(const Tensor& a, FwdFn fwd, BwdFn bwd) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& pa = a.data();
    auto& po = out.data();
    for (size_t i = 0; i < po.size(); ++i) {
        po[i] = fwd(pa[i]);
    }
    Tensor av = a, ov = out;
    record_op({a}, out, [av, ov, bwd]() mutable {
        if (!ov.has_grad()) {
            return;
        }
        av.ensure_grad();
        const auto& g = ov.grad();
        const auto& x = av.data();
        const auto& y = ov.data();
        auto& ag = av.grad();
        for (size_t i = 0; i < g.size(); ++i) {
            ag[i] += bwd(g[i], x[i], y[i]);
        }
    });
    return out;
}

}  // namespace detail

inline Tensor scale(const Tensor& a, double s) {
    return detail::unary_op(
        a, [s](double x) { return x * s; }, [s](double g, double, double) { return g * s; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
    return detail::unary_op(
        a, [c](double x) { return x + c; }, [](double g, double, double) { return g; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor exp(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::exp(x); },
        [](double g, double, double y) { return g * y; });
}

inline Tensor tanh(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::tanh(x); },
        [](double g, double, double y) { return g * (1.0 - y * y); });
}

inline Tensor erf(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::erf(x); },
        [](double g, double x, double) {
            return g * (2.0 / std::sqrt(std::numbers::pi)) * std::exp(-x * x);
        });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double g, double x, double) { return x > 0.0 ? g : 0.0; });
}

// Right-derivative convention at the kink: d|x|/dx = 1 at x = 0, so a
// finite-difference comparison at the kink reports the mismatch instead of
// silently agreeing on 0.
inline Tensor abs(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::abs(x); },
        [](double g, double x, double) { return x < 0.0 ? -g : g; });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) {
        s += v;
    }
    Tensor out = Tensor::scalar(s);
    Tensor av = a, ov = out;
    detail::record_op({a}, out, [av, ov]() mutable {
        if (!ov.has_grad()) {
            return;
        }
        av.ensure_grad();
        const double g = ov.grad()[0];
        for (auto& v : av.grad()) {
            v += g;
        }
    });
    return out;
}

inline Tensor mean(const Tensor& a) {
    const double n = static_cast<double>(a.size());
    double s = 0.0;
    for (double v : a.data()) {
        s += v;
    }
    Tensor out = Tensor::scalar(s / n);
    Tensor av = a, ov = out;
    detail::record_op({a}, out, [av, ov, n]() mutable {
        if (!ov.has_grad()) {
            return;
        }
        av.ensure_grad();
        const double g = ov.grad()[0] / n;
        for (auto& v : av.grad()) {
            v += g;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

// Rows [r0, r1) along the first axis.
inline Tensor slice_rows(const Tensor& a, i64 r0, i64 r1) {
    check(a.rank() >= 1, "slice_rows: rank must be >= 1");
    check(0 <= r0 && r0 < r1 && r1 <= a.dim(0), "slice_rows: bad row range");
    const i64 row = a.size() / a.dim(0);
    Shape os = a.shape();
    os[0] = r1 - r0;
    Tensor out = Tensor::zeros(os);
    std::copy(a.data().begin() + r0 * row, a.data().begin() + r1 * row, out.data().begin());
    Tensor av = a, ov = out;
    detail::record_op({a}, out, [av, ov, r0, row]() mutable {
        if (!ov.has_grad()) {
            return;
        }
        av.ensure_grad();
        double* da = av.grad().data();
        const auto& g = ov.grad();
        for (size_t i = 0; i < g.size(); ++i) {
            da[static_cast<size_t>(r0 * row) + i] += g[i];
        }
    });
    return out;
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    check(a.rank() == b.rank() && a.rank() >= 1, "concat_rows: rank mismatch");
    for (i64 i = 1; i < a.rank(); ++i) {
        check(a.dim(i) == b.dim(i), "concat_rows: trailing dims differ");
    }
    Shape os = a.shape();
    os[0] += b.dim(0);
    Tensor out = Tensor::zeros(os);
    std::copy(a.data().begin(), a.data().end(), out.data().begin());
    std::copy(b.data().begin(), b.data().end(), out.data().begin() + a.size());
    Tensor av = a, bv = b, ov = out;
    Tape* tp = active_tape();
    if (tp != nullptr) {
        const u64 tid = tp->id();
        detail::record_op({a, b}, out, [av, bv, ov, tid]() mutable {
            if (!ov.has_grad()) {
                return;
            }
            const auto& g = ov.grad();
            if (detail::wants_grad(av, tid)) {
                av.ensure_grad();
                double* da = av.grad().data();
                for (i64 i = 0; i < av.size(); ++i) {
                    da[i] += g[static_cast<size_t>(i)];
                }
            }
            if (detail::wants_grad(bv, tid)) {
                bv.ensure_grad();
                double* db = bv.grad().data();
                for (i64 i = 0; i < bv.size(); ++i) {
                    db[i] += g[static_cast<size_t>(av.size() + i)];
                }
            }
        });
    }
    return out;
}

// Concatenate along the last axis; leading dims must match.
inline Tensor concat_last(const Tensor& a, const Tensor& b) {
    check(a.rank() == b.rank() && a.rank() >= 1, "concat_last: rank mismatch");
    for (i64 i = 0; i < a.rank() - 1; ++i) {
        check(a.dim(i) == b.dim(i), "concat_last: leading dims differ");
    }
    const i64 la = a.dim(a.rank() - 1), lb = b.dim(b.rank() - 1);
    const i64 rows = a.size() / la;
    Shape os = a.shape();
    os.back() = la + lb;
    Tensor out = Tensor::zeros(os);
    for (i64 r = 0; r < rows; ++r) {
        std::copy(a.data().begin() + r * la, a.data().begin() + (r + 1) * la,
                  out.data().begin() + r * (la + lb));
        std::copy(b.data().begin() + r * lb, b.data().begin() + (r + 1) * lb,
                  out.data().begin() + r * (la + lb) + la);
    }
    Tensor av = a, bv = b, ov = out;
    Tape* tp = active_tape();
    if (tp != nullptr) {
        const u64 tid = tp->id();
        detail::record_op({a, b}, out, [av, bv, ov, la, lb, rows, tid]() mutable {
            if (!ov.has_grad()) {
                return;
            }
            const auto& g = ov.grad();
            const bool ga = detail::wants_grad(av, tid);
            const bool gb = detail::wants_grad(bv, tid);
            if (ga) {
                av.ensure_grad();
            }
            if (gb) {
                bv.ensure_grad();
            }
            double* da = ga ? av.grad().data() : nullptr;
            double* db = gb ? bv.grad().data() : nullptr;
            for (i64 r = 0; r < rows; ++r) {
                if (ga) {
                    for (i64 i = 0; i < la; ++i) {
                        da[r * la + i] += g[static_cast<size_t>(r * (la + lb) + i)];
                    }
                }
                if (gb) {
                    for (i64 i = 0; i < lb; ++i) {
                        db[r * lb + i] += g[static_cast<size_t>(r * (la + lb) + la + i)];
                    }
                }
            }
        });
    }
    return out;
}

// Concatenate along the middle axis: [B,M1,d] + [B,M2,d] -> [B,M1+M2,d].
inline Tensor concat_steps(const Tensor& a, const Tensor& b) {
    check(a.rank() == 3 && b.rank() == 3, "concat_steps: expects rank 3");
    check(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2), "concat_steps: incompatible shapes");
    const i64 B = a.dim(0), Ma = a.dim(1), Mb = b.dim(1), d = a.dim(2);
    Tensor out = Tensor::zeros({B, Ma + Mb, d});
    for (i64 bi = 0; bi < B; ++bi) {
        std::copy(a.data().begin() + bi * Ma * d, a.data().begin() + (bi + 1) * Ma * d,
                  out.data().begin() + bi * (Ma + Mb) * d);
        std::copy(b.data().begin() + bi * Mb * d, b.data().begin() + (bi + 1) * Mb * d,
                  out.data().begin() + bi * (Ma + Mb) * d + Ma * d);
    }
    Tensor av = a, bv = b, ov = out;
    Tape* tp = active_tape();
    if (tp != nullptr) {
        const u64 tid = tp->id();
        detail::record_op({a, b}, out, [av, bv, ov, B, Ma, Mb, d, tid]() mutable {
            if (!ov.has_grad()) {
                return;
            }
            const auto& g = ov.grad();
            const bool ga = detail::wants_grad(av, tid);
            const bool gb = detail::wants_grad(bv, tid);
            if (ga) {
                av.ensure_grad();
            }
            if (gb) {
                bv.ensure_grad();
            }
            double* da = ga ? av.grad().data() : nullptr;
            double* db = gb ? bv.grad().data() : nullptr;
            for (i64 bi = 0; bi < B; ++bi) {
                if (ga) {
                    for (i64 i = 0; i < Ma * d; ++i) {
                        da[bi * Ma * d + i] += g[static_cast<size_t>(bi * (Ma + Mb) * d + i)];
                    }
                }
                if (gb) {
                    for (i64 i = 0; i < Mb * d; ++i) {
                        db[bi * Mb * d + i] +=
                            g[static_cast<size_t>(bi * (Ma + Mb) * d + Ma * d + i)];
                    }
                }
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    check(a.rank() == 2, "transpose: expects rank 2");
    const i64 n = a.dim(0), m = a.dim(1);
    Tensor out = Tensor::zeros({m, n});
    for (i64 i = 0; i < n; ++i) {
        for (i64 j = 0; j < m; ++j) {
            out.data()[static_cast<size_t>(j * n + i)] = a.data()[static_cast<size_t>(i * m + j)];
        }
    }
    Tensor av = a, ov = out;
    detail::record_op({a}, out, [av, ov, n, m]() mutable {
        if (!ov.has_grad()) {
            return;
        }
        av.ensure_grad();
        double* da = av.grad().data();
        const double* g = ov.grad().data();
        for (i64 i = 0; i < n; ++i) {
            for (i64 j = 0; j < m; ++j) {
                da[i * m + j] += g[j * n + i];
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {

// C[n,m] += A[n,k] * B[k,m], row-major, ikj order for vectorization.
inline void gemm_acc(const double* a, const double* b, double* c, i64 n, i64 k, i64 m) {
    for (i64 i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * m;
        for (i64 p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * m;
            for (i64 j = 0; j < m; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2, "matmul: expects rank-2 operands");
    if (a.dim(1) != b.dim(0)) {
        throw std::runtime_error("matmul: inner dims differ, " + shape_str(a.shape()) + " x " +
                                 shape_str(b.shape()));
    }
    const i64 n = a.dim(0), k = a.dim(1), m = b.dim(1);
    Tensor out = Tensor::zeros({n, m});
    detail::gemm_acc(a.data().data(), b.data().data(), out.data().data(), n, k, m);
    Tensor av = a, bv = b, ov = out;
    Tape* tp = active_tape();
    if (tp != nullptr) {
        const u64 tid = tp->id();
        detail::record_op({a, b}, out, [av, bv, ov, n, k, m, tid]() mutable {
            if (!ov.has_grad()) {
                return;
            }
            const double* g = ov.grad().data();
            if (detail::wants_grad(av, tid)) {
                av.ensure_grad();
                // dA[i,p] += sum_j g[i,j] * B[p,j]
                double* da = av.grad().data();
                const double* pb = bv.data().data();
                for (i64 i = 0; i < n; ++i) {
                    for (i64 p = 0; p < k; ++p) {
                        double s = 0.0;
                        const double* grow = g + i * m;
                        const double* brow = pb + p * m;
                        for (i64 j = 0; j < m; ++j) {
                            s += grow[j] * brow[j];
                        }
                        da[i * k + p] += s;
                    }
                }
            }
            if (detail::wants_grad(bv, tid)) {
                bv.ensure_grad();
                // dB[p,j] += sum_i A[i,p] * g[i,j]
                double* db = bv.grad().data();
                const double* pa = av.data().data();
                for (i64 i = 0; i < n; ++i) {
                    const double* grow = g + i * m;
                    for (i64 p = 0; p < k; ++p) {
                        const double apv = pa[i * k + p];
                        double* dbrow = db + p * m;
                        for (i64 j = 0; j < m; ++j) {
                            dbrow[j] += apv * grow[j];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gather / scatter style ops
// ---------------------------------------------------------------------------

// Picks rows (sample, step) out of x[B,L,d] into [N,d].
inline Tensor gather_steps(const Tensor& x, const std::vector<std::pair<i64, i64>>& idx) {
    check(x.rank() == 3, "gather_steps: expects [B,L,d]");
    const i64 B = x.dim(0), L = x.dim(1), d = x.dim(2);
    const i64 N = static_cast<i64>(idx.size());
    check(N >= 1, "gather_steps: empty index list");
    Tensor out = Tensor::zeros({N, d});
    for (i64 r = 0; r < N; ++r) {
        const auto [b, t] = idx[static_cast<size_t>(r)];
        check(0 <= b && b < B && 0 <= t && t < L, "gather_steps: index out of range");
        std::copy(x.data().begin() + (b * L + t) * d, x.data().begin() + (b * L + t + 1) * d,
                  out.data().begin() + r * d);
    }
    Tensor xv = x, ov = out;
    auto idx_copy = idx;
    detail::record_op({x}, out, [xv, ov, idx_copy, L, d]() mutable {
        if (!ov.has_grad()) {
            return;
        }
        xv.ensure_grad();
        double* dx = xv.grad().data();
        const double* g = ov.grad().data();
        for (size_t r = 0; r < idx_copy.size(); ++r) {
            const auto [b, t] = idx_copy[r];
            for (i64 c = 0; c < d; ++c) {
                dx[(b * L + t) * d + c] += g[static_cast<i64>(r) * d + c];
            }
        }
    });
    return out;
}

// Reorders rows along the middle axis: out[b,l,:] = x[b,map[l],:], map entry
// -1 yields a zero row. Used to interleave modality streams.
inline Tensor row_select(const Tensor& x, const std::vector<i64>& map) {
    check(x.rank() == 3, "row_select: expects [B,M,d]");
    const i64 B = x.dim(0), M = x.dim(1), d = x.dim(2);
    const i64 L = static_cast<i64>(map.size());
    check(L >= 1, "row_select: empty map");
    Tensor out = Tensor::zeros({B, L, d});
    for (i64 b = 0; b < B; ++b) {
        for (i64 l = 0; l < L; ++l) {
            const i64 s = map[static_cast<size_t>(l)];
            if (s < 0) {
                continue;
            }
            check(s < M, "row_select: map entry out of range");
            std::copy(x.data().begin() + (b * M + s) * d, x.data().begin() + (b * M + s + 1) * d,
                      out.data().begin() + (b * L + l) * d);
        }
    }
    Tensor xv = x, ov = out;
    auto map_copy = map;
    detail::record_op({x}, out, [xv, ov, map_copy, B, M, L, d]() mutable {
        if (!ov.has_grad()) {
            return;
        }
        xv.ensure_grad();
        double* dx = xv.grad().data();
        const double* g = ov.grad().data();
        for (i64 b = 0; b < B; ++b) {
            for (i64 l = 0; l < L; ++l) {
                const i64 s = map_copy[static_cast<size_t>(l)];
                if (s < 0) {
                    continue;
                }
                for (i64 c = 0; c < d; ++c) {
                    dx[(b * M + s) * d + c] += g[(b * L + l) * d + c];
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Layer normalization (fused primitive over the last axis, 1/N variance)
// ---------------------------------------------------------------------------

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    check(x.rank() >= 1, "layer_norm: rank must be >= 1");
    const i64 N = x.dim(x.rank() - 1);
    check(gamma.size() == N && beta.size() == N, "layer_norm: scale/shift size mismatch");
    const i64 rows = x.size() / N;
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> means(static_cast<size_t>(rows)), rstds(static_cast<size_t>(rows));
    const double* px = x.data().data();
    const double* pg = gamma.data().data();
    const double* pb = beta.data().data();
    double* po = out.data().data();
    for (i64 r = 0; r < rows; ++r) {
        const double* row = px + r * N;
        double m = 0.0;
        for (i64 i = 0; i < N; ++i) {
            m += row[i];
        }
        m /= static_cast<double>(N);
        double var = 0.0;
        for (i64 i = 0; i < N; ++i) {
            const double dv = row[i] - m;
            var += dv * dv;
        }
        var /= static_cast<double>(N);
        const double rstd = 1.0 / std::sqrt(var + eps);
        means[static_cast<size_t>(r)] = m;
        rstds[static_cast<size_t>(r)] = rstd;
        for (i64 i = 0; i < N; ++i) {
            po[r * N + i] = (row[i] - m) * rstd * pg[i] + pb[i];
        }
    }
    Tensor xv = x, gv = gamma, bv = beta, ov = out;
    Tape* tp = active_tape();
    if (tp != nullptr) {
        const u64 tid = tp->id();
        detail::record_op(
            {x, gamma, beta}, out, [xv, gv, bv, ov, means, rstds, rows, N, tid]() mutable {
                if (!ov.has_grad()) {
                    return;
                }
                const bool gx = detail::wants_grad(xv, tid);
                const bool gg = detail::wants_grad(gv, tid);
                const bool gb = detail::wants_grad(bv, tid);
                if (gx) {
                    xv.ensure_grad();
                }
                if (gg) {
                    gv.ensure_grad();
                }
                if (gb) {
                    bv.ensure_grad();
                }
                const double* g = ov.grad().data();
                const double* px = xv.data().data();
                const double* pg = gv.data().data();
                double* dx = gx ? xv.grad().data() : nullptr;
                double* dgm = gg ? gv.grad().data() : nullptr;
                double* dbt = gb ? bv.grad().data() : nullptr;
                for (i64 r = 0; r < rows; ++r) {
                    const double m = means[static_cast<size_t>(r)];
                    const double rstd = rstds[static_cast<size_t>(r)];
                    const double* grow = g + r * N;
                    const double* xrow = px + r * N;
                    // xhat = (x - m) * rstd; out = xhat * gamma + beta
                    if (gg || gb) {
                        for (i64 i = 0; i < N; ++i) {
                            const double xhat = (xrow[i] - m) * rstd;
                            if (gg) {
                                dgm[i] += grow[i] * xhat;
                            }
                            if (gb) {
                                dbt[i] += grow[i];
                            }
                        }
                    }
                    if (gx) {
                        double mean_gy = 0.0, mean_gy_xhat = 0.0;
                        for (i64 i = 0; i < N; ++i) {
                            const double gy = grow[i] * pg[i];
                            const double xhat = (xrow[i] - m) * rstd;
                            mean_gy += gy;
                            mean_gy_xhat += gy * xhat;
                        }
                        mean_gy /= static_cast<double>(N);
                        mean_gy_xhat /= static_cast<double>(N);
                        for (i64 i = 0; i < N; ++i) {
                            const double gy = grow[i] * pg[i];
                            const double xhat = (xrow[i] - m) * rstd;
                            dx[r * N + i] += rstd * (gy - mean_gy - xhat * mean_gy_xhat);
                        }
                    }
                }
            });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention (fused primitive)
// ---------------------------------------------------------------------------
//
// q: [B,Cq,d], k/v: [B,Ck,d]. Query position i may attend key position j iff
// j <= i + causal_offset and (key_valid == nullptr or key_valid[b*Ck+j]).
// Self-attention uses offset 0; aligned cross-attention uses Ck - Cq; a full
// (non-causal) mask is offset >= Ck - 1. Scores are scaled by 1/sqrt(d/H).

inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, i64 heads,
                        i64 causal_offset, const std::vector<std::uint8_t>* key_valid = nullptr) {
    check(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "attention: expects [B,C,d]");
    const i64 B = q.dim(0), Cq = q.dim(1), d = q.dim(2);
    const i64 Ck = k.dim(1);
    check(Cq >= 1 && Ck >= 1, "attention: empty sequence");
    check(k.dim(0) == B && v.dim(0) == B && k.dim(2) == d && v.dim(2) == d && v.dim(1) == Ck,
          "attention: shape mismatch");
    check(heads >= 1 && d % heads == 0, "attention: d_model must divide num_heads");
    check(key_valid == nullptr || static_cast<i64>(key_valid->size()) == B * Ck,
          "attention: key_valid size mismatch");
    const i64 hd = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(hd));

    Tensor out = Tensor::zeros({B, Cq, d});
    // Attention probabilities are cached for the backward pass.
    auto probs = std::make_shared<std::vector<double>>(
        static_cast<size_t>(B * heads * Cq * Ck), 0.0);

    const double* pq = q.data().data();
    const double* pk = k.data().data();
    const double* pv = v.data().data();
    double* po = out.data().data();

    auto allowed = [&](i64 b, i64 i, i64 j) {
        if (j > i + causal_offset) {
            return false;
        }
        return key_valid == nullptr || (*key_valid)[static_cast<size_t>(b * Ck + j)] != 0;
    };

    std::vector<double> scores(static_cast<size_t>(Ck));
    for (i64 b = 0; b < B; ++b) {
        for (i64 i = 0; i < Cq; ++i) {
            bool any = false;
            for (i64 j = 0; j < Ck && !any; ++j) {
                any = allowed(b, i, j);
            }
            check(any, "attention: query position attends no keys");
        }
        for (i64 h = 0; h < heads; ++h) {
            const i64 off = h * hd;
            for (i64 i = 0; i < Cq; ++i) {
                const double* qrow = pq + (b * Cq + i) * d + off;
                double mx = -1e300;
                for (i64 j = 0; j < Ck; ++j) {
                    if (!allowed(b, i, j)) {
                        scores[static_cast<size_t>(j)] = -1e300;
                        continue;
                    }
                    const double* krow = pk + (b * Ck + j) * d + off;
                    double s = 0.0;
                    for (i64 c = 0; c < hd; ++c) {
                        s += qrow[c] * krow[c];
                    }
                    s *= sc;
                    scores[static_cast<size_t>(j)] = s;
                    mx = std::max(mx, s);
                }
                double z = 0.0;
                for (i64 j = 0; j < Ck; ++j) {
                    if (scores[static_cast<size_t>(j)] <= -1e299) {
                        scores[static_cast<size_t>(j)] = 0.0;
                    } else {
                        scores[static_cast<size_t>(j)] =
                            std::exp(scores[static_cast<size_t>(j)] - mx);
                        z += scores[static_cast<size_t>(j)];
                    }
                }
                double* prow = probs->data() + ((b * heads + h) * Cq + i) * Ck;
                double* orow = po + (b * Cq + i) * d + off;
                for (i64 j = 0; j < Ck; ++j) {
                    const double p = scores[static_cast<size_t>(j)] / z;
                    prow[j] = p;
                    if (p == 0.0) {
                        continue;
                    }
                    const double* vrow = pv + (b * Ck + j) * d + off;
                    for (i64 c = 0; c < hd; ++c) {
                        orow[c] += p * vrow[c];
                    }
                }
            }
        }
    }

    Tensor qv = q, kv = k, vv = v, ov = out;
    Tape* tp = active_tape();
    if (tp != nullptr) {
        const u64 tid = tp->id();
        detail::record_op(
            {q, k, v}, out, [qv, kv, vv, ov, probs, B, Cq, Ck, d, heads, hd, sc, tid]() mutable {
                if (!ov.has_grad()) {
                    return;
                }
                const bool gq = detail::wants_grad(qv, tid);
                const bool gk = detail::wants_grad(kv, tid);
                const bool gv_ = detail::wants_grad(vv, tid);
                if (gq) {
                    qv.ensure_grad();
                }
                if (gk) {
                    kv.ensure_grad();
                }
                if (gv_) {
                    vv.ensure_grad();
                }
                const double* g = ov.grad().data();
                const double* pq = qv.data().data();
                const double* pk = kv.data().data();
                const double* pv = vv.data().data();
                double* dq = gq ? qv.grad().data() : nullptr;
                double* dk = gk ? kv.grad().data() : nullptr;
                double* dv = gv_ ? vv.grad().data() : nullptr;
                std::vector<double> dp(static_cast<size_t>(Ck));
                for (i64 b = 0; b < B; ++b) {
                    for (i64 h = 0; h < heads; ++h) {
                        const i64 off = h * hd;
                        for (i64 i = 0; i < Cq; ++i) {
                            const double* prow = probs->data() + ((b * heads + h) * Cq + i) * Ck;
                            const double* grow = g + (b * Cq + i) * d + off;
                            // dP[j] = dOut . V_j ; dV_j += P[j] * dOut
                            double dot = 0.0;
                            for (i64 j = 0; j < Ck; ++j) {
                                if (prow[j] == 0.0) {
                                    dp[static_cast<size_t>(j)] = 0.0;
                                    continue;
                                }
                                const double* vrow = pv + (b * Ck + j) * d + off;
                                double s = 0.0;
                                for (i64 c = 0; c < hd; ++c) {
                                    s += grow[c] * vrow[c];
                                }
                                dp[static_cast<size_t>(j)] = s;
                                dot += s * prow[j];
                                if (gv_) {
                                    double* dvrow = dv + (b * Ck + j) * d + off;
                                    for (i64 c = 0; c < hd; ++c) {
                                        dvrow[c] += prow[j] * grow[c];
                                    }
                                }
                            }
                            // dS[j] = P[j] * (dP[j] - sum_j' dP[j'] P[j'])
                            const double* qrow = pq + (b * Cq + i) * d + off;
                            for (i64 j = 0; j < Ck; ++j) {
                                if (prow[j] == 0.0) {
                                    continue;
                                }
                                const double ds = prow[j] * (dp[static_cast<size_t>(j)] - dot) * sc;
                                if (ds == 0.0) {
                                    continue;
                                }
                                const double* krow = pk + (b * Ck + j) * d + off;
                                if (gq) {
                                    double* dqrow = dq + (b * Cq + i) * d + off;
                                    for (i64 c = 0; c < hd; ++c) {
                                        dqrow[c] += ds * krow[c];
                                    }
                                }
                                if (gk) {
                                    double* dkrow = dk + (b * Ck + j) * d + off;
                                    for (i64 c = 0; c < hd; ++c) {
                                        dkrow[c] += ds * qrow[c];
                                    }
                                }
                            }
                        }
                    }
                }
            });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dropout (inverted scaling; identity when p == 0)
// ---------------------------------------------------------------------------

inline Tensor dropout(const Tensor& x, double p, Rng& rng) {
    check(p >= 0.0 && p < 1.0, "dropout: p must be in [0,1)");
    if (p == 0.0) {
        return x;
    }
    const double keep = 1.0 - p;
    auto mask = std::make_shared<std::vector<double>>(x.data().size());
    Tensor out = Tensor::zeros(x.shape());
    for (size_t i = 0; i < x.data().size(); ++i) {
        const double m = rng.uniform01() < p ? 0.0 : 1.0 / keep;
        (*mask)[i] = m;
        out.data()[i] = x.data()[i] * m;
    }
    Tensor xv = x, ov = out;
    detail::record_op({x}, out, [xv, ov, mask]() mutable {
        if (!ov.has_grad()) {
            return;
        }
        xv.ensure_grad();
        for (size_t i = 0; i < mask->size(); ++i) {
            xv.grad()[i] += ov.grad()[i] * (*mask)[i];
        }
    });
    return out;
}

}  // namespace seqctl
