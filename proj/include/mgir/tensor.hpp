#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <utility>

#include "mgir/common.hpp"

namespace mgir {

// Dense row-major tensor with an optional gradient buffer. Values are owned
// by a shared Storage so autograd closures can keep inputs alive cheaply.
template <typename S>
struct Storage {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // same length as data when participating in autograd
    bool requires_grad = false;
};

template <typename S>
class Tape;

template <typename S>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, S fill = S(0), bool requires_grad = false)
        : st_(std::make_shared<Storage<S>>()) {
        st_->shape = std::move(shape);
        st_->data.assign(numel(st_->shape), fill);
        set_requires_grad(requires_grad);
    }

    static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
        if (numel(shape) != data.size())
            throw shape_error("tensor data length " + std::to_string(data.size()) +
                              " does not match shape " + shape_str(shape));
        Tensor t;
        t.st_ = std::make_shared<Storage<S>>();
        t.st_->shape = std::move(shape);
        t.st_->data = std::move(data);
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor scalar(S v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(st_); }
    const Shape& shape() const { return st_->shape; }
    std::size_t rank() const { return st_->shape.size(); }
    std::size_t size() const { return st_->data.size(); }
    std::size_t extent(std::size_t axis) const { return st_->shape[axis]; }

    S* data() { return st_->data.data(); }
    const S* data() const { return st_->data.data(); }
    S* grad() { return st_->grad.data(); }
    const S* grad() const { return st_->grad.data(); }
    bool has_grad() const { return !st_->grad.empty(); }
    bool requires_grad() const { return st_->requires_grad; }

    void set_requires_grad(bool rg) {
        st_->requires_grad = rg;
        if (rg && st_->grad.size() != st_->data.size())
            st_->grad.assign(st_->data.size(), S(0));
    }

    void zero_grad() {
        if (has_grad()) std::fill(st_->grad.begin(), st_->grad.end(), S(0));
    }

    S item() const {
        if (size() != 1)
            throw shape_error("item() requires a scalar, got shape " + shape_str(shape()));
        return st_->data[0];
    }

    std::shared_ptr<Storage<S>> storage() const { return st_; }

    // View with a new shape over the same storage metadata is not used;
    // reshape in ops.hpp records a copy so the tape stays simple.

private:
    std::shared_ptr<Storage<S>> st_;
};

// Reverse-mode tape. Ops append backward closures in execution order; one
// reverse sweep propagates grads from a scalar loss to every leaf.
template <typename S>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape*& active() {
        thread_local Tape* t = nullptr;
        return t;
    }

    struct Scope {
        explicit Scope(Tape& tape) : prev_(active()) { active() = &tape; }
        ~Scope() { active() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    void record(std::function<void()> backward_fn) {
        nodes_.push_back(std::move(backward_fn));
    }

    std::size_t node_count() const { return nodes_.size(); }

    void backward(Tensor<S>& loss) {
        if (loss.size() != 1)
            throw shape_error("backward() requires a scalar loss, got shape " +
                              shape_str(loss.shape()));
        if (used_)
            throw value_error("backward() called twice on the same tape");
        if (!loss.has_grad())
            throw value_error("loss does not participate in this tape");
        loss.grad()[0] = S(1);
        for (std::size_t i = nodes_.size(); i-- > 0;) nodes_[i]();
        used_ = true;
    }

    void reset() {
        nodes_.clear();
        used_ = false;
    }

private:
    std::vector<std::function<void()>> nodes_;
    bool used_ = false;
};

namespace detail {

template <typename S>
bool tracking(std::initializer_list<const Tensor<S>*> inputs) {
    if (!Tape<S>::active()) return false;
    for (const Tensor<S>* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <typename S>
void mark_tracked(Tensor<S>& out) {
    out.set_requires_grad(true);
}

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (a.shape() != b.shape())
        throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---- elementwise primitives ----

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape(a, b, "add");
    Tensor<S> out(a.shape());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::tracking<S>({&a, &b})) {
        detail::mark_tracked(out);
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        Tape<S>::active()->record([as, bs, os, n] {
            for (std::size_t i = 0; i < n; ++i) {
                if (!as->grad.empty()) as->grad[i] += os->grad[i];
                if (!bs->grad.empty()) bs->grad[i] += os->grad[i];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor<S> out(a.shape());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (detail::tracking<S>({&a, &b})) {
        detail::mark_tracked(out);
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        Tape<S>::active()->record([as, bs, os, n] {
            for (std::size_t i = 0; i < n; ++i) {
                if (!as->grad.empty()) as->grad[i] += os->grad[i];
                if (!bs->grad.empty()) bs->grad[i] -= os->grad[i];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor<S> out(a.shape());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (detail::tracking<S>({&a, &b})) {
        detail::mark_tracked(out);
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        Tape<S>::active()->record([as, bs, os, n] {
            for (std::size_t i = 0; i < n; ++i) {
                if (!as->grad.empty()) as->grad[i] += os->grad[i] * bs->data[i];
                if (!bs->grad.empty()) bs->grad[i] += os->grad[i] * as->data[i];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    Tensor<S> out(a.shape());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    if (detail::tracking<S>({&a})) {
        detail::mark_tracked(out);
        auto as = a.storage();
        auto os = out.storage();
        Tape<S>::active()->record([as, os, c, n] {
            if (!as->grad.empty())
                for (std::size_t i = 0; i < n; ++i) as->grad[i] += os->grad[i] * c;
        });
    }
    return out;
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
    Tensor<S> out(a.shape());
    const std::size_t n = out.size();
    const S inv_sqrt2 = S(0.70710678118654752440);
    for (std::size_t i = 0; i < n; ++i) {
        S x = a.data()[i];
        out.data()[i] = S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2));
    }
    if (detail::tracking<S>({&a})) {
        detail::mark_tracked(out);
        auto as = a.storage();
        auto os = out.storage();
        Tape<S>::active()->record([as, os, n, inv_sqrt2] {
            if (as->grad.empty()) return;
            const S inv_sqrt2pi = S(0.39894228040143267794);
            for (std::size_t i = 0; i < n; ++i) {
                S x = as->data[i];
                S cdf = S(0.5) * (S(1) + std::erf(x * inv_sqrt2));
                S pdf = inv_sqrt2pi * std::exp(S(-0.5) * x * x);
                as->grad[i] += os->grad[i] * (cdf + x * pdf);
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& a) {
    S acc = 0;
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) acc += a.data()[i];
    Tensor<S> out = Tensor<S>::scalar(acc);
    if (detail::tracking<S>({&a})) {
        detail::mark_tracked(out);
        auto as = a.storage();
        auto os = out.storage();
        Tape<S>::active()->record([as, os, n] {
            if (as->grad.empty()) return;
            for (std::size_t i = 0; i < n; ++i) as->grad[i] += os->grad[0];
        });
    }
    return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& a) {
    if (a.size() == 0) throw shape_error("mean_all: empty tensor");
    return scale(sum_all(a), S(1) / S(a.size()));
}

// sqrt of a scalar; subgradient 0 at exactly zero so the RMSE loss stays total.
template <typename S>
Tensor<S> sqrt_scalar(const Tensor<S>& a) {
    if (a.size() != 1) throw shape_error("sqrt_scalar: expected scalar");
    S v = std::sqrt(a.data()[0]);
    Tensor<S> out = Tensor<S>::scalar(v);
    if (detail::tracking<S>({&a})) {
        detail::mark_tracked(out);
        auto as = a.storage();
        auto os = out.storage();
        Tape<S>::active()->record([as, os, v] {
            if (as->grad.empty()) return;
            if (v > S(0)) as->grad[0] += os->grad[0] / (S(2) * v);
        });
    }
    return out;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape new_shape) {
    if (numel(new_shape) != a.size())
        throw shape_error("reshape: cannot view " + shape_str(a.shape()) + " as " +
                          shape_str(new_shape));
    Tensor<S> out = Tensor<S>::from_data(std::move(new_shape), std::vector<S>(a.data(), a.data() + a.size()));
    if (detail::tracking<S>({&a})) {
        detail::mark_tracked(out);
        auto as = a.storage();
        auto os = out.storage();
        const std::size_t n = a.size();
        Tape<S>::active()->record([as, os, n] {
            if (as->grad.empty()) return;
            for (std::size_t i = 0; i < n; ++i) as->grad[i] += os->grad[i];
        });
    }
    return out;
}

template <typename S>
Tensor<S> permute(const Tensor<S>& a, const std::vector<std::size_t>& order) {
    if (order.size() != a.rank())
        throw shape_error("permute: order length does not match rank");
    Shape new_shape(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) new_shape[i] = a.extent(order[i]);
    auto in_strides = row_major_strides(a.shape());
    auto out_strides = row_major_strides(new_shape);
    const std::size_t n = a.size();
    // out index -> in index map, reused verbatim by the backward scatter
    auto index_map = std::make_shared<std::vector<std::size_t>>(n);
    {
        std::vector<std::size_t> idx(order.size(), 0);
        for (std::size_t o = 0; o < n; ++o) {
            std::size_t rem = o, src = 0;
            for (std::size_t k = 0; k < order.size(); ++k) {
                std::size_t c = rem / out_strides[k];
                rem -= c * out_strides[k];
                src += c * in_strides[order[k]];
            }
            (*index_map)[o] = src;
        }
    }
    Tensor<S> out(new_shape);
    for (std::size_t o = 0; o < n; ++o) out.data()[o] = a.data()[(*index_map)[o]];
    if (detail::tracking<S>({&a})) {
        detail::mark_tracked(out);
        auto as = a.storage();
        auto os = out.storage();
        Tape<S>::active()->record([as, os, index_map, n] {
            if (as->grad.empty()) return;
            for (std::size_t o = 0; o < n; ++o) as->grad[(*index_map)[o]] += os->grad[o];
        });
    }
    return out;
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, std::size_t axis) {
    if (parts.empty()) throw shape_error("concat: no inputs");
    const Shape& base = parts[0].shape();
    if (axis >= base.size()) throw shape_error("concat: axis out of range");
    Shape out_shape = base;
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != base.size())
            throw shape_error("concat: rank mismatch");
        for (std::size_t k = 0; k < base.size(); ++k)
            if (k != axis && p.extent(k) != base[k])
                throw shape_error("concat: extent mismatch on axis " + std::to_string(k));
        total += p.extent(axis);
    }
    out_shape[axis] = total;

    std::size_t outer = 1, inner = 1;
    for (std::size_t k = 0; k < axis; ++k) outer *= base[k];
    for (std::size_t k = axis + 1; k < base.size(); ++k) inner *= base[k];

    Tensor<S> out(out_shape);
    std::size_t offset = 0;
    bool track = false;
    for (const auto& p : parts)
        if (detail::tracking<S>({&p})) track = true;

    struct Piece {
        std::shared_ptr<Storage<S>> st;
        std::size_t offset, width;
    };
    auto pieces = std::make_shared<std::vector<Piece>>();
    for (const auto& p : parts) {
        const std::size_t width = p.extent(axis) * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + o * total * inner + offset, p.data() + o * width,
                        width * sizeof(S));
        if (track) pieces->push_back({p.storage(), offset, width});
        offset += p.extent(axis) * inner;
    }
    if (track) {
        detail::mark_tracked(out);
        auto os = out.storage();
        const std::size_t row = total * inner;
        Tape<S>::active()->record([pieces, os, outer, row] {
            for (const auto& piece : *pieces) {
                if (piece.st->grad.empty()) continue;
                for (std::size_t o = 0; o < outer; ++o) {
                    const S* g = os->grad.data() + o * row + piece.offset;
                    S* dst = piece.st->grad.data() + o * piece.width;
                    for (std::size_t i = 0; i < piece.width; ++i) dst[i] += g[i];
                }
            }
        });
    }
    return out;
}

// Contiguous slice along an axis.
template <typename S>
Tensor<S> narrow(const Tensor<S>& a, std::size_t axis, std::size_t start, std::size_t length) {
    if (axis >= a.rank()) throw shape_error("narrow: axis out of range");
    if (start + length > a.extent(axis))
        throw shape_error("narrow: slice [" + std::to_string(start) + "," +
                          std::to_string(start + length) + ") exceeds extent " +
                          std::to_string(a.extent(axis)));
    Shape out_shape = a.shape();
    out_shape[axis] = length;
    std::size_t outer = 1, inner = 1;
    for (std::size_t k = 0; k < axis; ++k) outer *= a.extent(k);
    for (std::size_t k = axis + 1; k < a.rank(); ++k) inner *= a.extent(k);
    const std::size_t in_row = a.extent(axis) * inner;
    const std::size_t out_row = length * inner;

    Tensor<S> out(out_shape);
    for (std::size_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * out_row, a.data() + o * in_row + start * inner,
                    out_row * sizeof(S));
    if (detail::tracking<S>({&a})) {
        detail::mark_tracked(out);
        auto as = a.storage();
        auto os = out.storage();
        Tape<S>::active()->record([as, os, outer, in_row, out_row, start, inner] {
            if (as->grad.empty()) return;
            for (std::size_t o = 0; o < outer; ++o) {
                const S* g = os->grad.data() + o * out_row;
                S* dst = as->grad.data() + o * in_row + start * inner;
                for (std::size_t i = 0; i < out_row; ++i) dst[i] += g[i];
            }
        });
    }
    return out;
}

using TensorF = Tensor<float>;
using TapeF = Tape<float>;

}  // namespace mgir
