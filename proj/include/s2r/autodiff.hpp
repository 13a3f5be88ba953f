#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major float64
// tensors. A Tape records every operation in execution order; backward() walks
// the tape once in reverse, accumulating analytic gradients into parents.
//
//   ad::Tape tape;
//   ad::Var w = tape.leaf(weights);
//   ad::Var loss = ad::sum(ad::square(ad::matmul(x, w)));
//   ad::GradientMap g = tape.backward(loss);
//   g[w];  // dloss/dw

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "s2r/core.hpp"

namespace s2r::ad {

struct NotScalar : Error {
    using Error::Error;
};
struct DetachedTensor : Error {
    using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

struct Tensor {
    Shape shape{0};
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(numel(shape), fill) {}
    Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != numel(shape))
            throw ShapeMismatch("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                                shape_str(shape));
    }
    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }
    double item() const {
        if (data.size() != 1) throw NotScalar("item() on tensor of shape " + shape_str(shape));
        return data[0];
    }
    bool all_finite() const {
        return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
    }
    friend bool operator==(const Tensor&, const Tensor&) = default;
};

class Tape;

/// Handle to a value recorded on a tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    const Tensor& value() const;
    const Shape& shape() const { return value().shape; }
    int id() const { return id_; }
    Tape& tape() const {
        if (!tape_) throw DetachedTensor("variable is not attached to a tape");
        return *tape_;
    }
    bool attached() const { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

/// Gradients of a scalar loss with respect to every trainable leaf.
class GradientMap {
public:
    GradientMap() = default;
    GradientMap(std::vector<Tensor> g, std::vector<char> present) : grads_(std::move(g)), present_(std::move(present)) {}

    const Tensor& operator[](Var v) const { return at(v.id()); }
    const Tensor& at(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= grads_.size() || !present_[id])
            throw DetachedTensor("node " + std::to_string(id) + " is not a trainable leaf");
        return grads_[id];
    }

private:
    std::vector<Tensor> grads_;
    std::vector<char> present_;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, int self)>;

    struct Node {
        Tensor value;
        std::vector<int> parents;
        BackwardFn backward;
        bool requires_grad = false;
        bool leaf = false;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Trainable input.
    Var leaf(Tensor t) { return push({std::move(t), {}, {}, true, true}); }
    /// Input that never receives a gradient.
    Var constant(Tensor t) { return push({std::move(t), {}, {}, false, false}); }

    /// Records an operation result. The backward closure is dropped when no
    /// parent needs a gradient.
    Var record(Tensor value, std::vector<int> parents, BackwardFn fn) {
        bool rg = false;
        for (int p : parents) rg = rg || nodes_.at(p).requires_grad;
        return push({std::move(value), std::move(parents), rg ? std::move(fn) : BackwardFn{}, rg, false});
    }

    const Tensor& value(int id) const { return nodes_.at(id).value; }
    bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    /// Upstream gradient of a node during backward.
    const Tensor& grad(int id) const { return grads_.at(id); }

    /// Gradient accumulator for a parent; nullptr if the parent needs none.
    Tensor* grad_sink(int id) {
        if (!nodes_.at(id).requires_grad) return nullptr;
        Tensor& g = grads_.at(id);
        if (g.data.empty() && numel(nodes_[id].value.shape) != 0) g = Tensor(nodes_[id].value.shape, 0.0);
        return &g;
    }

    GradientMap backward(Var loss) {
        if (!loss.attached() || &loss.tape() != this) throw DetachedTensor("loss does not belong to this tape");
        const Tensor& lv = value(loss.id());
        if (lv.size() != 1) throw NotScalar("backward needs a scalar loss, got shape " + shape_str(lv.shape));
        grads_.assign(nodes_.size(), Tensor{});
        if (nodes_[loss.id()].requires_grad) grads_[loss.id()] = Tensor(lv.shape, 1.0);
        for (int id = loss.id(); id >= 0; --id) {
            Node& n = nodes_[id];
            if (n.backward && !grads_[id].data.empty()) n.backward(*this, id);
        }
        std::vector<Tensor> out(nodes_.size());
        std::vector<char> present(nodes_.size(), 0);
        for (std::size_t id = 0; id < nodes_.size(); ++id) {
            if (!nodes_[id].leaf) continue;
            present[id] = 1;
            out[id] = grads_[id].data.empty() ? Tensor(nodes_[id].value.shape, 0.0) : std::move(grads_[id]);
        }
        grads_.clear();
        return GradientMap(std::move(out), std::move(present));
    }

private:
    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return Var(this, static_cast<int>(nodes_.size() - 1));
    }

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
};

inline const Tensor& Var::value() const { return tape().value(id_); }

namespace detail {

inline void require_same_tape(Var a, Var b) {
    if (&a.tape() != &b.tape()) throw DetachedTensor("operands live on different tapes");
}

inline void require_same_shape(const char* op, Var a, Var b) {
    if (a.shape() != b.shape())
        throw ShapeMismatch(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

inline void axpy(Tensor& dst, const Tensor& src, double alpha = 1.0) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
}

}  // namespace detail

/// Records an operation whose forward value and backward rule are supplied by
/// the caller. `fn` receives the upstream gradient and one sink per parent
/// (nullptr for parents that need no gradient).
inline Var custom(std::vector<Var> parents, Tensor value,
                  std::function<void(const Tensor& upstream, std::span<Tensor*> sinks)> fn) {
    if (parents.empty()) throw DetachedTensor("custom op needs at least one parent");
    Tape& t = parents.front().tape();
    std::vector<int> ids;
    for (Var p : parents) {
        detail::require_same_tape(parents.front(), p);
        ids.push_back(p.id());
    }
    return t.record(std::move(value), ids, [ids, fn = std::move(fn)](Tape& tape, int self) {
        std::vector<Tensor*> sinks;
        for (int id : ids) sinks.push_back(tape.grad_sink(id));
        fn(tape.grad(self), sinks);
    });
}

//////////////////////////// elementwise ////////////////////////////

inline Var add(Var a, Var b) {
    detail::require_same_tape(a, b);
    detail::require_same_shape("add", a, b);
    Tensor out = a.value();
    detail::axpy(out, b.value());
    return a.tape().record(std::move(out), {a.id(), b.id()}, [ia = a.id(), ib = b.id()](Tape& t, int self) {
        if (Tensor* g = t.grad_sink(ia)) detail::axpy(*g, t.grad(self));
        if (Tensor* g = t.grad_sink(ib)) detail::axpy(*g, t.grad(self));
    });
}

inline Var sub(Var a, Var b) {
    detail::require_same_tape(a, b);
    detail::require_same_shape("sub", a, b);
    Tensor out = a.value();
    detail::axpy(out, b.value(), -1.0);
    return a.tape().record(std::move(out), {a.id(), b.id()}, [ia = a.id(), ib = b.id()](Tape& t, int self) {
        if (Tensor* g = t.grad_sink(ia)) detail::axpy(*g, t.grad(self));
        if (Tensor* g = t.grad_sink(ib)) detail::axpy(*g, t.grad(self), -1.0);
    });
}

inline Var mul(Var a, Var b) {
    detail::require_same_tape(a, b);
    detail::require_same_shape("mul", a, b);
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return a.tape().record(std::move(out), {a.id(), b.id()}, [ia = a.id(), ib = b.id()](Tape& t, int self) {
        const Tensor& up = t.grad(self);
        if (Tensor* g = t.grad_sink(ia))
            for (std::size_t i = 0; i < up.size(); ++i) (*g)[i] += up[i] * t.value(ib)[i];
        if (Tensor* g = t.grad_sink(ib))
            for (std::size_t i = 0; i < up.size(); ++i) (*g)[i] += up[i] * t.value(ia)[i];
    });
}

inline Var scale(Var a, double s) {
    Tensor out = a.value();
    for (double& v : out.data) v *= s;
    return a.tape().record(std::move(out), {a.id()}, [ia = a.id(), s](Tape& t, int self) {
        if (Tensor* g = t.grad_sink(ia)) detail::axpy(*g, t.grad(self), s);
    });
}

inline Var relu(Var a) {
    Tensor out = a.value();
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return a.tape().record(std::move(out), {a.id()}, [ia = a.id()](Tape& t, int self) {
        if (Tensor* g = t.grad_sink(ia)) {
            const Tensor& x = t.value(ia);
            const Tensor& up = t.grad(self);
            for (std::size_t i = 0; i < up.size(); ++i)
                if (x[i] > 0.0) (*g)[i] += up[i];
        }
    });
}

inline Var square(Var a) {
    Tensor out = a.value();
    for (double& v : out.data) v *= v;
    return a.tape().record(std::move(out), {a.id()}, [ia = a.id()](Tape& t, int self) {
        if (Tensor* g = t.grad_sink(ia)) {
            const Tensor& x = t.value(ia);
            const Tensor& up = t.grad(self);
            for (std::size_t i = 0; i < up.size(); ++i) (*g)[i] += 2.0 * x[i] * up[i];
        }
    });
}

/// Natural log; non-positive inputs yield -inf/NaN like std::log.
inline Var log(Var a) {
    Tensor out = a.value();
    for (double& v : out.data) v = std::log(v);
    return a.tape().record(std::move(out), {a.id()}, [ia = a.id()](Tape& t, int self) {
        if (Tensor* g = t.grad_sink(ia)) {
            const Tensor& x = t.value(ia);
            const Tensor& up = t.grad(self);
            for (std::size_t i = 0; i < up.size(); ++i) (*g)[i] += up[i] / x[i];
        }
    });
}

//////////////////////////// reductions ////////////////////////////

inline Var sum(Var a) {
    const Tensor& x = a.value();
    const double s = std::accumulate(x.data.begin(), x.data.end(), 0.0);
    return a.tape().record(Tensor::scalar(s), {a.id()}, [ia = a.id()](Tape& t, int self) {
        if (Tensor* g = t.grad_sink(ia)) {
            const double up = t.grad(self)[0];
            for (double& v : g->data) v += up;
        }
    });
}

inline Var frobenius_norm_sq(Var a) {
    const Tensor& x = a.value();
    double s = 0.0;
    for (double v : x.data) s += v * v;
    return a.tape().record(Tensor::scalar(s), {a.id()}, [ia = a.id()](Tape& t, int self) {
        if (Tensor* g = t.grad_sink(ia)) {
            const double up = t.grad(self)[0];
            const Tensor& x = t.value(ia);
            for (std::size_t i = 0; i < x.size(); ++i) (*g)[i] += 2.0 * x[i] * up;
        }
    });
}

namespace detail {

struct AxisSplit {
    std::size_t outer, extent, inner;
    Shape reduced;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
    if (axis >= s.size())
        throw ShapeMismatch(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                            shape_str(s));
    AxisSplit r{1, s[axis], 1, {}};
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != axis) r.reduced.push_back(s[i]);
    return r;
}

}  // namespace detail

/// Maximum along `axis` (axis removed). Ties route the gradient to the first maximum.
inline Var max_over_axis(Var a, std::size_t axis) {
    const Tensor& x = a.value();
    const auto sp = detail::split_axis(x.shape, axis, "max_over_axis");
    if (sp.extent == 0) throw ShapeMismatch("max_over_axis: empty axis in shape " + shape_str(x.shape));
    Tensor out(sp.reduced);
    std::vector<std::size_t> argmax(out.size());
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            std::size_t best = o * sp.extent * sp.inner + i;
            for (std::size_t k = 1; k < sp.extent; ++k) {
                const std::size_t idx = (o * sp.extent + k) * sp.inner + i;
                if (x[idx] > x[best]) best = idx;
            }
            out[o * sp.inner + i] = x[best];
            argmax[o * sp.inner + i] = best;
        }
    return a.tape().record(std::move(out), {a.id()}, [ia = a.id(), argmax = std::move(argmax)](Tape& t, int self) {
        if (Tensor* g = t.grad_sink(ia)) {
            const Tensor& up = t.grad(self);
            for (std::size_t j = 0; j < up.size(); ++j) (*g)[argmax[j]] += up[j];
        }
    });
}

inline Var mean_over_axis(Var a, std::size_t axis) {
    const Tensor& x = a.value();
    const auto sp = detail::split_axis(x.shape, axis, "mean_over_axis");
    if (sp.extent == 0) throw ShapeMismatch("mean_over_axis: empty axis in shape " + shape_str(x.shape));
    Tensor out(sp.reduced);
    const double inv = 1.0 / static_cast<double>(sp.extent);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t k = 0; k < sp.extent; ++k)
            for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += x[(o * sp.extent + k) * sp.inner + i];
    for (double& v : out.data) v *= inv;
    return a.tape().record(std::move(out), {a.id()}, [ia = a.id(), sp, inv](Tape& t, int self) {
        if (Tensor* g = t.grad_sink(ia)) {
            const Tensor& up = t.grad(self);
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t k = 0; k < sp.extent; ++k)
                    for (std::size_t i = 0; i < sp.inner; ++i)
                        (*g)[(o * sp.extent + k) * sp.inner + i] += inv * up[o * sp.inner + i];
        }
    });
}

/// Softmax along the last axis.
inline Var softmax(Var a) {
    const Tensor& x = a.value();
    if (x.rank() == 0 || x.shape.back() == 0) throw ShapeMismatch("softmax: needs a non-empty last axis");
    const std::size_t n = x.shape.back(), rows = x.size() / n;
    Tensor out(x.shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = &x.data[r * n];
        double* o = &out.data[r * n];
        const double m = *std::max_element(in, in + n);
        double z = 0.0;
        for (std::size_t k = 0; k < n; ++k) z += (o[k] = std::exp(in[k] - m));
        for (std::size_t k = 0; k < n; ++k) o[k] /= z;
    }
    return a.tape().record(std::move(out), {a.id()}, [ia = a.id(), n, rows](Tape& t, int self) {
        if (Tensor* g = t.grad_sink(ia)) {
            const Tensor& y = t.value(self);
            const Tensor& up = t.grad(self);
            for (std::size_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::size_t k = 0; k < n; ++k) dot += up[r * n + k] * y[r * n + k];
                for (std::size_t k = 0; k < n; ++k) (*g)[r * n + k] += y[r * n + k] * (up[r * n + k] - dot);
            }
        }
    });
}

//////////////////////////// shape ops ////////////////////////////

inline Var reshape(Var a, Shape shape) {
    if (numel(shape) != a.value().size())
        throw ShapeMismatch("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    Tensor out(std::move(shape), a.value().data);
    return a.tape().record(std::move(out), {a.id()}, [ia = a.id()](Tape& t, int self) {
        if (Tensor* g = t.grad_sink(ia)) detail::axpy(*g, t.grad(self));
    });
}

namespace detail {

inline std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

/// For each output flat index, the input flat index under axis permutation `perm`.
inline std::vector<std::size_t> permute_map(const Shape& in, const std::vector<std::size_t>& perm) {
    Shape out_shape(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out_shape[i] = in[perm[i]];
    const auto in_st = strides_of(in);
    std::vector<std::size_t> map(numel(in));
    std::vector<std::size_t> idx(in.size(), 0);
    for (std::size_t flat = 0; flat < map.size(); ++flat) {
        std::size_t src = 0;
        for (std::size_t d = 0; d < in.size(); ++d) src += idx[d] * in_st[perm[d]];
        map[flat] = src;
        for (std::size_t d = in.size(); d-- > 0;) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
    return map;
}

}  // namespace detail

/// General axis permutation; out.shape[i] = in.shape[perm[i]].
inline Var transpose(Var a, std::vector<std::size_t> perm) {
    const Tensor& x = a.value();
    std::vector<std::size_t> check = perm;
    std::sort(check.begin(), check.end());
    for (std::size_t i = 0; i < check.size(); ++i)
        if (check.size() != x.rank() || check[i] != i)
            throw ShapeMismatch("transpose: invalid permutation for shape " + shape_str(x.shape));
    Shape out_shape(x.rank());
    for (std::size_t i = 0; i < x.rank(); ++i) out_shape[i] = x.shape[perm[i]];
    auto map = detail::permute_map(x.shape, perm);
    Tensor out(out_shape);
    for (std::size_t i = 0; i < map.size(); ++i) out[i] = x[map[i]];
    return a.tape().record(std::move(out), {a.id()}, [ia = a.id(), map = std::move(map)](Tape& t, int self) {
        if (Tensor* g = t.grad_sink(ia)) {
            const Tensor& up = t.grad(self);
            for (std::size_t i = 0; i < map.size(); ++i) (*g)[map[i]] += up[i];
        }
    });
}

inline Var transpose(Var a) {
    if (a.value().rank() != 2) throw ShapeMismatch("transpose: 2D form needs a matrix, got " + shape_str(a.shape()));
    return transpose(a, {1, 0});
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeMismatch("concat: no inputs");
    const Shape& ref = parts.front().shape();
    if (axis >= ref.size()) throw ShapeMismatch("concat: axis out of range for " + shape_str(ref));
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (Var p : parts) {
        detail::require_same_tape(parts.front(), p);
        const Shape& s = p.shape();
        bool ok = s.size() == ref.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == ref[d];
        if (!ok) throw ShapeMismatch("concat: incompatible shapes " + shape_str(ref) + " and " + shape_str(s));
        out_shape[axis] += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
    for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
    Tensor out(out_shape);
    std::vector<int> ids;
    std::vector<std::size_t> extents;
    std::size_t offset = 0;
    for (Var p : parts) {
        const Tensor& x = p.value();
        const std::size_t e = x.shape[axis];
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(&x.data[o * e * inner], e * inner, &out.data[(o * out_shape[axis] + offset) * inner]);
        offset += e;
        ids.push_back(p.id());
        extents.push_back(e);
    }
    const std::size_t total = out_shape[axis];
    return parts.front().tape().record(std::move(out), ids, [ids, extents, outer, inner, total](Tape& t, int self) {
        const Tensor& up = t.grad(self);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (Tensor* g = t.grad_sink(ids[k]))
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t j = 0; j < extents[k] * inner; ++j)
                        (*g)[o * extents[k] * inner + j] += up[(o * total + offset) * inner + j];
            offset += extents[k];
        }
    });
}

/// Rows [begin, end) of the leading axis.
inline Var slice(Var a, std::size_t begin, std::size_t end) {
    const Tensor& x = a.value();
    if (x.rank() == 0 || begin > end || end > x.shape[0])
        throw ShapeMismatch("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                            ") invalid for shape " + shape_str(x.shape));
    const std::size_t row = x.size() / std::max<std::size_t>(x.shape[0], 1);
    Shape s = x.shape;
    s[0] = end - begin;
    Tensor out(s, std::vector<double>(x.data.begin() + begin * row, x.data.begin() + end * row));
    return a.tape().record(std::move(out), {a.id()}, [ia = a.id(), begin, row](Tape& t, int self) {
        if (Tensor* g = t.grad_sink(ia)) {
            const Tensor& up = t.grad(self);
            for (std::size_t i = 0; i < up.size(); ++i) (*g)[begin * row + i] += up[i];
        }
    });
}

//////////////////////////// linear algebra ////////////////////////////

namespace detail {

// C(m,n) += A(m,k) * B(k,n), all row-major.
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* A, const double* B, double* C) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double a = A[i * k + p];
            if (a == 0.0) continue;
            const double* b = B + p * n;
            double* c = C + i * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
        }
}

// C(m,n) += A(m,k) * B(n,k)^T. Transposing B first keeps the inner loop
// contiguous so it vectorizes like gemm_nn.
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* A, const double* B, double* C) {
    std::vector<double> bt(k * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = B[j * k + p];
    gemm_nn(m, k, n, A, bt.data(), C);
}

// C(m,n) += A(k,m)^T * B(k,n)
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* A, const double* B, double* C) {
    for (std::size_t p = 0; p < k; ++p)
        for (std::size_t i = 0; i < m; ++i) {
            const double a = A[p * m + i];
            if (a == 0.0) continue;
            const double* b = B + p * n;
            double* c = C + i * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
        }
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
    detail::require_same_tape(a, b);
    const Tensor &A = a.value(), &B = b.value();
    if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0])
        throw ShapeMismatch("matmul: shapes " + shape_str(A.shape) + " and " + shape_str(B.shape));
    const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
    Tensor out({m, n});
    detail::gemm_nn(m, k, n, A.data.data(), B.data.data(), out.data.data());
    return a.tape().record(std::move(out), {a.id(), b.id()}, [ia = a.id(), ib = b.id(), m, k, n](Tape& t, int self) {
        const Tensor& up = t.grad(self);
        if (Tensor* g = t.grad_sink(ia)) detail::gemm_nt(m, n, k, up.data.data(), t.value(ib).data.data(), g->data.data());
        if (Tensor* g = t.grad_sink(ib)) detail::gemm_tn(k, m, n, t.value(ia).data.data(), up.data.data(), g->data.data());
    });
}

/// y = x W^T + b with x (M, in), W (out, in), b (out).
inline Var linear(Var x, Var w, Var b) {
    detail::require_same_tape(x, w);
    detail::require_same_tape(x, b);
    const Tensor &X = x.value(), &W = w.value(), &B = b.value();
    if (X.rank() != 2 || W.rank() != 2 || B.rank() != 1 || X.shape[1] != W.shape[1] || B.shape[0] != W.shape[0])
        throw ShapeMismatch("linear: x " + shape_str(X.shape) + ", W " + shape_str(W.shape) + ", b " +
                            shape_str(B.shape));
    const std::size_t M = X.shape[0], in = X.shape[1], out_f = W.shape[0];
    Tensor out({M, out_f});
    for (std::size_t r = 0; r < M; ++r) std::copy(B.data.begin(), B.data.end(), &out.data[r * out_f]);
    detail::gemm_nt(M, in, out_f, X.data.data(), W.data.data(), out.data.data());
    return x.tape().record(
        std::move(out), {x.id(), w.id(), b.id()},
        [ix = x.id(), iw = w.id(), ib = b.id(), M, in, out_f](Tape& t, int self) {
            const Tensor& up = t.grad(self);
            if (Tensor* g = t.grad_sink(ix))
                detail::gemm_nn(M, out_f, in, up.data.data(), t.value(iw).data.data(), g->data.data());
            if (Tensor* g = t.grad_sink(iw))
                detail::gemm_tn(out_f, M, in, up.data.data(), t.value(ix).data.data(), g->data.data());
            if (Tensor* g = t.grad_sink(ib))
                for (std::size_t r = 0; r < M; ++r)
                    for (std::size_t j = 0; j < out_f; ++j) (*g)[j] += up[r * out_f + j];
        });
}

//////////////////////////// convolution ////////////////////////////

struct Conv2dGeometry {
    std::size_t batch, in_c, in_h, in_w, out_c, k_h, k_w, stride, pad, out_h, out_w;
};

namespace detail {

inline Conv2dGeometry conv_geometry(const Shape& xs, const Shape& ws, std::size_t stride, std::size_t pad) {
    if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1] || stride == 0)
        throw ShapeMismatch("conv2d: input " + shape_str(xs) + " incompatible with kernel " + shape_str(ws));
    Conv2dGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], stride, pad, 0, 0};
    if (g.in_h + 2 * pad < g.k_h || g.in_w + 2 * pad < g.k_w)
        throw ShapeMismatch("conv2d: kernel " + shape_str(ws) + " larger than padded input " + shape_str(xs));
    g.out_h = (g.in_h + 2 * pad - g.k_h) / stride + 1;
    g.out_w = (g.in_w + 2 * pad - g.k_w) / stride + 1;
    return g;
}

// Valid output range [lo, hi) along one axis for kernel tap `k`.
inline std::pair<std::size_t, std::size_t> tap_range(std::size_t k, std::size_t pad, std::size_t stride,
                                                     std::size_t in, std::size_t out) {
    // need 0 <= o*stride + k - pad < in
    const long long kk = static_cast<long long>(k) - static_cast<long long>(pad);
    long long lo = kk >= 0 ? 0 : (-kk + static_cast<long long>(stride) - 1) / static_cast<long long>(stride);
    long long hi = (static_cast<long long>(in) - kk + static_cast<long long>(stride) - 1) / static_cast<long long>(stride);
    hi = std::min<long long>(hi, static_cast<long long>(out));
    if (hi < lo) hi = lo;
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Visits every (image offset, patch-matrix offset) pair of one image's
// (in_c*kh*kw, out_h*out_w) patch matrix. Padding taps are skipped.
template <typename Fn>
inline void for_each_patch_entry(const Conv2dGeometry& g, Fn&& fn) {
    const std::size_t npix = g.out_h * g.out_w;
    for (std::size_t ic = 0; ic < g.in_c; ++ic)
        for (std::size_t ky = 0; ky < g.k_h; ++ky) {
            const auto [oy0, oy1] = tap_range(ky, g.pad, g.stride, g.in_h, g.out_h);
            for (std::size_t kx = 0; kx < g.k_w; ++kx) {
                const auto [ox0, ox1] = tap_range(kx, g.pad, g.stride, g.in_w, g.out_w);
                if (ox0 >= ox1) continue;
                const std::size_t c0 = ((ic * g.k_h + ky) * g.k_w + kx) * npix;
                const std::size_t ix0 = ox0 * g.stride + kx - g.pad;
                for (std::size_t oy = oy0; oy < oy1; ++oy) {
                    const std::size_t i0 = (ic * g.in_h + oy * g.stride + ky - g.pad) * g.in_w + ix0;
                    const std::size_t r0 = c0 + oy * g.out_w;
                    for (std::size_t j = 0, ox = ox0; ox < ox1; ++ox, j += g.stride) fn(i0 + j, r0 + ox);
                }
            }
        }
}

inline void im2col(const Conv2dGeometry& g, const double* img, double* col) {
    for_each_patch_entry(g, [&](std::size_t i, std::size_t c) { col[c] = img[i]; });
}

inline void col2im_add(const Conv2dGeometry& g, const double* col, double* img) {
    for_each_patch_entry(g, [&](std::size_t i, std::size_t c) { img[i] += col[c]; });
}

}  // namespace detail

/// 2D cross-correlation, NCHW input, (out_c, in_c, kh, kw) kernel, zero padding.
inline Var conv2d(Var x, Var w, std::size_t stride, std::size_t padding) {
    detail::require_same_tape(x, w);
    const Tensor &X = x.value(), &W = w.value();
    const auto g = detail::conv_geometry(X.shape, W.shape, stride, padding);
    Tensor out({g.batch, g.out_c, g.out_h, g.out_w});
    const std::size_t in_img = g.in_c * g.in_h * g.in_w, npix = g.out_h * g.out_w, kc = g.in_c * g.k_h * g.k_w;
    std::vector<double> col(kc * npix);
    for (std::size_t b = 0; b < g.batch; ++b) {
        std::fill(col.begin(), col.end(), 0.0);
        detail::im2col(g, &X.data[b * in_img], col.data());
        detail::gemm_nn(g.out_c, kc, npix, W.data.data(), col.data(), &out.data[b * g.out_c * npix]);
    }
    return x.tape().record(std::move(out), {x.id(), w.id()}, [ix = x.id(), iw = w.id(), g](Tape& t, int self) {
        const Tensor& up = t.grad(self);
        const Tensor &X = t.value(ix), &W = t.value(iw);
        Tensor* gx = t.grad_sink(ix);
        Tensor* gw = t.grad_sink(iw);
        const std::size_t in_img = g.in_c * g.in_h * g.in_w, npix = g.out_h * g.out_w, kc = g.in_c * g.k_h * g.k_w;
        std::vector<double> col(kc * npix);
        for (std::size_t b = 0; b < g.batch; ++b) {
            const double* u = &up.data[b * g.out_c * npix];
            if (gw) {
                std::fill(col.begin(), col.end(), 0.0);
                detail::im2col(g, &X.data[b * in_img], col.data());
                detail::gemm_nt(g.out_c, npix, kc, u, col.data(), gw->data.data());
            }
            if (gx) {
                std::fill(col.begin(), col.end(), 0.0);
                detail::gemm_tn(kc, g.out_c, npix, W.data.data(), u, col.data());
                detail::col2im_add(g, col.data(), &gx->data[b * in_img]);
            }
        }
    });
}

/// Adds a per-channel bias to an NCHW tensor.
inline Var add_channel_bias(Var x, Var bias) {
    detail::require_same_tape(x, bias);
    const Tensor &X = x.value(), &B = bias.value();
    if (X.rank() != 4 || B.rank() != 1 || B.shape[0] != X.shape[1])
        throw ShapeMismatch("add_channel_bias: x " + shape_str(X.shape) + ", bias " + shape_str(B.shape));
    const std::size_t N = X.shape[0], C = X.shape[1], plane = X.shape[2] * X.shape[3];
    Tensor out = X;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < plane; ++i) out[(n * C + c) * plane + i] += B[c];
    return x.tape().record(std::move(out), {x.id(), bias.id()}, [ix = x.id(), ib = bias.id(), N, C, plane](Tape& t, int self) {
        const Tensor& up = t.grad(self);
        if (Tensor* g = t.grad_sink(ix)) detail::axpy(*g, up);
        if (Tensor* g = t.grad_sink(ib))
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < plane; ++i) (*g)[c] += up[(n * C + c) * plane + i];
    });
}

inline Var conv2d(Var x, Var w, Var bias, std::size_t stride, std::size_t padding) {
    return add_channel_bias(conv2d(x, w, stride, padding), bias);
}

/// Nearest-neighbour 2x upsampling of an NCHW tensor.
inline Var upsample2x(Var x) {
    const Tensor& X = x.value();
    if (X.rank() != 4) throw ShapeMismatch("upsample2x: needs NCHW input, got " + shape_str(X.shape));
    const std::size_t NC = X.shape[0] * X.shape[1], H = X.shape[2], W = X.shape[3];
    Tensor out({X.shape[0], X.shape[1], 2 * H, 2 * W});
    for (std::size_t p = 0; p < NC; ++p)
        for (std::size_t y = 0; y < 2 * H; ++y)
            for (std::size_t xx = 0; xx < 2 * W; ++xx)
                out[(p * 2 * H + y) * 2 * W + xx] = X[(p * H + y / 2) * W + xx / 2];
    return x.tape().record(std::move(out), {x.id()}, [ix = x.id(), NC, H, W](Tape& t, int self) {
        if (Tensor* g = t.grad_sink(ix)) {
            const Tensor& up = t.grad(self);
            for (std::size_t p = 0; p < NC; ++p)
                for (std::size_t y = 0; y < 2 * H; ++y)
                    for (std::size_t xx = 0; xx < 2 * W; ++xx)
                        (*g)[(p * H + y / 2) * W + xx / 2] += up[(p * 2 * H + y) * 2 * W + xx];
        }
    });
}

//////////////////////////// batch norm ////////////////////////////

struct BatchNormStats {
    Tensor mean;
    Tensor var;

    explicit BatchNormStats(std::size_t channels = 0) : mean({channels}, 0.0), var({channels}, 1.0) {}
};

enum class Mode { Train, Eval };

struct BatchNormOptions {
    Mode mode = Mode::Train;
    double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
    double eps = 1e-5;
    /// Only the leading `stat_items` entries of axis 0 contribute to the batch
    /// statistics (0 = all). The remaining entries are normalized with the
    /// same statistics.
    std::size_t stat_items = 0;
    bool update_running = true;
};

/// Batch normalization over channel axis 1 of (N, C) or (N, C, H, W) input.
inline Var batchnorm(Var x, Var gamma, Var beta, BatchNormStats& running, const BatchNormOptions& opt = {}) {
    detail::require_same_tape(x, gamma);
    detail::require_same_tape(x, beta);
    const Tensor& X = x.value();
    if ((X.rank() != 2 && X.rank() != 4) || gamma.shape() != Shape{X.shape[1]} || beta.shape() != Shape{X.shape[1]})
        throw ShapeMismatch("batchnorm: x " + shape_str(X.shape) + ", gamma " + shape_str(gamma.shape()) +
                            ", beta " + shape_str(beta.shape()));
    const std::size_t N = X.shape[0], C = X.shape[1], plane = X.rank() == 4 ? X.shape[2] * X.shape[3] : 1;
    if (running.mean.shape != Shape{C}) running = BatchNormStats(C);
    const std::size_t stat_n = opt.stat_items == 0 ? N : std::min(opt.stat_items, N);
    auto at = [&](std::size_t n, std::size_t c, std::size_t i) { return (n * C + c) * plane + i; };

    std::vector<double> mean(C), inv_std(C);
    const bool train = opt.mode == Mode::Train;
    if (train) {
        if (stat_n * plane == 0) throw ShapeMismatch("batchnorm: no items for batch statistics");
        const double cnt = static_cast<double>(stat_n * plane);
        for (std::size_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::size_t n = 0; n < stat_n; ++n)
                for (std::size_t i = 0; i < plane; ++i) s += X[at(n, c, i)];
            const double mu = s / cnt;
            double v = 0.0;
            for (std::size_t n = 0; n < stat_n; ++n)
                for (std::size_t i = 0; i < plane; ++i) {
                    const double d = X[at(n, c, i)] - mu;
                    v += d * d;
                }
            v /= cnt;
            mean[c] = mu;
            inv_std[c] = 1.0 / std::sqrt(v + opt.eps);
            if (opt.update_running) {
                running.mean[c] = opt.momentum * running.mean[c] + (1.0 - opt.momentum) * mu;
                running.var[c] = opt.momentum * running.var[c] + (1.0 - opt.momentum) * v;
            }
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = running.mean[c];
            inv_std[c] = 1.0 / std::sqrt(running.var[c] + opt.eps);
        }
    }
    Tensor xhat(X.shape);
    Tensor out(X.shape);
    const Tensor &G = gamma.value(), &Bt = beta.value();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < plane; ++i) {
                const std::size_t k = at(n, c, i);
                xhat[k] = (X[k] - mean[c]) * inv_std[c];
                out[k] = G[c] * xhat[k] + Bt[c];
            }
    return x.tape().record(
        std::move(out), {x.id(), gamma.id(), beta.id()},
        [ix = x.id(), ig = gamma.id(), ib = beta.id(), xhat = std::move(xhat), inv_std = std::move(inv_std), N, C,
         plane, stat_n, train](Tape& t, int self) {
            const Tensor& up = t.grad(self);
            const Tensor& G = t.value(ig);
            auto at = [&](std::size_t n, std::size_t c, std::size_t i) { return (n * C + c) * plane + i; };
            Tensor* gx = t.grad_sink(ix);
            Tensor* gg = t.grad_sink(ig);
            Tensor* gb = t.grad_sink(ib);
            const double cnt = static_cast<double>(stat_n * plane);
            for (std::size_t c = 0; c < C; ++c) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t i = 0; i < plane; ++i) {
                        const std::size_t k = at(n, c, i);
                        sum_g += up[k];
                        sum_gx += up[k] * xhat[k];
                    }
                if (gg) (*gg)[c] += sum_gx;
                if (gb) (*gb)[c] += sum_g;
                if (!gx) continue;
                // d x_k = gamma/sigma * (g_k - [k in stats] (sum g + xhat_k sum g xhat) / m)
                const double a = G[c] * inv_std[c];
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t i = 0; i < plane; ++i) {
                        const std::size_t k = at(n, c, i);
                        double v = up[k];
                        if (train && n < stat_n) v -= (sum_g + xhat[k] * sum_gx) / cnt;
                        (*gx)[k] += a * v;
                    }
            }
        });
}

//////////////////////////// optimizers ////////////////////////////

inline void check_update_shapes(std::span<Tensor* const> params, std::span<const Tensor* const> grads) {
    if (params.size() != grads.size())
        throw ShapeMismatch("optimizer: " + std::to_string(params.size()) + " params but " +
                            std::to_string(grads.size()) + " gradients");
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i]->shape != grads[i]->shape)
            throw ShapeMismatch("optimizer: param " + shape_str(params[i]->shape) + " vs grad " +
                                shape_str(grads[i]->shape));
}

inline void sgd_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, double lr) {
    check_update_shapes(params, grads);
    for (std::size_t i = 0; i < params.size(); ++i) detail::axpy(*params[i], *grads[i], -lr);
}

struct AdamState {
    std::vector<Tensor> m, v;
    long step = 0;
};

struct AdamOptions {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

inline void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, AdamState& state,
                      const AdamOptions& opt = {}) {
    check_update_shapes(params, grads);
    if (state.m.empty()) {
        for (Tensor* p : params) {
            state.m.emplace_back(p->shape, 0.0);
            state.v.emplace_back(p->shape, 0.0);
        }
    }
    if (state.m.size() != params.size()) throw ShapeMismatch("adam: state does not match parameter list");
    ++state.step;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor &p = *params[i], &m = state.m[i], &v = state.v[i];
        const Tensor& g = *grads[i];
        if (m.shape != p.shape) throw ShapeMismatch("adam: state shape mismatch for parameter " + std::to_string(i));
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * g[k];
            v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * g[k] * g[k];
            p[k] -= opt.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + opt.eps);
        }
    }
}

}  // namespace s2r::ad
