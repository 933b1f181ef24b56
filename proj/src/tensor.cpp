// SPDX-License-Identifier: Apache-2.0

#include "mckd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

#include "mckd/error.hpp"

namespace mckd {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(mckd::numel(shape_), fill) {
    for (auto e : shape_) {
        if (e == 0) throw Error(ErrorKind::Dimension, "tensor extents must be positive: " + shape_string(shape_));
    }
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto e : shape_) {
        if (e == 0) throw Error(ErrorKind::Dimension, "tensor extents must be positive: " + shape_string(shape_));
    }
    if (mckd::numel(shape_) != data_.size()) {
        throw Error(ErrorKind::Dimension, "tensor data length " + std::to_string(data_.size()) +
                                              " does not match shape " + shape_string(shape_));
    }
}

Tensor Tensor::vector(std::initializer_list<double> v) { return Tensor({v.size()}, std::vector<double>(v)); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(m * n);
    for (const auto& r : rows) {
        if (r.size() != n) throw Error(ErrorKind::Dimension, "ragged matrix literal");
        data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({m, n}, std::move(data));
}

double Tensor::item() const {
    if (data_.size() != 1) {
        throw Error(ErrorKind::Dimension, "item() on tensor of shape " + shape_string(shape_));
    }
    return data_[0];
}

std::span<double> Tensor::grad() {
    if (grad_.empty()) grad_.assign(data_.size(), 0.0);
    return grad_;
}

void Tensor::zero_grad() { grad_.assign(data_.size(), 0.0); }

Tensor Tensor::reshaped(Shape shape) const {
    if (mckd::numel(shape) != data_.size()) {
        throw Error(ErrorKind::Dimension,
                    "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

const char* to_string(OpKind kind) noexcept {
    switch (kind) {
        case OpKind::Param: return "param";
        case OpKind::Constant: return "constant";
        case OpKind::MatMul: return "matmul";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Div: return "div";
        case OpKind::Relu: return "relu";
        case OpKind::Exp: return "exp";
        case OpKind::Log: return "log";
        case OpKind::Abs: return "abs";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Sum: return "sum";
        case OpKind::SumAxis: return "sum_axis";
        case OpKind::Concat: return "concat";
        case OpKind::Reshape: return "reshape";
        case OpKind::Block: return "block";
        case OpKind::Softmax: return "softmax";
        case OpKind::LogSoftmaxRows: return "log_softmax_rows";
        case OpKind::SoftmaxRows: return "softmax_rows";
        case OpKind::AddBias: return "add_bias";
        case OpKind::RowNorm2: return "row_norm2";
        case OpKind::ImputeMean: return "impute_mean";
        case OpKind::ScaleBlocks: return "scale_blocks";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const {
    if (tape_ == nullptr) throw Error(ErrorKind::Input, "Var is not attached to a tape");
    return tape_->value(id_);
}

Var Tape::param(Tensor& t) {
    Node n{OpKind::Param, t, {}, {}, {}, &t, true};
    n.value.clear_grad();
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor t) {
    t.clear_grad();
    nodes_.push_back(Node{OpKind::Constant, std::move(t), {}, {}, {}, nullptr, false});
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(OpKind kind, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
    bool needs = false;
    for (auto id : inputs) needs = needs || nodes_[id].requires_grad;
    Node n{kind, std::move(value), {}, std::move(inputs), {}, nullptr, needs};
    if (needs) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

void Tape::note_kink_inputs(std::span<const double> xs) {
    for (double x : xs) min_kink_ = std::min(min_kink_, std::abs(x));
}

void Tape::backward(Var loss) {
    if (loss.tape() != this) throw Error(ErrorKind::Input, "backward: loss is not on this tape");
    if (value(loss.id()).numel() != 1) {
        throw Error(ErrorKind::Dimension,
                    "backward: loss must be scalar, got " + shape_string(value(loss.id()).shape()));
    }
    for (std::size_t i = 0; i <= loss.id(); ++i) {
        auto& n = nodes_[i];
        if (n.requires_grad) {
            n.adj.assign(n.value.numel(), 0.0);
        } else {
            n.adj.clear();
        }
    }
    if (!nodes_[loss.id()].requires_grad) return;
    nodes_[loss.id()].adj[0] = 1.0;

    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        auto& n = nodes_[i];
        if (!n.requires_grad) continue;
        if (fault_ && fault_->kind == n.kind) {
            for (auto& g : n.adj) g *= fault_->factor;
        }
        if (n.backward) n.backward(*this, i);
    }
    for (std::size_t i = 0; i <= loss.id(); ++i) {
        auto& n = nodes_[i];
        if (n.bound == nullptr) continue;
        auto g = n.bound->grad();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.adj[k];
    }
}

// ---------------------------------------------------------------------------
// Ops

namespace {

Tape& same_tape(Var a, Var b) {
    if (a.tape() == nullptr || a.tape() != b.tape()) {
        throw Error(ErrorKind::Input, "operands live on different tapes");
    }
    return *a.tape();
}

Tape& tape_of(Var a) {
    if (a.tape() == nullptr) throw Error(ErrorKind::Input, "Var is not attached to a tape");
    return *a.tape();
}

const std::vector<double>& vals(const Tape& t, std::size_t id) { return t.value(id).values(); }

void require_rank(Var x, std::size_t rank, const char* op) {
    if (x.value().rank() != rank) {
        throw Error(ErrorKind::Dimension, std::string(op) + ": expected rank " + std::to_string(rank) +
                                              ", got " + shape_string(x.shape()));
    }
}

// Elementwise binary with scalar broadcast. dfa/dfb return the partials
// of f with respect to each operand at (a, b).
template <typename F, typename DA, typename DB>
Var binary(OpKind kind, Var a, Var b, F f, DA dfa, DB dfb) {
    Tape& t = same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const bool a_scalar = av.numel() == 1 && bv.numel() != 1;
    const bool b_scalar = bv.numel() == 1 && av.numel() != 1;
    if (!a_scalar && !b_scalar && av.shape() != bv.shape()) {
        throw Error(ErrorKind::Dimension, std::string(to_string(kind)) + ": incompatible shapes " +
                                              shape_string(av.shape()) + " and " + shape_string(bv.shape()));
    }
    Shape out_shape = a_scalar ? bv.shape() : av.shape();
    const std::size_t n = numel(out_shape);
    std::vector<double> out(n);
    const auto& ad = av.values();
    const auto& bd = bv.values();
    for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[a_scalar ? 0 : i], bd[b_scalar ? 0 : i]);

    const std::size_t ia = a.id(), ib = b.id();
    return t.record(kind, Tensor(std::move(out_shape), std::move(out)), {ia, ib},
                    [=](Tape& tp, std::size_t self) {
                        const auto& x = vals(tp, ia);
                        const auto& y = vals(tp, ib);
                        auto g = tp.adj(self);
                        const bool ga = tp.requires_grad(ia), gb = tp.requires_grad(ib);
                        auto da = tp.adj(ia);
                        auto db = tp.adj(ib);
                        for (std::size_t i = 0; i < g.size(); ++i) {
                            const double xa = x[a_scalar ? 0 : i];
                            const double yb = y[b_scalar ? 0 : i];
                            if (ga) da[a_scalar ? 0 : i] += g[i] * dfa(xa, yb);
                            if (gb) db[b_scalar ? 0 : i] += g[i] * dfb(xa, yb);
                        }
                    });
}

}  // namespace

Var add(Var a, Var b) {
    return binary(
        OpKind::Add, a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
    return binary(
        OpKind::Sub, a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
    return binary(
        OpKind::Mul, a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Var div(Var a, Var b) {
    return binary(
        OpKind::Div, a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

namespace {

// Unary op whose derivative depends on input x and output y.
template <typename F, typename DF>
Var pointwise(OpKind kind, Var x, F f, DF df) {
    Tape& t = tape_of(x);
    const auto& xd = x.value().values();
    std::vector<double> out(xd.size());
    for (std::size_t i = 0; i < xd.size(); ++i) out[i] = f(xd[i]);
    const std::size_t ix = x.id();
    return t.record(kind, Tensor(x.shape(), std::move(out)), {ix}, [=](Tape& tp, std::size_t self) {
        const auto& xv = vals(tp, ix);
        const auto& yv = vals(tp, self);
        auto g = tp.adj(self);
        auto dx = tp.adj(ix);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * df(xv[i], yv[i]);
    });
}

}  // namespace

Var relu(Var x) {
    tape_of(x).note_kink_inputs(x.value().data());
    return pointwise(
        OpKind::Relu, x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var exp(Var x) {
    return pointwise(
        OpKind::Exp, x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(Var x) {
    for (double v : x.value().data()) {
        if (!(v > 0.0)) throw Error(ErrorKind::Domain, "log of non-positive value " + std::to_string(v));
    }
    return pointwise(
        OpKind::Log, x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var abs(Var x) {
    tape_of(x).note_kink_inputs(x.value().data());
    return pointwise(
        OpKind::Abs, x, [](double v) { return std::abs(v); },
        [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var sigmoid(Var x) {
    return pointwise(
        OpKind::Sigmoid, x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Var scale(Var x, double c) { return mul(x, tape_of(x).constant(c)); }

Var add_scalar(Var x, double c) { return add(x, tape_of(x).constant(c)); }

Var matmul(Var a, Var b) {
    Tape& t = same_tape(a, b);
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k) {
        throw Error(ErrorKind::Dimension,
                    "matmul: inner extents differ " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
    }
    const auto& A = a.value().values();
    const auto& B = b.value().values();
    std::vector<double> C(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* c = C.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            if (aip == 0.0) continue;
            const double* bp = B.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += aip * bp[j];
        }
    }
    const std::size_t ia = a.id(), ib = b.id();
    return t.record(OpKind::MatMul, Tensor({m, n}, std::move(C)), {ia, ib}, [=](Tape& tp, std::size_t self) {
        const auto& Av = vals(tp, ia);
        const auto& Bv = vals(tp, ib);
        auto g = tp.adj(self);
        if (tp.requires_grad(ia)) {
            auto da = tp.adj(ia);
            for (std::size_t i = 0; i < m; ++i) {
                const double* gi = g.data() + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const double* bp = Bv.data() + p * n;
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += gi[j] * bp[j];
                    da[i * k + p] += s;
                }
            }
        }
        if (tp.requires_grad(ib)) {
            auto db = tp.adj(ib);
            for (std::size_t i = 0; i < m; ++i) {
                const double* gi = g.data() + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = Av[i * k + p];
                    if (aip == 0.0) continue;
                    double* dbp = db.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) dbp[j] += aip * gi[j];
                }
            }
        }
    });
}

Var add_bias(Var x, Var b) {
    Tape& t = same_tape(x, b);
    require_rank(x, 2, "add_bias");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    if (b.value().numel() != n) {
        throw Error(ErrorKind::Dimension,
                    "add_bias: bias " + shape_string(b.shape()) + " vs input " + shape_string(x.shape()));
    }
    const auto& X = x.value().values();
    const auto& Bv = b.value().values();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = X[i * n + j] + Bv[j];
    const std::size_t ix = x.id(), ib = b.id();
    return t.record(OpKind::AddBias, Tensor({m, n}, std::move(out)), {ix, ib}, [=](Tape& tp, std::size_t self) {
        auto g = tp.adj(self);
        if (tp.requires_grad(ix)) {
            auto dx = tp.adj(ix);
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        }
        if (tp.requires_grad(ib)) {
            auto db = tp.adj(ib);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) db[j] += g[i * n + j];
        }
    });
}

Var sum(Var x) {
    Tape& t = tape_of(x);
    double s = 0.0;
    for (double v : x.value().data()) s += v;
    const std::size_t ix = x.id();
    return t.record(OpKind::Sum, Tensor::scalar(s), {ix}, [=](Tape& tp, std::size_t self) {
        const double g = tp.adj(self)[0];
        for (auto& d : tp.adj(ix)) d += g;
    });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

Var sum(Var x, std::size_t axis) {
    Tape& t = tape_of(x);
    require_rank(x, 2, "sum(axis)");
    if (axis > 1) throw Error(ErrorKind::Dimension, "sum(axis): axis must be 0 or 1");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    const auto& X = x.value().values();
    std::vector<double> out(axis == 0 ? n : m, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[axis == 0 ? j : i] += X[i * n + j];
    const std::size_t ix = x.id();
    Shape shape{out.size()};
    return t.record(OpKind::SumAxis, Tensor(std::move(shape), std::move(out)), {ix},
                    [=](Tape& tp, std::size_t self) {
                        auto g = tp.adj(self);
                        auto dx = tp.adj(ix);
                        for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += g[axis == 0 ? j : i];
                    });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
    if (parts.empty()) throw Error(ErrorKind::Input, "concat of zero parts");
    Tape& t = tape_of(parts[0]);
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw Error(ErrorKind::Dimension, "concat: axis out of range");
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
    for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

    std::vector<std::size_t> ids, widths;
    std::size_t total = 0;
    for (const Var& p : parts) {
        if (p.tape() != &t) throw Error(ErrorKind::Input, "concat: parts live on different tapes");
        const Shape& s = p.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
        if (!ok) {
            throw Error(ErrorKind::Dimension,
                        "concat: extent mismatch " + shape_string(s0) + " vs " + shape_string(s));
        }
        ids.push_back(p.id());
        widths.push_back(s[axis] * inner);
        total += s[axis];
    }
    Shape out_shape = s0;
    out_shape[axis] = total;
    const std::size_t row = total * inner;
    std::vector<double> out(outer * row);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& src = parts[k].value().values();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * widths[k]), widths[k],
                        out.begin() + static_cast<std::ptrdiff_t>(o * row + off));
        off += widths[k];
    }
    return t.record(OpKind::Concat, Tensor(std::move(out_shape), std::move(out)), ids,
                    [=](Tape& tp, std::size_t self) {
                        auto g = tp.adj(self);
                        std::size_t o2 = 0;
                        for (std::size_t k = 0; k < ids.size(); ++k) {
                            if (tp.requires_grad(ids[k])) {
                                auto d = tp.adj(ids[k]);
                                for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t q = 0; q < widths[k]; ++q)
                                        d[o * widths[k] + q] += g[o * row + o2 + q];
                            }
                            o2 += widths[k];
                        }
                    });
}

Var reshape(Var x, Shape shape) {
    Tape& t = tape_of(x);
    Tensor v = x.value().reshaped(std::move(shape));
    const std::size_t ix = x.id();
    return t.record(OpKind::Reshape, std::move(v), {ix}, [=](Tape& tp, std::size_t self) {
        auto g = tp.adj(self);
        auto d = tp.adj(ix);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    });
}

Var block(Var x, std::size_t i) {
    Tape& t = tape_of(x);
    require_rank(x, 3, "block");
    const std::size_t B = x.shape()[0], N = x.shape()[1], d = x.shape()[2];
    if (i >= N) throw Error(ErrorKind::Dimension, "block: index out of range");
    const auto& X = x.value().values();
    std::vector<double> out(B * d);
    for (std::size_t b = 0; b < B; ++b)
        std::copy_n(X.begin() + static_cast<std::ptrdiff_t>((b * N + i) * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(b * d));
    const std::size_t ix = x.id();
    return t.record(OpKind::Block, Tensor({B, d}, std::move(out)), {ix}, [=](Tape& tp, std::size_t self) {
        auto g = tp.adj(self);
        auto dx = tp.adj(ix);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t k = 0; k < d; ++k) dx[(b * N + i) * d + k] += g[b * d + k];
    });
}

namespace {

void softmax_inplace(const double* x, double* y, std::size_t n) {
    double mx = x[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] - mx);
        s += y[i];
    }
    for (std::size_t i = 0; i < n; ++i) y[i] /= s;
}

void require_finite(Var x, const char* op) {
    if (!x.value().all_finite()) throw Error(ErrorKind::Domain, std::string(op) + ": non-finite input");
}

}  // namespace

std::vector<double> softmax_values(std::span<const double> x) {
    if (x.empty()) return {};
    std::vector<double> y(x.size());
    softmax_inplace(x.data(), y.data(), x.size());
    return y;
}

Var softmax(Var x) {
    Tape& t = tape_of(x);
    require_rank(x, 1, "softmax");
    require_finite(x, "softmax");
    std::vector<double> y = softmax_values(x.value().data());
    const std::size_t ix = x.id();
    return t.record(OpKind::Softmax, Tensor(x.shape(), std::move(y)), {ix}, [=](Tape& tp, std::size_t self) {
        const auto& yv = vals(tp, self);
        auto g = tp.adj(self);
        double dot = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * yv[i];
        auto dx = tp.adj(ix);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += yv[i] * (g[i] - dot);
    });
}

Var softmax_rows(Var x) {
    Tape& t = tape_of(x);
    require_rank(x, 2, "softmax_rows");
    require_finite(x, "softmax_rows");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    const auto& X = x.value().values();
    std::vector<double> y(m * n);
    for (std::size_t i = 0; i < m; ++i) softmax_inplace(X.data() + i * n, y.data() + i * n, n);
    const std::size_t ix = x.id();
    return t.record(OpKind::SoftmaxRows, Tensor({m, n}, std::move(y)), {ix}, [=](Tape& tp, std::size_t self) {
        const auto& yv = vals(tp, self);
        auto g = tp.adj(self);
        auto dx = tp.adj(ix);
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * yv[i * n + j];
            for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += yv[i * n + j] * (g[i * n + j] - dot);
        }
    });
}

Var log_softmax_rows(Var x) {
    Tape& t = tape_of(x);
    require_rank(x, 2, "log_softmax_rows");
    require_finite(x, "log_softmax_rows");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    const auto& X = x.value().values();
    std::vector<double> y(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* xi = X.data() + i * n;
        double mx = xi[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += std::exp(xi[j] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < n; ++j) y[i * n + j] = xi[j] - lse;
    }
    const std::size_t ix = x.id();
    return t.record(OpKind::LogSoftmaxRows, Tensor({m, n}, std::move(y)), {ix},
                    [=](Tape& tp, std::size_t self) {
                        const auto& yv = vals(tp, self);
                        auto g = tp.adj(self);
                        auto dx = tp.adj(ix);
                        for (std::size_t i = 0; i < m; ++i) {
                            double gs = 0.0;
                            for (std::size_t j = 0; j < n; ++j) gs += g[i * n + j];
                            for (std::size_t j = 0; j < n; ++j)
                                dx[i * n + j] += g[i * n + j] - std::exp(yv[i * n + j]) * gs;
                        }
                    });
}

Var row_norm2(Var x) {
    Tape& t = tape_of(x);
    require_rank(x, 2, "row_norm2");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    const auto& X = x.value().values();
    std::vector<double> y(m);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += X[i * n + j] * X[i * n + j];
        y[i] = std::sqrt(s);
    }
    const std::size_t ix = x.id();
    return t.record(OpKind::RowNorm2, Tensor({m}, std::move(y)), {ix}, [=](Tape& tp, std::size_t self) {
        const auto& Xv = vals(tp, ix);
        const auto& yv = vals(tp, self);
        auto g = tp.adj(self);
        auto dx = tp.adj(ix);
        for (std::size_t i = 0; i < m; ++i) {
            if (yv[i] == 0.0) continue;
            const double c = g[i] / yv[i];
            for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += c * Xv[i * n + j];
        }
    });
}

Var impute_mean(std::span<const Var> parts, std::span<const std::uint8_t> present) {
    if (parts.empty()) throw Error(ErrorKind::Input, "impute_mean: no modalities");
    Tape& t = tape_of(parts[0]);
    const std::size_t N = parts.size();
    const Shape& s0 = parts[0].shape();
    if (s0.size() != 2) throw Error(ErrorKind::Dimension, "impute_mean: parts must be [B x d]");
    const std::size_t B = s0[0], d = s0[1];
    if (present.size() != B * N) {
        throw Error(ErrorKind::Dimension, "impute_mean: presence mask has " + std::to_string(present.size()) +
                                              " entries, expected " + std::to_string(B * N));
    }
    std::vector<std::size_t> ids;
    for (const Var& p : parts) {
        if (p.tape() != &t) throw Error(ErrorKind::Input, "impute_mean: parts live on different tapes");
        if (p.shape() != s0) {
            throw Error(ErrorKind::Dimension,
                        "impute_mean: shape mismatch " + shape_string(s0) + " vs " + shape_string(p.shape()));
        }
        ids.push_back(p.id());
    }
    std::vector<std::size_t> counts(B, 0);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t n = 0; n < N; ++n) counts[b] += present[b * N + n] != 0 ? 1 : 0;
        if (counts[b] == 0) {
            throw Error(ErrorKind::Input, "sample " + std::to_string(b) + " has no present modality");
        }
    }
    std::vector<double> out(B * N * d);
    std::vector<double> acc(d);
    for (std::size_t b = 0; b < B; ++b) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t n = 0; n < N; ++n) {
            if (present[b * N + n] == 0) continue;
            const auto& src = parts[n].value().values();
            for (std::size_t k = 0; k < d; ++k) {
                acc[k] += src[b * d + k];
                out[(b * N + n) * d + k] = src[b * d + k];
            }
        }
        const double cnt = static_cast<double>(counts[b]);
        for (std::size_t n = 0; n < N; ++n) {
            if (present[b * N + n] != 0) continue;
            for (std::size_t k = 0; k < d; ++k) out[(b * N + n) * d + k] = acc[k] / cnt;
        }
    }
    std::vector<std::uint8_t> mask(present.begin(), present.end());
    return t.record(OpKind::ImputeMean, Tensor({B, N, d}, std::move(out)), ids,
                    [=](Tape& tp, std::size_t self) {
                        auto g = tp.adj(self);
                        std::vector<double> missing_g(d);
                        for (std::size_t b = 0; b < B; ++b) {
                            std::fill(missing_g.begin(), missing_g.end(), 0.0);
                            const double cnt = static_cast<double>(counts[b]);
                            for (std::size_t n = 0; n < N; ++n) {
                                if (mask[b * N + n] != 0) continue;
                                for (std::size_t k = 0; k < d; ++k) missing_g[k] += g[(b * N + n) * d + k] / cnt;
                            }
                            for (std::size_t n = 0; n < N; ++n) {
                                if (mask[b * N + n] == 0 || !tp.requires_grad(ids[n])) continue;
                                auto dp = tp.adj(ids[n]);
                                for (std::size_t k = 0; k < d; ++k)
                                    dp[b * d + k] += g[(b * N + n) * d + k] + missing_g[k];
                            }
                        }
                    });
}

Var scale_blocks(Var features, Var w) {
    Tape& t = same_tape(features, w);
    require_rank(features, 3, "scale_blocks");
    const std::size_t B = features.shape()[0], N = features.shape()[1], d = features.shape()[2];
    if (w.value().numel() != N) {
        throw Error(ErrorKind::Dimension, "scale_blocks: " + std::to_string(w.value().numel()) +
                                              " weights for " + std::to_string(N) + " blocks");
    }
    const auto& F = features.value().values();
    const auto& W = w.value().values();
    std::vector<double> out(F.size());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t k = 0; k < d; ++k) out[(b * N + n) * d + k] = W[n] * F[(b * N + n) * d + k];
    const std::size_t ifeat = features.id(), iw = w.id();
    return t.record(OpKind::ScaleBlocks, Tensor(features.shape(), std::move(out)), {ifeat, iw},
                    [=](Tape& tp, std::size_t self) {
                        const auto& Fv = vals(tp, ifeat);
                        const auto& Wv = vals(tp, iw);
                        auto g = tp.adj(self);
                        const bool gf = tp.requires_grad(ifeat), gw = tp.requires_grad(iw);
                        auto df = tp.adj(ifeat);
                        auto dw = tp.adj(iw);
                        for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t n = 0; n < N; ++n)
                                for (std::size_t k = 0; k < d; ++k) {
                                    const std::size_t idx = (b * N + n) * d + k;
                                    if (gf) df[idx] += g[idx] * Wv[n];
                                    if (gw) dw[n] += g[idx] * Fv[idx];
                                }
                    });
}

}  // namespace mckd
