// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors and a define-by-run reverse-mode tape.
//
// A Tape records every op applied to Vars created from it. Values are
// computed eagerly; backward() sweeps the recorded nodes in reverse and
// accumulates adjoints into the bound parameter Tensors. A Tape belongs to a
// single thread and is rebuilt for every forward pass.

#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mckd {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
    static Tensor vector(std::initializer_list<double> v);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t numel() const noexcept { return data_.size(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    /// Single value of a one-element tensor.
    double item() const;

    bool has_grad() const noexcept { return !grad_.empty(); }
    /// Gradient buffer; allocated (zeroed) on first access.
    std::span<double> grad();
    std::span<const double> grad() const noexcept { return grad_; }
    void zero_grad();
    void clear_grad() noexcept { grad_.clear(); }

    Tensor reshaped(Shape shape) const;
    bool all_finite() const noexcept;

  private:
    Shape shape_;
    std::vector<double> data_;
    std::vector<double> grad_;
};

enum class OpKind : std::uint8_t {
    Param,
    Constant,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Exp,
    Log,
    Abs,
    Sigmoid,
    Sum,
    SumAxis,
    Concat,
    Reshape,
    Block,
    Softmax,
    LogSoftmaxRows,
    SoftmaxRows,
    AddBias,
    RowNorm2,
    ImputeMean,
    ScaleBlocks,
};

const char* to_string(OpKind kind) noexcept;

class Tape;

/// Handle to a node on a Tape.
class Var {
  public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape() const noexcept { return tape_; }
    std::size_t id() const noexcept { return id_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    double item() const { return value().item(); }

  private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
  public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Trainable leaf. backward() adds its adjoint into `t.grad()`; `t` must
    /// outlive the backward call.
    Var param(Tensor& t);
    /// Non-trainable leaf; the value is copied.
    Var constant(Tensor t);
    Var constant(double v) { return constant(Tensor::scalar(v)); }

    /// Reverse sweep from a one-element loss. Adjoints of interior nodes are
    /// reset on every call, parameter gradients accumulate.
    void backward(Var loss);

    std::size_t size() const noexcept { return nodes_.size(); }
    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    /// Adjoint of a node after backward(); empty if it did not require grad.
    std::span<const double> adjoint(Var v) const { return nodes_.at(v.id()).adj; }

    // Op-implementation interface.
    Var record(OpKind kind, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);
    std::span<double> adj(std::size_t id) { return nodes_[id].adj; }
    std::span<const double> adj(std::size_t id) const { return nodes_[id].adj; }

    /// Smallest |input| seen by a relu or abs op on this tape.
    double min_kink_distance() const noexcept { return min_kink_; }
    void note_kink_inputs(std::span<const double> xs);

    /// Fault injection for the gradient-check harness: scales the incoming
    /// adjoint of every node of `kind` by `factor` before its rule runs.
    void corrupt(OpKind kind, double factor) { fault_ = Fault{kind, factor}; }

  private:
    struct Node {
        OpKind kind;
        Tensor value;
        std::vector<double> adj;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        Tensor* bound = nullptr;
        bool requires_grad = false;
    };
    struct Fault {
        OpKind kind;
        double factor;
    };

    // deque: values handed out by Var::value() stay valid as the tape grows
    std::deque<Node> nodes_;
    double min_kink_ = std::numeric_limits<double>::infinity();
    std::optional<Fault> fault_;
};

// Elementwise binary ops accept equal shapes or a one-element operand.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);

Var relu(Var x);
Var exp(Var x);
/// Throws a Domain error on non-positive input.
Var log(Var x);
Var abs(Var x);
Var sigmoid(Var x);

Var scale(Var x, double c);
Var add_scalar(Var x, double c);

Var matmul(Var a, Var b);
/// x[m x n] + b[n], bias broadcast over rows.
Var add_bias(Var x, Var b);

Var sum(Var x);
Var mean(Var x);
/// Reduce a rank-2 tensor along `axis` (0: column sums, 1: row sums).
Var sum(Var x, std::size_t axis);

Var concat(std::span<const Var> parts, std::size_t axis);
Var reshape(Var x, Shape shape);
/// Slice block i of a [B x N x d] tensor into [B x d].
Var block(Var x, std::size_t i);

/// Softmax of a rank-1 tensor, max-subtracted.
Var softmax(Var x);
Var log_softmax_rows(Var x);
Var softmax_rows(Var x);

/// Per-row Euclidean norm of [B x d] -> [B]; subgradient 0 at a zero row.
Var row_norm2(Var x);

/// Stack per-modality features [B x d] into [B x N x d], replacing each
/// missing slot (present[b*N+n] == 0) with the arithmetic mean of the present
/// slots of that sample. Every sample needs at least one present slot.
Var impute_mean(std::span<const Var> parts, std::span<const std::uint8_t> present);

/// Multiply block i of a [B x N x d] tensor by w[i].
Var scale_blocks(Var features, Var w);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }

/// Plain (tape-free) softmax used outside of differentiation.
std::vector<double> softmax_values(std::span<const double> x);

}  // namespace mckd
