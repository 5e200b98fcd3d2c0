#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "metastate/tensor.hpp"

namespace metastate::ad {

enum class OpKind : std::uint8_t {
    Constant,
    Parameter,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    Scale,
    AddScalar,
    Neg,
    Relu,
    Sigmoid,
    Exp,
    Decay,
    Transpose,
    ConcatCols,
    SliceCols,
    SliceRows,
    Sum,
    LayerNorm,
    TokenShift,
    GatherRows,
    L2NormalizeGroups,
    StateScan,
    StateApply,
    CausalSoftmax,
    SoftmaxCrossEntropy,
};

std::string_view op_name(OpKind kind);
bool is_softmax(OpKind kind);

template <typename T>
class Tape;

// Lightweight handle to a node on a tape. Valid while the tape lives.
template <typename T>
class Var {
public:
    Var() = default;

    const Tensor<T>& value() const;
    Shape shape() const { return value().shape(); }
    std::size_t id() const { return id_; }
    Tape<T>* tape() const { return tape_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape<T>;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

template <typename T>
class Op {
public:
    virtual ~Op() = default;
    virtual OpKind kind() const = 0;
    // May cache intermediate values needed by backward.
    virtual Tensor<T> forward(std::span<const Tensor<T>* const> in) = 0;
    // Accumulates into grads[i]; grads[i] is null when input i needs no gradient.
    virtual void backward(std::span<const Tensor<T>* const> in, const Tensor<T>& out,
                          const Tensor<T>& grad_out, std::span<Tensor<T>* const> grads) const = 0;
};

template <typename T>
class Gradients {
public:
    explicit Gradients(std::vector<Tensor<T>> grads, std::vector<Shape> shapes)
        : grads_(std::move(grads)), shapes_(std::move(shapes)) {}

    // Gradient of the loss with respect to `v`; zeros when `v` does not reach the loss.
    Tensor<T> of(Var<T> v) const;
    bool reached(Var<T> v) const { return !grads_[v.id()].empty(); }

private:
    std::vector<Tensor<T>> grads_;
    std::vector<Shape> shapes_;
};

// Append-only record of a computation. Topological order is insertion order.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> value);
    Var<T> parameter(Tensor<T> value);
    Var<T> record(std::unique_ptr<Op<T>> op, std::vector<Var<T>> inputs);

    // Reverse sweep in strict reverse insertion order. `visited`, when given,
    // receives the ids of nodes whose backward rule ran, in visiting order.
    Gradients<T> backward(Var<T> loss, std::vector<std::size_t>* visited = nullptr) const;

    // Recomputes every op node from its recorded inputs; true when all
    // outputs reproduce bitwise.
    bool replay();

    std::size_t size() const { return nodes_.size(); }
    OpKind kind(std::size_t id) const { return nodes_[id].kind; }
    const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
    bool contains(OpKind kind) const;
    bool contains_softmax() const;
    std::vector<OpKind> kinds() const;

private:
    struct Node {
        OpKind kind;
        std::vector<std::size_t> inputs;
        Tensor<T> value;
        std::unique_ptr<Op<T>> op;
        bool needs_grad = false;
    };

    std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return tape_->value(id_);
}

} // namespace metastate::ad
