#include "metastate/tape.hpp"

#include <algorithm>

namespace metastate::ad {

std::string_view op_name(OpKind kind) {
    switch (kind) {
    case OpKind::Constant: return "constant";
    case OpKind::Parameter: return "parameter";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::AddRow: return "add_row";
    case OpKind::MulRow: return "mul_row";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Neg: return "neg";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Exp: return "exp";
    case OpKind::Decay: return "decay";
    case OpKind::Transpose: return "transpose";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::SliceRows: return "slice_rows";
    case OpKind::Sum: return "sum";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::TokenShift: return "token_shift";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::L2NormalizeGroups: return "l2_normalize_groups";
    case OpKind::StateScan: return "state_scan";
    case OpKind::StateApply: return "state_apply";
    case OpKind::CausalSoftmax: return "causal_softmax";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    }
    return "unknown";
}

bool is_softmax(OpKind kind) {
    return kind == OpKind::CausalSoftmax || kind == OpKind::SoftmaxCrossEntropy;
}

template <typename T>
Tensor<T> Gradients<T>::of(Var<T> v) const {
    const auto& g = grads_[v.id()];
    if (g.empty()) {
        const Shape s = shapes_[v.id()];
        return Tensor<T>(s.rows, s.cols);
    }
    return g;
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
    nodes_.push_back({OpKind::Constant, {}, std::move(value), nullptr, false});
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::parameter(Tensor<T> value) {
    nodes_.push_back({OpKind::Parameter, {}, std::move(value), nullptr, true});
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(std::unique_ptr<Op<T>> op, std::vector<Var<T>> inputs) {
    std::vector<std::size_t> ids;
    std::vector<const Tensor<T>*> values;
    ids.reserve(inputs.size());
    values.reserve(inputs.size());
    bool needs_grad = false;
    for (const auto& v : inputs) {
        if (v.tape() != this) {
            throw ContractError(std::string(op_name(op->kind())) + ": operand recorded on another tape");
        }
        ids.push_back(v.id());
        values.push_back(&nodes_[v.id()].value);
        needs_grad = needs_grad || nodes_[v.id()].needs_grad;
    }
    Tensor<T> out = op->forward(values);
    const OpKind kind = op->kind();
    nodes_.push_back({kind, std::move(ids), std::move(out), std::move(op), needs_grad});
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Gradients<T> Tape<T>::backward(Var<T> loss, std::vector<std::size_t>* visited) const {
    if (loss.tape() != this) {
        throw ContractError("backward: loss recorded on another tape");
    }
    const Shape ls = nodes_[loss.id()].value.shape();
    if (ls.rows != 1 || ls.cols != 1) {
        throw ContractError("backward: loss must be a 1 x 1 scalar, got " + ls.str());
    }
    std::vector<Tensor<T>> grads(nodes_.size());
    std::vector<Shape> shapes(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        shapes[i] = nodes_[i].value.shape();
    }
    grads[loss.id()] = Tensor<T>(1, 1, T(1));

    std::vector<const Tensor<T>*> in;
    std::vector<Tensor<T>*> gin;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
        const Node& node = nodes_[id];
        if (!node.op || !node.needs_grad || grads[id].empty()) {
            continue;
        }
        in.clear();
        gin.clear();
        for (std::size_t src : node.inputs) {
            in.push_back(&nodes_[src].value);
            if (nodes_[src].needs_grad) {
                if (grads[src].empty()) {
                    grads[src] = Tensor<T>(shapes[src].rows, shapes[src].cols);
                }
                gin.push_back(&grads[src]);
            } else {
                gin.push_back(nullptr);
            }
        }
        node.op->backward(in, node.value, grads[id], gin);
        if (visited) {
            visited->push_back(id);
        }
    }
    return Gradients<T>(std::move(grads), std::move(shapes));
}

template <typename T>
bool Tape<T>::replay() {
    std::vector<const Tensor<T>*> in;
    for (auto& node : nodes_) {
        if (!node.op) {
            continue;
        }
        in.clear();
        for (std::size_t src : node.inputs) {
            in.push_back(&nodes_[src].value);
        }
        if (!node.op->forward(in).bitwise_equal(node.value)) {
            return false;
        }
    }
    return true;
}

template <typename T>
bool Tape<T>::contains(OpKind kind) const {
    return std::any_of(nodes_.begin(), nodes_.end(), [kind](const Node& n) { return n.kind == kind; });
}

template <typename T>
bool Tape<T>::contains_softmax() const {
    return std::any_of(nodes_.begin(), nodes_.end(), [](const Node& n) { return is_softmax(n.kind); });
}

template <typename T>
std::vector<OpKind> Tape<T>::kinds() const {
    std::vector<OpKind> out;
    out.reserve(nodes_.size());
    for (const auto& n : nodes_) {
        out.push_back(n.kind);
    }
    return out;
}

template class Gradients<float>;
template class Gradients<double>;
template class Tape<float>;
template class Tape<double>;

} // namespace metastate::ad
