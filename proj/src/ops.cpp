#include "metastate/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "metastate/kernels.hpp"

namespace metastate::ad {

namespace {

template <typename T>
using In = std::span<const Tensor<T>* const>;
template <typename T>
using Grads = std::span<Tensor<T>* const>;

void require_same_shape(const char* op, Shape a, Shape b) {
    if (a != b) {
        throw DimensionError(dimension_message(op, a, b));
    }
}

template <typename T>
Tape<T>& tape_of(Var<T> v) {
    if (!v.valid()) {
        throw ContractError("operation on an unbound variable");
    }
    return *v.tape();
}

template <typename T>
class MatMulOp final : public Op<T> {
public:
    OpKind kind() const override { return OpKind::MatMul; }
    Tensor<T> forward(In<T> in) override { return kernels::matmul(*in[0], *in[1]); }
    void backward(In<T> in, const Tensor<T>&, const Tensor<T>& g, Grads<T> grads) const override {
        const Tensor<T>& a = *in[0];
        const Tensor<T>& b = *in[1];
        const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
        if (grads[0]) {
            // da += g b^T, as row updates against b^T so the inner loop vectorizes.
            const Tensor<T> bt = transpose(b);
            Tensor<T>& da = *grads[0];
            for (std::size_t i = 0; i < n; ++i) {
                T* dst = da.data() + i * k;
                for (std::size_t j = 0; j < m; ++j) {
                    const T s = g(i, j);
                    const T* src = bt.data() + j * k;
                    for (std::size_t p = 0; p < k; ++p) {
                        dst[p] += s * src[p];
                    }
                }
            }
        }
        if (grads[1]) {
            Tensor<T>& db = *grads[1];
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const T s = a(i, p);
                    T* dst = db.data() + p * m;
                    const T* src = g.data() + i * m;
                    for (std::size_t j = 0; j < m; ++j) {
                        dst[j] += s * src[j];
                    }
                }
            }
        }
    }
};

enum class Binary { Add, Sub, Mul };

template <typename T>
class BinaryOp final : public Op<T> {
public:
    explicit BinaryOp(Binary which) : which_(which) {}
    OpKind kind() const override {
        switch (which_) {
        case Binary::Add: return OpKind::Add;
        case Binary::Sub: return OpKind::Sub;
        case Binary::Mul: return OpKind::Mul;
        }
        return OpKind::Add;
    }
    Tensor<T> forward(In<T> in) override {
        const Tensor<T>& a = *in[0];
        const Tensor<T>& b = *in[1];
        Tensor<T> out(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.size(); ++i) {
            switch (which_) {
            case Binary::Add: out[i] = a[i] + b[i]; break;
            case Binary::Sub: out[i] = a[i] - b[i]; break;
            case Binary::Mul: out[i] = a[i] * b[i]; break;
            }
        }
        return out;
    }
    void backward(In<T> in, const Tensor<T>&, const Tensor<T>& g, Grads<T> grads) const override {
        for (std::size_t i = 0; i < g.size(); ++i) {
            switch (which_) {
            case Binary::Add:
                if (grads[0]) (*grads[0])[i] += g[i];
                if (grads[1]) (*grads[1])[i] += g[i];
                break;
            case Binary::Sub:
                if (grads[0]) (*grads[0])[i] += g[i];
                if (grads[1]) (*grads[1])[i] -= g[i];
                break;
            case Binary::Mul:
                if (grads[0]) (*grads[0])[i] += g[i] * (*in[1])[i];
                if (grads[1]) (*grads[1])[i] += g[i] * (*in[0])[i];
                break;
            }
        }
    }

private:
    Binary which_;
};

template <typename T>
class RowBroadcastOp final : public Op<T> {
public:
    explicit RowBroadcastOp(bool multiply) : multiply_(multiply) {}
    OpKind kind() const override { return multiply_ ? OpKind::MulRow : OpKind::AddRow; }
    Tensor<T> forward(In<T> in) override {
        const Tensor<T>& m = *in[0];
        const Tensor<T>& r = *in[1];
        Tensor<T> out(m.rows(), m.cols());
        for (std::size_t i = 0; i < m.rows(); ++i) {
            for (std::size_t j = 0; j < m.cols(); ++j) {
                out(i, j) = multiply_ ? m(i, j) * r[j] : m(i, j) + r[j];
            }
        }
        return out;
    }
    void backward(In<T> in, const Tensor<T>&, const Tensor<T>& g, Grads<T> grads) const override {
        const Tensor<T>& m = *in[0];
        const Tensor<T>& r = *in[1];
        for (std::size_t i = 0; i < m.rows(); ++i) {
            for (std::size_t j = 0; j < m.cols(); ++j) {
                if (grads[0]) (*grads[0])(i, j) += multiply_ ? g(i, j) * r[j] : g(i, j);
                if (grads[1]) (*grads[1])[j] += multiply_ ? g(i, j) * m(i, j) : g(i, j);
            }
        }
    }

private:
    bool multiply_;
};

enum class Unary { Scale, AddScalar, Neg, Relu, Sigmoid, Exp, Decay };

template <typename T>
class UnaryOp final : public Op<T> {
public:
    UnaryOp(Unary which, T s = T(0)) : which_(which), s_(s) {}
    OpKind kind() const override {
        switch (which_) {
        case Unary::Scale: return OpKind::Scale;
        case Unary::AddScalar: return OpKind::AddScalar;
        case Unary::Neg: return OpKind::Neg;
        case Unary::Relu: return OpKind::Relu;
        case Unary::Sigmoid: return OpKind::Sigmoid;
        case Unary::Exp: return OpKind::Exp;
        case Unary::Decay: return OpKind::Decay;
        }
        return OpKind::Scale;
    }
    Tensor<T> forward(In<T> in) override {
        const Tensor<T>& x = *in[0];
        Tensor<T> out(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.size(); ++i) {
            out[i] = apply(x[i]);
        }
        return out;
    }
    void backward(In<T> in, const Tensor<T>& y, const Tensor<T>& g, Grads<T> grads) const override {
        if (!grads[0]) return;
        const Tensor<T>& x = *in[0];
        Tensor<T>& dx = *grads[0];
        for (std::size_t i = 0; i < x.size(); ++i) {
            dx[i] += g[i] * derivative(x[i], y[i]);
        }
    }

private:
    T apply(T x) const {
        switch (which_) {
        case Unary::Scale: return x * s_;
        case Unary::AddScalar: return x + s_;
        case Unary::Neg: return -x;
        case Unary::Relu: return kernels::relu(x);
        case Unary::Sigmoid: return kernels::sigmoid(x);
        case Unary::Exp: return std::exp(x);
        case Unary::Decay: return kernels::decay(x);
        }
        return x;
    }
    T derivative(T x, T y) const {
        switch (which_) {
        case Unary::Scale: return s_;
        case Unary::AddScalar: return T(1);
        case Unary::Neg: return T(-1);
        case Unary::Relu: return x > T(0) ? T(1) : T(0);
        case Unary::Sigmoid: return y * (T(1) - y);
        case Unary::Exp: return y;
        case Unary::Decay: return -std::exp(x) * y;
        }
        return T(0);
    }

    Unary which_;
    T s_;
};

template <typename T>
class TransposeOp final : public Op<T> {
public:
    OpKind kind() const override { return OpKind::Transpose; }
    Tensor<T> forward(In<T> in) override { return metastate::transpose(*in[0]); }
    void backward(In<T>, const Tensor<T>&, const Tensor<T>& g, Grads<T> grads) const override {
        if (!grads[0]) return;
        Tensor<T>& dx = *grads[0];
        for (std::size_t i = 0; i < g.rows(); ++i) {
            for (std::size_t j = 0; j < g.cols(); ++j) {
                dx(j, i) += g(i, j);
            }
        }
    }
};

template <typename T>
class ConcatColsOp final : public Op<T> {
public:
    OpKind kind() const override { return OpKind::ConcatCols; }
    Tensor<T> forward(In<T> in) override {
        const std::size_t rows = in[0]->rows();
        std::size_t cols = 0;
        for (const auto* t : in) {
            if (t->rows() != rows) {
                throw DimensionError(dimension_message("concat_cols", in[0]->shape(), t->shape()));
            }
            cols += t->cols();
        }
        Tensor<T> out(rows, cols);
        for (std::size_t r = 0; r < rows; ++r) {
            std::size_t off = 0;
            for (const auto* t : in) {
                std::copy_n(t->data() + r * t->cols(), t->cols(), out.data() + r * cols + off);
                off += t->cols();
            }
        }
        return out;
    }
    void backward(In<T> in, const Tensor<T>&, const Tensor<T>& g, Grads<T> grads) const override {
        std::size_t off = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
            const std::size_t w = in[k]->cols();
            if (grads[k]) {
                for (std::size_t r = 0; r < g.rows(); ++r) {
                    for (std::size_t j = 0; j < w; ++j) {
                        (*grads[k])(r, j) += g(r, off + j);
                    }
                }
            }
            off += w;
        }
    }
};

template <typename T>
class SliceOp final : public Op<T> {
public:
    SliceOp(bool cols, std::size_t offset, std::size_t count) : cols_(cols), offset_(offset), count_(count) {}
    OpKind kind() const override { return cols_ ? OpKind::SliceCols : OpKind::SliceRows; }
    Tensor<T> forward(In<T> in) override {
        const Tensor<T>& x = *in[0];
        const std::size_t limit = cols_ ? x.cols() : x.rows();
        if (offset_ + count_ > limit) {
            throw DimensionError(std::string(cols_ ? "slice_cols" : "slice_rows") + ": range [" +
                                 std::to_string(offset_) + ", " + std::to_string(offset_ + count_) +
                                 ") exceeds shape " + x.shape().str());
        }
        if (cols_) {
            Tensor<T> out(x.rows(), count_);
            for (std::size_t r = 0; r < x.rows(); ++r) {
                std::copy_n(x.data() + r * x.cols() + offset_, count_, out.data() + r * count_);
            }
            return out;
        }
        Tensor<T> out(count_, x.cols());
        std::copy_n(x.data() + offset_ * x.cols(), count_ * x.cols(), out.data());
        return out;
    }
    void backward(In<T>, const Tensor<T>&, const Tensor<T>& g, Grads<T> grads) const override {
        if (!grads[0]) return;
        Tensor<T>& dx = *grads[0];
        for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < g.cols(); ++c) {
                if (cols_) {
                    dx(r, offset_ + c) += g(r, c);
                } else {
                    dx(offset_ + r, c) += g(r, c);
                }
            }
        }
    }

private:
    bool cols_;
    std::size_t offset_;
    std::size_t count_;
};

template <typename T>
class SumOp final : public Op<T> {
public:
    OpKind kind() const override { return OpKind::Sum; }
    Tensor<T> forward(In<T> in) override {
        T acc = T(0);
        for (T v : in[0]->values()) {
            acc += v;
        }
        return Tensor<T>(1, 1, acc);
    }
    void backward(In<T>, const Tensor<T>&, const Tensor<T>& g, Grads<T> grads) const override {
        if (!grads[0]) return;
        for (T& v : grads[0]->values()) {
            v += g[0];
        }
    }
};

template <typename T>
class LayerNormOp final : public Op<T> {
public:
    LayerNormOp(std::vector<Segment> segments, T eps) : segments_(std::move(segments)), eps_(eps) {}
    OpKind kind() const override { return OpKind::LayerNorm; }
    Tensor<T> forward(In<T> in) override {
        const Tensor<T>& x = *in[0];
        const std::size_t ns = segments_.size();
        mean_.assign(x.rows() * ns, T(0));
        rstd_.assign(x.rows() * ns, T(0));
        Tensor<T> out(x.rows(), x.cols());
        for (std::size_t r = 0; r < x.rows(); ++r) {
            kernels::layer_norm_row(x.row_span(r), in[1]->values(), in[2]->values(),
                                    std::span<const Segment>(segments_), eps_, out.row_span(r),
                                    mean_.data() + r * ns, rstd_.data() + r * ns);
        }
        return out;
    }
    void backward(In<T> in, const Tensor<T>&, const Tensor<T>& g, Grads<T> grads) const override {
        const Tensor<T>& x = *in[0];
        const Tensor<T>& gamma = *in[1];
        const std::size_t ns = segments_.size();
        std::vector<T> xhat, dxhat;
        for (std::size_t r = 0; r < x.rows(); ++r) {
            for (std::size_t s = 0; s < ns; ++s) {
                const std::size_t off = segments_[s].offset;
                const std::size_t w = segments_[s].width;
                const T mu = mean_[r * ns + s];
                const T inv = rstd_[r * ns + s];
                xhat.resize(w);
                dxhat.resize(w);
                T mean_d = T(0), mean_dx = T(0);
                for (std::size_t i = 0; i < w; ++i) {
                    const std::size_t c = off + i;
                    xhat[i] = (x(r, c) - mu) * inv;
                    dxhat[i] = g(r, c) * gamma[c];
                    mean_d += dxhat[i];
                    mean_dx += dxhat[i] * xhat[i];
                    if (grads[1]) (*grads[1])[c] += g(r, c) * xhat[i];
                    if (grads[2]) (*grads[2])[c] += g(r, c);
                }
                if (grads[0]) {
                    mean_d /= static_cast<T>(w);
                    mean_dx /= static_cast<T>(w);
                    for (std::size_t i = 0; i < w; ++i) {
                        (*grads[0])(r, off + i) += inv * (dxhat[i] - mean_d - xhat[i] * mean_dx);
                    }
                }
            }
        }
    }

private:
    std::vector<Segment> segments_;
    T eps_;
    std::vector<T> mean_;
    std::vector<T> rstd_;
};

template <typename T>
class TokenShiftOp final : public Op<T> {
public:
    OpKind kind() const override { return OpKind::TokenShift; }
    Tensor<T> forward(In<T> in) override {
        const Tensor<T>& x = *in[0];
        const Tensor<T>& prev = *in[1];
        const Tensor<T>& mu = *in[2];
        Tensor<T> out(x.rows(), x.cols());
        for (std::size_t t = 0; t < x.rows(); ++t) {
            const T* p = t == 0 ? prev.data() : x.data() + (t - 1) * x.cols();
            for (std::size_t j = 0; j < x.cols(); ++j) {
                out(t, j) = kernels::token_shift(mu[j], x(t, j), p[j]);
            }
        }
        return out;
    }
    void backward(In<T> in, const Tensor<T>&, const Tensor<T>& g, Grads<T> grads) const override {
        const Tensor<T>& x = *in[0];
        const Tensor<T>& prev = *in[1];
        const Tensor<T>& mu = *in[2];
        for (std::size_t t = 0; t < x.rows(); ++t) {
            const T* p = t == 0 ? prev.data() : x.data() + (t - 1) * x.cols();
            for (std::size_t j = 0; j < x.cols(); ++j) {
                const T gv = g(t, j);
                if (grads[0]) {
                    (*grads[0])(t, j) += gv * mu[j];
                    if (t > 0) (*grads[0])(t - 1, j) += gv * (T(1) - mu[j]);
                }
                if (t == 0 && grads[1]) (*grads[1])[j] += gv * (T(1) - mu[j]);
                if (grads[2]) (*grads[2])[j] += gv * (x(t, j) - p[j]);
            }
        }
    }
};

template <typename T>
class GatherRowsOp final : public Op<T> {
public:
    explicit GatherRowsOp(std::vector<std::size_t> ids) : ids_(std::move(ids)) {}
    OpKind kind() const override { return OpKind::GatherRows; }
    Tensor<T> forward(In<T> in) override {
        const Tensor<T>& table = *in[0];
        Tensor<T> out(ids_.size(), table.cols());
        for (std::size_t t = 0; t < ids_.size(); ++t) {
            if (ids_[t] >= table.rows()) {
                throw InputError("gather_rows: id " + std::to_string(ids_[t]) + " out of range for " +
                                 std::to_string(table.rows()) + " rows");
            }
            std::copy_n(table.data() + ids_[t] * table.cols(), table.cols(), out.data() + t * table.cols());
        }
        return out;
    }
    void backward(In<T> in, const Tensor<T>&, const Tensor<T>& g, Grads<T> grads) const override {
        if (!grads[0]) return;
        const std::size_t c = in[0]->cols();
        for (std::size_t t = 0; t < ids_.size(); ++t) {
            T* dst = grads[0]->data() + ids_[t] * c;
            for (std::size_t j = 0; j < c; ++j) {
                dst[j] += g(t, j);
            }
        }
    }

private:
    std::vector<std::size_t> ids_;
};

template <typename T>
class L2NormalizeOp final : public Op<T> {
public:
    L2NormalizeOp(std::size_t group, T floor) : group_(group), floor_(floor) {}
    OpKind kind() const override { return OpKind::L2NormalizeGroups; }
    Tensor<T> forward(In<T> in) override {
        const Tensor<T>& x = *in[0];
        if (group_ == 0 || x.cols() % group_ != 0) {
            throw DimensionError("l2_normalize_groups: group " + std::to_string(group_) +
                                 " does not divide width of " + x.shape().str());
        }
        Tensor<T> out(x.rows(), x.cols());
        for (std::size_t r = 0; r < x.rows(); ++r) {
            kernels::l2_normalize_groups(x.row_span(r), group_, floor_, out.row_span(r));
        }
        return out;
    }
    void backward(In<T> in, const Tensor<T>& y, const Tensor<T>& g, Grads<T> grads) const override {
        if (!grads[0]) return;
        const Tensor<T>& x = *in[0];
        for (std::size_t r = 0; r < x.rows(); ++r) {
            for (std::size_t off = 0; off < x.cols(); off += group_) {
                const T norm = std::sqrt(sum_squares<T>(x.row_span(r).subspan(off, group_)));
                if (norm > floor_) {
                    T dot = T(0);
                    for (std::size_t i = 0; i < group_; ++i) {
                        dot += y(r, off + i) * g(r, off + i);
                    }
                    for (std::size_t i = 0; i < group_; ++i) {
                        (*grads[0])(r, off + i) += (g(r, off + i) - y(r, off + i) * dot) / norm;
                    }
                } else {
                    for (std::size_t i = 0; i < group_; ++i) {
                        (*grads[0])(r, off + i) += g(r, off + i) / floor_;
                    }
                }
            }
        }
    }

private:
    std::size_t group_;
    T floor_;
};

template <typename T>
class StateScanOp final : public Op<T> {
public:
    explicit StateScanOp(std::size_t n) : n_(n) {}
    OpKind kind() const override { return OpKind::StateScan; }

    Tensor<T> forward(In<T> in) override {
        const Tensor<T>& w = *in[0];
        const std::size_t steps = w.rows();
        const std::size_t width = w.cols();
        for (std::size_t i = 1; i < 5; ++i) {
            require_same_shape("state_scan", w.shape(), in[i]->shape());
        }
        if (n_ == 0 || width % n_ != 0) {
            throw DimensionError("state_scan: head_dim " + std::to_string(n_) + " does not divide width " +
                                 std::to_string(width));
        }
        const std::size_t heads = width / n_;
        const std::size_t block = n_ * n_;
        if (in[5]->rows() != 1 || in[5]->cols() != heads * block) {
            throw DimensionError(dimension_message("state_scan(init)", Shape{1, heads * block}, in[5]->shape()));
        }
        Tensor<T> out(steps, heads * block);
        std::vector<T> state(in[5]->values().begin(), in[5]->values().end());
        for (std::size_t t = 0; t < steps; ++t) {
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t o = t * width + h * n_;
                kernels::state_step(state.data() + h * block, in[0]->data() + o, in[1]->data() + o,
                                    in[2]->data() + o, in[3]->data() + o, in[4]->data() + o, n_);
            }
            std::copy(state.begin(), state.end(), out.data() + t * heads * block);
        }
        return out;
    }

    void backward(In<T> in, const Tensor<T>& out, const Tensor<T>& g, Grads<T> grads) const override {
        const std::size_t steps = in[0]->rows();
        const std::size_t width = in[0]->cols();
        const std::size_t heads = width / n_;
        const std::size_t block = n_ * n_;
        const std::size_t n = n_;
        std::vector<T> carry(block), ghat(block), q(n), gu(n), c(n);
        for (std::size_t h = 0; h < heads; ++h) {
            std::fill(carry.begin(), carry.end(), T(0));
            for (std::size_t t = steps; t-- > 0;) {
                const std::size_t o = t * width + h * n;
                const T* w = in[0]->data() + o;
                const T* kap = in[1]->data() + o;
                const T* a = in[2]->data() + o;
                const T* key = in[3]->data() + o;
                const T* val = in[4]->data() + o;
                const T* prev = t == 0 ? in[5]->data() + h * block : out.data() + (t - 1) * heads * block + h * block;
                const T* gt = g.data() + t * heads * block + h * block;
                for (std::size_t i = 0; i < block; ++i) {
                    ghat[i] = carry[i] + gt[i];
                }
                if (grads[4]) {
                    T* dv = grads[4]->data() + o;
                    for (std::size_t i = 0; i < n; ++i) {
                        T acc = T(0);
                        for (std::size_t j = 0; j < n; ++j) acc += ghat[i * n + j] * key[j];
                        dv[i] += acc;
                    }
                }
                if (grads[3]) {
                    T* dk = grads[3]->data() + o;
                    for (std::size_t i = 0; i < n; ++i) {
                        for (std::size_t j = 0; j < n; ++j) dk[j] += val[i] * ghat[i * n + j];
                    }
                }
                if (grads[0]) {
                    T* dw = grads[0]->data() + o;
                    for (std::size_t i = 0; i < n; ++i) {
                        for (std::size_t j = 0; j < n; ++j) dw[j] += prev[i * n + j] * ghat[i * n + j];
                    }
                }
                for (std::size_t i = 0; i < n; ++i) {
                    T qi = T(0), gi = T(0);
                    for (std::size_t m = 0; m < n; ++m) {
                        qi += prev[i * n + m] * kap[m];
                        gi += ghat[i * n + m] * (a[m] * kap[m]);
                    }
                    q[i] = qi;
                    gu[i] = gi;
                }
                std::fill(c.begin(), c.end(), T(0));
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < n; ++j) c[j] += q[i] * ghat[i * n + j];
                }
                if (grads[1]) {
                    T* dk = grads[1]->data() + o;
                    for (std::size_t m = 0; m < n; ++m) {
                        T term = T(0);
                        for (std::size_t i = 0; i < n; ++i) term += gu[i] * prev[i * n + m];
                        dk[m] += -term - c[m] * a[m];
                    }
                }
                if (grads[2]) {
                    T* da = grads[2]->data() + o;
                    for (std::size_t j = 0; j < n; ++j) da[j] += -c[j] * kap[j];
                }
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t m = 0; m < n; ++m) {
                        carry[i * n + m] = ghat[i * n + m] * w[m] - gu[i] * kap[m];
                    }
                }
            }
            if (grads[5]) {
                T* di = grads[5]->data() + h * block;
                for (std::size_t i = 0; i < block; ++i) di[i] += carry[i];
            }
        }
    }

private:
    std::size_t n_;
};

template <typename T>
class StateApplyOp final : public Op<T> {
public:
    StateApplyOp(std::size_t n, bool transpose) : n_(n), transpose_(transpose) {}
    OpKind kind() const override { return OpKind::StateApply; }
    Tensor<T> forward(In<T> in) override {
        const Tensor<T>& s = *in[0];
        const Tensor<T>& x = *in[1];
        const std::size_t block = n_ * n_;
        if (n_ == 0 || x.cols() % n_ != 0 || s.rows() != x.rows() || s.cols() != (x.cols() / n_) * block) {
            throw DimensionError(dimension_message("state_apply", s.shape(), x.shape()));
        }
        const std::size_t heads = x.cols() / n_;
        Tensor<T> out(x.rows(), x.cols());
        for (std::size_t t = 0; t < x.rows(); ++t) {
            for (std::size_t h = 0; h < heads; ++h) {
                kernels::state_apply(s.data() + t * s.cols() + h * block, x.data() + t * x.cols() + h * n_,
                                     out.data() + t * x.cols() + h * n_, n_, transpose_);
            }
        }
        return out;
    }
    void backward(In<T> in, const Tensor<T>&, const Tensor<T>& g, Grads<T> grads) const override {
        const Tensor<T>& s = *in[0];
        const Tensor<T>& x = *in[1];
        const std::size_t n = n_;
        const std::size_t block = n * n;
        const std::size_t heads = x.cols() / n;
        for (std::size_t t = 0; t < x.rows(); ++t) {
            for (std::size_t h = 0; h < heads; ++h) {
                const T* st = s.data() + t * s.cols() + h * block;
                const T* xv = x.data() + t * x.cols() + h * n;
                const T* gv = g.data() + t * x.cols() + h * n;
                if (grads[1]) {
                    T* dx = grads[1]->data() + t * x.cols() + h * n;
                    for (std::size_t i = 0; i < n; ++i) {
                        for (std::size_t j = 0; j < n; ++j) {
                            // y = x S: dx_i += S_ij g_j ; y = x S^T: dx_j += g_i S_ij
                            if (transpose_) {
                                dx[j] += gv[i] * st[i * n + j];
                            } else {
                                dx[i] += st[i * n + j] * gv[j];
                            }
                        }
                    }
                }
                if (grads[0]) {
                    T* ds = grads[0]->data() + t * s.cols() + h * block;
                    for (std::size_t i = 0; i < n; ++i) {
                        for (std::size_t j = 0; j < n; ++j) {
                            ds[i * n + j] += transpose_ ? gv[i] * xv[j] : xv[i] * gv[j];
                        }
                    }
                }
            }
        }
    }

private:
    std::size_t n_;
    bool transpose_;
};

template <typename T>
class CausalSoftmaxOp final : public Op<T> {
public:
    OpKind kind() const override { return OpKind::CausalSoftmax; }
    Tensor<T> forward(In<T> in) override {
        const Tensor<T>& x = *in[0];
        if (x.rows() != x.cols()) {
            throw DimensionError("causal_softmax: scores must be square, got " + x.shape().str());
        }
        Tensor<T> out(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.rows(); ++i) {
            T mx = x(i, 0);
            for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, x(i, j));
            T s = T(0);
            for (std::size_t j = 0; j <= i; ++j) {
                out(i, j) = std::exp(x(i, j) - mx);
                s += out(i, j);
            }
            for (std::size_t j = 0; j <= i; ++j) out(i, j) /= s;
        }
        return out;
    }
    void backward(In<T>, const Tensor<T>& y, const Tensor<T>& g, Grads<T> grads) const override {
        if (!grads[0]) return;
        for (std::size_t i = 0; i < y.rows(); ++i) {
            T dot = T(0);
            for (std::size_t j = 0; j <= i; ++j) dot += y(i, j) * g(i, j);
            for (std::size_t j = 0; j <= i; ++j) (*grads[0])(i, j) += y(i, j) * (g(i, j) - dot);
        }
    }
};

template <typename T>
class SoftmaxCrossEntropyOp final : public Op<T> {
public:
    explicit SoftmaxCrossEntropyOp(std::vector<std::size_t> targets) : targets_(std::move(targets)) {}
    OpKind kind() const override { return OpKind::SoftmaxCrossEntropy; }
    Tensor<T> forward(In<T> in) override {
        return Tensor<T>(1, 1, kernels::cross_entropy(*in[0], std::span<const std::size_t>(targets_)));
    }
    void backward(In<T> in, const Tensor<T>&, const Tensor<T>& g, Grads<T> grads) const override {
        if (!grads[0]) return;
        const Tensor<T>& x = *in[0];
        const T scale = g[0] / static_cast<T>(x.rows());
        for (std::size_t r = 0; r < x.rows(); ++r) {
            const auto row = x.row_span(r);
            const T mx = *std::max_element(row.begin(), row.end());
            T s = T(0);
            for (T v : row) s += std::exp(v - mx);
            for (std::size_t j = 0; j < row.size(); ++j) {
                const T p = std::exp(row[j] - mx) / s;
                (*grads[0])(r, j) += scale * (p - (j == targets_[r] ? T(1) : T(0)));
            }
        }
    }

private:
    std::vector<std::size_t> targets_;
};

template <typename T, typename OpT, typename... Args>
Var<T> emit(std::vector<Var<T>> inputs, Args&&... args) {
    Tape<T>& tape = tape_of(inputs.front());
    return tape.record(std::make_unique<OpT>(std::forward<Args>(args)...), std::move(inputs));
}

} // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    if (a.shape().cols != b.shape().rows) {
        throw DimensionError(dimension_message("matmul", a.shape(), b.shape()));
    }
    return emit<T, MatMulOp<T>>({a, b});
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    require_same_shape("add", a.shape(), b.shape());
    return emit<T, BinaryOp<T>>({a, b}, Binary::Add);
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    require_same_shape("sub", a.shape(), b.shape());
    return emit<T, BinaryOp<T>>({a, b}, Binary::Sub);
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    require_same_shape("mul", a.shape(), b.shape());
    return emit<T, BinaryOp<T>>({a, b}, Binary::Mul);
}

template <typename T>
Var<T> add_row(Var<T> m, Var<T> row) {
    if (row.shape().rows != 1 || row.shape().cols != m.shape().cols) {
        throw DimensionError(dimension_message("add_row", m.shape(), row.shape()));
    }
    return emit<T, RowBroadcastOp<T>>({m, row}, false);
}

template <typename T>
Var<T> mul_row(Var<T> m, Var<T> row) {
    if (row.shape().rows != 1 || row.shape().cols != m.shape().cols) {
        throw DimensionError(dimension_message("mul_row", m.shape(), row.shape()));
    }
    return emit<T, RowBroadcastOp<T>>({m, row}, true);
}

template <typename T> Var<T> scale(Var<T> x, T s) { return emit<T, UnaryOp<T>>({x}, Unary::Scale, s); }
template <typename T> Var<T> add_scalar(Var<T> x, T s) { return emit<T, UnaryOp<T>>({x}, Unary::AddScalar, s); }
template <typename T> Var<T> neg(Var<T> x) { return emit<T, UnaryOp<T>>({x}, Unary::Neg); }
template <typename T> Var<T> relu(Var<T> x) { return emit<T, UnaryOp<T>>({x}, Unary::Relu); }
template <typename T> Var<T> sigmoid(Var<T> x) { return emit<T, UnaryOp<T>>({x}, Unary::Sigmoid); }
template <typename T> Var<T> exp(Var<T> x) { return emit<T, UnaryOp<T>>({x}, Unary::Exp); }
template <typename T> Var<T> decay(Var<T> x) { return emit<T, UnaryOp<T>>({x}, Unary::Decay); }
template <typename T> Var<T> transpose(Var<T> x) { return emit<T, TransposeOp<T>>({x}); }

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    if (parts.empty()) {
        throw ContractError("concat_cols: no operands");
    }
    return emit<T, ConcatColsOp<T>>(parts);
}

template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t offset, std::size_t width) {
    return emit<T, SliceOp<T>>({x}, true, offset, width);
}

template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t offset, std::size_t count) {
    return emit<T, SliceOp<T>>({x}, false, offset, count);
}

template <typename T> Var<T> sum(Var<T> x) { return emit<T, SumOp<T>>({x}); }

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
    return layer_norm(x, gamma, beta, std::vector<Segment>{{0, x.shape().cols}}, eps);
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, std::vector<Segment> segments, T eps) {
    const std::size_t c = x.shape().cols;
    if (gamma.shape() != Shape{1, c} || beta.shape() != Shape{1, c}) {
        throw DimensionError(dimension_message("layer_norm", x.shape(), gamma.shape()));
    }
    if (!(eps > T(0))) {
        throw ContractError("layer_norm: eps must be positive");
    }
    std::size_t covered = 0;
    for (const auto& s : segments) {
        if (s.offset != covered || s.width == 0) {
            throw ContractError("layer_norm: segments must tile the row contiguously");
        }
        covered += s.width;
    }
    if (covered != c) {
        throw ContractError("layer_norm: segments cover " + std::to_string(covered) + " of " +
                            std::to_string(c) + " columns");
    }
    return emit<T, LayerNormOp<T>>({x, gamma, beta}, std::move(segments), eps);
}

template <typename T>
Var<T> token_shift(Var<T> x, Var<T> prev, Var<T> mu) {
    const Shape row{1, x.shape().cols};
    if (prev.shape() != row || mu.shape() != row) {
        throw DimensionError(dimension_message("token_shift", x.shape(), prev.shape()));
    }
    return emit<T, TokenShiftOp<T>>({x, prev, mu});
}

template <typename T>
Var<T> gather_rows(Var<T> table, std::vector<std::size_t> ids) {
    return emit<T, GatherRowsOp<T>>({table}, std::move(ids));
}

template <typename T>
Var<T> l2_normalize_groups(Var<T> x, std::size_t group, T floor) {
    return emit<T, L2NormalizeOp<T>>({x}, group, floor);
}

template <typename T>
Var<T> state_scan(Var<T> decay, Var<T> kappa, Var<T> rate, Var<T> key, Var<T> value, Var<T> init,
                  std::size_t head_dim) {
    return emit<T, StateScanOp<T>>({decay, kappa, rate, key, value, init}, head_dim);
}

template <typename T>
Var<T> state_apply(Var<T> states, Var<T> x, std::size_t head_dim, bool transpose) {
    return emit<T, StateApplyOp<T>>({states, x}, head_dim, transpose);
}

template <typename T> Var<T> causal_softmax(Var<T> scores) { return emit<T, CausalSoftmaxOp<T>>({scores}); }

template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::vector<std::size_t> targets) {
    if (targets.size() != logits.shape().rows) {
        throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                             " targets for logits " + logits.shape().str());
    }
    return emit<T, SoftmaxCrossEntropyOp<T>>({logits}, std::move(targets));
}

#define METASTATE_INSTANTIATE(T)                                                                    \
    template Var<T> matmul(Var<T>, Var<T>);                                                         \
    template Var<T> add(Var<T>, Var<T>);                                                            \
    template Var<T> sub(Var<T>, Var<T>);                                                            \
    template Var<T> mul(Var<T>, Var<T>);                                                            \
    template Var<T> add_row(Var<T>, Var<T>);                                                        \
    template Var<T> mul_row(Var<T>, Var<T>);                                                        \
    template Var<T> scale(Var<T>, T);                                                               \
    template Var<T> add_scalar(Var<T>, T);                                                          \
    template Var<T> neg(Var<T>);                                                                    \
    template Var<T> relu(Var<T>);                                                                   \
    template Var<T> sigmoid(Var<T>);                                                                \
    template Var<T> exp(Var<T>);                                                                    \
    template Var<T> decay(Var<T>);                                                                  \
    template Var<T> transpose(Var<T>);                                                              \
    template Var<T> concat_cols(const std::vector<Var<T>>&);                                        \
    template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                                  \
    template Var<T> slice_rows(Var<T>, std::size_t, std::size_t);                                  \
    template Var<T> sum(Var<T>);                                                                    \
    template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                          \
    template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, std::vector<Segment>, T);                    \
    template Var<T> token_shift(Var<T>, Var<T>, Var<T>);                                            \
    template Var<T> gather_rows(Var<T>, std::vector<std::size_t>);                                  \
    template Var<T> l2_normalize_groups(Var<T>, std::size_t, T);                                    \
    template Var<T> state_scan(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, std::size_t);        \
    template Var<T> state_apply(Var<T>, Var<T>, std::size_t, bool);                                 \
    template Var<T> causal_softmax(Var<T>);                                                         \
    template Var<T> softmax_cross_entropy(Var<T>, std::vector<std::size_t>);

METASTATE_INSTANTIATE(float)
METASTATE_INSTANTIATE(double)

} // namespace metastate::ad
