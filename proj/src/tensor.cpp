#include "metastate/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace metastate {

std::string Shape::str() const {
    return "(" + std::to_string(rows) + ", " + std::to_string(cols) + ")";
}

std::string dimension_message(const char* op, Shape a, Shape b) {
    return std::string(op) + ": incompatible shapes " + a.str() + " and " + b.str();
}

template <typename T>
Tensor<T>::Tensor(std::size_t rows, std::size_t cols, std::vector<T> values)
    : shape_{rows, cols}, data_(std::move(values)) {
    if (data_.size() != rows * cols) {
        throw DimensionError("tensor: " + std::to_string(data_.size()) + " values cannot fill shape " +
                             shape_.str());
    }
}

template <typename T>
Tensor<T> Tensor<T>::row(std::vector<T> values) {
    const std::size_t n = values.size();
    return Tensor(1, n, std::move(values));
}

template <typename T>
Tensor<T> Tensor<T>::from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<T> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) {
            throw DimensionError("tensor: ragged row initializer");
        }
        values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor(r, c, std::move(values));
}

template <typename T>
Tensor<T> Tensor<T>::identity(std::size_t n) {
    Tensor out(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        out(i, i) = T(1);
    }
    return out;
}

std::vector<Segment> tile_segments(std::span<const std::size_t> widths, std::size_t repeats) {
    std::vector<Segment> out;
    out.reserve(widths.size() * repeats);
    std::size_t offset = 0;
    for (std::size_t r = 0; r < repeats; ++r) {
        for (std::size_t w : widths) {
            out.push_back({offset, w});
            offset += w;
        }
    }
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    Tensor<T> out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            out(j, i) = a(i, j);
        }
    }
    return out;
}

template <typename T>
T sum_squares(std::span<const T> x) {
    T acc = T(0);
    for (T v : x) {
        acc += v * v;
    }
    return acc;
}

template <typename T>
T frobenius_norm(const Tensor<T>& a) {
    return std::sqrt(sum_squares<T>(a.values()));
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(dimension_message("max_abs_diff", a.shape(), b.shape()));
    }
    T worst = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    return worst;
}

#define METASTATE_INSTANTIATE(T)                                          \
    template class Tensor<T>;                                             \
    template Tensor<T> transpose(const Tensor<T>&);                       \
    template T sum_squares(std::span<const T>);                           \
    template T frobenius_norm(const Tensor<T>&);                          \
    template T max_abs_diff(const Tensor<T>&, const Tensor<T>&);

METASTATE_INSTANTIATE(float)
METASTATE_INSTANTIATE(double)
template class Tensor<unsigned char>;

} // namespace metastate
