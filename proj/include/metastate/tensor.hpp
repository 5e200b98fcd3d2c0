#pragma once

#include <cstddef>
#include <cstring>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "metastate/errors.hpp"

namespace metastate {

struct Shape {
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::size_t size() const { return rows * cols; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

// Dense row-major matrix. Vectors are 1 x n rows; matrices act on the right.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    Tensor(std::size_t rows, std::size_t cols, T fill = T(0))
        : shape_{rows, cols}, data_(rows * cols, fill) {}
    Tensor(std::size_t rows, std::size_t cols, std::vector<T> values);

    static Tensor row(std::vector<T> values);
    static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows);
    static Tensor identity(std::size_t n);

    Shape shape() const { return shape_; }
    std::size_t rows() const { return shape_.rows; }
    std::size_t cols() const { return shape_.cols; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_.cols + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_.cols + c]; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    std::span<T> row_span(std::size_t r) { return {data_.data() + r * shape_.cols, shape_.cols}; }
    std::span<const T> row_span(std::size_t r) const {
        return {data_.data() + r * shape_.cols, shape_.cols};
    }

    bool bitwise_equal(const Tensor& other) const {
        return shape_ == other.shape_ &&
               (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(T)) == 0);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_.rows, shape_.cols, std::move(out));
    }

private:
    Shape shape_{};
    std::vector<T> data_;
};

// Contiguous column range, used for per-head and per-segment normalization.
struct Segment {
    std::size_t offset = 0;
    std::size_t width = 0;
};

// Repeats a width pattern `repeats` times across consecutive columns.
std::vector<Segment> tile_segments(std::span<const std::size_t> widths, std::size_t repeats);

std::string dimension_message(const char* op, Shape a, Shape b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
T frobenius_norm(const Tensor<T>& a);

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

// Sum of squares in a fixed order; identical across call sites.
template <typename T>
T sum_squares(std::span<const T> x);

} // namespace metastate
