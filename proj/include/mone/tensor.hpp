#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mone {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major double-precision array. Rank 0 is a scalar holding one
/// element. Slicing always copies; there are no strided views.
class Tensor {
public:
    Tensor();
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    /// Builds a rank-2 tensor from nested rows; every row must have the same length.
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor vector(std::initializer_list<double> values);
    static Tensor vector(std::vector<double> values);
    static Tensor scalar(double value);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return data_.size(); }

    // Rank-2 helpers. A rank-1 tensor of length n is treated as a 1×n row.
    std::size_t rows() const
    {
        if (shape_.size() == 2) return shape_[0];
        if (shape_.size() <= 1) return 1;
        bad_rank("rows");
    }
    std::size_t cols() const
    {
        if (shape_.size() == 2) return shape_[1];
        if (shape_.size() == 1) return shape_[0];
        if (shape_.empty()) return 1;
        bad_rank("cols");
    }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    std::span<double> row(std::size_t r);
    std::span<const double> row(std::size_t r) const;

    /// Same data, new shape; sizes must agree.
    Tensor reshaped(Shape shape) const;
    Tensor transposed() const;

    void fill(double value);
    Tensor& operator+=(const Tensor& other);
    Tensor& operator*=(double s);

    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
    double sum() const;
    double max_abs() const;
    bool all_finite() const;

private:
    [[noreturn]] void bad_rank(const char* what) const;
    Shape shape_;
    std::vector<double> data_;
};

Tensor zeros_like(const Tensor& t);

struct NamedTensor {
    std::string name;
    Tensor* tensor;
};

/// Largest |a - b|; throws DimensionError on shape mismatch.
double max_abs_diff(const Tensor& a, const Tensor& b);

} // namespace mone
