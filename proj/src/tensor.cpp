#include "mone/tensor.hpp"

#include "mone/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mone {

std::size_t shape_size(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

void check_shape(const Shape& shape)
{
    for (auto d : shape) {
        if (d == 0) throw DimensionError("tensor shape " + shape_string(shape) + " has a zero extent");
    }
}

} // namespace

Tensor::Tensor() : data_(1, 0.0) {}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape))
{
    check_shape(shape_);
    data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data))
{
    check_shape(shape_);
    if (shape_size(shape_) != data_.size()) {
        throw DimensionError("tensor shape " + shape_string(shape_) + " does not match " +
                             std::to_string(data_.size()) + " elements");
    }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows)
{
    if (rows.size() == 0) throw DimensionError("matrix literal has no rows");
    const std::size_t ncols = rows.begin()->size();
    std::vector<double> data;
    data.reserve(rows.size() * ncols);
    for (const auto& r : rows) {
        if (r.size() != ncols) throw DimensionError("ragged matrix literal");
        data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), ncols}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values)
{
    return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::vector(std::vector<double> values)
{
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
}

Tensor Tensor::scalar(double value)
{
    return Tensor({}, std::vector<double>{value});
}

std::size_t Tensor::dim(std::size_t axis) const
{
    if (axis >= shape_.size()) throw DimensionError("axis out of range for " + shape_string(shape_));
    return shape_[axis];
}

void Tensor::bad_rank(const char* what) const
{
    throw DimensionError(std::string(what) + "() on tensor of rank " + std::to_string(shape_.size()));
}

std::span<double> Tensor::row(std::size_t r)
{
    const std::size_t n = cols();
    return std::span<double>(data_).subspan(r * n, n);
}

std::span<const double> Tensor::row(std::size_t r) const
{
    const std::size_t n = cols();
    return std::span<const double>(data_).subspan(r * n, n);
}

Tensor Tensor::reshaped(Shape shape) const
{
    return Tensor(std::move(shape), data_);
}

Tensor Tensor::transposed() const
{
    const std::size_t m = rows();
    const std::size_t n = cols();
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data_[j * m + i] = data_[i * n + j];
    return out;
}

void Tensor::fill(double value)
{
    std::fill(data_.begin(), data_.end(), value);
}

Tensor& Tensor::operator+=(const Tensor& other)
{
    if (other.data_.size() != data_.size()) {
        throw DimensionError("cannot add " + shape_string(other.shape_) + " into " + shape_string(shape_));
    }
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(double s)
{
    for (auto& v : data_) v *= s;
    return *this;
}

double Tensor::sum() const
{
    return std::accumulate(data_.begin(), data_.end(), 0.0);
}

double Tensor::max_abs() const
{
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
}

bool Tensor::all_finite() const
{
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor zeros_like(const Tensor& t)
{
    return Tensor(t.shape(), 0.0);
}

double max_abs_diff(const Tensor& a, const Tensor& b)
{
    if (a.size() != b.size()) {
        throw DimensionError("max_abs_diff: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace mone
