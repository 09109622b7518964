#include "mone/kernels.hpp"

#include "mone/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace mone {

namespace {

void require(bool ok, const char* op, const Tensor& a, const Tensor& b)
{
    if (!ok) {
        throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                             shape_string(b.shape()));
    }
}

} // namespace

void matmul_acc(const Tensor& a, const Tensor& b, Tensor& c)
{
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    require(b.rows() == k, "matmul", a, b);
    require(c.rows() == m && c.cols() == n, "matmul(out)", c, b);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = c.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = pc + i * n;
        for (std::size_t t = 0; t < k; ++t) {
            const double av = pa[i * k + t];
            if (av == 0.0) continue;
            const double* brow = pb + t * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void matmul_nt_acc(const Tensor& a, const Tensor& b, Tensor& c)
{
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    require(b.cols() == k, "matmul_nt", a, b);
    require(c.rows() == m && c.cols() == n, "matmul_nt(out)", c, b);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = c.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        for (std::size_t j = 0; j < n; ++j) pc[i * n + j] += dot(arow, pb + j * k, k);
    }
}

void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& c)
{
    const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
    require(b.rows() == k, "matmul_tn", a, b);
    require(c.rows() == m && c.cols() == n, "matmul_tn(out)", c, b);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = c.data().data();
    for (std::size_t t = 0; t < k; ++t) {
        const double* brow = pb + t * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = pa[t * m + i];
            if (av == 0.0) continue;
            double* crow = pc + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

Tensor matmul(const Tensor& a, const Tensor& b)
{
    require(a.cols() == b.rows(), "matmul", a, b);
    Tensor c({a.rows(), b.cols()});
    matmul_acc(a, b, c);
    return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b)
{
    require(a.cols() == b.cols(), "matmul_nt", a, b);
    Tensor c({a.rows(), b.rows()});
    matmul_nt_acc(a, b, c);
    return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b)
{
    require(a.rows() == b.rows(), "matmul_tn", a, b);
    Tensor c({a.cols(), b.cols()});
    matmul_tn_acc(a, b, c);
    return c;
}

Tensor row_softmax(const Tensor& x)
{
    const std::size_t m = x.rows(), n = x.cols();
    Tensor y(x.rank() == 2 ? x.shape() : Shape{m, n});
    for (std::size_t i = 0; i < m; ++i) {
        auto in = x.row(i);
        auto out = y.row(i);
        double mx = in[0];
        for (double v : in) {
            if (std::isnan(v)) throw NumericError("row_softmax: NaN input");
            mx = std::max(mx, v);
        }
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out[j] = std::exp(in[j] - mx);
            s += out[j];
        }
        for (auto& v : out) v /= s;
    }
    return y;
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps, Tensor* normalized,
                       std::vector<double>* inv_std)
{
    const std::size_t m = x.rows(), n = x.cols();
    if (gamma.size() != n || beta.size() != n) {
        throw DimensionError("layer_norm: scale/shift of size " + std::to_string(gamma.size()) +
                             " for feature width " + std::to_string(n));
    }
    Tensor y({m, n});
    if (normalized) *normalized = Tensor({m, n});
    if (inv_std) inv_std->assign(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        auto in = x.row(i);
        double mean = 0.0;
        for (double v : in) mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double v : in) var += (v - mean) * (v - mean);
        var /= static_cast<double>(n);
        const double rstd = 1.0 / std::sqrt(var + eps);
        if (inv_std) (*inv_std)[i] = rstd;
        auto out = y.row(i);
        for (std::size_t j = 0; j < n; ++j) {
            const double xh = (in[j] - mean) * rstd;
            if (normalized) (*normalized)(i, j) = xh;
            out[j] = gamma[j] * xh + beta[j];
        }
    }
    return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps)
{
    return layer_norm_rows(x, gamma, beta, eps).reshaped(x.shape());
}

double gelu(double x)
{
    return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

double gelu_derivative(double x)
{
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

Tensor gelu(const Tensor& x)
{
    Tensor y = x;
    for (auto& v : y.data()) v = gelu(v);
    return y;
}

} // namespace mone
