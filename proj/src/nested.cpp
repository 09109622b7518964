#include "mone/nested.hpp"

#include "mone/errors.hpp"
#include "mone/kernels.hpp"

#include <algorithm>
#include <string>

namespace mone {

void NestedSpec::validate() const
{
    if (dim == 0 || experts == 0 || heads == 0 || layers == 0) {
        throw ConfigError("nested spec: dim, experts, heads and layers must be positive");
    }
    if (experts > 16) throw ConfigError("nested spec: at most 16 experts");
    const std::size_t step = std::size_t{1} << (experts - 1);
    if (dim % step != 0) {
        throw ConfigError("nested spec: dim " + std::to_string(dim) + " is not divisible by 2^(E-1) = " +
                          std::to_string(step));
    }
    if (dim % heads != 0) {
        throw ConfigError("nested spec: dim " + std::to_string(dim) + " is not divisible by " +
                          std::to_string(heads) + " heads");
    }
}

std::vector<std::size_t> NestedSpec::dims() const
{
    std::vector<std::size_t> out(experts);
    for (std::size_t i = 0; i < experts; ++i) out[i] = expert_dim(i);
    return out;
}

std::size_t NestedSpec::expert_dim(std::size_t expert) const
{
    if (expert >= experts) throw RoutingError("expert index " + std::to_string(expert) + " out of range");
    return dim >> (experts - 1 - expert);
}

std::size_t NestedSpec::expert_for_dim(std::size_t d) const
{
    for (std::size_t i = 0; i < experts; ++i) {
        if (expert_dim(i) == d) return i;
    }
    throw RoutingError("width " + std::to_string(d) + " is not a nested model dimension");
}

void validate_dims(const DimVec& dims, const NestedSpec& spec)
{
    for (auto d : dims) (void)spec.expert_for_dim(d);
}

DimVec uniform_dims(std::size_t tokens, std::size_t d)
{
    return DimVec(tokens, d);
}

Tensor extract(const Tensor& x, std::size_t d, const NestedSpec& spec)
{
    if (x.size() != spec.dim) throw DimensionError("extract: input is not a D-vector");
    (void)spec.expert_for_dim(d);
    return Tensor::vector(std::vector<double>(x.data().begin(), x.data().begin() + static_cast<std::ptrdiff_t>(d)));
}

Tensor pad(const Tensor& x, std::size_t full_dim)
{
    if (x.size() > full_dim) throw DimensionError("pad: input longer than target width");
    std::vector<double> out(full_dim, 0.0);
    std::copy(x.data().begin(), x.data().end(), out.begin());
    return Tensor::vector(std::move(out));
}

namespace {

void check_widths(const Tensor& x, const DimVec& dims, std::size_t full_dim, const char* op)
{
    if (dims.size() != x.rows()) throw DimensionError(std::string(op) + ": one width per token required");
    for (auto d : dims) {
        if (d == 0 || d > full_dim) throw RoutingError(std::string(op) + ": token width out of range");
    }
}

void sliced_in_forward(const Tensor& x, const DimVec& dims, const Tensor& w, Tensor& out)
{
    const std::size_t n_in = x.cols(), n_out = w.cols();
    const double* px = x.data().data();
    const double* pw = w.data().data();
    double* po = out.data().data();
    for (std::size_t j = 0; j < x.rows(); ++j) {
        double* orow = po + j * n_out;
        for (std::size_t t = 0; t < dims[j]; ++t) axpy(px[j * n_in + t], pw + t * n_out, orow, n_out);
    }
}

void sliced_out_forward(const Tensor& h, const DimVec& dims, const Tensor& w, Tensor& out)
{
    const std::size_t n_in = h.cols(), n_out = w.rows();
    const double* ph = h.data().data();
    const double* pw = w.data().data();
    double* po = out.data().data();
    for (std::size_t j = 0; j < h.rows(); ++j) {
        for (std::size_t k = 0; k < dims[j]; ++k) po[j * n_out + k] = dot(ph + j * n_in, pw + k * n_in, n_in);
    }
}

} // namespace

Tensor sliced_in_projection(const Tensor& x, const DimVec& dims, const Tensor& w)
{
    if (x.cols() != w.rows()) throw DimensionError("sliced_in_projection: X width must equal W rows");
    check_widths(x, dims, w.rows(), "sliced_in_projection");
    Tensor out({x.rows(), w.cols()});
    sliced_in_forward(x, dims, w, out);
    return out;
}

std::vector<Tensor> sliced_out_projection(const Tensor& h, const DimVec& dims, const Tensor& w)
{
    Tensor padded = sliced_out_projection_padded(h, dims, w);
    std::vector<Tensor> out;
    out.reserve(h.rows());
    for (std::size_t j = 0; j < h.rows(); ++j) {
        auto r = padded.row(j);
        out.push_back(Tensor::vector(std::vector<double>(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(dims[j]))));
    }
    return out;
}

Tensor sliced_out_projection_padded(const Tensor& h, const DimVec& dims, const Tensor& w)
{
    if (h.cols() != w.cols()) throw DimensionError("sliced_out_projection: H width must equal W columns");
    check_widths(h, dims, w.rows(), "sliced_out_projection");
    Tensor out({h.rows(), w.rows()});
    sliced_out_forward(h, dims, w, out);
    return out;
}

Var extract(Var x, std::size_t d, const NestedSpec& spec)
{
    Tensor out = extract(x.value(), d, spec);
    const Var in[] = {x};
    return x.tape().record(std::move(out), in, [x, d](Tape& tp, const Tensor& g) {
        Tensor& gx = tp.grad(x);
        for (std::size_t i = 0; i < d; ++i) gx[i] += g[i];
    });
}

Var pad(Var x, std::size_t full_dim)
{
    Tensor out = pad(x.value(), full_dim);
    const Var in[] = {x};
    return x.tape().record(std::move(out), in, [x](Tape& tp, const Tensor& g) {
        Tensor& gx = tp.grad(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
}

Var sliced_in_projection(Var x, const DimVec& dims, Var w)
{
    Tensor out = sliced_in_projection(x.value(), dims, w.value());
    const Var in[] = {x, w};
    return x.tape().record(std::move(out), in, [x, w, dims](Tape& tp, const Tensor& g) {
        const Tensor& xv = x.value();
        const Tensor& wv = w.value();
        const std::size_t n_in = xv.cols(), n_out = wv.cols();
        const double* px = xv.data().data();
        const double* pw = wv.data().data();
        const double* pg = g.data().data();
        if (tp.requires_grad(x)) {
            double* gx = tp.grad(x).data().data();
            for (std::size_t j = 0; j < xv.rows(); ++j) {
                for (std::size_t t = 0; t < dims[j]; ++t) gx[j * n_in + t] += dot(pg + j * n_out, pw + t * n_out, n_out);
            }
        }
        if (tp.requires_grad(w)) {
            double* gw = tp.grad(w).data().data();
            for (std::size_t j = 0; j < xv.rows(); ++j) {
                for (std::size_t t = 0; t < dims[j]; ++t) axpy(px[j * n_in + t], pg + j * n_out, gw + t * n_out, n_out);
            }
        }
    });
}

Var sliced_out_projection_padded(Var h, const DimVec& dims, Var w)
{
    Tensor out = sliced_out_projection_padded(h.value(), dims, w.value());
    const Var in[] = {h, w};
    return h.tape().record(std::move(out), in, [h, w, dims](Tape& tp, const Tensor& g) {
        const Tensor& hv = h.value();
        const Tensor& wv = w.value();
        const std::size_t n_in = hv.cols(), n_out = wv.rows();
        const double* ph = hv.data().data();
        const double* pw = wv.data().data();
        const double* pg = g.data().data();
        double* gh = tp.requires_grad(h) ? tp.grad(h).data().data() : nullptr;
        double* gw = tp.requires_grad(w) ? tp.grad(w).data().data() : nullptr;
        for (std::size_t j = 0; j < hv.rows(); ++j) {
            for (std::size_t k = 0; k < dims[j]; ++k) {
                const double gk = pg[j * n_out + k];
                if (gk == 0.0) continue;
                if (gh) axpy(gk, pw + k * n_in, gh + j * n_in, n_in);
                if (gw) axpy(gk, ph + j * n_in, gw + k * n_in, n_in);
            }
        }
    });
}

} // namespace mone
