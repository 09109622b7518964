#include "mone/autodiff.hpp"

#include "mone/errors.hpp"
#include "mone/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace mone {

const Tensor& Var::value() const
{
    return tape_->value(id_);
}

Var Tape::constant(Tensor value)
{
    Node n;
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Tape::leaf(const Tensor& value, Tensor* grad_sink)
{
    Node n;
    n.ref = &value;
    n.sink = grad_sink;
    n.requires_grad = grad_sink != nullptr;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Tape::variable(Tensor value)
{
    Node n;
    n.owned = std::move(value);
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward)
{
    Node n;
    n.owned = std::move(value);
    for (const Var& in : inputs) {
        if (&in.tape() != this) throw Error("tape: input recorded on a different tape");
        n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

const Tensor& Tape::value(std::size_t id) const
{
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.owned;
}

Tensor& Tape::grad(std::size_t id)
{
    Node& n = nodes_[id];
    if (!n.has_grad) {
        n.grad = zeros_like(value(id));
        n.has_grad = true;
    }
    return n.grad;
}

void Tape::backward(Var root)
{
    backward(root, Tensor(root.value().shape(), 1.0));
}

void Tape::backward(Var root, const Tensor& seed)
{
    if (&root.tape() != this) throw Error("tape: backward root from another tape");
    grad(root.id()) += seed;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.has_grad || !n.requires_grad) continue;
        if (n.backward) n.backward(*this, n.grad);
        if (n.sink) *n.sink += n.grad;
    }
}

namespace {

Tape& same_tape(Var a, Var b)
{
    if (&a.tape() != &b.tape()) throw Error("tape: operands live on different tapes");
    return a.tape();
}

} // namespace

Var matmul(Var a, Var b)
{
    Tape& t = same_tape(a, b);
    Tensor out = mone::matmul(a.value(), b.value());
    const Var in[] = {a, b};
    return t.record(std::move(out), in, [a, b](Tape& tp, const Tensor& g) {
        if (tp.requires_grad(a)) matmul_nt_acc(g, b.value(), tp.grad(a));
        if (tp.requires_grad(b)) matmul_tn_acc(a.value(), g, tp.grad(b));
    });
}

Var matmul_nt(Var a, Var b)
{
    Tape& t = same_tape(a, b);
    Tensor out = mone::matmul_nt(a.value(), b.value());
    const Var in[] = {a, b};
    return t.record(std::move(out), in, [a, b](Tape& tp, const Tensor& g) {
        if (tp.requires_grad(a)) matmul_acc(g, b.value(), tp.grad(a));
        if (tp.requires_grad(b)) matmul_tn_acc(g, a.value(), tp.grad(b));
    });
}

Var add(Var a, Var b)
{
    Tape& t = same_tape(a, b);
    if (!a.value().same_shape(b.value())) {
        throw DimensionError("add: " + shape_string(a.value().shape()) + " vs " + shape_string(b.value().shape()));
    }
    Tensor out = a.value();
    out += b.value();
    const Var in[] = {a, b};
    return t.record(std::move(out), in, [a, b](Tape& tp, const Tensor& g) {
        if (tp.requires_grad(a)) tp.grad(a) += g;
        if (tp.requires_grad(b)) tp.grad(b) += g;
    });
}

Var add_row_bias(Var a, Var bias)
{
    Tape& t = same_tape(a, bias);
    const std::size_t m = a.value().rows(), n = a.value().cols();
    if (bias.value().size() != n) throw DimensionError("add_row_bias: bias width mismatch");
    Tensor out = a.value();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(i, j) += bias.value()[j];
    const Var in[] = {a, bias};
    return t.record(std::move(out), in, [a, bias, m, n](Tape& tp, const Tensor& g) {
        if (tp.requires_grad(a)) tp.grad(a) += g;
        if (tp.requires_grad(bias)) {
            Tensor& gb = tp.grad(bias);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gb[j] += g(i, j);
        }
    });
}

Var scale(Var a, double s)
{
    Tensor out = a.value();
    out *= s;
    const Var in[] = {a};
    return a.tape().record(std::move(out), in, [a, s](Tape& tp, const Tensor& g) {
        Tensor& ga = tp.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    });
}

Var scale_rows(Var a, Var gain)
{
    Tape& t = same_tape(a, gain);
    const std::size_t m = a.value().rows(), n = a.value().cols();
    if (gain.value().size() != m) throw DimensionError("scale_rows: gain length mismatch");
    Tensor out = a.value();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(i, j) *= gain.value()[i];
    const Var in[] = {a, gain};
    return t.record(std::move(out), in, [a, gain, m, n](Tape& tp, const Tensor& g) {
        if (tp.requires_grad(a)) {
            Tensor& ga = tp.grad(a);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga(i, j) += g(i, j) * gain.value()[i];
        }
        if (tp.requires_grad(gain)) {
            Tensor& gg = tp.grad(gain);
            for (std::size_t i = 0; i < m; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j) s += g(i, j) * a.value()(i, j);
                gg[i] += s;
            }
        }
    });
}

Var affine_gain(Var r, Var alpha)
{
    Tape& t = same_tape(r, alpha);
    if (alpha.value().size() != 1) throw DimensionError("affine_gain: alpha must hold one element");
    const double al = alpha.value()[0];
    Tensor out = r.value();
    for (auto& v : out.data()) v = al * v + 1.0;
    const Var in[] = {r, alpha};
    return t.record(std::move(out), in, [r, alpha, al](Tape& tp, const Tensor& g) {
        if (tp.requires_grad(r)) {
            Tensor& gr = tp.grad(r);
            for (std::size_t i = 0; i < g.size(); ++i) gr[i] += al * g[i];
        }
        if (tp.requires_grad(alpha)) {
            double s = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * r.value()[i];
            tp.grad(alpha)[0] += s;
        }
    });
}

Var row_softmax(Var x)
{
    Tape& t = x.tape();
    const Var self(&t, t.size());
    const Var in[] = {x};
    return t.record(mone::row_softmax(x.value()), in, [x, self](Tape& tp, const Tensor& g) {
        const Tensor& y = self.value();
        Tensor& gx = tp.grad(x);
        const std::size_t m = y.rows(), n = y.cols();
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g(i, j) * y(i, j);
            for (std::size_t j = 0; j < n; ++j) gx(i, j) += y(i, j) * (g(i, j) - dot);
        }
    });
}

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps)
{
    Tape& t = same_tape(x, gamma);
    same_tape(x, beta);
    Tensor xhat;
    std::vector<double> rstd;
    Tensor out = mone::layer_norm_rows(x.value(), gamma.value(), beta.value(), eps, &xhat, &rstd);
    const Var in[] = {x, gamma, beta};
    return t.record(std::move(out), in,
                    [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& tp, const Tensor& g) {
                        const std::size_t m = xhat.rows(), n = xhat.cols();
                        if (tp.requires_grad(gamma)) {
                            Tensor& gg = tp.grad(gamma);
                            for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < n; ++j) gg[j] += g(i, j) * xhat(i, j);
                        }
                        if (tp.requires_grad(beta)) {
                            Tensor& gb = tp.grad(beta);
                            for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < n; ++j) gb[j] += g(i, j);
                        }
                        if (tp.requires_grad(x)) {
                            Tensor& gx = tp.grad(x);
                            const Tensor& gm = gamma.value();
                            const double inv_n = 1.0 / static_cast<double>(n);
                            for (std::size_t i = 0; i < m; ++i) {
                                double mean_g = 0.0, mean_gx = 0.0;
                                for (std::size_t j = 0; j < n; ++j) {
                                    const double gj = g(i, j) * gm[j];
                                    mean_g += gj;
                                    mean_gx += gj * xhat(i, j);
                                }
                                mean_g *= inv_n;
                                mean_gx *= inv_n;
                                for (std::size_t j = 0; j < n; ++j) {
                                    const double gj = g(i, j) * gm[j];
                                    gx(i, j) += rstd[i] * (gj - mean_g - xhat(i, j) * mean_gx);
                                }
                            }
                        }
                    });
}

Var gelu(Var x)
{
    const Var in[] = {x};
    return x.tape().record(mone::gelu(x.value()), in, [x](Tape& tp, const Tensor& g) {
        Tensor& gx = tp.grad(x);
        const Tensor& xv = x.value();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * gelu_derivative(xv[i]);
    });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end)
{
    const std::size_t m = a.value().rows(), n = a.value().cols();
    if (begin >= end || end > n) throw DimensionError("slice_cols: bad column range");
    const std::size_t w = end - begin;
    Tensor out({m, w});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) out(i, j) = a.value()(i, begin + j);
    const Var in[] = {a};
    return a.tape().record(std::move(out), in, [a, begin, m, w](Tape& tp, const Tensor& g) {
        Tensor& ga = tp.grad(a);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) ga(i, begin + j) += g(i, j);
    });
}

Var concat_cols(std::span<const Var> parts)
{
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    Tape& t = parts.front().tape();
    const std::size_t m = parts.front().value().rows();
    std::vector<std::size_t> offsets;
    std::size_t total = 0;
    for (const Var& p : parts) {
        same_tape(parts.front(), p);
        if (p.value().rows() != m) throw DimensionError("concat_cols: row count mismatch");
        offsets.push_back(total);
        total += p.value().cols();
    }
    Tensor out({m, total});
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& pv = parts[k].value();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < pv.cols(); ++j) out(i, offsets[k] + j) = pv(i, j);
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return t.record(std::move(out), parts, [inputs, offsets, m](Tape& tp, const Tensor& g) {
        for (std::size_t k = 0; k < inputs.size(); ++k) {
            if (!tp.requires_grad(inputs[k])) continue;
            Tensor& gp = tp.grad(inputs[k]);
            const std::size_t w = gp.cols();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j) gp(i, j) += g(i, offsets[k] + j);
        }
    });
}

Var gather_cols(Var a, std::span<const std::size_t> index)
{
    const std::size_t m = a.value().rows(), n = a.value().cols();
    if (index.size() != m) throw DimensionError("gather_cols: one index per row required");
    std::vector<std::size_t> idx(index.begin(), index.end());
    Tensor out({m, 1});
    for (std::size_t i = 0; i < m; ++i) {
        if (idx[i] >= n) throw DimensionError("gather_cols: column index out of range");
        out[i] = a.value()(i, idx[i]);
    }
    const Var in[] = {a};
    return a.tape().record(std::move(out), in, [a, idx = std::move(idx)](Tape& tp, const Tensor& g) {
        Tensor& ga = tp.grad(a);
        for (std::size_t i = 0; i < idx.size(); ++i) ga(i, idx[i]) += g[i];
    });
}

Var mean_rows(Var a)
{
    const std::size_t m = a.value().rows(), n = a.value().cols();
    Tensor out({1, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += a.value()(i, j);
    out *= 1.0 / static_cast<double>(m);
    const Var in[] = {a};
    return a.tape().record(std::move(out), in, [a, m, n](Tape& tp, const Tensor& g) {
        Tensor& ga = tp.grad(a);
        const double w = 1.0 / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga(i, j) += w * g[j];
    });
}

Var sum(Var a)
{
    const Var in[] = {a};
    return a.tape().record(Tensor::scalar(a.value().sum()), in, [a](Tape& tp, const Tensor& g) {
        Tensor& ga = tp.grad(a);
        for (auto& v : ga.data()) v += g[0];
    });
}

Var softmax_cross_entropy(Var logits, std::size_t label)
{
    const Tensor& z = logits.value();
    const std::size_t k = z.size();
    if (label >= k) throw DimensionError("softmax_cross_entropy: label out of range");
    Tensor p = mone::row_softmax(z.reshaped({1, k}));
    const double loss = -std::log(std::max(p[label], 1e-300));
    if (!std::isfinite(loss)) throw NumericError("softmax_cross_entropy: non-finite loss");
    const Var in[] = {logits};
    return logits.tape().record(Tensor::scalar(loss), in, [logits, label, p = std::move(p)](Tape& tp, const Tensor& g) {
        Tensor& gz = tp.grad(logits);
        for (std::size_t i = 0; i < p.size(); ++i) gz[i] += g[0] * (p[i] - (i == label ? 1.0 : 0.0));
    });
}

} // namespace mone
