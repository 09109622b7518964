#include "mone/routing.hpp"

#include "mone/errors.hpp"
#include "mone/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

namespace mone {

DimVec AssignmentVec::dims(const NestedSpec& spec) const
{
    DimVec out(experts.size());
    for (std::size_t i = 0; i < experts.size(); ++i) out[i] = spec.expert_dim(experts[i]);
    return out;
}

std::vector<std::size_t> AssignmentVec::counts(std::size_t num_experts) const
{
    std::vector<std::size_t> out(num_experts, 0);
    for (auto e : experts) {
        if (e >= num_experts) throw RoutingError("assignment refers to expert " + std::to_string(e));
        ++out[e];
    }
    return out;
}

double effective_capacity(const std::vector<double>& c)
{
    const std::size_t e = c.size();
    double s = 0.0;
    for (std::size_t i = 0; i < e; ++i) s += c[i] / std::ldexp(1.0, static_cast<int>(e - 1 - i));
    return s;
}

double min_effective_capacity(std::size_t experts)
{
    return std::ldexp(1.0, -static_cast<int>(experts - 1));
}

void validate_capacity(const std::vector<double>& c)
{
    if (c.empty()) throw RoutingError("capacity distribution is empty");
    double s = 0.0;
    for (double v : c) {
        if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
            throw RoutingError("capacity entries must lie in [0, 1]");
        }
        s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) throw RoutingError("capacity distribution must sum to 1");
}

CapacityDist make_capacity(std::vector<double> c)
{
    validate_capacity(c);
    const double ec = effective_capacity(c);
    return {std::move(c), ec};
}

std::vector<std::size_t> epr_counts(const std::vector<double>& c, std::size_t tokens)
{
    validate_capacity(c);
    std::vector<std::size_t> counts(c.size(), 0);
    std::size_t taken = 0;
    for (std::size_t j = c.size(); j-- > 1;) {
        counts[j] = static_cast<std::size_t>(std::floor(c[j] * static_cast<double>(tokens)));
        taken += counts[j];
    }
    if (taken > tokens) throw RoutingError("capacity counts exceed the token count");
    counts[0] = tokens - taken;
    return counts;
}

RouterProbs router_forward(const Tensor& tokens, const RouterParams& params)
{
    Tensor logits = matmul(tokens, params.weight);
    for (std::size_t i = 0; i < logits.rows(); ++i)
        for (std::size_t j = 0; j < logits.cols(); ++j) logits(i, j) += params.bias[j];
    return row_softmax(logits).transposed();
}

Var router_forward(Var tokens, Var weight, Var bias)
{
    return row_softmax(add_row_bias(matmul(tokens, weight), bias));
}

AssignmentVec epr_assign(const RouterProbs& r, const std::vector<double>& c)
{
    const std::size_t num_experts = r.rows();
    const std::size_t n = r.cols();
    if (c.size() != num_experts) throw RoutingError("capacity length does not match the expert count");
    const std::vector<std::size_t> counts = epr_counts(c, n);
    for (double v : r.data()) {
        if (!std::isfinite(v)) throw RoutingError("router probabilities must be finite");
    }

    AssignmentVec m{std::vector<std::size_t>(n, 0)};
    std::vector<bool> taken(n, false);
    std::vector<std::size_t> candidates;
    candidates.reserve(n);
    for (std::size_t j = num_experts; j-- > 1;) {
        const std::size_t k = counts[j];
        if (k == 0) continue;
        candidates.clear();
        for (std::size_t i = 0; i < n; ++i) {
            if (!taken[i]) candidates.push_back(i);
        }
        auto prefer = [&](std::size_t a, std::size_t b) {
            const double ra = r(j, a), rb = r(j, b);
            return ra > rb || (ra == rb && a < b);
        };
        std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k), candidates.end(),
                          prefer);
        for (std::size_t t = 0; t < k; ++t) {
            m.experts[candidates[t]] = j;
            taken[candidates[t]] = true;
        }
    }
    return m;
}

AssignmentVec random_assign(const std::vector<double>& c, std::size_t tokens, std::uint64_t seed)
{
    const std::vector<std::size_t> counts = epr_counts(c, tokens);
    AssignmentVec m;
    m.experts.reserve(tokens);
    for (std::size_t j = 0; j < counts.size(); ++j) m.experts.insert(m.experts.end(), counts[j], j);
    std::mt19937_64 rng(seed);
    std::shuffle(m.experts.begin(), m.experts.end(), rng);
    return m;
}

namespace {

std::vector<double> linear_weights(std::size_t experts, const SolverOptions& opts)
{
    std::vector<double> a(experts);
    for (std::size_t i = 0; i < experts; ++i) {
        const std::size_t power = opts.favor_large ? experts - 1 - i : i;
        a[i] = std::pow(opts.delta, -static_cast<double>(power));
    }
    return a;
}

std::vector<double> capacity_weights(std::size_t experts)
{
    std::vector<double> w(experts);
    for (std::size_t i = 0; i < experts; ++i) w[i] = std::ldexp(1.0, -static_cast<int>(experts - 1 - i));
    return w;
}

// Stationary points of the Lagrangian are c(μ) = softmax((a − μ·w)/β); μ is
// the multiplier of the capacity constraint and the simplex multiplier is
// absorbed by the normalization.
std::vector<double> tilted_distribution(const std::vector<double>& a, const std::vector<double>& w, double beta,
                                        double mu)
{
    std::vector<double> z(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) z[i] = (a[i] - mu * w[i]) / beta;
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (auto& v : z) {
        v = std::exp(v - mx);
        s += v;
    }
    for (auto& v : z) v /= s;
    return z;
}

} // namespace

double capacity_objective(const std::vector<double>& c, const SolverOptions& opts)
{
    const auto a = linear_weights(c.size(), opts);
    double lin = 0.0, ent = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
        lin += a[i] * c[i];
        if (c[i] > 0.0) ent -= c[i] * std::log(c[i]);
    }
    return lin + opts.beta * ent;
}

CapacityDist solve_capacity(double e_c, std::size_t experts, const SolverOptions& opts)
{
    if (experts == 0) throw InfeasibleError("solve_capacity: need at least one expert");
    if (!(opts.beta > 0.0) || !(opts.delta > 1.0)) {
        throw InfeasibleError("solve_capacity: require beta > 0 and delta > 1");
    }
    const double lo_ec = min_effective_capacity(experts);
    if (!std::isfinite(e_c) || e_c < lo_ec || e_c > 1.0) {
        throw InfeasibleError("solve_capacity: effective capacity " + std::to_string(e_c) + " outside [" +
                              std::to_string(lo_ec) + ", 1]");
    }
    std::vector<double> c(experts, 0.0);
    if (experts == 1 || e_c == 1.0) {
        c.back() = 1.0;
        return {c, 1.0};
    }
    if (e_c == lo_ec) {
        c.front() = 1.0;
        return {c, lo_ec};
    }

    const auto a = linear_weights(experts, opts);
    const auto w = capacity_weights(experts);
    auto residual = [&](double mu, std::vector<double>* dist, double* slope) {
        auto p = tilted_distribution(a, w, opts.beta, mu);
        double mean = 0.0, second = 0.0;
        for (std::size_t i = 0; i < experts; ++i) {
            mean += p[i] * w[i];
            second += p[i] * w[i] * w[i];
        }
        if (slope) *slope = -(second - mean * mean) / opts.beta;
        if (dist) *dist = std::move(p);
        return mean - e_c;
    };

    // residual(μ) decreases strictly in μ; bracket the root, then run
    // Newton steps safeguarded by bisection.
    double lo = -1.0, hi = 1.0;
    while (residual(hi, nullptr, nullptr) > 0.0) {
        lo = hi;
        hi *= 2.0;
        if (hi > 1e300) throw InfeasibleError("solve_capacity: failed to bracket the multiplier");
    }
    while (residual(lo, nullptr, nullptr) < 0.0) {
        hi = lo;
        lo *= 2.0;
        if (lo < -1e300) throw InfeasibleError("solve_capacity: failed to bracket the multiplier");
    }
    double mu = 0.5 * (lo + hi);
    for (int iter = 0; iter < 500; ++iter) {
        double slope = 0.0;
        const double f = residual(mu, nullptr, &slope);
        if (f == 0.0) break;
        if (f > 0.0) lo = mu;
        else hi = mu;
        double next = slope < 0.0 ? mu - f / slope : 0.5 * (lo + hi);
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        if (std::abs(f) < 1e-15 || hi - lo <= 1e-15 * std::max(1.0, std::abs(mu))) {
            mu = next;
            break;
        }
        mu = next;
    }
    residual(mu, &c, nullptr);
    return {c, effective_capacity(c)};
}

} // namespace mone
