#include "mone/grad_check.hpp"

#include "mone/errors.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mone {

bool GradCheckReport::passed() const
{
    return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.offending.empty(); });
}

double GradCheckReport::max_rel_error() const
{
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
}

std::string GradCheckReport::summary() const
{
    std::ostringstream os;
    for (const auto& e : entries) {
        os << e.name << ": max rel err " << e.max_rel_error << " at " << e.worst_index;
        if (!e.offending.empty()) {
            os << " FAIL (" << e.offending.size() << " indices:";
            for (std::size_t i = 0; i < std::min<std::size_t>(e.offending.size(), 8); ++i) os << ' ' << e.offending[i];
            if (e.offending.size() > 8) os << " ...";
            os << ')';
        }
        os << '\n';
    }
    return os.str();
}

namespace {

double evaluate(const ScalarFn& fn, std::span<const NamedTensor> params)
{
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(tape.leaf(*p.tensor, nullptr));
    Var out = fn(tape, leaves);
    if (out.value().size() != 1) throw DimensionError("grad_check: function must return a scalar");
    return out.value()[0];
}

} // namespace

GradCheckReport grad_check(const ScalarFn& fn, std::span<const NamedTensor> params, double tol, double step)
{
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) analytic.push_back(zeros_like(*p.tensor));
    {
        Tape tape;
        std::vector<Var> leaves;
        for (std::size_t i = 0; i < params.size(); ++i) leaves.push_back(tape.leaf(*params[i].tensor, &analytic[i]));
        Var out = fn(tape, leaves);
        if (out.value().size() != 1) throw DimensionError("grad_check: function must return a scalar");
        tape.backward(out);
    }

    GradCheckReport report;
    report.tolerance = tol;
    for (std::size_t p = 0; p < params.size(); ++p) {
        GradCheckEntry entry;
        entry.name = params[p].name;
        Tensor& t = *params[p].tensor;
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double saved = t[i];
            t[i] = saved + step;
            const double up = evaluate(fn, params);
            t[i] = saved - step;
            const double down = evaluate(fn, params);
            t[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double a = analytic[p][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
            const double rel = std::abs(a - numeric) / denom;
            if (rel > entry.max_rel_error) {
                entry.max_rel_error = rel;
                entry.worst_index = i;
            }
            if (!(rel <= tol)) entry.offending.push_back(i);
        }
        report.entries.push_back(std::move(entry));
    }
    return report;
}

} // namespace mone
