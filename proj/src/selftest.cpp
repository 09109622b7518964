#include "mone/selftest.hpp"

#include "mone/errors.hpp"
#include "mone/grad_check.hpp"
#include "mone/model.hpp"
#include "mone/nested.hpp"
#include "mone/routing.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <utility>

namespace mone {

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0)
{
    std::normal_distribution<double> nd(0.0, scale);
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = nd(rng);
    return t;
}

std::vector<double> random_simplex(std::size_t e, std::mt19937_64& rng)
{
    std::exponential_distribution<double> ex(1.0);
    std::vector<double> c(e);
    double s = 0.0;
    for (auto& v : c) s += (v = ex(rng));
    for (auto& v : c) v /= s;
    return c;
}

SelftestCheck check_routing(std::mt19937_64& rng)
{
    SelftestCheck chk{"routing properties", true, ""};
    std::uniform_int_distribution<std::size_t> pick_n(1, 64), pick_e(2, 4);
    for (int trial = 0; trial < 300 && chk.passed; ++trial) {
        const std::size_t n = pick_n(rng), e = pick_e(rng);
        const auto c = random_simplex(e, rng);
        Tensor r({e, n});
        std::uniform_int_distribution<int> coarse(0, 4);
        for (auto& v : r.data()) v = coarse(rng) / 4.0; // deliberate ties
        const AssignmentVec a = epr_assign(r, c);
        const auto counts = a.counts(e);
        std::size_t assigned = 0;
        for (std::size_t j = e; j-- > 1;) {
            const auto want = std::min<std::size_t>(n - assigned, static_cast<std::size_t>(std::floor(c[j] * static_cast<double>(n))));
            if (counts[j] != want) chk = {chk.name, false, "count mismatch"};
            assigned += counts[j];
        }
        if (counts[0] != n - assigned || a.size() != n) chk = {chk.name, false, "tokens not partitioned"};
        for (std::size_t t = 0; t < n && chk.passed; ++t) {
            const std::size_t j = a[t];
            for (std::size_t u = 0; u < n; ++u) {
                if (a[u] >= j || j == 0) continue;
                const bool preferred = r(j, t) > r(j, u) || (r(j, t) == r(j, u) && t < u);
                if (!preferred) {
                    chk = {chk.name, false, "greedy priority violated"};
                    break;
                }
            }
        }
        if (!(epr_assign(r, c) == a)) chk = {chk.name, false, "not deterministic"};
        if (!(random_assign(c, n, 7).counts(e) == counts)) chk = {chk.name, false, "random router counts differ"};
    }
    if (chk.passed) chk.detail = "300 random instances";
    return chk;
}

SelftestCheck check_solver(std::mt19937_64& rng)
{
    SelftestCheck chk{"capacity solver", true, ""};
    const SolverOptions opts;
    double worst = 0.0;
    for (int k = 2; k <= 9; ++k) {
        const double e_c = 0.1 * k;
        const CapacityDist d = solve_capacity(e_c, 4, opts);
        double sum = 0.0;
        for (double v : d.c) sum += v;
        worst = std::max({worst, std::abs(sum - 1.0), std::abs(effective_capacity(d.c) - e_c)});
        const double base = capacity_objective(d.c, opts);
        std::normal_distribution<double> nd(0.0, 1e-3);
        // Both constraints are linear, so steps along their null space stay feasible.
        const double dir1[4] = {2.0, -3.0, 1.0, 0.0};
        const double dir2[4] = {0.0, 2.0, -3.0, 1.0};
        for (int p = 0; p < 50; ++p) {
            const double u = nd(rng), v = nd(rng);
            std::vector<double> c = d.c;
            for (std::size_t i = 0; i < 4; ++i) c[i] += u * dir1[i] + v * dir2[i];
            if (std::any_of(c.begin(), c.end(), [](double x) { return x <= 0.0; })) continue;
            if (capacity_objective(c, opts) > base + 1e-12) {
                chk = {chk.name, false, "found a better feasible point at e_c=" + std::to_string(e_c)};
            }
        }
    }
    const auto low = solve_capacity(0.125, 4, opts).c, high = solve_capacity(1.0, 4, opts).c;
    if (!(low == std::vector<double>{1.0, 0.0, 0.0, 0.0}) || !(high == std::vector<double>{0.0, 0.0, 0.0, 1.0})) {
        chk = {chk.name, false, "vertex cases are not one-hot"};
    }
    if (worst > 1e-8) chk = {chk.name, false, "constraint residual " + std::to_string(worst)};
    if (chk.passed) {
        std::ostringstream s;
        s << "max constraint residual " << worst;
        chk.detail = s.str();
    }
    return chk;
}

SelftestCheck check_slicing(std::mt19937_64& rng)
{
    const NestedSpec spec{16, 4, 2, 1};
    double worst = 0.0;
    std::uniform_int_distribution<std::size_t> pick(0, 3);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 5;
        const Tensor x = random_tensor({n, 16}, rng), w_in = random_tensor({16, 24}, rng);
        const Tensor h = random_tensor({n, 24}, rng), w_out = random_tensor({16, 24}, rng);
        DimVec dims(n);
        for (auto& d : dims) d = spec.expert_dim(pick(rng));
        const Tensor in = sliced_in_projection(x, dims, w_in);
        const Tensor out = sliced_out_projection_padded(h, dims, w_out);
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t c = 0; c < 24; ++c) {
                double s = 0.0;
                for (std::size_t t = 0; t < dims[j]; ++t) s += x(j, t) * w_in(t, c);
                worst = std::max(worst, std::abs(s - in(j, c)));
            }
            for (std::size_t k = 0; k < 16; ++k) {
                double s = 0.0;
                if (k < dims[j])
                    for (std::size_t c = 0; c < 24; ++c) s += h(j, c) * w_out(k, c);
                worst = std::max(worst, std::abs(s - out(j, k)));
            }
        }
    }
    std::ostringstream s;
    s << "max abs error " << worst;
    return {"sliced projections", worst < 1e-10, s.str()};
}

SelftestCheck check_gradients(std::uint64_t seed)
{
    ModelConfig cfg;
    cfg.spec = {16, 4, 2, 1};
    cfg.patch = 4;
    cfg.image_height = cfg.image_width = 8;
    cfg.classes = 3;
    ModelParams params = init_model(cfg, seed);
    params.blocks[0].alpha[0] = 0.5;
    std::mt19937_64 rng(seed);
    std::vector<double> pixels(64);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& v : pixels) v = nd(rng);
    const ImageView image{8, 8, 1, pixels};
    ForwardPlan plan;
    plan.capacity = {0.25, 0.25, 0.25, 0.25};
    // Fix the assignment so finite differences never cross a routing boundary.
    {
        Tape tape;
        plan.assignment = model_forward(image, bind_parameters(tape, std::as_const(params)), cfg, plan).assignment;
    }
    const auto fn = [&](Tape&, std::span<const Var> leaves) {
        return softmax_cross_entropy(model_forward(image, bind_parameters(leaves, cfg), cfg, plan).logits, 1);
    };
    const auto named = named_parameters(params);
    const GradCheckReport report = grad_check(fn, named, 1e-4);
    std::ostringstream s;
    s << "max relative error " << report.max_rel_error();
    return {"gradient check", report.passed(), s.str()};
}

} // namespace

std::vector<SelftestCheck> run_selftest(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::vector<SelftestCheck> out;
    const auto guarded = [&](const std::string& name, auto&& fn) {
        try {
            out.push_back(fn());
        } catch (const std::exception& e) {
            out.push_back({name, false, e.what()});
        }
    };
    guarded("routing properties", [&] { return check_routing(rng); });
    guarded("capacity solver", [&] { return check_solver(rng); });
    guarded("sliced projections", [&] { return check_slicing(rng); });
    guarded("gradient check", [&] { return check_gradients(seed); });
    return out;
}

bool report_selftest(const std::vector<SelftestCheck>& checks, std::ostream& out)
{
    bool ok = true;
    for (const auto& c : checks) {
        out << (c.passed ? "PASS " : "FAIL ") << c.name;
        if (!c.detail.empty()) out << ": " << c.detail;
        out << '\n';
        ok = ok && c.passed;
    }
    return ok;
}

} // namespace mone
