#include "mone/flops.hpp"

#include "mone/errors.hpp"

#include <sstream>

namespace mone {

MacCount token_layer_macs(std::size_t expert, std::size_t tokens, const NestedSpec& spec)
{
    const MacCount d = spec.expert_dim(expert);
    const MacCount big_d = spec.dim;
    const MacCount n = tokens;
    return 3 * d * big_d + 2 * n * big_d + big_d * d + 5 * big_d + 8 * big_d * d;
}

MacCount router_macs(std::size_t tokens, const NestedSpec& spec)
{
    return static_cast<MacCount>(tokens) * spec.dim * spec.experts;
}

MacCount FlopReport::layer_total(std::size_t layer) const
{
    MacCount s = 0;
    for (auto m : per_layer_expert.at(layer)) s += m;
    return s;
}

std::string FlopReport::to_csv() const
{
    std::ostringstream os;
    os.precision(17);
    const double dense_layer = static_cast<double>(dense_total) / static_cast<double>(per_layer_expert.size());
    os << "layer,expert,tokens,macs,ratio\n";
    for (std::size_t l = 0; l < per_layer_expert.size(); ++l) {
        for (std::size_t e = 0; e < per_layer_expert[l].size(); ++e) {
            os << l + 1 << ',' << e + 1 << ',' << tokens_per_layer_expert[l][e] << ',' << per_layer_expert[l][e] << ','
               << static_cast<double>(per_layer_expert[l][e]) / dense_layer << '\n';
        }
    }
    os << "router,all,," << router << ',' << static_cast<double>(router) / static_cast<double>(dense_total) << '\n';
    os << "total,all,," << total << ',' << ratio() << '\n';
    return os.str();
}

namespace {

FlopReport report_from_counts(const std::vector<std::size_t>& counts, const NestedSpec& spec, bool include_router,
                              std::size_t router_layer)
{
    if (router_layer < 1 || router_layer > spec.layers) throw ConfigError("flops: router layer out of range");
    std::size_t n = 0;
    for (auto c : counts) n += c;
    const std::size_t e = spec.experts;

    FlopReport r;
    r.per_layer_expert.assign(spec.layers, std::vector<MacCount>(e, 0));
    r.tokens_per_layer_expert.assign(spec.layers, std::vector<std::size_t>(e, 0));
    for (std::size_t l = 0; l < spec.layers; ++l) {
        for (std::size_t j = 0; j < e; ++j) {
            const std::size_t tok = l + 1 < router_layer ? (j == e - 1 ? n : 0) : counts[j];
            r.tokens_per_layer_expert[l][j] = tok;
            r.per_layer_expert[l][j] = tok * token_layer_macs(j, n, spec);
            r.total += r.per_layer_expert[l][j];
        }
    }
    if (include_router) {
        r.router = router_macs(n, spec);
        r.total += r.router;
    }
    r.dense_total = static_cast<MacCount>(spec.layers) * n * token_layer_macs(e - 1, n, spec);
    return r;
}

} // namespace

FlopReport model_flops(const AssignmentVec& assignment, const NestedSpec& spec, bool include_router,
                       std::size_t router_layer)
{
    return report_from_counts(assignment.counts(spec.experts), spec, include_router, router_layer);
}

FlopReport predicted_flops(const std::vector<double>& c, std::size_t tokens, const NestedSpec& spec,
                           bool include_router, std::size_t router_layer)
{
    if (c.size() != spec.experts) throw RoutingError("flops: capacity length does not match the expert count");
    return report_from_counts(epr_counts(c, tokens), spec, include_router, router_layer);
}

} // namespace mone
