#pragma once

// Multiply-accumulate accounting for the transformer layers.
//
// Per token and layer, a token at nested width d costs
//     3·d·D      Q/K/V in-projections
//   + 2·N·D      attention scores and mixing (always at full width)
//   +   D·d      attention out-projection
//   +   5·D      normalization estimate
//   + 8·D·d      FFN in and out projections through the 4D hidden layer
// The router adds N·D·E once per forward pass. Tokenizer and classifier are
// excluded; they are identical for every assignment.

#include "mone/nested.hpp"
#include "mone/routing.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mone {

using MacCount = std::uint64_t;

/// MACs one token spends in one layer at expert `expert` (0-based) among N tokens.
MacCount token_layer_macs(std::size_t expert, std::size_t tokens, const NestedSpec& spec);
MacCount router_macs(std::size_t tokens, const NestedSpec& spec);

struct FlopReport {
    /// macs[layer][expert]
    std::vector<std::vector<MacCount>> per_layer_expert;
    std::vector<std::vector<std::size_t>> tokens_per_layer_expert;
    MacCount router = 0;
    MacCount total = 0;
    /// Every token at the full expert, no router.
    MacCount dense_total = 0;

    double ratio() const { return static_cast<double>(total) / static_cast<double>(dense_total); }
    MacCount layer_total(std::size_t layer) const;
    /// CSV with columns layer,expert,tokens,macs,ratio plus router and total rows.
    std::string to_csv() const;
};

/// Layers before `router_layer` (1-based) run every token at full width.
FlopReport model_flops(const AssignmentVec& assignment, const NestedSpec& spec, bool include_router,
                       std::size_t router_layer = 1);

/// Report for the per-expert counts EPR produces from capacity c; identical to
/// measuring any assignment with those counts.
FlopReport predicted_flops(const std::vector<double>& c, std::size_t tokens, const NestedSpec& spec,
                           bool include_router, std::size_t router_layer = 1);

} // namespace mone
