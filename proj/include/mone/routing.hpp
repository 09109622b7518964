#pragma once

#include "mone/autodiff.hpp"
#include "mone/nested.hpp"
#include "mone/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <vector>

namespace mone {

struct RouterParams {
    Tensor weight; ///< D×E
    Tensor bias;   ///< E
};

/// E×N matrix; column i is token i's distribution over experts.
using RouterProbs = Tensor;

/// One 0-based expert index per token.
struct AssignmentVec {
    std::vector<std::size_t> experts;

    std::size_t size() const { return experts.size(); }
    std::size_t operator[](std::size_t i) const { return experts[i]; }
    bool operator==(const AssignmentVec&) const = default;

    DimVec dims(const NestedSpec& spec) const;
    std::vector<std::size_t> counts(std::size_t num_experts) const;
};

struct CapacityDist {
    std::vector<double> c;
    double effective_capacity = 0.0;
};

/// Σ c_i / 2^(E-1-i) for 0-based i.
double effective_capacity(const std::vector<double>& c);
double min_effective_capacity(std::size_t experts);

/// Throws RoutingError unless c lies on the simplex (sum within 1e-9).
void validate_capacity(const std::vector<double>& c);
CapacityDist make_capacity(std::vector<double> c);

/// Per-expert token counts Expert Preferred Routing yields for (c, N):
/// floor(c_j·N) for every expert but the smallest, which takes the rest.
std::vector<std::size_t> epr_counts(const std::vector<double>& c, std::size_t tokens);

/// Router probabilities (E×N) for token features X (N×D).
RouterProbs router_forward(const Tensor& tokens, const RouterParams& params);
/// Differentiable router, returned token-major (N×E) for gathering per-token probabilities.
Var router_forward(Var tokens, Var weight, Var bias);

/// Expert Preferred Routing. Walks experts from largest to smallest; each
/// takes its floor(c_j·N) highest-probability unassigned tokens (ties to the
/// lower token index). Tokens left over go to the smallest expert.
AssignmentVec epr_assign(const RouterProbs& r, const std::vector<double>& c);

/// Uniformly random placement of the same per-expert counts as epr_assign.
AssignmentVec random_assign(const std::vector<double>& c, std::size_t tokens, std::uint64_t seed);

struct SolverOptions {
    double beta = 10.0;
    double delta = 2.0;
    /// Weight the largest expert highest in the linear term instead of the smallest.
    bool favor_large = false;
};

/// Objective Σ a_i·c_i − β Σ c_i log c_i with a_i = δ^-(i) (or reversed when favor_large).
double capacity_objective(const std::vector<double>& c, const SolverOptions& opts);

/// Maximizes capacity_objective on the simplex subject to effective_capacity(c) = e_c.
/// Throws InfeasibleError when e_c lies outside [2^-(E-1), 1].
CapacityDist solve_capacity(double e_c, std::size_t experts, const SolverOptions& opts = {});

} // namespace mone
