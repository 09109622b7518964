#pragma once

// Nested expert geometry and the sliced in/out projection operators.
//
// Expert indices are 0-based throughout the library: expert 0 is the
// smallest nested model (width D / 2^(E-1)) and expert E-1 is the full
// model. Files and CLI output use 1-based numbering.

#include "mone/autodiff.hpp"
#include "mone/tensor.hpp"

#include <cstddef>
#include <vector>

namespace mone {

struct NestedSpec {
    std::size_t dim = 64;
    std::size_t experts = 4;
    std::size_t heads = 4;
    std::size_t layers = 4;

    /// Throws ConfigError unless D is divisible by 2^(E-1) and by the head count.
    void validate() const;

    /// d_i = D / 2^(E-1-i) for i in [0, E).
    std::vector<std::size_t> dims() const;
    std::size_t expert_dim(std::size_t expert) const;
    /// Inverse of expert_dim; throws RoutingError for widths that are not nested dims.
    std::size_t expert_for_dim(std::size_t d) const;
    std::size_t head_dim() const { return dim / heads; }
    std::size_t ffn_dim() const { return 4 * dim; }
};

/// Per-token nested width d^j.
using DimVec = std::vector<std::size_t>;

/// Throws RoutingError if any entry is not one of spec.dims().
void validate_dims(const DimVec& dims, const NestedSpec& spec);
DimVec uniform_dims(std::size_t tokens, std::size_t d);

/// First d features of a D-vector; d must be a nested width of `spec`.
Tensor extract(const Tensor& x, std::size_t d, const NestedSpec& spec);
/// Appends zeros up to `full_dim`.
Tensor pad(const Tensor& x, std::size_t full_dim);

/// Row j = x_j[:d^j] · W[:d^j, :] for X N×D and W D×Dout.
Tensor sliced_in_projection(const Tensor& x, const DimVec& dims, const Tensor& w);
/// Token j projected to its own width: h_j · (W[:d^j, :])ᵀ, for H N×Din and W D×Din.
std::vector<Tensor> sliced_out_projection(const Tensor& h, const DimVec& dims, const Tensor& w);
/// sliced_out_projection with every token zero-padded back to D (N×D).
Tensor sliced_out_projection_padded(const Tensor& h, const DimVec& dims, const Tensor& w);

// Tape versions.
Var extract(Var x, std::size_t d, const NestedSpec& spec);
Var pad(Var x, std::size_t full_dim);
Var sliced_in_projection(Var x, const DimVec& dims, Var w);
Var sliced_out_projection_padded(Var h, const DimVec& dims, Var w);

} // namespace mone
