#pragma once

#include "mone/autodiff.hpp"

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mone {

inline constexpr double kFiniteDifferenceStep = 1e-5;

/// Elements whose analytic and numeric gradients are both smaller than this
/// are compared against it instead of their own magnitude.
inline constexpr double kGradCheckFloor = 1e-6;

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    std::vector<std::size_t> offending;
};

struct GradCheckReport {
    double tolerance = 0.0;
    std::vector<GradCheckEntry> entries;

    bool passed() const;
    double max_rel_error() const;
    std::string summary() const;
};

/// Builds a scalar loss from leaves bound to `params` (same order).
using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Compares the tape gradient of `fn` with central finite differences,
/// perturbing every element of every parameter in place and restoring it.
GradCheckReport grad_check(const ScalarFn& fn, std::span<const NamedTensor> params, double tol,
                           double step = kFiniteDifferenceStep);

} // namespace mone
