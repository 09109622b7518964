#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

namespace mone {

struct SelftestCheck {
    std::string name;
    bool passed = false;
    std::string detail;
};

/// Quick property suites: routing (counts, partition, greedy priority,
/// determinism), capacity solver constraints and optimality, sliced
/// projections vs masked dense products, and a finite-difference gradient
/// check of a small routed model.
std::vector<SelftestCheck> run_selftest(std::uint64_t seed);

/// Prints one PASS/FAIL line per check; returns true when all pass.
bool report_selftest(const std::vector<SelftestCheck>& checks, std::ostream& out);

} // namespace mone
