#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

// Gradient-check scopes and timing benchmarks shared by the `gradcheck` and
// `bench` subcommands and the acceptance runner.
namespace mhm::cli {

inline constexpr double kGradTolerance = 1e-4;

struct GradScopeResult {
    std::string scope;
    double max_relative_error = 0.0;
    std::size_t coordinates = 0;  ///< coordinates or random directions compared
    std::size_t skipped = 0;      ///< coordinates whose stencil straddles a kink
    double seconds = 0.0;
    /// Every compared entry within tolerance, and kinks no more than 1% of coordinates.
    bool passed() const { return max_relative_error < kGradTolerance && skipped * 100 <= coordinates + skipped; }
};

/// Scope names in suite order: primitive ops first, then composed modules.
const std::vector<std::string>& gradcheck_scopes();

/// Runs one scope at double precision. `size` is the cube extent for the network
/// scope (a multiple of 16). Throws UsageError for unknown scopes.
GradScopeResult run_gradcheck(const std::string& scope, std::int64_t size, std::uint64_t seed);

struct BenchRow {
    std::int64_t size = 0;
    std::int64_t tokens = 0;
    double ms = 0.0;               ///< best of the repeats
    std::optional<double> ratio;   ///< ms / previous row's ms
};

/// Components: "scan" (sizes are sequence lengths), "block", "encoder", "network"
/// (sizes are cube extents). Throws UsageError for unknown components.
std::vector<BenchRow> run_bench(const std::string& component, const std::vector<std::int64_t>& sizes,
                                int repeats, std::uint64_t seed);

const std::vector<std::string>& bench_components();

}  // namespace mhm::cli
