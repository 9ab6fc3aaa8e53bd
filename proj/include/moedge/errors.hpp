// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace moedge {

// Bad scenario/config or malformed input. CLI exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Inputs are structurally inconsistent with each other (trace vs. spec, report
// bucket mismatch, ...). CLI exit code 2.
struct StructuralError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// No feasible deployment exists; carries the byte shortfall when known.
// CLI exit code 3.
struct InfeasibleError : std::runtime_error {
    explicit InfeasibleError(const std::string& what, std::uint64_t shortfall = 0)
        : std::runtime_error(what), shortfall_bytes(shortfall) {}
    std::uint64_t shortfall_bytes;
};

// Wire-format violations of the hello codec.
struct FrameError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ValueError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace moedge
