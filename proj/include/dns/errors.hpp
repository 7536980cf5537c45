// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace dns {

// Error taxonomy shared across the library. All conditions are reported by
// throwing; there is no error-code path.

// Shapes or dimensions of operands do not line up.
struct DimensionError : std::invalid_argument {
    explicit DimensionError(const std::string& what) : std::invalid_argument(what) {}
};

// Caller-supplied data violates a precondition (bad timestamps, negative lambda, ...).
struct InputError : std::invalid_argument {
    explicit InputError(const std::string& what) : std::invalid_argument(what) {}
};

// A computation produced or received non-finite values.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// An API contract was violated (non-scalar loss, oracle called beyond its scale, ...).
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

// A serialized artifact (dataset file, checkpoint) is malformed.
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace dns
