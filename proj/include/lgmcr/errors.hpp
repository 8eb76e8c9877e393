#pragma once

#include <stdexcept>
#include <string>

namespace lgmcr {

// Base for everything thrown by this library.
struct error : std::runtime_error {
    explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad input data: CSV schema violations, domain violations, inconsistent datasets.
struct data_error : error {
    using error::error;
};

// Bad configuration / model specification.
struct config_error : error {
    using error::error;
};

// Numerical failure: overflow guards, non-PD matrices, budget exhaustion.
struct numeric_error : error {
    using error::error;
};

}  // namespace lgmcr
