#pragma once

#include <stdexcept>
#include <string>

namespace ef {

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad configuration or rejected input (CLI exit code 1).
struct config_error : error {
    using error::error;
};

// Missing/corrupt files (CLI exit code 2).
struct io_error : error {
    using error::error;
};

// Golden-value or verification mismatch (CLI exit code 3).
struct verify_error : error {
    using error::error;
};

}  // namespace ef
