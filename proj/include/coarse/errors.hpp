#pragma once

#include <stdexcept>
#include <string>

namespace coarse {

// Malformed or inconsistent input files, unknown ids, failed validation of
// user-supplied data. The CLI maps this to exit code 3.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values reaching a loss or an optimizer step. Exit code 4.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape contract violated by the caller.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Bad parameters or flags. Exit code 2.
struct UsageError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

}  // namespace coarse
