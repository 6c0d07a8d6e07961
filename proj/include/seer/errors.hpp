#pragma once

#include <stdexcept>

namespace seer {

// File or format problem: bad magic, truncation, version mismatch, bad config.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values or violated numeric bounds.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace seer
