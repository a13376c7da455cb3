#pragma once

#include <stdexcept>
#include <string>

namespace rat {

// Bad input data: malformed CSV, corrupt or truncated files, schema mismatch.
class DataError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Caller violated an operation's preconditions (bad k, bad shapes, bad config).
class UsageError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

}  // namespace rat
