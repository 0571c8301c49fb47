#pragma once

#include <stdexcept>
#include <string>

namespace mdpde {

/// Malformed or unbalanced input data.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Collinear regressors; the message names the offending columns.
struct RankDeficientError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// J is singular where an exact inverse is required.
struct SingularJError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mdpde
