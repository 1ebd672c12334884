#pragma once

#include <stdexcept>
#include <string>

namespace tsr {

// Error taxonomy mirrors the CLI exit codes: usage errors exit 1,
// data/IO errors exit 2, numeric failures during training exit 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct UsageError : Error {
  using Error::Error;
};

struct DataError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

}  // namespace tsr
