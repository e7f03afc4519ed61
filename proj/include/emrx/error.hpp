#pragma once

#include <stdexcept>
#include <string>

namespace emrx {

// Problems with user-supplied input: malformed files, missing classes,
// mismatched datasets. The CLI maps these to exit code 3.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values where the numeric contracts forbid them (NaN loss,
// Inf activations). The CLI maps these to exit code 4.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class CheckpointCode {
  bad_magic,
  bad_version,
  bad_header,
  shape_mismatch,
  truncated,
};

class CheckpointError : public DataError {
 public:
  CheckpointError(CheckpointCode code, const std::string& what)
      : DataError(what), code_(code) {}
  CheckpointCode code() const { return code_; }

 private:
  CheckpointCode code_;
};

}  // namespace emrx
