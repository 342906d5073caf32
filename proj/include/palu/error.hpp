// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace palu {

/// Broad failure classes. The CLI maps these onto process exit codes.
enum class ErrorKind {
  validation,       // bad shapes, ranges, schema violations, I/O
  numerical,        // non-convergence, non-finite values, not positive definite
  golden_mismatch,  // reproduced numbers differ from the embedded reference
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail_validation(const std::string& what) {
  throw Error(ErrorKind::validation, what);
}

[[noreturn]] inline void fail_numerical(const std::string& what) {
  throw Error(ErrorKind::numerical, what);
}

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::validation: return 1;
    case ErrorKind::numerical: return 2;
    case ErrorKind::golden_mismatch: return 3;
  }
  return 1;
}

}  // namespace palu
