#pragma once

#include <stdexcept>
#include <string>

namespace voxstreams {

// Error taxonomy mirrors the CLI exit codes: usage 1, validation 2, runtime 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad command line / unknown subcommand.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Invalid config, schema violation, contract violation on inputs.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// I/O failures and everything else that goes wrong at run time.
class RuntimeError : public Error {
 public:
  using Error::Error;
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

}  // namespace voxstreams
