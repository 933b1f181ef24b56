// SPDX-License-Identifier: Apache-2.0
//
// Error taxonomy shared by the library and the CLI. Each kind maps to a
// stable process exit code.

#pragma once

#include <stdexcept>
#include <string>

namespace mckd {

enum class ErrorKind {
    Dimension,  // tensor shape mismatch
    Domain,     // value outside an op's domain (e.g. log of a non-positive)
    Input,      // malformed batch or argument
    Config,     // invalid configuration
    Io,         // filesystem failure
    Format,     // file parsed but inconsistent
    Integrity,  // checksum or size mismatch
    Numerical,  // non-finite loss during training
};

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

  private:
    ErrorKind kind_;
};

/// Process exit code for an error kind: 2 config, 3 I/O or format, 4 numerical.
int exit_code(ErrorKind kind) noexcept;

const char* to_string(ErrorKind kind) noexcept;

}  // namespace mckd
