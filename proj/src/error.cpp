// SPDX-License-Identifier: Apache-2.0

#include "mckd/error.hpp"

namespace mckd {

int exit_code(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::Io:
        case ErrorKind::Format:
        case ErrorKind::Integrity: return 3;
        case ErrorKind::Numerical: return 4;
        case ErrorKind::Dimension:
        case ErrorKind::Domain:
        case ErrorKind::Input:
        case ErrorKind::Config: return 2;
    }
    return 1;
}

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::Dimension: return "dimension error";
        case ErrorKind::Domain: return "domain error";
        case ErrorKind::Input: return "input error";
        case ErrorKind::Config: return "config error";
        case ErrorKind::Io: return "I/O error";
        case ErrorKind::Format: return "format error";
        case ErrorKind::Integrity: return "integrity error";
        case ErrorKind::Numerical: return "numerical error";
    }
    return "error";
}

}  // namespace mckd
