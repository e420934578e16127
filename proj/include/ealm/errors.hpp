#pragma once

#include <stdexcept>
#include <string>

namespace ealm {

// Error taxonomy shared by the library and the CLI. The CLI maps each class
// to a one-line "<class>: <message>" on stderr and a nonzero exit code.

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// A freeze/compatibility contract between components was violated
// (embedding hash mismatch, gradient on a frozen tensor, bad swap).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline const char* error_class(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return "config-error";
    if (dynamic_cast<const UsageError*>(&e)) return "usage-error";
    if (dynamic_cast<const NumericError*>(&e)) return "numeric-error";
    if (dynamic_cast<const ContractError*>(&e)) return "contract-error";
    if (dynamic_cast<const IoError*>(&e)) return "io-error";
    return "error";
}

}  // namespace ealm
