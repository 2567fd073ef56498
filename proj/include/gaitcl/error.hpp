#pragma once

#include <stdexcept>
#include <string>

namespace gaitcl {

// Exit-code mapping used by the CLI: ConfigError -> 2, DataError -> 3,
// NumericalError -> 4. Contract violations inside the library throw
// std::invalid_argument.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace gaitcl
