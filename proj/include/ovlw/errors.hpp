#pragma once

#include <stdexcept>
#include <string>

namespace ovlw {

// Error categories map onto CLI exit codes: config=2, data=3, numerical=4.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

struct InvalidInput : std::invalid_argument {
    explicit InvalidInput(const std::string& msg) : std::invalid_argument(msg) {}
};

#define OVLW_REQUIRE(cond, exc, msg)                   \
    do {                                               \
        if (!(cond)) throw exc(std::string(msg));      \
    } while (0)

}  // namespace ovlw
