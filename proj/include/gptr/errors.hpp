#pragma once

#include <stdexcept>
#include <string>

namespace gptr {

// Error taxonomy mapped onto CLI exit codes: ConfigError -> 2,
// DataError -> 3, CheckpointError -> 4. Everything else is a plain
// std::exception (exit 1).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace gptr
