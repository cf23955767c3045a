#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace flowssc {

// Process exit codes used by the command-line harness.
enum class ExitCode : int {
    kOk = 0,
    kFailure = 1,
    kConfig = 2,
    kData = 3,
    kNumerical = 4,
};

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what, ExitCode code = ExitCode::kFailure)
        : std::runtime_error(what), code_(code) {}
    ExitCode code() const noexcept { return code_; }

private:
    ExitCode code_;
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& what) : Error("shape error: " + what, ExitCode::kFailure) {}
};

class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& what) : Error("numerical error: " + what, ExitCode::kNumerical) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error("config error: " + what, ExitCode::kConfig) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error("data error: " + what, ExitCode::kData) {}
};

// Structured parse failure for binary files; carries the byte offset where decoding stopped.
class ParseError : public DataError {
public:
    ParseError(const std::string& what, std::size_t offset)
        : DataError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

}  // namespace flowssc
