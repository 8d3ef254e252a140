#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace evimerge {

// Every failure carries a stable machine-parseable code next to the human
// detail. The CLI prints "evimerge: error <CODE>: <detail>" and maps codes
// to exit status (validation -> 1, runtime -> 2).
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& detail)
        : std::runtime_error(detail), code_(std::move(code)) {}

    const std::string& code() const { return code_; }

private:
    std::string code_;
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& detail) : Error("DIMENSION_MISMATCH", detail) {}
};

struct LayoutError : Error {
    explicit LayoutError(const std::string& detail) : Error("LAYOUT_MISMATCH", detail) {}
};

struct FormatError : Error {
    explicit FormatError(const std::string& detail) : Error("FORMAT_ERROR", detail) {}
};

struct ContractViolation : Error {
    explicit ContractViolation(const std::string& detail) : Error("CONTRACT_VIOLATION", detail) {}
};

struct TrainingDiverged : Error {
    explicit TrainingDiverged(const std::string& detail) : Error("TRAINING_DIVERGED", detail) {}
};

// Validation-class failures (exit code 1).
struct ConfigError : Error {
    explicit ConfigError(const std::string& detail) : Error("CONFIG_ERROR", detail) {}
};

struct FileNotFound : Error {
    explicit FileNotFound(const std::string& detail) : Error("FILE_NOT_FOUND", detail) {}
};

struct IoError : Error {
    explicit IoError(const std::string& detail) : Error("IO_ERROR", detail) {}
};

}  // namespace evimerge
