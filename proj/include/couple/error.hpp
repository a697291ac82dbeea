#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace couple {

enum class ErrorCode {
    io,
    format,
    shape_mismatch,
    invalid_argument,
    numerical,
    empty_input,
    not_converged,
};

inline std::string_view to_string(ErrorCode code)
{
    switch (code) {
    case ErrorCode::io: return "io";
    case ErrorCode::format: return "format";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::numerical: return "numerical";
    case ErrorCode::empty_input: return "empty_input";
    case ErrorCode::not_converged: return "not_converged";
    }
    return "unknown";
}

/// Exception type thrown by every module. The code is what the CLI
/// reports in its machine-readable error record.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

inline void require(bool cond, ErrorCode code, const std::string& what)
{
    if (!cond) throw Error(code, what);
}

} // namespace couple
