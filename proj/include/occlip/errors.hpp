#pragma once

#include <stdexcept>
#include <string>

namespace occlip {

enum class ErrorCode {
    UnrecognizedTemplate,
    InvalidGraph,
    NoEdges,
    Degenerate,
    BadShape,
    ShapeMismatch,
    ZeroVector,
    InfeasibleSpec,
    NonFiniteLoss,
    Validation,
    Io,
};

const char* to_string(ErrorCode code);

/// Error carrying a machine-readable code; the CLI maps codes to exit status.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace occlip
