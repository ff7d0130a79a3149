#include "occlip/errors.hpp"

namespace occlip {

const char* to_string(ErrorCode code)
{
    switch (code) {
    case ErrorCode::UnrecognizedTemplate: return "UnrecognizedTemplate";
    case ErrorCode::InvalidGraph: return "InvalidGraph";
    case ErrorCode::NoEdges: return "NoEdges";
    case ErrorCode::Degenerate: return "Degenerate";
    case ErrorCode::BadShape: return "BadShape";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::InfeasibleSpec: return "InfeasibleSpec";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::Validation: return "Validation";
    case ErrorCode::Io: return "Io";
    }
    return "Unknown";
}

}  // namespace occlip
