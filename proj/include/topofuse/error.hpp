#ifndef TOPOFUSE_ERROR_HPP
#define TOPOFUSE_ERROR_HPP

#include <stdexcept>
#include <string>
#include <string_view>

namespace topofuse {

/**
 * Failure categories raised by the library.
 * The CLI maps every category except `Internal` to a user error.
 */
enum class ErrorCode {
    MissingFile,
    RowCountMismatch,
    NonNumericCell,
    DuplicateSpotId,
    UnknownKey,
    OutOfRange,
    IoFailure,
    InvalidArgument,
    AllGenesFiltered,
    ZeroLibrary,
    RankDeficient,
    ShapeMismatch,
    StaleCache,
    NonFiniteLoss,
    DegenerateComponent,
    NegativeSum,
    LengthMismatch,
    SingleClass,
    Internal
};

std::string_view error_code_name(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

    ErrorCode code() const { return code_; }

private:
    ErrorCode code_;
};

inline std::string_view error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::MissingFile: return "MissingFile";
        case ErrorCode::RowCountMismatch: return "RowCountMismatch";
        case ErrorCode::NonNumericCell: return "NonNumericCell";
        case ErrorCode::DuplicateSpotId: return "DuplicateSpotId";
        case ErrorCode::UnknownKey: return "UnknownKey";
        case ErrorCode::OutOfRange: return "OutOfRange";
        case ErrorCode::IoFailure: return "IoFailure";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::AllGenesFiltered: return "AllGenesFiltered";
        case ErrorCode::ZeroLibrary: return "ZeroLibrary";
        case ErrorCode::RankDeficient: return "RankDeficient";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::StaleCache: return "StaleCache";
        case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorCode::DegenerateComponent: return "DegenerateComponent";
        case ErrorCode::NegativeSum: return "NegativeSum";
        case ErrorCode::LengthMismatch: return "LengthMismatch";
        case ErrorCode::SingleClass: return "SingleClass";
        case ErrorCode::Internal: return "Internal";
    }
    return "Unknown";
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
    if (!condition) {
        throw Error(code, message);
    }
}

}

#endif
