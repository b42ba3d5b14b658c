#include "pfl/error.hpp"

namespace pfl {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::UnknownOrderId: return "UnknownOrderId";
        case ErrorCode::CrossingLimitOrder: return "CrossingLimitOrder";
        case ErrorCode::NonPositiveSize: return "NonPositiveSize";
        case ErrorCode::SizeExceedsOrder: return "SizeExceedsOrder";
        case ErrorCode::DuplicateOrderId: return "DuplicateOrderId";
        case ErrorCode::OneSidedBook: return "OneSidedBook";
        case ErrorCode::TimeOrdering: return "TimeOrdering";
        case ErrorCode::MalformedLine: return "MalformedLine";
        case ErrorCode::MixedDepth: return "MixedDepth";
        case ErrorCode::Io: return "Io";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::BookDepleted: return "BookDepleted";
        case ErrorCode::NotMemoryless: return "NotMemoryless";
        case ErrorCode::TruncationTooSmall: return "TruncationTooSmall";
        case ErrorCode::EmptyRange: return "EmptyRange";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::EmptyPartition: return "EmptyPartition";
        case ErrorCode::AlreadyNormalized: return "AlreadyNormalized";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::NonFiniteActivation: return "NonFiniteActivation";
        case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
        case ErrorCode::EmptyTestSet: return "EmptyTestSet";
        case ErrorCode::PartitionMismatch: return "PartitionMismatch";
    }
    return "Unknown";
}

}  // namespace pfl
