#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace pfl {

enum class ErrorCode : std::uint8_t {
    // order book
    UnknownOrderId,
    CrossingLimitOrder,
    NonPositiveSize,
    SizeExceedsOrder,
    DuplicateOrderId,
    OneSidedBook,
    TimeOrdering,
    // feed io
    MalformedLine,
    MixedDepth,
    Io,
    // simulator / oracle
    InvalidConfig,
    BookDepleted,
    NotMemoryless,
    TruncationTooSmall,
    EmptyRange,
    // features / datasets
    DimensionMismatch,
    EmptyPartition,
    AlreadyNormalized,
    InvalidArgument,
    // models / training
    NonFiniteActivation,
    NonFiniteLoss,
    ChecksumMismatch,
    // evaluation
    EmptyTestSet,
    PartitionMismatch,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Exception carrying a machine-checkable error code.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace pfl
