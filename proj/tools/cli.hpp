#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pfl/json_util.hpp"

namespace pfl::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitAcceptance = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

/// Runs the pflab command line; returns the process exit code.
int run(const std::vector<std::string>& args);

/// FNV-1a over a file's bytes.
std::uint64_t file_checksum(const std::filesystem::path& path);

/// Exclusive claim on an output directory, released on destruction.
class OutputLock {
public:
    explicit OutputLock(const std::filesystem::path& dir);
    ~OutputLock();
    OutputLock(const OutputLock&) = delete;
    OutputLock& operator=(const OutputLock&) = delete;

    static constexpr const char* kFileName = ".pflab.lock";

private:
    std::filesystem::path path_;
};

}  // namespace pfl::cli
