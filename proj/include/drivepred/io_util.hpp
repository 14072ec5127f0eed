#pragma once

#include <string>
#include <vector>

namespace drivepred::io {

// Writes content to path via a temporary file and rename, so a failing
// command never leaves a partial output behind.
void atomic_write(const std::string& path, const std::string& content);

std::string read_file(const std::string& path);

// Round-trippable decimal formatting for doubles (%.17g with trailing-zero
// trimming left to the formatter).
std::string format_double(double v);

std::vector<std::string> split_csv_line(const std::string& line);

// FNV-1a over raw bytes; used for model checksums and determinism tests.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace drivepred::io
