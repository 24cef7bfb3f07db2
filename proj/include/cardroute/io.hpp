#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cardroute {

// Throws Error(kFileMissing) when absent, Error(kIo) when unreadable.
std::string read_file(const std::filesystem::path& path);

void write_file(const std::filesystem::path& path, std::string_view contents);

// Splits on '\n' and drops a trailing '\r'. A final newline does not yield an
// extra empty line.
std::vector<std::string_view> split_lines(std::string_view text);

}  // namespace cardroute
