#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace embedlens {

// Writes to a sibling temp file and renames over `path`, so readers never
// observe a partially written output.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

std::string read_file(const std::filesystem::path& path);

// Structured stderr line: level=<level> module=<module> msg="<message>".
void log_line(std::string_view level, std::string_view module, std::string_view message);

}  // namespace embedlens
