#include "embedlens/io.hpp"

#include "embedlens/error.hpp"

#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>

namespace embedlens {

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("io", "path", tmp.string(), "cannot open for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error("io", "path", tmp.string(), "write failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw Error("io", "path", path.string(), "rename failed: " + ec.message());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "path", path.string(), "cannot open for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void log_line(std::string_view level, std::string_view module, std::string_view message) {
  static std::mutex mu;
  std::lock_guard lock(mu);
  std::cerr << "level=" << level << " module=" << module << " msg=\"";
  for (char c : message) {
    if (c == '"' || c == '\\') std::cerr << '\\';
    std::cerr << c;
  }
  std::cerr << "\"\n";
}

}  // namespace embedlens
