#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace embedlens {

// Every library failure carries the module that raised it, the offending
// parameter and its value, so the CLI can surface all three.
class Error : public std::runtime_error {
 public:
  Error(std::string module, std::string parameter, std::string value,
        const std::string& message)
      : std::runtime_error(format(module, parameter, value, message)),
        module_(std::move(module)),
        parameter_(std::move(parameter)),
        value_(std::move(value)) {}

  const std::string& module() const noexcept { return module_; }
  const std::string& parameter() const noexcept { return parameter_; }
  const std::string& value() const noexcept { return value_; }

 private:
  static std::string format(const std::string& module, const std::string& parameter,
                            const std::string& value, const std::string& message) {
    std::ostringstream os;
    os << module << ": " << message;
    if (!parameter.empty()) os << " [" << parameter << "=" << value << "]";
    return os.str();
  }

  std::string module_;
  std::string parameter_;
  std::string value_;
};

template <typename T>
std::string to_str(const T& v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace embedlens
