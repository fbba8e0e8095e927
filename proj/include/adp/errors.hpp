#pragma once

#include <stdexcept>
#include <string>

namespace adp {

// Every error raised by the library carries a short machine-readable kind
// ("shape", "format", ...) next to the human message. The CLI prints both on
// a single line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& m) : Error("shape", m) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error("numeric", m) {}
};

struct FormatError : Error {
  explicit FormatError(const std::string& m) : Error("format", m) {}
};

struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", m) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};

// Inputs that are well-formed but violate a data contract (e.g. an abnormal
// image offered as a reference).
struct DataError : Error {
  explicit DataError(const std::string& m) : Error("data", m) {}
};

}  // namespace adp
