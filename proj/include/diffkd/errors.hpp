#pragma once

#include <stdexcept>
#include <string>

namespace diffkd {

// Each error carries a short machine-readable kind used by the CLI.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct ParameterError : Error {
  explicit ParameterError(const std::string& what) : Error("parameter", what) {}
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& what) : Error("shape", what) {}
};

struct IndexError : Error {
  explicit IndexError(const std::string& what) : Error("index", what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error("io", what) {}
};

struct CheckpointError : Error {
  explicit CheckpointError(const std::string& what) : Error("checkpoint", what) {}
};

struct EmptyInputError : Error {
  explicit EmptyInputError(const std::string& what) : Error("empty_input", what) {}
};

struct DivergenceError : Error {
  explicit DivergenceError(const std::string& what) : Error("divergence", what) {}
};

}  // namespace diffkd
