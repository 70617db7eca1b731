#pragma once

#include <stdexcept>
#include <string>

namespace clface {

// Invalid configuration: bad hyperparameters, impossible splits, batch sizes
// the data cannot support, malformed config files.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Runtime data violates a contract: non-finite inputs, mismatched feature
// stacks, empty evaluation suites.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// A tensor does not match the shape a model expects.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training broke down: non-finite loss, writes to a frozen snapshot.
struct TrainError : std::runtime_error {
  explicit TrainError(const std::string& msg) : std::runtime_error(msg) {}
};

// An evaluation could not be carried out.
struct EvalError : std::runtime_error {
  explicit EvalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace clface
