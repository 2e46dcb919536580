#pragma once

#include <stdexcept>
#include <string>

namespace selfseg {

/// Configuration / input parsing failure (CLI exit code 2).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Refusal to clobber existing output (CLI exit code 3).
struct CollisionError : std::runtime_error {
  explicit CollisionError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Mismatched data shapes/tables between inputs (CLI exit code 4).
struct DataMismatchError : std::runtime_error {
  explicit DataMismatchError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A required phase image is absent.
struct MissingPhaseError : std::runtime_error {
  explicit MissingPhaseError(const std::string& phase)
      : std::runtime_error("missing phase '" + phase + "'"), phase_name(phase) {}
  std::string phase_name;
};

/// Dataset files inconsistent with the manifest.
struct DatasetError : std::runtime_error {
  explicit DatasetError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Phantom generation could not satisfy its geometric constraints.
struct GenerationError : std::runtime_error {
  explicit GenerationError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Pipeline stage failure; carries the stage name for the CLI.
struct StageError : std::runtime_error {
  StageError(const std::string& stage_, const std::string& msg)
      : std::runtime_error("[" + stage_ + "] " + msg), stage(stage_) {}
  std::string stage;
};

}  // namespace selfseg
