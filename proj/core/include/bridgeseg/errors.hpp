#pragma once

#include <stdexcept>
#include <string>

namespace bridgeseg {

// Maps to CLI exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// A required input artifact (checkpoint, manifest, dataset file) is absent.
// Maps to CLI exit code 3.
struct MissingArtifactError : std::runtime_error {
    explicit MissingArtifactError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite loss or other numerical breakdown. Maps to CLI exit code 4.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Necrosis rate requested on a raster with no tumor-bed pixels. Distinct
// from a rate of zero.
struct UndefinedRateError : std::runtime_error {
    explicit UndefinedRateError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace bridgeseg
