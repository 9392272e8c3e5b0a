#pragma once

#include <stdexcept>
#include <string>

namespace jmbma {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid model / basis / parameter specification.
struct SpecError : Error {
    using Error::Error;
};

// Evaluation outside the supported domain (e.g. spline support).
struct RangeError : Error {
    using Error::Error;
};

// CSV / JSON ingestion problems; message carries the offending row or key.
struct IngestError : Error {
    using Error::Error;
};

// Non-finite values, overflow, failed decompositions.
struct NumericError : Error {
    using Error::Error;
};

// Mismatched artifacts (e.g. models fitted on different datasets).
struct ConsistencyError : Error {
    using Error::Error;
};

// Invalid run configuration (chain lengths, scenario tags, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Laplace evidence failure; the message names the integration step.
struct EvidenceError : Error {
    using Error::Error;
};

// Censoring calibration cannot reach the requested rate.
struct CalibrationError : Error {
    using Error::Error;
};

}  // namespace jmbma
