#pragma once

#include <stdexcept>
#include <string>

namespace avk {

// Base class for all errors raised by the library. The CLI maps these to
// exit code 1; anything else is a bug.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// On-disk format problems: bad manifest, bad archive layout, spec/blob mismatch.
struct FormatError : Error {
    using Error::Error;
};

// Dataset contents violate the dataset contract (missing rasters, bad ranges).
struct IntegrityError : Error {
    using Error::Error;
};

// Tensor/raster shape mismatch.
struct ShapeError : Error {
    using Error::Error;
};

// Config or domain-type invariant violated.
struct ValueError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Stored hash does not match stored bytes.
struct CorruptionError : Error {
    using Error::Error;
};

// Input is too small/degenerate for the operation to be defined.
struct DegenerateInputError : Error {
    using Error::Error;
};

// Training aborted (non-finite loss and similar).
struct TrainError : Error {
    using Error::Error;
};

}  // namespace avk
