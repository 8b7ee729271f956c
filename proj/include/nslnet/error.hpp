#pragma once

#include <stdexcept>
#include <string>

namespace nsl {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor extents invalid or element count does not fit memory.
struct SizeError : Error {
    using Error::Error;
};

// Index outside the valid range of a dimension.
struct IndexError : Error {
    using Error::Error;
};

// Shapes of the operands do not chain.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid run-time values (NaN/Inf inputs, bad labels, missing data).
struct DataError : Error {
    using Error::Error;
};

// Malformed file contents (bad magic, bad version, bad layout).
struct FormatError : Error {
    using Error::Error;
};

// File could not be read or written completely.
struct IoError : Error {
    using Error::Error;
};

// Invalid configuration parameter.
struct ParamError : Error {
    using Error::Error;
};

// Requested a quantity that is undefined at a degenerate (near-zero-norm) pixel.
struct DegeneratePixelError : Error {
    using Error::Error;
};

}  // namespace nsl
