#pragma once

#include <stdexcept>
#include <string>

namespace pseg {

// Error taxonomy used across the library. Every category maps to a distinct
// failure class so callers (and the CLI) can report precise causes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct LookupError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

struct ArgumentError : Error {
    using Error::Error;
};

struct DivergenceError : Error {
    using Error::Error;
};

}  // namespace pseg
