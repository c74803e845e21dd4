#pragma once

#include <stdexcept>
#include <string>

namespace multilid {

/// Invalid configuration or caller precondition (bad k, bad ratio, ...).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed, missing or inconsistent data on disk or in memory.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A k-NN neighbourhood whose distances carry no growth-rate information
/// (all distances equal, or the k-th distance is zero).
class DegenerateNeighborhood : public NumericalError {
public:
    using NumericalError::NumericalError;
};

}  // namespace multilid
