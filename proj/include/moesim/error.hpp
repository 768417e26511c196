#pragma once

#include <stdexcept>
#include <string>

namespace moesim {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed input documents (JSON/JSONL). Message carries the source and line.
struct SchemaError : Error {
    using Error::Error;
};

// A well-formed document whose values break a domain invariant.
struct ValidationError : Error {
    ValidationError(std::string field, const std::string& what)
        : Error(field + ": " + what), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

// Non-finite loss or similar numeric breakdown during training.
struct NumericError : Error {
    using Error::Error;
};

// Simulator invariant violation. Indicates a scheduling bug, not bad input.
struct SimulationError : Error {
    using Error::Error;
};

}  // namespace moesim
