#pragma once

#include <stdexcept>
#include <string>

namespace vsm {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or dimension mismatch; message names the offending shapes.
struct ShapeError : Error { using Error::Error; };

// Token or coordinate outside its valid range.
struct IndexError : Error { using Error::Error; };

// Non-finite values where finite ones are required.
struct NumericError : Error { using Error::Error; };

// API contract violation (e.g. backward from a non-scalar node).
struct ContractError : Error { using Error::Error; };

struct ConfigError : Error { using Error::Error; };

// Sequence exceeds the model's context capacity.
struct CapacityError : Error { using Error::Error; };

// Image KV cache does not match the image it is used with.
struct CacheError : Error { using Error::Error; };

// A word's tokens do not fit into its frame budget.
struct AlignmentError : Error { using Error::Error; };

struct TemplateError : Error { using Error::Error; };

// Sample format does not match the requested evaluation mode.
struct FormatError : Error { using Error::Error; };

struct IoError : Error { using Error::Error; };

// Non-finite training loss; the optimizer step was not applied.
struct DivergenceError : Error { using Error::Error; };

// Chat client exhausted its retry budget.
struct ClientError : Error { using Error::Error; };

}  // namespace vsm
