#pragma once

#include <stdexcept>
#include <string>

namespace seqhand {

// Every failure raised by the library derives from Error so callers (the CLI
// in particular) can map categories onto exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or index contract violated.
struct DimensionError : Error {
  using Error::Error;
};

// NaN or Inf produced or consumed.
struct NumericError : Error {
  using Error::Error;
};

// Precondition on call order or configuration violated.
struct ContractError : Error {
  using Error::Error;
};

// Sequence longer than the position table.
struct CapacityError : Error {
  using Error::Error;
};

// Joint angle outside its anatomical limit.
struct DomainError : Error {
  using Error::Error;
};

// Point at or behind the camera plane.
struct ProjectionError : Error {
  using Error::Error;
};

// Training loss became NaN or blew up.
struct DivergenceError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace seqhand
