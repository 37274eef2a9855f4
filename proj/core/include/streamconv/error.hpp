#pragma once

#include <stdexcept>
#include <string>

namespace streamconv {

// Base for everything thrown by this library.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/op shape problems: rank mismatches, extents smaller than kernels, bad regions.
struct ShapeError : Error {
  using Error::Error;
};

// Mixing f32 and f64 objects in one computation, or reading with the wrong type.
struct DtypeError : Error {
  using Error::Error;
};

// concat/crop placement problems: double-written or uncovered destination cells.
struct PlacementError : Error {
  using Error::Error;
};

// Network description rejected by validation (non-local layer before the split, ...).
struct ValidationError : Error {
  using Error::Error;
};

// Text formats (network files, tensor files, CLI arguments shaped like values).
struct ParseError : Error {
  using Error::Error;
};

// Overlap probe cannot produce a trustworthy report for this tile size.
struct ProbeError : Error {
  using Error::Error;
};

// A caller broke a documented calling contract (stale stream state, bad plan).
struct UsageError : Error {
  using Error::Error;
};

// Filesystem and other resource failures.
struct IoError : Error {
  using Error::Error;
};

// An internal invariant failed; indicates a bug, not bad input.
struct InternalError : Error {
  using Error::Error;
};

}  // namespace streamconv
