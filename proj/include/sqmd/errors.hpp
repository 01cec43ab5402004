#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace sqmd {

// Base for every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Matrix/spec shapes disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN or infinity where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or hyperparameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Client/server contract broken (unregistered client, wrong messenger shape, ...).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Two inputs that should agree do not (e.g. image/label counts).
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

// Malformed input file. Carries a byte offset (binary formats) or a 1-based
// line number (text formats) when one is known.
class ParseError : public Error {
 public:
  enum class Unit { byte_offset, line };

  ParseError(const std::string& what, Unit unit, std::size_t location)
      : Error(what + (unit == Unit::byte_offset ? " (at byte offset " : " (at line ") +
              std::to_string(location) + ")"),
        unit_(unit),
        location_(location) {}

  Unit unit() const noexcept { return unit_; }
  std::size_t location() const noexcept { return location_; }

 private:
  Unit unit_;
  std::size_t location_;
};

}  // namespace sqmd
