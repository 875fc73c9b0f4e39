#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace segcaps {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when an operation receives shape-incompatible operands. The message
// always carries the op name and both shapes.
class ShapeError : public Error {
 public:
  ShapeError(std::string_view op, const Shape& lhs, const Shape& rhs,
             std::string_view detail = {});

  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

// NaN or Inf produced by a forward or backward rule.
class NumericError : public Error {
 public:
  NumericError(std::string_view op, std::size_t index, double value);
};

// Malformed file content; offset is the byte position where parsing failed.
class ParseError : public Error {
 public:
  ParseError(std::string_view what, std::size_t offset);

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace segcaps
