#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sonoseg {

using Shape = std::vector<int64_t>;

// Dimension/shape violations (mismatched operands, bad extents).
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid run configuration (bad JSON, unknown keys, impossible dims).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Broken API contract (e.g. stepping a param that never got a gradient).
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

// Dataset problems: unreadable files, empty masks, missing counterparts.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline void check_shape(bool ok, const std::string& what, const Shape& a, const Shape& b) {
  if (!ok) throw ShapeError(what + ": " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace sonoseg
